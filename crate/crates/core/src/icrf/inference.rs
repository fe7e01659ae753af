use serde::{Deserialize, Serialize};

use crate::chain::ChainSchedule;
use crate::emission::EmissionMatrix;
use crate::error::{Error, Result};
use crate::icrf::CrfParams;
use crate::taxonomy::LabelId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Label per chain slot.
    pub sequence: Vec<LabelId>,
    /// Label per level, read from the last slot of that level.
    pub per_level: Vec<LabelId>,
    pub score: f64,
    pub log_partition: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    labels: usize,
    /// `l x m`
    pub node: Vec<f64>,
    /// `(l-1) x m x m`
    pub edge: Vec<f64>,
}

impl Marginals {
    pub fn node(&self, i: usize, y: usize) -> f64 {
        self.node[i * self.labels + y]
    }

    pub fn edge(&self, i: usize, a: usize, b: usize) -> f64 {
        let m = self.labels;
        self.edge[(i * m + a) * m + b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub nll: f64,
    /// `l x m`
    pub z: Vec<f64>,
    /// `m x m`
    pub transitions: Vec<f64>,
    pub start: Vec<f64>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_shapes(z: &EmissionMatrix, params: &CrfParams) -> Result<()> {
    if z.rows() == 0 {
        return Err(Error::Shape("emission matrix has no rows".into()));
    }
    if z.cols() != params.labels {
        return Err(Error::DimensionMismatch {
            expected: params.labels,
            found: z.cols(),
        });
    }
    if let Some(mask) = &params.slot_allowed {
        let slots = mask.len() / params.labels.max(1);
        if slots != z.rows() {
            return Err(Error::LengthMismatch {
                expected: slots,
                found: z.rows(),
            });
        }
    }
    Ok(())
}

/// Per-slot unary scores: emission plus start (slot 0) plus state mask.
fn unaries(z: &EmissionMatrix, params: &CrfParams) -> Vec<f64> {
    let (l, m) = (z.rows(), z.cols());
    let mut u = Vec::with_capacity(l * m);
    for i in 0..l {
        for y in 0..m {
            let mut s = z.get(i, y) + params.state_penalty(i, y);
            if i == 0 {
                s += params.start[y];
            }
            u.push(s);
        }
    }
    u
}

fn nan_guard(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical(format!("NaN in {what}")));
    }
    Ok(())
}

pub fn sequence_score(z: &EmissionMatrix, y: &[LabelId], params: &CrfParams) -> Result<f64> {
    check_shapes(z, params)?;
    if y.len() != z.rows() {
        return Err(Error::LengthMismatch {
            expected: z.rows(),
            found: y.len(),
        });
    }
    if let Some(&bad) = y.iter().find(|&&v| v >= params.labels) {
        return Err(Error::UnknownLabel(format!("id {bad}")));
    }
    let mut score = params.start[y[0]];
    for (i, &yi) in y.iter().enumerate() {
        score += z.get(i, yi) + params.state_penalty(i, yi);
        if i > 0 {
            score += params.transition(y[i - 1], yi);
        }
    }
    Ok(score)
}

struct Lattice {
    labels: usize,
    slots: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    unary: Vec<f64>,
    log_z: f64,
}

fn forward_backward(z: &EmissionMatrix, params: &CrfParams) -> Result<Lattice> {
    check_shapes(z, params)?;
    let (l, m) = (z.rows(), z.cols());
    let u = unaries(z, params);
    let t = &params.transitions;

    let mut alpha = vec![0.0; l * m];
    alpha[..m].copy_from_slice(&u[..m]);
    for i in 1..l {
        for b in 0..m {
            let prev = &alpha[(i - 1) * m..i * m];
            alpha[i * m + b] =
                u[i * m + b] + log_sum_exp((0..m).map(|a| prev[a] + t[a * m + b]));
        }
    }

    let mut beta = vec![0.0; l * m];
    for i in (0..l - 1).rev() {
        for a in 0..m {
            let next = &beta[(i + 1) * m..(i + 2) * m];
            let un = &u[(i + 1) * m..(i + 2) * m];
            beta[i * m + a] = log_sum_exp((0..m).map(|b| t[a * m + b] + un[b] + next[b]));
        }
    }

    let log_z = log_sum_exp(alpha[(l - 1) * m..].iter().copied());
    nan_guard(&alpha, "forward scores")?;
    nan_guard(&beta, "backward scores")?;
    if !log_z.is_finite() {
        return Err(Error::Numerical(format!("log partition is {log_z}")));
    }
    Ok(Lattice {
        labels: m,
        slots: l,
        alpha,
        beta,
        unary: u,
        log_z,
    })
}

/// `log sum_y exp(score(y))` by the forward recursion.
pub fn log_partition(z: &EmissionMatrix, params: &CrfParams) -> Result<f64> {
    Ok(forward_backward(z, params)?.log_z)
}

fn marginals_from(lat: &Lattice, params: &CrfParams) -> Marginals {
    let (l, m) = (lat.slots, lat.labels);
    let t = &params.transitions;
    let node = (0..l * m)
        .map(|k| (lat.alpha[k] + lat.beta[k] - lat.log_z).exp())
        .collect();
    let mut edge = vec![0.0; (l - 1) * m * m];
    for i in 0..l - 1 {
        for a in 0..m {
            let fa = lat.alpha[i * m + a];
            for b in 0..m {
                let s = fa
                    + t[a * m + b]
                    + lat.unary[(i + 1) * m + b]
                    + lat.beta[(i + 1) * m + b]
                    - lat.log_z;
                edge[(i * m + a) * m + b] = s.exp();
            }
        }
    }
    Marginals {
        labels: m,
        node,
        edge,
    }
}

pub fn posterior_marginals(z: &EmissionMatrix, params: &CrfParams) -> Result<Marginals> {
    let lat = forward_backward(z, params)?;
    let marg = marginals_from(&lat, params);
    nan_guard(&marg.node, "node marginals")?;
    nan_guard(&marg.edge, "edge marginals")?;
    Ok(marg)
}

/// Negative log-likelihood of `gold` and its gradient with respect to the
/// emissions, transitions, and start scores. Frozen entries get zero gradient.
pub fn nll_and_grads(z: &EmissionMatrix, gold: &[LabelId], params: &CrfParams) -> Result<Gradients> {
    let gold_score = sequence_score(z, gold, params)?;
    let lat = forward_backward(z, params)?;
    let marg = marginals_from(&lat, params);
    nan_guard(&marg.node, "node marginals")?;
    let (l, m) = (lat.slots, lat.labels);

    let mut gz = marg.node.clone();
    for (i, &y) in gold.iter().enumerate() {
        gz[i * m + y] -= 1.0;
    }

    let mut gt = vec![0.0; m * m];
    for i in 0..l - 1 {
        let slice = &marg.edge[i * m * m..(i + 1) * m * m];
        for (g, e) in gt.iter_mut().zip(slice) {
            *g += e;
        }
    }
    for w in gold.windows(2) {
        gt[w[0] * m + w[1]] -= 1.0;
    }
    for (g, &f) in gt.iter_mut().zip(&params.frozen) {
        if f {
            *g = 0.0;
        }
    }

    let mut gs = marg.node[..m].to_vec();
    gs[gold[0]] -= 1.0;
    for (g, &f) in gs.iter_mut().zip(&params.start_frozen) {
        if f {
            *g = 0.0;
        }
    }

    let raw = lat.log_z - gold_score;
    if raw.is_nan() {
        return Err(Error::Numerical("nll is NaN".into()));
    }
    // rounding can leave a tiny negative when one sequence holds all mass
    let nll = raw.max(0.0);
    Ok(Gradients {
        nll,
        z: gz,
        transitions: gt,
        start: gs,
    })
}

fn readout(sequence: &[LabelId], schedule: &ChainSchedule) -> Vec<LabelId> {
    schedule
        .readout_positions()
        .into_iter()
        .map(|i| sequence[i])
        .collect()
}

/// Viterbi decode. Among maximizing sequences the lexicographically smallest
/// label-id sequence wins: best suffix scores are computed right to left,
/// then the path is rebuilt left to right taking the smallest label that
/// still attains the optimum.
pub fn decode(z: &EmissionMatrix, params: &CrfParams, schedule: &ChainSchedule) -> Result<DecodeResult> {
    check_shapes(z, params)?;
    if schedule.len() != z.rows() {
        return Err(Error::LengthMismatch {
            expected: schedule.len(),
            found: z.rows(),
        });
    }
    let (l, m) = (z.rows(), z.cols());
    let u = unaries(z, params);
    let t = &params.transitions;

    // suffix[i*m + a]: best score of slots i+1.. given label a at slot i
    let mut suffix = vec![0.0; l * m];
    for i in (0..l - 1).rev() {
        for a in 0..m {
            let mut best = f64::NEG_INFINITY;
            for b in 0..m {
                let s = t[a * m + b] + u[(i + 1) * m + b] + suffix[(i + 1) * m + b];
                if s > best {
                    best = s;
                }
            }
            suffix[i * m + a] = best;
        }
    }
    nan_guard(&suffix, "viterbi scores")?;

    let mut sequence = Vec::with_capacity(l);
    let first = argmax_first((0..m).map(|a| u[a] + suffix[a]));
    sequence.push(first);
    for i in 1..l {
        let prev = sequence[i - 1];
        let next = argmax_first((0..m).map(|b| t[prev * m + b] + u[i * m + b] + suffix[i * m + b]));
        sequence.push(next);
    }

    let score = sequence_score(z, &sequence, params)?;
    let log_partition = log_partition(z, params)?;
    Ok(DecodeResult {
        per_level: readout(&sequence, schedule),
        sequence,
        score,
        log_partition,
    })
}

/// Independent per-slot argmax (smallest id on ties) with the same
/// last-occurrence readout. No transition structure is used.
pub fn independent_decode(z: &EmissionMatrix, schedule: &ChainSchedule) -> Result<DecodeResult> {
    if schedule.len() != z.rows() {
        return Err(Error::LengthMismatch {
            expected: schedule.len(),
            found: z.rows(),
        });
    }
    let sequence: Vec<LabelId> = (0..z.rows())
        .map(|i| argmax_first(z.row(i).iter().copied()))
        .collect();
    let neutral = CrfParams::neutral(z.cols());
    let score = sequence_score(z, &sequence, &neutral)?;
    let log_partition = log_partition(z, &neutral)?;
    Ok(DecodeResult {
        per_level: readout(&sequence, schedule),
        sequence,
        score,
        log_partition,
    })
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::build_schedule;
    use crate::icrf::{init_transitions, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Every label sequence of length `l` over `m` labels, in lexicographic order.
    fn all_sequences(m: usize, l: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(m.pow(l as u32));
        let mut cur = vec![0; l];
        loop {
            out.push(cur.clone());
            let mut k = l;
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                cur[k] += 1;
                if cur[k] < m {
                    break;
                }
                cur[k] = 0;
            }
        }
    }

    fn naive_score(z: &EmissionMatrix, y: &[usize], p: &CrfParams) -> f64 {
        let mut terms = vec![p.start()[y[0]]];
        for (i, &v) in y.iter().enumerate() {
            terms.push(z.get(i, v));
            if i > 0 {
                terms.push(p.transition(y[i - 1], v));
            }
        }
        terms.iter().sum()
    }

    fn random_instance(rng: &mut ChaCha8Rng, m: usize, l: usize) -> (EmissionMatrix, CrfParams) {
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let z = EmissionMatrix::new(l, m, draw(l * m)).unwrap();
        let p = CrfParams::from_parts(m, draw(m * m), draw(m)).unwrap();
        (z, p)
    }

    #[test]
    fn zero_scores() {
        let z = EmissionMatrix::zeros(2, 2);
        let p = CrfParams::neutral(2);
        for y in all_sequences(2, 2) {
            assert_eq!(sequence_score(&z, &y, &p).unwrap(), 0.0);
        }
        assert!((log_partition(&z, &p).unwrap() - 4f64.ln()).abs() < 1e-15);
        let g = nll_and_grads(&z, &[0, 1], &p).unwrap();
        assert!((g.nll - 4f64.ln()).abs() < 1e-15);
        let marg = posterior_marginals(&EmissionMatrix::zeros(3, 4), &CrfParams::neutral(4)).unwrap();
        assert!(marg.node.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_slot_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (z, p) = random_instance(&mut rng, 5, 1);
        for y in 0..5 {
            assert_eq!(sequence_score(&z, &[y], &p).unwrap(), p.start()[y] + z.get(0, y));
        }
        let want = (0..5).map(|y| (p.start()[y] + z.get(0, y)).exp()).sum::<f64>().ln();
        assert!((log_partition(&z, &p).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn score_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (m, l) = (rng.gen_range(1..7), rng.gen_range(1..7));
            let (z, p) = random_instance(&mut rng, m, l);
            let y: Vec<usize> = (0..l).map(|_| rng.gen_range(0..m)).collect();
            let got = sequence_score(&z, &y, &p).unwrap();
            assert!((got - naive_score(&z, &y, &p)).abs() < 1e-12);
        }
        let p = CrfParams::neutral(2);
        assert!(matches!(
            sequence_score(&EmissionMatrix::zeros(3, 2), &[0, 1], &p),
            Err(Error::LengthMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn partition_and_marginals_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..40 {
            let (m, l) = (rng.gen_range(1..6), rng.gen_range(1..5));
            let (z, p) = random_instance(&mut rng, m, l);
            let seqs = all_sequences(m, l);
            let scores: Vec<f64> = seqs.iter().map(|y| naive_score(&z, y, &p)).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            let log_z = max + total.ln();
            let got = log_partition(&z, &p).unwrap();
            assert!(((got - log_z) / log_z.abs().max(1.0)).abs() < 1e-10);

            let marg = posterior_marginals(&z, &p).unwrap();
            let mut node = vec![0.0; l * m];
            let mut edge = vec![0.0; l.saturating_sub(1) * m * m];
            for (y, s) in seqs.iter().zip(&scores) {
                let pr = (s - log_z).exp();
                for i in 0..l {
                    node[i * m + y[i]] += pr;
                    if i + 1 < l {
                        edge[(i * m + y[i]) * m + y[i + 1]] += pr;
                    }
                }
            }
            for (a, b) in marg.node.iter().zip(&node) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in marg.edge.iter().zip(&edge) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dominant_emission_takes_all_mass() {
        let mut z = EmissionMatrix::zeros(4, 3);
        for i in 0..4 {
            z.set(i, 2, 1e6);
        }
        let marg = posterior_marginals(&z, &CrfParams::neutral(3)).unwrap();
        for i in 0..4 {
            assert!((marg.node(i, 2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn viterbi_with_neutral_params_is_per_slot_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = build_schedule(2, 2).unwrap();
        for _ in 0..20 {
            let (z, _) = random_instance(&mut rng, 6, s.len());
            let a = decode(&z, &CrfParams::neutral(6), &s).unwrap();
            let b = independent_decode(&z, &s).unwrap();
            assert_eq!(a.sequence, b.sequence);
            for i in 0..s.len() {
                let best = (0..6).max_by(|&x, &y| z.get(i, x).total_cmp(&z.get(i, y))).unwrap();
                assert_eq!(a.sequence[i], best);
            }
        }
    }

    #[test]
    fn viterbi_ties_prefer_smallest_sequence() {
        let s = build_schedule(1, 3).unwrap();
        let z = EmissionMatrix::zeros(3, 3);
        let d = decode(&z, &CrfParams::neutral(3), &s).unwrap();
        assert_eq!(d.sequence, vec![0, 0, 0]);

        // 0,1,0 and 1,0,1 both score 0
        let mut p = CrfParams::neutral(2);
        p.transitions = vec![-1.0, 0.0, 0.0, -1.0];
        let z = EmissionMatrix::new(3, 2, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let d = decode(&z, &p, &s).unwrap();
        assert_eq!(d.sequence, vec![0, 1, 0]);
    }

    #[test]
    fn readout_uses_last_occurrence() {
        let s = build_schedule(2, 2).unwrap();
        let mut z = EmissionMatrix::zeros(5, 4);
        for (i, y) in [0, 2, 1, 3, 1].into_iter().enumerate() {
            z.set(i, y, 1.0);
        }
        let d = independent_decode(&z, &s).unwrap();
        assert_eq!(d.sequence, vec![0, 2, 1, 3, 1]);
        assert_eq!(d.per_level, vec![1, 3]);
    }

    #[test]
    fn strict_decode_on_mini_taxonomy_yields_paths() {
        let t = crate::icrf::tests::dbpedia_like();
        let s = build_schedule(3, 3).unwrap();
        let p = init_transitions(&t, &s, Mode::Strict, -10.0, -1e30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..200 {
            let (z, _) = random_instance(&mut rng, t.len(), s.len());
            let d = decode(&z, &p, &s).unwrap();
            t.check_path(&d.per_level).unwrap();
            for (i, &y) in d.sequence.iter().enumerate() {
                assert_eq!(t.level(y), s.levels()[i]);
            }
            assert!(d.score <= d.log_partition);
        }
    }

    #[test]
    fn shape_errors() {
        let p = CrfParams::neutral(3);
        assert!(matches!(
            log_partition(&EmissionMatrix::zeros(2, 4), &p),
            Err(Error::DimensionMismatch { .. })
        ));
        let s = build_schedule(2, 1).unwrap();
        assert!(matches!(
            decode(&EmissionMatrix::zeros(2, 3), &p, &s),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
