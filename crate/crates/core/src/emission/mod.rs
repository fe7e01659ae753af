//! Emissions: per-slot label logits consumed by the CRF.
//!
//! The built-in surrogate hashes unigrams and bigrams of the input text into
//! an `r`-dimensional signed feature vector and scores every label with a
//! linear verbalizer. The surrogate is position independent: every chain slot
//! receives the same logits. Real language-model logits can be supplied
//! instead through the binary emissions format in [`file`].

pub mod file;

use crate::chain::ChainSchedule;
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

pub const DEFAULT_DIM: usize = 1 << 15;
pub const MIN_DIM: usize = 1 << 10;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the UTF-8 bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercase and split on every character that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sparse, L2-normalized feature vector. Indices are sorted and unique.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    dim: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        FeatureVector {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[i] * other.values[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn scaled(&self, factor: f64) -> FeatureVector {
        FeatureVector {
            dim: self.dim,
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Dot product with a dense row of length `dim`.
    pub fn dot_dense(&self, row: &[f64]) -> f64 {
        self.iter().map(|(i, v)| row[i] * v).sum()
    }
}

/// Signed feature hashing. Bucket = low bits of the FNV-1a hash, sign = bit 63.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHasher {
    dim: usize,
}

impl FeatureHasher {
    pub fn new(dim: usize) -> Result<Self> {
        if !dim.is_power_of_two() || !(MIN_DIM..=(1 << 31)).contains(&dim) {
            return Err(Error::InvalidArgument(format!(
                "feature dimension must be a power of two in [2^10, 2^31], got {dim}"
            )));
        }
        Ok(FeatureHasher { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn bucket(&self, key: &str) -> (u32, f64) {
        let h = fnv1a64(key);
        let idx = (h & (self.dim as u64 - 1)) as u32;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        (idx, sign)
    }

    /// Unigrams and bigrams (joined by one space) of the tokenized text.
    pub fn features(&self, text: &str) -> FeatureVector {
        let tokens = tokenize(text);
        let mut acc: std::collections::BTreeMap<u32, f64> = Default::default();
        let mut add = |key: &str| {
            let (idx, sign) = self.bucket(key);
            *acc.entry(idx).or_insert(0.0) += sign;
        };
        for t in &tokens {
            add(t);
        }
        for w in tokens.windows(2) {
            add(&format!("{} {}", w[0], w[1]));
        }
        acc.retain(|_, v| *v != 0.0);
        let norm = acc.values().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return FeatureVector::zeros(self.dim);
        }
        FeatureVector {
            dim: self.dim,
            indices: acc.keys().copied().collect(),
            values: acc.values().map(|v| v / norm).collect(),
        }
    }
}

/// Dense `m x r` verbalizer weights, row-major by label id.
#[derive(Debug, Clone, PartialEq)]
pub struct VerbalizerParams {
    labels: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl VerbalizerParams {
    pub fn zeros(labels: usize, dim: usize) -> Self {
        VerbalizerParams {
            labels,
            dim,
            weights: vec![0.0; labels * dim],
        }
    }

    pub fn from_weights(labels: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != labels * dim {
            return Err(Error::DimensionMismatch {
                expected: labels * dim,
                found: weights.len(),
            });
        }
        Ok(VerbalizerParams {
            labels,
            dim,
            weights,
        })
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, label: usize) -> &[f64] {
        &self.weights[label * self.dim..(label + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// `U f` for one feature vector.
    pub fn scores(&self, features: &FeatureVector) -> Result<Vec<f64>> {
        if features.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: features.dim(),
            });
        }
        Ok((0..self.labels)
            .map(|y| features.dot_dense(self.row(y)))
            .collect())
    }
}

/// Each label row is `gain` times the mean of the hashed vectors of the
/// tokens in its name.
pub fn init_verbalizer(tax: &Taxonomy, hasher: &FeatureHasher, gain: f64) -> VerbalizerParams {
    let dim = hasher.dim();
    let mut params = VerbalizerParams::zeros(tax.len(), dim);
    for node in tax.nodes() {
        let tokens = tokenize(&node.name);
        if tokens.is_empty() {
            continue;
        }
        let scale = gain / tokens.len() as f64;
        let row = &mut params.weights[node.id * dim..(node.id + 1) * dim];
        for t in &tokens {
            for (i, v) in hasher.features(t).iter() {
                row[i] += scale * v;
            }
        }
    }
    params
}

/// Row-major `l x m` matrix of finite logits, one row per chain slot.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmissionMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values do not fill a {rows}x{cols} emission matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite emission at row {}, column {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(EmissionMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        EmissionMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged emission rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, y: usize) -> f64 {
        self.data[i * self.cols + y]
    }

    pub fn set(&mut self, i: usize, y: usize, v: f64) {
        self.data[i * self.cols + y] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Surrogate emissions: the same verbalizer scores at every slot.
pub fn emit(
    features: &FeatureVector,
    params: &VerbalizerParams,
    schedule: &ChainSchedule,
) -> Result<EmissionMatrix> {
    let scores = params.scores(features)?;
    let l = schedule.len();
    let mut data = Vec::with_capacity(l * scores.len());
    for _ in 0..l {
        data.extend_from_slice(&scores);
    }
    EmissionMatrix::new(l, params.labels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::build_schedule;
    use crate::taxonomy::{LabelEntry, TaxonomyDoc};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hasher() -> FeatureHasher {
        FeatureHasher::new(DEFAULT_DIM).unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64("a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64("foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(FeatureHasher::new(1000).is_err());
        assert!(FeatureHasher::new(512).is_err());
        assert!(FeatureHasher::new(1024).is_ok());
    }

    #[test]
    fn empty_text_is_zero() {
        let f = hasher().features("");
        assert_eq!(f.nnz(), 0);
        assert_eq!(f.norm(), 0.0);
        assert_eq!(hasher().features(" ,;- ").nnz(), 0);
    }

    #[test]
    fn deterministic_and_normalized() {
        let h = hasher();
        let a = h.features("Quantum physics paper, on quantum fields.");
        let b = h.features("quantum PHYSICS paper on quantum fields");
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert!((a.dot(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unrelated_texts_separate() {
        let h = hasher();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vocab: Vec<String> = (0..500).map(|i| format!("tok{i}")).collect();
        let doc = |rng: &mut ChaCha8Rng, lo: usize| -> String {
            (0..20)
                .map(|_| vocab[lo + rng.gen_range(0..250)].clone())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let q = h.features("quantum physics paper");
        assert!((q.dot(&h.features("quantum physics paper")) - 1.0).abs() < 1e-12);
        for _ in 0..50 {
            let a = h.features(&doc(&mut rng, 0));
            let b = h.features(&doc(&mut rng, 250));
            assert!(a.dot(&b).abs() < 0.5);
            assert!(q.dot(&a).abs() < 0.5);
        }
    }

    fn tax(names: &[&str]) -> Taxonomy {
        Taxonomy::from_doc(TaxonomyDoc {
            name: "v".into(),
            labels: names
                .iter()
                .map(|n| LabelEntry {
                    name: n.to_string(),
                    level: 1,
                    parent: None,
                })
                .collect(),
        })
        .unwrap()
    }

    #[test]
    fn verbalizer_rows_average_name_tokens() {
        let h = hasher();
        let t = tax(&["physics", "computer science"]);
        let u = init_verbalizer(&t, &h, 1.0);
        let one = h.features("physics");
        for (i, v) in one.iter() {
            assert_eq!(u.row(0)[i], v);
        }
        assert_eq!(u.row(0).iter().filter(|v| **v != 0.0).count(), one.nnz());

        let a = h.features("computer");
        let b = h.features("science");
        let mut want = vec![0.0; h.dim()];
        for (i, v) in a.iter().chain(b.iter()) {
            want[i] += v / 2.0;
        }
        assert_eq!(u.row(1), want.as_slice());

        let doubled = init_verbalizer(&t, &h, 2.0);
        for (x, y) in doubled.weights().iter().zip(u.weights()) {
            assert_eq!(*x, 2.0 * y);
        }
    }

    #[test]
    fn disjoint_label_rows_nearly_orthogonal() {
        let h = hasher();
        let names: Vec<String> = (0..60).map(|i| format!("label{i} word{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let t = tax(&refs);
        let u = init_verbalizer(&t, &h, 1.0);
        for a in 0..t.len() {
            for b in (a + 1)..t.len() {
                let dot: f64 = u.row(a).iter().zip(u.row(b)).map(|(x, y)| x * y).sum();
                let na: f64 = u.row(a).iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = u.row(b).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((dot / (na * nb)).abs() < 0.05, "rows {a},{b}");
            }
        }
    }

    #[test]
    fn emit_is_linear_and_position_independent() {
        let h = FeatureHasher::new(MIN_DIM).unwrap();
        let t = tax(&["alpha", "beta gamma", "delta"]);
        let u = init_verbalizer(&t, &h, 1.0);
        let s = build_schedule(3, 2).unwrap();

        let z0 = emit(&FeatureVector::zeros(h.dim()), &u, &s).unwrap();
        assert!(z0.as_slice().iter().all(|v| *v == 0.0));

        let f = h.features("alpha beta delta delta");
        let z = emit(&f, &u, &s).unwrap();
        let z2 = emit(&f.scaled(2.0), &u, &s).unwrap();
        assert_eq!(z.rows(), s.len());
        assert_eq!(z.cols(), 3);
        for (a, b) in z.as_slice().iter().zip(z2.as_slice()) {
            assert_eq!(*b, 2.0 * a);
        }
        for i in 1..z.rows() {
            assert_eq!(z.row(i), z.row(0));
        }

        let other = FeatureHasher::new(2 * MIN_DIM).unwrap().features("alpha");
        assert!(matches!(
            emit(&other, &u, &s),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn emission_matrix_rejects_non_finite() {
        assert!(EmissionMatrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(EmissionMatrix::new(1, 2, vec![0.0]).is_err());
    }
}
