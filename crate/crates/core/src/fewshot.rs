//! K-shot support sets: exactly K examples per root-to-leaf path.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSet {
    pub examples: Vec<Example>,
    pub k: usize,
    pub seed: u64,
}

/// Leaf paths that could not be filled to K.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shortfall {
    pub path: Vec<String>,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sampled {
    pub support: SupportSet,
    /// Empty when every path reached its quota.
    pub shortfall: Vec<Shortfall>,
}

impl Sampled {
    pub fn is_complete(&self) -> bool {
        self.shortfall.is_empty()
    }
}

/// Shuffle with a seeded ChaCha8 stream, then take examples in order while
/// their path's quota is below `k`.
pub fn greedy_sample(corpus: &[Example], tax: &Taxonomy, k: usize, seed: u64) -> Result<Sampled> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (picked, counts) = quota_fill(corpus, &order, tax, k);
    let shortfall = tax
        .leaf_paths()
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c < k)
        .map(|(p, &c)| Shortfall {
            path: tax.path_names(p),
            available: c,
        })
        .collect();
    Ok(Sampled {
        support: SupportSet {
            examples: picked.into_iter().map(|i| corpus[i].clone()).collect(),
            k,
            seed,
        },
        shortfall,
    })
}

/// Single pass over `order`; returns accepted indices and per-path counts.
fn quota_fill(corpus: &[Example], order: &[usize], tax: &Taxonomy, k: usize) -> (Vec<usize>, Vec<usize>) {
    let paths = tax.leaf_paths().len();
    let mut counts = vec![0usize; paths];
    let mut filled = 0;
    let mut picked = Vec::with_capacity(k * paths);
    for &i in order {
        if filled == paths {
            break;
        }
        let Some(p) = corpus[i].path.last().and_then(|&leaf| tax.leaf_path_index(leaf)) else {
            continue;
        };
        if counts[p] < k {
            counts[p] += 1;
            if counts[p] == k {
                filled += 1;
            }
            picked.push(i);
        }
    }
    (picked, counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// All permutations of `0..n` (Heap's algorithm).
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k <= 1 {
                out.push(a.clone());
                return;
            }
            for i in 0..k {
                heap(k - 1, a, out);
                let j = if k.is_multiple_of(2) { i } else { 0 };
                a.swap(j, k - 1);
            }
        }
        let mut a: Vec<usize> = (0..n).collect();
        let mut out = Vec::new();
        heap(n, &mut a, &mut out);
        out
    }

    fn tax() -> Taxonomy {
        Taxonomy::from_json_str(
            r#"{"name":"t","labels":[
                {"name":"a","level":1,"parent":null},
                {"name":"b","level":2,"parent":"a"},
                {"name":"c","level":2,"parent":"a"}]}"#,
        )
        .unwrap()
    }

    fn ex(id: &str, leaf: usize) -> Example {
        Example { id: id.into(), text: id.into(), path: vec![0, leaf] }
    }

    #[test]
    fn exact_quota_corpus_is_returned_whole() {
        let t = tax();
        let corpus = vec![ex("1", 1), ex("2", 2), ex("3", 1), ex("4", 2)];
        for seed in 0..10 {
            let s = greedy_sample(&corpus, &t, 2, seed).unwrap();
            assert!(s.is_complete());
            let mut ids: Vec<_> = s.support.examples.iter().map(|e| e.id.clone()).collect();
            ids.sort();
            assert_eq!(ids, ["1", "2", "3", "4"]);
        }
    }

    #[test]
    fn one_shot_over_every_order() {
        let t = tax();
        let corpus = vec![ex("1", 1), ex("2", 2), ex("3", 1), ex("4", 2)];
        let perms = permutations(4);
        assert_eq!(perms.len(), 24);
        for order in perms {
            let (picked, counts) = quota_fill(&corpus, &order, &t, 1);
            assert_eq!(counts, vec![1, 1]);
            assert_eq!(picked.len(), 2);
            assert_ne!(corpus[picked[0]].path, corpus[picked[1]].path);
        }
    }

    #[test]
    fn empty_path_is_reported() {
        let t = tax();
        let corpus = vec![ex("1", 1), ex("2", 1)];
        let s = greedy_sample(&corpus, &t, 1, 3).unwrap();
        assert!(greedy_sample(&corpus, &t, 0, 3).is_err());
        assert!(!s.is_complete());
        assert_eq!(s.shortfall, vec![Shortfall { path: vec!["a".into(), "c".into()], available: 0 }]);
        assert_eq!(s.support.examples.len(), 1);
    }

    #[test]
    fn deterministic_given_seed() {
        let t = tax();
        let corpus: Vec<Example> = (0..40).map(|i| ex(&i.to_string(), 1 + i % 2)).collect();
        let a = greedy_sample(&corpus, &t, 4, 9).unwrap();
        let b = greedy_sample(&corpus, &t, 4, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.support.examples.len(), 8);
        let c = greedy_sample(&corpus, &t, 4, 10).unwrap();
        assert_ne!(a.support.examples, c.support.examples);
    }
}
