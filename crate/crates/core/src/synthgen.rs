//! Synthetic hierarchical corpora with controllable noise.
//!
//! A complete `b`-ary tree of depth `D` is built level by level. Each node
//! owns `s` unique signature tokens and is named after its first one. A
//! document for a leaf path draws `n_doc` tokens uniformly from the
//! signatures of the nodes on that path, then swaps each token for a random
//! vocabulary token (any signature or filler word) with probability `p`.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::taxonomy::{LabelEntry, Taxonomy, TaxonomyDoc};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub branching: usize,
    pub depth: usize,
    pub signatures: usize,
    pub doc_len: usize,
    pub noise: f64,
    pub train_per_path: usize,
    pub dev_per_path: usize,
    pub test_per_path: usize,
    pub filler_vocab: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            branching: 3,
            depth: 3,
            signatures: 3,
            doc_len: 30,
            noise: 0.3,
            train_per_path: 8,
            dev_per_path: 4,
            test_per_path: 10,
            filler_vocab: 200,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("invalid synth spec: {msg}")));
        if self.branching < 1 {
            return bad("branching must be >= 1");
        }
        if self.depth < 1 {
            return bad("depth must be >= 1");
        }
        if self.signatures < 1 {
            return bad("signatures per node must be >= 1");
        }
        if self.doc_len < 1 {
            return bad("tokens per document must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1]");
        }
        let leaves = (self.branching as u128).checked_pow(self.depth as u32);
        if leaves.is_none_or(|n| n > 1_000_000) {
            return bad("tree has more than 10^6 leaves");
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        (1..=self.depth).map(|v| self.branching.pow(v as u32)).sum()
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub taxonomy: Taxonomy,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    /// Signature tokens per label id.
    pub signatures: Vec<Vec<String>>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let mut w = String::with_capacity(6);
        for _ in 0..3 {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut used = HashSet::new();

    // level-order construction; parents of level v+1 are the level-v nodes
    let mut labels = Vec::with_capacity(spec.node_count());
    let mut signatures: Vec<Vec<String>> = Vec::with_capacity(spec.node_count());
    let mut prev_level: Vec<usize> = Vec::new();
    for level in 1..=spec.depth {
        let parents: Vec<Option<usize>> = if level == 1 {
            vec![None]
        } else {
            prev_level.iter().copied().map(Some).collect()
        };
        let mut this_level = Vec::new();
        for parent in parents {
            for _ in 0..spec.branching {
                let sigs: Vec<String> = (0..spec.signatures)
                    .map(|_| pseudo_word(&mut rng, &mut used))
                    .collect();
                let id = labels.len();
                labels.push(LabelEntry {
                    name: sigs[0].clone(),
                    level,
                    parent: parent.map(|p: usize| signatures[p][0].clone()),
                });
                signatures.push(sigs);
                this_level.push(id);
            }
        }
        prev_level = this_level;
    }
    let filler: Vec<String> = (0..spec.filler_vocab)
        .map(|_| pseudo_word(&mut rng, &mut used))
        .collect();
    let vocab: Vec<&str> = signatures
        .iter()
        .flatten()
        .chain(filler.iter())
        .map(String::as_str)
        .collect();

    let taxonomy = Taxonomy::from_doc(TaxonomyDoc {
        name: format!("synth-b{}-d{}", spec.branching, spec.depth),
        labels,
    })?;

    let mut splits: [Vec<Example>; 3] = Default::default();
    let sizes = [spec.train_per_path, spec.dev_per_path, spec.test_per_path];
    let names = ["train", "dev", "test"];
    for (p, path) in taxonomy.leaf_paths().iter().enumerate() {
        let pool: Vec<&str> = path
            .iter()
            .flat_map(|&v| signatures[v].iter().map(String::as_str))
            .collect();
        for (split, (&n, name)) in sizes.iter().zip(names).enumerate() {
            for d in 0..n {
                let text = (0..spec.doc_len)
                    .map(|_| {
                        let tok = pool[rng.gen_range(0..pool.len())];
                        if rng.gen_bool(spec.noise) {
                            vocab[rng.gen_range(0..vocab.len())]
                        } else {
                            tok
                        }
                    })
                    .collect::<Vec<_>>()
                    .join(" ");
                splits[split].push(Example {
                    id: format!("{name}-{p}-{d}"),
                    text,
                    path: path.clone(),
                });
            }
        }
    }
    let [train, dev, test] = splits;
    Ok(SynthData {
        taxonomy,
        train,
        dev,
        test,
        signatures,
    })
}
