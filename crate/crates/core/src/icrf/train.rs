//! Mini-batch Adam training of the CRF and the surrogate verbalizer.
//!
//! Every chain slot is supervised with the gold path repeated along the
//! schedule. Batches are reduced serially in shuffle order so a given seed
//! always reproduces the same parameters bit for bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::golden_sequence;
use crate::data::Example;
use crate::emission::{emit, FeatureVector};
use crate::error::{Error, Result};
use crate::icrf::nll_and_grads;
use crate::model::{Emitter, Model};
use crate::taxonomy::{LabelId, Taxonomy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size for transitions and start scores.
    pub lr_crf: f64,
    /// Adam step size for the surrogate's text-to-label map.
    pub lr_features: f64,
    /// Stop after this many dev evaluations without a Micro-F1 gain.
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr_crf: 1e-4,
            lr_features: 1e-2,
            patience: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        for (name, lr) in [("lr_crf", self.lr_crf), ("lr_features", self.lr_features)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0")));
            }
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub dev_micro_f1: Option<f64>,
    pub dev_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; `None` keeps the initial ones.
    pub best_epoch: Option<usize>,
    pub best_dev_micro_f1: Option<f64>,
    pub stopped_early: bool,
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Train `model` on `train`, early-stopping on dev Micro-F1.
///
/// Returns the parameters of the best dev epoch, ties going to the lower
/// dev nll (or the last epoch when `dev` is empty), and the per-epoch log.
pub fn fit(
    mut model: Model,
    train: &[Example],
    dev: &[Example],
    tax: &Taxonomy,
    config: &TrainConfig,
) -> Result<(Model, TrainingLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set has no examples".into()));
    }
    model.check_taxonomy(tax)?;
    model.header.train = Some(config.clone());

    let schedule = model.schedule.clone();
    let gold: Vec<Vec<LabelId>> = train
        .iter()
        .map(|ex| golden_sequence(&ex.path, &schedule))
        .collect::<Result<_>>()?;
    let features: Option<Vec<FeatureVector>> = match &model.emitter {
        Emitter::Surrogate { hasher, .. } => {
            Some(train.iter().map(|ex| hasher.features(&ex.text)).collect())
        }
        Emitter::External(_) => None,
    };

    let m = tax.len();
    let train_crf = !model.crf.fully_frozen();
    let mut adam_t = Adam::new(config.lr_crf, m * m);
    let mut adam_s = Adam::new(config.lr_crf, m);
    let mut adam_u = match &model.emitter {
        Emitter::Surrogate { verbalizer, .. } => Some(Adam::new(config.lr_features, verbalizer.weights().len())),
        Emitter::External(_) => None,
    };
    let dim = model.header.feature_dim;

    let mut grad_t = vec![0.0; m * m];
    let mut grad_s = vec![0.0; m];
    let mut grad_u = vec![0.0; if adam_u.is_some() { m * dim } else { 0 }];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, f64, Model)> = None;
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_nll = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad_t.iter_mut().for_each(|g| *g = 0.0);
            grad_s.iter_mut().for_each(|g| *g = 0.0);
            grad_u.iter_mut().for_each(|g| *g = 0.0);

            for &k in batch {
                let z = match (&model.emitter, &features) {
                    (Emitter::Surrogate { verbalizer, .. }, Some(f)) => emit(&f[k], verbalizer, &schedule),
                    _ => model.emitter.emissions(&train[k], &schedule),
                }
                .map_err(|e| match e {
                    Error::Numerical(reason) => Error::Divergence { epoch, reason },
                    other => other,
                })?;
                let g = nll_and_grads(&z, &gold[k], &model.crf).map_err(|e| Error::Divergence {
                    epoch,
                    reason: e.to_string(),
                })?;
                epoch_nll += g.nll;
                for (acc, v) in grad_t.iter_mut().zip(&g.transitions) {
                    *acc += v;
                }
                for (acc, v) in grad_s.iter_mut().zip(&g.start) {
                    *acc += v;
                }
                if let Some(f) = &features {
                    // surrogate logits are identical at every slot, so the
                    // verbalizer gradient sums the slot gradients first
                    for y in 0..m {
                        let gy: f64 = (0..schedule.len()).map(|i| g.z[i * m + y]).sum();
                        if gy == 0.0 {
                            continue;
                        }
                        let row = &mut grad_u[y * dim..(y + 1) * dim];
                        for (j, fj) in f[k].iter() {
                            row[j] += gy * fj;
                        }
                    }
                }
            }

            let scale = 1.0 / batch.len() as f64;
            if train_crf {
                grad_t.iter_mut().for_each(|g| *g *= scale);
                grad_s.iter_mut().for_each(|g| *g *= scale);
                adam_t.step(&mut model.crf.transitions, &grad_t);
                adam_s.step(&mut model.crf.start, &grad_s);
            }
            if let (Some(adam), Emitter::Surrogate { verbalizer, .. }) = (&mut adam_u, &mut model.emitter) {
                grad_u.iter_mut().for_each(|g| *g *= scale);
                adam.step(verbalizer.weights_mut(), &grad_u);
            }
        }

        let train_nll = epoch_nll / train.len() as f64;
        if !train_nll.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: format!("mean training nll is {train_nll}"),
            });
        }

        let dev_score = if dev.is_empty() {
            None
        } else {
            Some((model.evaluate(dev, tax)?.1.micro_f1, mean_nll(&model, dev)?))
        };
        log.epochs.push(EpochRecord {
            epoch,
            train_nll,
            dev_micro_f1: dev_score.map(|s| s.0),
            dev_nll: dev_score.map(|s| s.1),
        });

        if let Some((f1, nll)) = dev_score {
            let improved = best.as_ref().is_none_or(|(b, _, _)| f1 > *b);
            // equal dev F1 with lower dev nll replaces the kept parameters
            // but does not reset patience
            let tie_better = best.as_ref().is_some_and(|(b, bn, _)| f1 == *b && nll < *bn);
            if improved || tie_better {
                best = Some((f1, nll, model.clone()));
                log.best_epoch = Some(epoch);
                log.best_dev_micro_f1 = Some(f1);
            }
            if improved {
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    log.stopped_early = true;
                    break;
                }
            }
        } else {
            log.best_epoch = Some(epoch);
        }
    }

    let model = match best {
        Some((_, _, m)) => m,
        None => model,
    };
    Ok((model, log))
}

fn mean_nll(model: &Model, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let gold = golden_sequence(&ex.path, &model.schedule)?;
        let z = model.emitter.emissions(ex, &model.schedule)?;
        total += nll_and_grads(&z, &gold, &model.crf)?.nll;
    }
    Ok(total / examples.len() as f64)
}
