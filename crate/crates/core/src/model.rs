//! A trained classifier: schedule, CRF parameters, and emission source,
//! plus its versioned binary file format.
//!
//! ```text
//! magic        8 bytes  "ICRFMODL"
//! version      u32      1
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (ModelHeader)
//! tau_soft     f64
//! tau_hard     f64
//! transitions  m*m f64
//! start        m f64
//! frozen       m*m u8
//! start_frozen m u8
//! slot mask    l*m u8   (strict mode only)
//! verbalizer   m*r f64  (surrogate emitter only)
//! ```
//!
//! Numbers are little-endian.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{build_schedule, ChainSchedule};
use crate::data::Example;
use crate::emission::file::EmissionReader;
use crate::emission::{emit, init_verbalizer, EmissionMatrix, FeatureHasher, VerbalizerParams};
use crate::error::{Error, Result};
use crate::icrf::train::TrainConfig;
use crate::icrf::{decode, independent_decode, init_transitions, CrfParams, DecodeResult, Mode};
use crate::metrics::{evaluate, MetricsReport, Sample};
use crate::taxonomy::Taxonomy;

pub const MODEL_MAGIC: &[u8; 8] = b"ICRFMODL";
pub const MODEL_VERSION: u32 = 1;

/// Emissions supplied from outside, keyed by example id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalEmissions {
    table: HashMap<String, EmissionMatrix>,
}

impl ExternalEmissions {
    pub fn load(path: impl AsRef<Path>, labels: usize, length: usize) -> Result<Self> {
        let reader = EmissionReader::open(path)?;
        let h = reader.header();
        if h.labels as usize != labels || h.length as usize != length {
            return Err(Error::Shape(format!(
                "emissions file is l={} m={}, model expects l={length} m={labels}",
                h.length, h.labels
            )));
        }
        let mut table = HashMap::new();
        for rec in reader {
            let (id, z) = rec?;
            if table.insert(id.clone(), z).is_some() {
                return Err(Error::Format(format!("duplicate emissions id {id:?}")));
            }
        }
        Ok(ExternalEmissions { table })
    }

    pub fn from_records(records: impl IntoIterator<Item = (String, EmissionMatrix)>) -> Self {
        ExternalEmissions {
            table: records.into_iter().collect(),
        }
    }

    pub fn get(&self, id: &str) -> Result<&EmissionMatrix> {
        self.table
            .get(id)
            .ok_or_else(|| Error::Format(format!("no emissions for example {id:?}")))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Emitter {
    /// Hashed n-gram features scored by a trainable verbalizer.
    Surrogate {
        hasher: FeatureHasher,
        verbalizer: VerbalizerParams,
    },
    /// Fixed logits, e.g. exported from a masked language model.
    External(ExternalEmissions),
}

impl Emitter {
    pub fn surrogate(tax: &Taxonomy, dim: usize, gain: f64) -> Result<Self> {
        let hasher = FeatureHasher::new(dim)?;
        let verbalizer = init_verbalizer(tax, &hasher, gain);
        Ok(Emitter::Surrogate { hasher, verbalizer })
    }

    pub fn kind(&self) -> EmitterKind {
        match self {
            Emitter::Surrogate { .. } => EmitterKind::Surrogate,
            Emitter::External(_) => EmitterKind::External,
        }
    }

    pub fn emissions(&self, ex: &Example, schedule: &ChainSchedule) -> Result<EmissionMatrix> {
        match self {
            Emitter::Surrogate { hasher, verbalizer } => {
                emit(&hasher.features(&ex.text), verbalizer, schedule)
            }
            Emitter::External(table) => {
                let z = table.get(&ex.id)?;
                if z.rows() != schedule.len() {
                    return Err(Error::Shape(format!(
                        "emissions for {:?} have {} rows, schedule has {}",
                        ex.id,
                        z.rows(),
                        schedule.len()
                    )));
                }
                Ok(z.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmitterKind {
    Surrogate,
    External,
}

/// How to build a fresh model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub iterations: usize,
    pub mode: Mode,
    pub tau_soft: f64,
    pub tau_hard: f64,
    /// Replace CRF decoding with an independent per-slot argmax.
    pub no_icrf: bool,
    /// Use the ascending-only schedule (zero chain iterations).
    pub no_chain: bool,
    pub feature_dim: usize,
    pub verbalizer_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            iterations: crate::chain::DEFAULT_ITERATIONS,
            mode: Mode::Faithful,
            tau_soft: crate::icrf::DEFAULT_TAU_SOFT,
            tau_hard: crate::icrf::DEFAULT_TAU_HARD,
            no_icrf: false,
            no_chain: false,
            feature_dim: crate::emission::DEFAULT_DIM,
            verbalizer_gain: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn effective_iterations(&self) -> usize {
        if self.no_chain {
            0
        } else {
            self.iterations
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub taxonomy_fingerprint: String,
    pub labels: usize,
    pub depth: usize,
    pub iterations: usize,
    pub chain_length: usize,
    pub emitter: EmitterKind,
    pub feature_dim: usize,
    pub config: ModelConfig,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub header: ModelHeader,
    pub schedule: ChainSchedule,
    pub crf: CrfParams,
    pub emitter: Emitter,
}

impl Model {
    /// Fresh model with hierarchy-initialized transitions and a surrogate
    /// (`external == None`) or external emitter.
    pub fn new(tax: &Taxonomy, config: ModelConfig, external: Option<ExternalEmissions>) -> Result<Self> {
        let schedule = build_schedule(tax.depth(), config.effective_iterations())?;
        let crf = if config.no_icrf {
            CrfParams::independent(tax.len())
        } else {
            init_transitions(tax, &schedule, config.mode, config.tau_soft, config.tau_hard)?
        };
        let emitter = match external {
            Some(table) => Emitter::External(table),
            None => Emitter::surrogate(tax, config.feature_dim, config.verbalizer_gain)?,
        };
        let feature_dim = match &emitter {
            Emitter::Surrogate { hasher, .. } => hasher.dim(),
            Emitter::External(_) => 0,
        };
        Ok(Model {
            header: ModelHeader {
                taxonomy_fingerprint: tax.fingerprint(),
                labels: tax.len(),
                depth: tax.depth(),
                iterations: schedule.iterations(),
                chain_length: schedule.len(),
                emitter: emitter.kind(),
                feature_dim,
                config,
                train: None,
            },
            schedule,
            crf,
            emitter,
        })
    }

    pub fn check_taxonomy(&self, tax: &Taxonomy) -> Result<()> {
        if tax.fingerprint() != self.header.taxonomy_fingerprint {
            return Err(Error::Validation(
                "taxonomy does not match the one the model was built with".into(),
            ));
        }
        Ok(())
    }

    pub fn is_independent(&self) -> bool {
        self.header.config.no_icrf
    }

    pub fn decode_emissions(&self, z: &EmissionMatrix) -> Result<DecodeResult> {
        if self.is_independent() {
            independent_decode(z, &self.schedule)
        } else {
            decode(z, &self.crf, &self.schedule)
        }
    }

    pub fn predict(&self, ex: &Example) -> Result<DecodeResult> {
        let z = self.emitter.emissions(ex, &self.schedule)?;
        self.decode_emissions(&z)
    }

    /// Decode every example (in parallel on the current rayon pool; output
    /// order matches input order).
    pub fn predict_all(&self, examples: &[Example]) -> Result<Vec<DecodeResult>> {
        examples.par_iter().map(|ex| self.predict(ex)).collect()
    }

    pub fn evaluate(&self, examples: &[Example], tax: &Taxonomy) -> Result<(Vec<DecodeResult>, MetricsReport)> {
        let decoded = self.predict_all(examples)?;
        let samples: Vec<Sample> = examples
            .iter()
            .zip(&decoded)
            .map(|(ex, d)| Sample::new(d.per_level.iter().copied(), ex.path.iter().copied()))
            .collect();
        let report = evaluate(&samples, tax)?;
        Ok((decoded, report))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let c = &self.crf;
        write_f64s(w, &[c.tau_soft, c.tau_hard])?;
        write_f64s(w, &c.transitions)?;
        write_f64s(w, &c.start)?;
        write_flags(w, &c.frozen)?;
        write_flags(w, &c.start_frozen)?;
        if let Some(mask) = &c.slot_allowed {
            write_flags(w, mask)?;
        }
        if let Emitter::Surrogate { verbalizer, .. } = &self.emitter {
            write_f64s(w, verbalizer.weights())?;
        }
        Ok(())
    }

    /// Load a model. External-emitter models need their emissions table.
    pub fn load(path: impl AsRef<Path>, external: Option<ExternalEmissions>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, external)
    }

    pub fn read_from<R: Read>(r: &mut R, external: Option<ExternalEmissions>) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("bad magic, not a model file".into()));
        }
        let version = read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let len = read_u32(r)? as usize;
        let mut raw = vec![0u8; len];
        read_exact(r, &mut raw, "header")?;
        let header: ModelHeader = serde_json::from_slice(&raw)
            .map_err(|e| Error::Format(format!("model header: {e}")))?;

        let m = header.labels;
        let schedule = build_schedule(header.depth, header.iterations)?;
        if schedule.len() != header.chain_length {
            return Err(Error::Format("chain length disagrees with (D, I)".into()));
        }
        let taus = read_f64s(r, 2)?;
        let mut crf = CrfParams::from_parts(m, read_f64s(r, m * m)?, read_f64s(r, m)?)?;
        crf.tau_soft = taus[0];
        crf.tau_hard = taus[1];
        if !header.config.no_icrf {
            crf.mode = header.config.mode;
        }
        crf.frozen = read_flags(r, m * m)?;
        crf.start_frozen = read_flags(r, m)?;
        if header.config.mode == Mode::Strict && !header.config.no_icrf {
            crf.slot_allowed = Some(read_flags(r, schedule.len() * m)?);
        }

        let emitter = match header.emitter {
            EmitterKind::Surrogate => {
                let hasher = FeatureHasher::new(header.feature_dim)?;
                let weights = read_f64s(r, m * header.feature_dim)?;
                let verbalizer = VerbalizerParams::from_weights(m, header.feature_dim, weights)?;
                Emitter::Surrogate { hasher, verbalizer }
            }
            EmitterKind::External => Emitter::External(external.ok_or_else(|| {
                Error::InvalidArgument("model uses external emissions; pass --emissions".into())
            })?),
        };
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Format("trailing bytes after model payload".into()));
        }
        Ok(Model {
            header,
            schedule,
            crf,
            emitter,
        })
    }
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_flags<W: Write>(w: &mut W, flags: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = flags.iter().map(|&f| u8::from(f)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncation(format!("model file ends inside {what}")),
        _ => e.into(),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "header")?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut raw = vec![0u8; n * 8];
    read_exact(r, &mut raw, "parameters")?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_flags<R: Read>(r: &mut R, n: usize) -> Result<Vec<bool>> {
    let mut raw = vec![0u8; n];
    read_exact(r, &mut raw, "masks")?;
    raw.into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Format(format!("mask byte {other} is not 0 or 1"))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, SynthSpec};

    fn small() -> (Taxonomy, Vec<Example>) {
        let d = generate(&SynthSpec { branching: 2, depth: 2, ..SynthSpec::default() }).unwrap();
        (d.taxonomy, d.test)
    }

    #[test]
    fn file_round_trip_all_variants() {
        let (tax, test) = small();
        for (mode, no_icrf) in [(Mode::Faithful, false), (Mode::Strict, false), (Mode::Strict, true)] {
            let cfg = ModelConfig { mode, no_icrf, feature_dim: 1 << 10, ..ModelConfig::default() };
            let model = Model::new(&tax, cfg, None).unwrap();
            let mut bytes = Vec::new();
            model.write_to(&mut bytes).unwrap();
            let back = Model::read_from(&mut bytes.as_slice(), None).unwrap();
            assert!(back == model);
            assert_eq!(back.predict(&test[0]).unwrap(), model.predict(&test[0]).unwrap());

            bytes.push(0);
            assert!(matches!(Model::read_from(&mut bytes.as_slice(), None), Err(Error::Format(_))));
            bytes.truncate(bytes.len() - 9);
            assert!(matches!(Model::read_from(&mut bytes.as_slice(), None), Err(Error::Truncation(_))));
        }
    }

    #[test]
    fn external_model_needs_table() {
        let (tax, test) = small();
        let sched = build_schedule(2, 5).unwrap();
        let table = ExternalEmissions::from_records(
            test.iter().map(|e| (e.id.clone(), EmissionMatrix::zeros(sched.len(), tax.len()))),
        );
        let model = Model::new(&tax, ModelConfig::default(), Some(table.clone())).unwrap();
        assert_eq!(model.header.feature_dim, 0);
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();
        assert!(matches!(
            Model::read_from(&mut bytes.as_slice(), None),
            Err(Error::InvalidArgument(_))
        ));
        let back = Model::read_from(&mut bytes.as_slice(), Some(table)).unwrap();
        assert!(back == model);
        let missing = Example { id: "nope".into(), ..test[0].clone() };
        assert!(back.predict(&missing).is_err());
    }

    #[test]
    fn taxonomy_fingerprint_is_checked() {
        let (tax, _) = small();
        let model = Model::new(&tax, ModelConfig { feature_dim: 1 << 10, ..ModelConfig::default() }, None).unwrap();
        model.check_taxonomy(&tax).unwrap();
        let other = generate(&SynthSpec { branching: 2, depth: 2, seed: 99, ..SynthSpec::default() }).unwrap();
        assert!(model.check_taxonomy(&other.taxonomy).is_err());
    }
}
