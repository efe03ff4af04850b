//! Versioned little-endian checkpoint layout.
//!
//! ```text
//! magic        8 bytes  "L2GCKPT\0"
//! version      u32
//! flags        u32      bit 0: partial (written mid-run)
//! d_raw        u32
//! hidden       u32
//! d_emb        u32
//! rng id       u32      see numerics::RNG_ALGORITHM_ID
//! seed         u64
//! epoch        u64      epochs completed
//! config len   u64, then that many bytes of UTF-8 JSON (resolved run config)
//! student      encoder block
//! teacher      encoder block
//! optimizer    step u64, first moments, second moments (parameter order)
//! bank         n u64, d u64, n·d features, num_clusters u64, n labels (u64)
//! ```
//!
//! An encoder block is `w1, b1, w2, b2, running_mean, running_var`, each as
//! raw `f64` values in row-major order. Every float is stored bit-exactly.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use crate::clustering::PseudoLabeling;
use crate::encoder::{AdamConfig, Architecture, BnStats, EncoderState, OptimizerState, Params};
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::numerics::RNG_ALGORITHM_ID;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 8] = b"L2GCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const FLAG_PARTIAL: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub rng_algorithm: u32,
    pub seed: u64,
    pub partial: bool,
    /// Resolved configuration, as JSON.
    pub config: String,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(state: TrainState, seed: u64, partial: bool, config: String) -> Self {
        Self {
            arch: state.student.arch,
            rng_algorithm: RNG_ALGORITHM_ID,
            seed,
            partial,
            config,
            state,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let s = &self.state;
        w.write_all(MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        put_u32(w, if self.partial { FLAG_PARTIAL } else { 0 })?;
        for dim in [self.arch.d_raw, self.arch.hidden, self.arch.d_emb] {
            put_u32(w, dim as u32)?;
        }
        put_u32(w, self.rng_algorithm)?;
        put_u64(w, self.seed)?;
        put_u64(w, s.epoch as u64)?;
        put_u64(w, self.config.len() as u64)?;
        w.write_all(self.config.as_bytes())?;
        write_encoder(w, &s.student)?;
        write_encoder(w, &s.teacher)?;
        put_u64(w, s.optimizer.step)?;
        put_u64(w, s.clustering_passes as u64)?;
        write_params(w, &s.optimizer.first_moment)?;
        write_params(w, &s.optimizer.second_moment)?;
        let bank = &s.bank;
        put_u64(w, bank.len() as u64)?;
        put_u64(w, bank.dim() as u64)?;
        put_f64s(w, bank.features().iter().copied())?;
        put_u64(w, bank.num_clusters() as u64)?;
        for &l in bank.labeling().labels() {
            put_u64(w, l as u64)?;
        }
        Ok(())
    }

    /// Reads a checkpoint. `optimizer` supplies the hyper-parameters, which
    /// live in the JSON config rather than the binary body.
    pub fn read<R: Read>(r: &mut R, optimizer: AdamConfig) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let flags = get_u32(r)?;
        let arch = Architecture {
            d_raw: get_u32(r)? as usize,
            hidden: get_u32(r)? as usize,
            d_emb: get_u32(r)? as usize,
        };
        let rng_algorithm = get_u32(r)?;
        let seed = get_u64(r)?;
        let epoch = get_u64(r)? as usize;
        let config_len = get_u64(r)? as usize;
        let mut config = vec![0u8; config_len];
        r.read_exact(&mut config)?;
        let config = String::from_utf8(config).map_err(|e| bad(e.to_string()))?;
        let student = read_encoder(r, arch)?;
        let teacher = read_encoder(r, arch)?;
        let step = get_u64(r)?;
        let clustering_passes = get_u64(r)? as usize;
        let first_moment = read_params(r, arch)?;
        let second_moment = read_params(r, arch)?;
        let n = get_u64(r)? as usize;
        let d = get_u64(r)? as usize;
        if d != arch.d_emb {
            return Err(bad(format!("bank dim {d} != embedding dim {}", arch.d_emb)));
        }
        let features = Array2::from_shape_vec((n, d), get_f64s(r, n * d)?).map_err(|e| bad(e.to_string()))?;
        let num_clusters = get_u64(r)? as usize;
        let labels = (0..n).map(|_| get_u64(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let labeling = labeling_from_labels(labels, num_clusters)?;
        let bank = MemoryBank::from_parts(features, labeling)?;
        Ok(Self {
            arch,
            rng_algorithm,
            seed,
            partial: flags & FLAG_PARTIAL != 0,
            config,
            state: TrainState {
                student,
                teacher,
                optimizer: OptimizerState {
                    config: optimizer,
                    step,
                    first_moment,
                    second_moment,
                },
                bank,
                epoch,
                clustering_passes,
            },
        })
    }
}

fn labeling_from_labels(labels: Vec<usize>, num_clusters: usize) -> Result<PseudoLabeling> {
    let assignment: Vec<Option<usize>> = labels
        .iter()
        .map(|&l| (l < num_clusters).then_some(l))
        .collect();
    let labeling = PseudoLabeling::from_assignment(&assignment);
    if labeling.labels() != labels.as_slice() || labeling.num_clusters() != num_clusters {
        return Err(bad("labels are not in canonical order"));
    }
    Ok(labeling)
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

fn write_params<W: Write>(w: &mut W, p: &Params) -> Result<()> {
    for (_, t) in p.tensors() {
        put_f64s(w, t.iter().copied())?;
    }
    Ok(())
}

fn read_params<R: Read>(r: &mut R, arch: Architecture) -> Result<Params> {
    let mut p = Params::zeros(arch);
    for (_, t) in p.tensors_mut() {
        let values = get_f64s(r, t.len())?;
        t.copy_from_slice(&values);
    }
    Ok(p)
}

fn write_encoder<W: Write>(w: &mut W, e: &EncoderState) -> Result<()> {
    write_params(w, &e.params)?;
    put_f64s(w, e.bn.running_mean.iter().copied())?;
    put_f64s(w, e.bn.running_var.iter().copied())
}

fn read_encoder<R: Read>(r: &mut R, arch: Architecture) -> Result<EncoderState> {
    let params = read_params(r, arch)?;
    let running_mean = Array1::from(get_f64s(r, arch.d_emb)?);
    let running_var = Array1::from(get_f64s(r, arch.d_emb)?);
    if running_var.iter().any(|&v| !(v > 0.0)) {
        return Err(bad("running variance must be positive"));
    }
    Ok(EncoderState {
        arch,
        params,
        bn: BnStats {
            running_mean,
            running_var,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, GeneratorConfig};
    use crate::trainer::{Trainer, TrainConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = generate(&GeneratorConfig {
            num_identities: 6,
            ..GeneratorConfig::hard()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::desk()
        };
        let mut t = Trainer::new(ds.strip_labels(), cfg.clone()).unwrap();
        t.recluster().unwrap();
        t.train_epoch().unwrap();
        let ck = Checkpoint::new(t.into_state(), cfg.seed, true, "{\"k\":1}".into());
        let bytes = ck.to_bytes();
        let back = Checkpoint::read(&mut &bytes[..], cfg.optimizer).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.partial);
    }

    #[test]
    fn rejects_garbage() {
        let mut junk: &[u8] = b"NOTACKPT________";
        assert!(matches!(
            Checkpoint::read(&mut junk, AdamConfig::default()),
            Err(Error::Format { .. })
        ));
    }
}
