//! Synthetic multi-camera identity data.
//!
//! Each identity owns a prototype vector. Each camera owns an affine map made
//! of an orthogonal transform (a product of Givens rotations over a random
//! pairing of coordinates) followed by an offset. An instance is the camera's
//! image of its identity's prototype plus isotropic Gaussian noise.
//!
//! The generator also provides the two feature-space augmentations used by
//! the trainer: a weak view (small Gaussian jitter) for the teacher and a
//! strong view (coordinate masking, multiplicative jitter, additive noise)
//! for the student.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Rng};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_identities: usize,
    pub cameras: usize,
    pub per_camera: usize,
    pub d_raw: usize,
    /// Standard deviation of prototype coordinates.
    pub identity_spread: f64,
    /// Standard deviation of camera offset coordinates; also scales the
    /// rotation angles.
    pub camera_shift_scale: f64,
    /// Maximum Givens angle (radians) per unit of `camera_shift_scale`.
    pub rotation_gain: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::hard()
    }
}

impl GeneratorConfig {
    /// Camera shift dominates identity spread.
    pub fn hard() -> Self {
        Self {
            num_identities: 20,
            cameras: 4,
            per_camera: 5,
            d_raw: 32,
            identity_spread: 1.0,
            camera_shift_scale: 1.25,
            rotation_gain: 0.3,
            noise_scale: 0.25,
            seed: 0,
        }
    }

    /// Small camera shift: identities are the dominant structure.
    pub fn easy() -> Self {
        Self {
            camera_shift_scale: 0.3,
            ..Self::hard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras < 2 {
            return Err(Error::config("cameras", "need at least 2 cameras"));
        }
        if self.num_identities < 1 {
            return Err(Error::config("num_identities", "must be >= 1"));
        }
        if self.per_camera < 1 {
            return Err(Error::config("per_camera", "must be >= 1"));
        }
        if self.d_raw < 2 {
            return Err(Error::config("d_raw", "must be >= 2"));
        }
        let positive = [
            ("identity_spread", self.identity_spread),
            ("noise_scale", self.noise_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be > 0, got {v}")));
            }
        }
        let non_negative = [
            ("camera_shift_scale", self.camera_shift_scale),
            ("rotation_gain", self.rotation_gain),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub index: usize,
    pub camera: usize,
    pub true_id: usize,
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub d_raw: usize,
    pub cameras: usize,
    pub num_identities: usize,
    pub seed: u64,
    pub noise_scale: f64,
    /// Present when the dataset came from [`generate`].
    pub generator: Option<GeneratorConfig>,
}

/// Raw features with every ground-truth field removed. This is all the
/// trainer ever sees.
#[derive(Debug, Clone)]
pub struct UnlabeledData {
    pub raw: Array2<f64>,
    pub noise_scale: f64,
}

impl UnlabeledData {
    pub fn len(&self) -> usize {
        self.raw.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.nrows() == 0
    }
}

/// Brute-force distance statistics reported by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceCheck {
    pub cross_camera_intra_id_mean: f64,
    pub same_camera_inter_id_mean: f64,
}

impl DistanceCheck {
    /// True when same-identity pairs across cameras are, on average, farther
    /// apart than different identities seen by the same camera.
    pub fn camera_dominates(&self) -> bool {
        self.cross_camera_intra_id_mean > self.same_camera_inter_id_mean
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn raw_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), self.d_raw));
        for (mut row, inst) in m.rows_mut().into_iter().zip(&self.instances) {
            row.assign(&ArrayView1::from(&inst.raw[..]));
        }
        m
    }

    pub fn true_ids(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.true_id).collect()
    }

    pub fn strip_labels(&self) -> UnlabeledData {
        UnlabeledData {
            raw: self.raw_matrix(),
            noise_scale: self.noise_scale,
        }
    }

    pub fn distance_check(&self) -> DistanceCheck {
        let (mut cross, mut n_cross) = (0.0, 0usize);
        let (mut same, mut n_same) = (0.0, 0usize);
        for (i, a) in self.instances.iter().enumerate() {
            for b in &self.instances[i + 1..] {
                let d = euclidean(&a.raw, &b.raw);
                if a.true_id == b.true_id && a.camera != b.camera {
                    cross += d;
                    n_cross += 1;
                } else if a.true_id != b.true_id && a.camera == b.camera {
                    same += d;
                    n_same += 1;
                }
            }
        }
        DistanceCheck {
            cross_camera_intra_id_mean: cross / n_cross.max(1) as f64,
            same_camera_inter_id_mean: same / n_same.max(1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras < 2 {
            return Err(Error::config("cameras", "need at least 2 cameras"));
        }
        let mut seen_cams = vec![Vec::<usize>::new(); self.num_identities];
        for (pos, inst) in self.instances.iter().enumerate() {
            let bad = |reason: String| Error::Format {
                what: "dataset",
                reason,
            };
            if inst.index != pos {
                return Err(bad(format!("record {pos} has index {}", inst.index)));
            }
            if inst.camera >= self.cameras {
                return Err(bad(format!("instance {pos}: camera {} >= {}", inst.camera, self.cameras)));
            }
            if inst.true_id >= self.num_identities {
                return Err(bad(format!("instance {pos}: id {} >= {}", inst.true_id, self.num_identities)));
            }
            if inst.raw.len() != self.d_raw {
                return Err(Error::Dimension {
                    expected: self.d_raw,
                    got: inst.raw.len(),
                });
            }
            if inst.raw.iter().any(|x| !x.is_finite()) {
                return Err(bad(format!("instance {pos}: non-finite feature")));
            }
            let cams = &mut seen_cams[inst.true_id];
            if !cams.contains(&inst.camera) {
                cams.push(inst.camera);
            }
        }
        if let Some(id) = seen_cams.iter().position(|c| c.len() < 2) {
            return Err(Error::Format {
                what: "dataset",
                reason: format!("identity {id} is seen by fewer than 2 cameras"),
            });
        }
        Ok(())
    }

    /// Writes the header line followed by one record per instance.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            format_version: DATASET_FORMAT_VERSION,
            d_raw: self.d_raw,
            cameras: self.cameras,
            num_identities: self.num_identities,
            seed: self.seed,
            noise_scale: self.noise_scale,
            generator: self.generator.clone(),
        };
        writeln!(w, "{}", to_json(&header)?)?;
        for inst in &self.instances {
            writeln!(w, "{}", to_json(inst)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or(Error::Format {
            what: "dataset",
            reason: "missing header".into(),
        })??;
        let header: Header = from_json(&first)?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format {
                what: "dataset",
                reason: format!("unsupported format_version {}", header.format_version),
            });
        }
        let mut instances = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            instances.push(from_json(&line)?);
        }
        let ds = Dataset {
            instances,
            d_raw: header.d_raw,
            cameras: header.cameras,
            num_identities: header.num_identities,
            seed: header.seed,
            noise_scale: header.noise_scale,
            generator: header.generator,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    d_raw: usize,
    cameras: usize,
    num_identities: usize,
    seed: u64,
    noise_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<GeneratorConfig>,
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format {
        what: "dataset",
        reason: e.to_string(),
    })
}

fn from_json<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::Format {
        what: "dataset",
        reason: e.to_string(),
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Orthogonal transform stored as Givens rotations on disjoint coordinate
/// pairs, plus an offset.
struct CameraMap {
    pairs: Vec<(usize, usize, f64, f64)>,
    offset: Array1<f64>,
}

impl CameraMap {
    fn sample(cfg: &GeneratorConfig, rng: &mut Rng) -> Self {
        let mut coords: Vec<usize> = (0..cfg.d_raw).collect();
        coords.shuffle(rng);
        let max_angle = cfg.rotation_gain * cfg.camera_shift_scale;
        let pairs = coords
            .chunks_exact(2)
            .map(|p| {
                let angle = max_angle * (2.0 * rng.random::<f64>() - 1.0);
                (p[0], p[1], angle.cos(), angle.sin())
            })
            .collect();
        let offset = Array1::from_shape_fn(cfg.d_raw, |_| cfg.camera_shift_scale * gaussian(rng));
        Self { pairs, offset }
    }

    fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut y = x.to_owned();
        for &(i, j, c, s) in &self.pairs {
            let (a, b) = (x[i], x[j]);
            y[i] = c * a - s * b;
            y[j] = s * a + c * b;
        }
        y + &self.offset
    }
}

/// Builds a dataset. Instances are ordered identity-major, then camera, then
/// shot, so `index = (id * cameras + camera) * per_camera + shot`.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let prototypes = Array2::from_shape_fn((cfg.num_identities, cfg.d_raw), |_| {
        cfg.identity_spread * gaussian(&mut rng)
    });
    let cameras: Vec<CameraMap> = (0..cfg.cameras).map(|_| CameraMap::sample(cfg, &mut rng)).collect();

    let mut instances = Vec::with_capacity(cfg.num_identities * cfg.cameras * cfg.per_camera);
    for (id, proto) in prototypes.rows().into_iter().enumerate() {
        for (cam, map) in cameras.iter().enumerate() {
            let mapped = map.apply(proto);
            for _ in 0..cfg.per_camera {
                let raw = mapped.iter().map(|&m| m + cfg.noise_scale * gaussian(&mut rng)).collect();
                instances.push(Instance {
                    index: instances.len(),
                    camera: cam,
                    true_id: id,
                    raw,
                });
            }
        }
    }
    Ok(Dataset {
        instances,
        d_raw: cfg.d_raw,
        cameras: cfg.cameras,
        num_identities: cfg.num_identities,
        seed: cfg.seed,
        noise_scale: cfg.noise_scale,
        generator: Some(cfg.clone()),
    })
}

/// Augmentation strengths, all absolute (already multiplied by the dataset's
/// noise scale where relevant).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmenter {
    pub weak_noise: f64,
    pub mask_prob: f64,
    pub jitter: f64,
    pub strong_noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Weak-view noise as a multiple of the dataset noise scale.
    pub weak_noise_factor: f64,
    pub mask_prob: f64,
    pub jitter: f64,
    /// Strong-view noise as a multiple of the dataset noise scale.
    pub strong_noise_factor: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_noise_factor: 0.01,
            mask_prob: 0.2,
            jitter: 0.1,
            strong_noise_factor: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("augment.mask_prob", "must lie in [0, 1]"));
        }
        for (name, v) in [
            ("augment.weak_noise_factor", self.weak_noise_factor),
            ("augment.jitter", self.jitter),
            ("augment.strong_noise_factor", self.strong_noise_factor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn for_noise_scale(&self, noise_scale: f64) -> Augmenter {
        Augmenter {
            weak_noise: self.weak_noise_factor * noise_scale,
            mask_prob: self.mask_prob,
            jitter: self.jitter,
            strong_noise: self.strong_noise_factor * noise_scale,
        }
    }
}

impl Augmenter {
    pub fn weak(&self, raw: ArrayView1<'_, f64>, rng: &mut Rng) -> Array1<f64> {
        augment_weak(raw, self.weak_noise, rng)
    }

    pub fn strong(&self, raw: ArrayView1<'_, f64>, rng: &mut Rng) -> Array1<f64> {
        augment_strong(raw, self.mask_prob, self.jitter, self.strong_noise, rng)
    }
}

pub fn augment_weak(raw: ArrayView1<'_, f64>, noise: f64, rng: &mut Rng) -> Array1<f64> {
    raw.mapv(|x| x + noise * gaussian(rng))
}

/// Masking, then per-coordinate multiplicative jitter in `[1 - jitter, 1 + jitter]`,
/// then additive Gaussian noise.
pub fn augment_strong(
    raw: ArrayView1<'_, f64>,
    mask_prob: f64,
    jitter: f64,
    noise: f64,
    rng: &mut Rng,
) -> Array1<f64> {
    raw.mapv(|x| {
        let masked = if rng.random::<f64>() < mask_prob { 0.0 } else { x };
        let scale = 1.0 + jitter * (2.0 * rng.random::<f64>() - 1.0);
        masked * scale + noise * gaussian(rng)
    })
}
