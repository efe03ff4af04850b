//! Two-layer MLP encoder with batch normalization and L2 output normalization,
//! written out by hand together with its backward pass, an Adam optimizer with
//! step decay, and the EMA rule that keeps the teacher tracking the student.
//!
//! Forward pass for a batch `X` (rows are samples):
//!
//! ```text
//! h = tanh(X W1ᵀ + b1)
//! z = h W2ᵀ + b2
//! x̂ = (z − μ) / sqrt(σ² + eps)     μ, σ² from the batch (train) or running stats (inference)
//! y = x̂ / ‖x̂‖                       per row
//! ```

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub d_raw: usize,
    pub hidden: usize,
    pub d_emb: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            d_raw: 32,
            hidden: 64,
            d_emb: 16,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("encoder.d_raw", self.d_raw),
            ("encoder.hidden", self.hidden),
            ("encoder.d_emb", self.d_emb),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Trainable tensors. Also reused for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub const PARAM_NAMES: [&str; 4] = ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"];

impl Params {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            w1: Array2::zeros((arch.hidden, arch.d_raw)),
            b1: Array1::zeros(arch.hidden),
            w2: Array2::zeros((arch.d_emb, arch.hidden)),
            b2: Array1::zeros(arch.d_emb),
        }
    }

    /// Glorot-normal weights, zero biases.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(arch);
        let s1 = (2.0 / (arch.d_raw + arch.hidden) as f64).sqrt();
        let s2 = (2.0 / (arch.hidden + arch.d_emb) as f64).sqrt();
        p.w1.mapv_inplace(|_| s1 * Distribution::<f64>::sample(&StandardNormal, rng));
        p.w2.mapv_inplace(|_| s2 * Distribution::<f64>::sample(&StandardNormal, rng));
        p
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 4] {
        [
            (PARAM_NAMES[0], self.w1.as_slice().expect("standard layout")),
            (PARAM_NAMES[1], self.b1.as_slice().expect("standard layout")),
            (PARAM_NAMES[2], self.w2.as_slice().expect("standard layout")),
            (PARAM_NAMES[3], self.b2.as_slice().expect("standard layout")),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 4] {
        [
            (PARAM_NAMES[0], self.w1.as_slice_mut().expect("standard layout")),
            (PARAM_NAMES[1], self.b1.as_slice_mut().expect("standard layout")),
            (PARAM_NAMES[2], self.w2.as_slice_mut().expect("standard layout")),
            (PARAM_NAMES[3], self.b2.as_slice_mut().expect("standard layout")),
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    fn shapes(&self) -> [usize; 4] {
        self.tensors().map(|(_, t)| t.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub arch: Architecture,
    pub params: Params,
    pub bn: BnStats,
}

/// Intermediates kept by [`EncoderState::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    input: Array2<f64>,
    hidden: Array2<f64>,
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
    row_norms: Array1<f64>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Params,
    pub input: Array2<f64>,
}

impl EncoderState {
    pub fn new(arch: Architecture, rng: &mut Rng) -> Self {
        Self {
            arch,
            params: Params::init(arch, rng),
            bn: BnStats {
                running_mean: Array1::zeros(arch.d_emb),
                running_var: Array1::ones(arch.d_emb),
            },
        }
    }

    /// Runs the network. Train mode normalizes with batch statistics and
    /// updates the running statistics; inference mode only reads them.
    pub fn forward(&mut self, batch: ArrayView2<'_, f64>, mode: Mode) -> Result<(Array2<f64>, ForwardCache)> {
        let (x_hat, inv_std, hidden) = match mode {
            Mode::Inference => self.pre_norm_inference(batch)?,
            Mode::Train => {
                let b = batch.nrows();
                if b < 2 {
                    return Err(Error::BatchTooSmall(b));
                }
                let (z, hidden) = self.pre_bn(batch)?;
                let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                let centered = &z - &mean;
                let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
                let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let x_hat = &centered * &inv_std;
                let unbiased = b as f64 / (b - 1) as f64;
                Zip::from(&mut self.bn.running_mean)
                    .and(&mean)
                    .for_each(|r, &m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
                Zip::from(&mut self.bn.running_var)
                    .and(&var)
                    .for_each(|r, &v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbiased);
                (x_hat, inv_std, hidden)
            }
        };
        let (output, row_norms) = normalize_rows(&x_hat)?;
        let cache = ForwardCache {
            mode,
            input: batch.to_owned(),
            hidden,
            x_hat,
            inv_std,
            row_norms,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Inference-mode embedding; never touches state.
    pub fn embed(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (x_hat, _, _) = self.pre_norm_inference(batch)?;
        Ok(normalize_rows(&x_hat)?.0)
    }

    fn pre_bn(&self, batch: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if batch.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        if batch.ncols() != self.arch.d_raw {
            return Err(Error::Dimension {
                expected: self.arch.d_raw,
                got: batch.ncols(),
            });
        }
        let p = &self.params;
        let hidden = (batch.dot(&p.w1.t()) + &p.b1).mapv(f64::tanh);
        let z = hidden.dot(&p.w2.t()) + &p.b2;
        Ok((z, hidden))
    }

    fn pre_norm_inference(&self, batch: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
        let (z, hidden) = self.pre_bn(batch)?;
        let inv_std = self.bn.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let x_hat = (z - &self.bn.running_mean) * &inv_std;
        Ok((x_hat, inv_std, hidden))
    }

    /// Exact gradients of `Σ ⟨grad_out, y⟩` with respect to parameters and
    /// inputs, including the batch-norm dependence on batch statistics in
    /// train mode.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<'_, f64>) -> Result<Gradients> {
        if grad_out.dim() != cache.output.dim() {
            return Err(Error::Dimension {
                expected: cache.output.len(),
                got: grad_out.len(),
            });
        }
        let b = cache.output.nrows();

        // L2 normalization: (I − y yᵀ) / ‖x̂‖
        let mut g_xhat = grad_out.to_owned();
        for ((mut g, y), &n) in g_xhat
            .rows_mut()
            .into_iter()
            .zip(cache.output.rows())
            .zip(&cache.row_norms)
        {
            let radial: f64 = g.iter().zip(y.iter()).map(|(a, c)| a * c).sum();
            Zip::from(&mut g).and(&y).for_each(|gi, &yi| *gi = (*gi - radial * yi) / n);
        }

        let g_z = match cache.mode {
            Mode::Inference => &g_xhat * &cache.inv_std,
            Mode::Train => {
                let sum_g = g_xhat.sum_axis(Axis(0));
                let sum_gx = (&g_xhat * &cache.x_hat).sum_axis(Axis(0));
                let bf = b as f64;
                let mut g_z = Array2::zeros(g_xhat.dim());
                Zip::indexed(&mut g_z).for_each(|(i, j), gz| {
                    *gz = cache.inv_std[j] / bf
                        * (bf * g_xhat[[i, j]] - sum_g[j] - cache.x_hat[[i, j]] * sum_gx[j]);
                });
                g_z
            }
        };

        let p = &self.params;
        let g_w2 = g_z.t().dot(&cache.hidden);
        let g_b2 = g_z.sum_axis(Axis(0));
        let g_h = g_z.dot(&p.w2);
        let g_a1 = &g_h * &cache.hidden.mapv(|h| 1.0 - h * h);
        let g_w1 = g_a1.t().dot(&cache.input);
        let g_b1 = g_a1.sum_axis(Axis(0));
        let g_in = g_a1.dot(&p.w1);

        Ok(Gradients {
            params: Params {
                w1: g_w1,
                b1: g_b1,
                w2: g_w2,
                b2: g_b2,
            },
            input: g_in,
        })
    }
}

fn normalize_rows(x: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::Normalization);
    }
    let y = x / &norms.view().insert_axis(Axis(1));
    Ok((y, norms))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by `decay_factor` every `decay_epochs` epochs.
    pub decay_epochs: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 3.5e-4,
            weight_decay: 5e-4,
            decay_epochs: 30,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("optimizer.base_lr", self.base_lr >= 0.0 && self.base_lr.is_finite()),
            ("optimizer.weight_decay", self.weight_decay >= 0.0 && self.weight_decay.is_finite()),
            ("optimizer.decay_epochs", self.decay_epochs >= 1),
            ("optimizer.decay_factor", self.decay_factor > 0.0 && self.decay_factor <= 1.0),
            ("optimizer.beta1", (0.0..1.0).contains(&self.beta1)),
            ("optimizer.beta2", (0.0..1.0).contains(&self.beta2)),
            ("optimizer.eps", self.eps > 0.0),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::config(*name, "out of range")),
            None => Ok(()),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay_factor.powi((epoch / self.decay_epochs) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Params,
    pub second_moment: Params,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, arch: Architecture) -> Self {
        Self {
            config,
            step: 0,
            first_moment: Params::zeros(arch),
            second_moment: Params::zeros(arch),
        }
    }

    /// One AdamW step: bias-corrected moments plus decoupled weight decay.
    pub fn adam_step(&mut self, params: &mut Params, grads: &Params, epoch: usize) -> Result<()> {
        if params.shapes() != grads.shapes() || params.shapes() != self.first_moment.shapes() {
            return Err(Error::Dimension {
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (name, g) in grads.tensors() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Gradient(name.to_string()));
            }
        }
        let c = self.config;
        self.step += 1;
        let lr = c.lr_at(epoch);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first_moment.tensors_mut())
            .zip(self.second_moment.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub lambda: f64,
}

impl EmaConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::param("lambda", format!("must lie in [0, 1], got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

/// `teacher ← λ·teacher + (1 − λ)·student` for weights, biases and both
/// running statistics.
pub fn ema_update(teacher: &mut EncoderState, student: &EncoderState, cfg: EmaConfig) -> Result<()> {
    if teacher.arch != student.arch {
        return Err(Error::Architecture(format!(
            "teacher {:?} vs student {:?}",
            teacher.arch, student.arch
        )));
    }
    let l = cfg.lambda;
    let blend = |t: &mut [f64], s: &[f64]| {
        t.iter_mut().zip(s).for_each(|(t, &s)| *t = l * *t + (1.0 - l) * s);
    };
    for ((_, t), (_, s)) in teacher.params.tensors_mut().into_iter().zip(student.params.tensors()) {
        blend(t, s);
    }
    blend(
        teacher.bn.running_mean.as_slice_mut().expect("standard layout"),
        student.bn.running_mean.as_slice().expect("standard layout"),
    );
    blend(
        teacher.bn.running_var.as_slice_mut().expect("standard layout"),
        student.bn.running_var.as_slice().expect("standard layout"),
    );
    Ok(())
}
