//! White-box phase: momentum iterative attack with diverse inputs (DI),
//! translation-invariant smoothing (TI) and a stepwise-adaptive sensitivity
//! mask, projected onto the stage lattice after every step.
//!
//! Per iteration `i` of `N`:
//!
//! 1. `x_adv = x + δ`, randomly resized and padded (DI).
//! 2. `∇` of the weighted ensemble cross-entropy at `x_adv`, mapped back
//!    through the DI selection.
//! 3. Gaussian smoothing of `∇` (TI), then `g ← μ·g + ∇/‖∇‖₁`.
//! 4. The top `(N−i)/(2N)` entries of `|g|` get mask value 2, the rest 1.
//! 5. `δ ← clip(δ + α·sign(g)·mask, −ε, ε)`, then channel-aggregated and
//!    stage-quantized.
//!
//! All perturbation arithmetic happens in integer pixel units.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantize::{self, QuantizeError, StageMatrix};
use crate::raster::Image8;
use crate::tensor::Tensor;
use crate::zoo::{Model, ZooError};

#[derive(Debug, Error)]
pub enum WhiteboxError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("input {input:?} does not match model {index} input {model:?}")]
    Shape { index: usize, input: (usize, usize, usize), model: [usize; 3] },
    #[error("ensemble is empty")]
    NoModels,
    #[error(transparent)]
    Model(#[from] ZooError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiKernelConfig {
    pub size: usize,
    pub sigma: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WhiteAttackConfig {
    /// Maximum perturbation in 0–255 pixel units.
    pub epsilon: u8,
    /// Stage threshold; must be `epsilon / 2`.
    pub xi: u8,
    /// Step size in pixel units.
    pub alpha: u8,
    pub iterations: usize,
    pub momentum: f32,
    pub di_probability: f64,
    pub ti_kernel: TiKernelConfig,
    pub sa_enabled: bool,
    /// Per-model loss weights; uniform when `None`.
    pub ensemble_weights: Option<Vec<f32>>,
}

impl Default for WhiteAttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8,
            xi: 4,
            alpha: 4,
            iterations: 10,
            momentum: 1.0,
            di_probability: 0.5,
            ti_kernel: TiKernelConfig { size: 7, sigma: 3.0 },
            sa_enabled: true,
            ensemble_weights: None,
        }
    }
}

impl WhiteAttackConfig {
    pub fn validate(&self) -> Result<(), WhiteboxError> {
        let bad = |m: String| Err(WhiteboxError::Config(m));
        if self.xi == 0 || self.xi > self.epsilon {
            return bad(format!("need 0 < xi <= epsilon, got xi={} epsilon={}", self.xi, self.epsilon));
        }
        if self.epsilon as u32 != 2 * self.xi as u32 {
            return bad(format!("epsilon ({}) must equal 2·xi ({})", self.epsilon, self.xi));
        }
        if self.alpha == 0 {
            return bad("alpha must be positive".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.di_probability) {
            return bad(format!("di_probability {} outside [0, 1]", self.di_probability));
        }
        if !self.momentum.is_finite() || self.momentum < 0.0 {
            return bad(format!("momentum {} must be finite and nonnegative", self.momentum));
        }
        GaussianKernel::new(self.ti_kernel.size, self.ti_kernel.sigma)?;
        if let Some(w) = &self.ensemble_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("ensemble weights must be nonnegative".into());
            }
            let s: f32 = w.iter().sum();
            if (s - 1.0).abs() > 1e-4 {
                return bad(format!("ensemble weights sum to {s}, expected 1"));
            }
        }
        Ok(())
    }
}

/// Nearest-neighbour resize-and-pad, stored as an output→input selection so
/// it can be applied to images and transposed onto gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DiTransform {
    height: usize,
    width: usize,
    /// Source pixel index for each output pixel, or `None` for padding.
    source: Option<Vec<Option<usize>>>,
}

impl DiTransform {
    pub fn identity(height: usize, width: usize) -> Self {
        Self { height, width, source: None }
    }

    /// With probability `p`: resize to a random `rh × rw` with
    /// `rh ∈ [H, ⌊1.1H⌋]`, place it at a random offset in a zero canvas of
    /// `⌊1.1H⌋ × ⌊1.1W⌋`, and resize that back to `H × W`.
    pub fn sample(height: usize, width: usize, p: f64, rng: &mut impl Rng) -> Self {
        if p <= 0.0 || !rng.gen_bool(p.min(1.0)) {
            return Self::identity(height, width);
        }
        let (ph, pw) = (height * 11 / 10, width * 11 / 10);
        let rh = rng.gen_range(height..=ph);
        let rw = rng.gen_range(width..=pw);
        let oy = rng.gen_range(0..=ph - rh);
        let ox = rng.gen_range(0..=pw - rw);
        let mut source = Vec::with_capacity(height * width);
        for r in 0..height {
            let pr = r * ph / height;
            for c in 0..width {
                let pc = c * pw / width;
                let inside = pr >= oy && pr < oy + rh && pc >= ox && pc < ox + rw;
                source.push(inside.then(|| {
                    let sr = (pr - oy) * height / rh;
                    let sc = (pc - ox) * width / rw;
                    sr * width + sc
                }));
            }
        }
        Self { height, width, source: Some(source) }
    }

    pub fn is_identity(&self) -> bool {
        self.source.is_none()
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let Some(src) = &self.source else { return x.clone() };
        let c = x.shape()[2];
        let mut out = Tensor::zeros(x.shape());
        for (o, s) in src.iter().enumerate() {
            if let Some(s) = s {
                out.data_mut()[o * c..(o + 1) * c].copy_from_slice(&x.data()[s * c..(s + 1) * c]);
            }
        }
        out
    }

    /// Adjoint of [`DiTransform::apply`].
    pub fn transpose(&self, g: &Tensor) -> Tensor {
        let Some(src) = &self.source else { return g.clone() };
        let c = g.shape()[2];
        let mut out = Tensor::zeros(g.shape());
        for (o, s) in src.iter().enumerate() {
            if let Some(s) = s {
                for ch in 0..c {
                    out.data_mut()[s * c + ch] += g.data()[o * c + ch];
                }
            }
        }
        out
    }
}

/// Resize and pad with probability `p`; output shape always equals input.
pub fn di_transform(image: &Tensor, rng: &mut impl Rng, p: f64) -> Tensor {
    let s = image.shape();
    DiTransform::sample(s[0], s[1], p, rng).apply(image)
}

/// Odd-sized, normalized 2-D Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    size: usize,
    weights: Vec<f32>,
}

impl GaussianKernel {
    pub fn new(size: usize, sigma: f32) -> Result<Self, WhiteboxError> {
        if size.is_multiple_of(2) {
            return Err(WhiteboxError::Config(format!("TI kernel size {size} must be odd")));
        }
        if size == 1 {
            return Ok(Self::delta());
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(WhiteboxError::Config(format!("TI sigma {sigma} must be positive")));
        }
        let c = (size / 2) as f32;
        let g1: Vec<f64> = (0..size).map(|i| (-((i as f32 - c).powi(2) as f64) / (2.0 * (sigma as f64).powi(2))).exp()).collect();
        let total: f64 = g1.iter().sum::<f64>().powi(2);
        let weights = (0..size * size).map(|i| (g1[i / size] * g1[i % size] / total) as f32).collect();
        Ok(Self { size, weights })
    }

    /// Single tap of weight one.
    pub fn delta() -> Self {
        Self { size: 1, weights: vec![1.0] }
    }

    /// Arbitrary odd-sized weights, row-major.
    pub fn from_weights(size: usize, weights: Vec<f32>) -> Result<Self, WhiteboxError> {
        if size.is_multiple_of(2) || weights.len() != size * size {
            return Err(WhiteboxError::Config(format!("kernel must be odd and square, got size {size}")));
        }
        Ok(Self { size, weights })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }
}

/// Half-sample symmetric reflection: `-1 → 0`, `n → n-1`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Per-channel same-size correlation of an `[H, W, C]` gradient with
/// symmetric reflective padding. For a symmetric kernel this preserves the
/// total sum of each channel.
pub fn ti_smooth(grad: &Tensor, kernel: &GaussianKernel) -> Result<Tensor, WhiteboxError> {
    if kernel.size.is_multiple_of(2) {
        return Err(WhiteboxError::Config(format!("TI kernel size {} must be odd", kernel.size)));
    }
    if kernel.size == 1 && kernel.weights[0] == 1.0 {
        return Ok(grad.clone());
    }
    let (h, w, c) = match grad.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(WhiteboxError::Config(format!("ti_smooth expects [H, W, C], got {s:?}"))),
    };
    let k = kernel.size;
    let r = (k / 2) as isize;
    let src = grad.data();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * c;
            for dy in 0..k {
                let sy = reflect(y as isize + dy as isize - r, h);
                for dx in 0..k {
                    let sx = reflect(x as isize + dx as isize - r, w);
                    let kv = kernel.weights[dy * k + dx];
                    let s = (sy * w + sx) * c;
                    for ch in 0..c {
                        out[o + ch] += kv * src[s + ch];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(grad.shape().to_vec(), out).expect("same shape"))
}

/// Entries in `{1, 2}`, same layout as the gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensitivityMask {
    values: Vec<u8>,
}

impl SensitivityMask {
    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn amplified(&self) -> usize {
        self.values.iter().filter(|&&v| v == 2).count()
    }

    pub fn all_ones(n: usize) -> Self {
        Self { values: vec![1; n] }
    }
}

/// Number of entries amplified at iteration `i` of `n`:
/// `⌈(n − i) / (2n) · total⌉`.
pub fn amplified_count(total: usize, i: usize, n: usize) -> usize {
    assert!(i < n, "iteration {i} out of range for {n}");
    ((n - i) * total).div_ceil(2 * n)
}

/// Marks the `amplified_count` largest-magnitude entries with 2; ties go to
/// the earlier entry in scan order.
pub fn sa_mask(grad: &[f32], i: usize, n: usize) -> SensitivityMask {
    let count = amplified_count(grad.len(), i, n);
    let mut order: Vec<usize> = (0..grad.len()).collect();
    order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
    let mut values = vec![1u8; grad.len()];
    for &idx in &order[..count] {
        values[idx] = 2;
    }
    SensitivityMask { values }
}

/// `g ← μ·g + t / ‖t‖₁`; a zero `t` contributes nothing.
pub fn momentum_update(g: &mut [f32], t: &[f32], mu: f32) {
    let l1: f64 = t.iter().map(|v| v.abs() as f64).sum();
    let inv = if l1 > 0.0 { (1.0 / l1) as f32 } else { 0.0 };
    for (gi, ti) in g.iter_mut().zip(t) {
        *gi = mu * *gi + ti * inv;
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub loss: f32,
    pub amplified: usize,
    /// `‖δ‖∞` after clipping and projection, in pixel units.
    pub linf: f32,
}

#[derive(Debug, Clone)]
pub struct WhiteAttackResult {
    pub stages: StageMatrix,
    pub trace: Vec<IterationTrace>,
}

/// Runs the white-box phase against a weighted ensemble.
pub fn sa_wa_attack(
    x: &Image8,
    label: usize,
    models: &[&Model],
    cfg: &WhiteAttackConfig,
    rng: &mut impl Rng,
) -> Result<WhiteAttackResult, WhiteboxError> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(WhiteboxError::NoModels);
    }
    for (index, m) in models.iter().enumerate() {
        let want = m.spec().input_shape();
        if [x.height(), x.width(), x.channels()] != want {
            return Err(WhiteboxError::Shape { index, input: x.dims(), model: want });
        }
    }
    let weights: Vec<f32> = match &cfg.ensemble_weights {
        Some(w) if w.len() != models.len() => {
            return Err(WhiteboxError::Config(format!("{} weights for {} models", w.len(), models.len())));
        }
        Some(w) => w.clone(),
        None => vec![1.0 / models.len() as f32; models.len()],
    };
    let kernel = GaussianKernel::new(cfg.ti_kernel.size, cfg.ti_kernel.sigma)?;
    let (h, w, c) = x.dims();
    let bounds = quantize::feasible_bounds(x, cfg.xi);
    let (eps, xi, alpha) = (cfg.epsilon as u32, cfg.xi as u32, cfg.alpha as f32);
    let n = cfg.iterations;

    let mut stages = StageMatrix::zeros(h, w, cfg.xi);
    let mut delta = Tensor::zeros(&[h, w, c]);
    let mut g = vec![0.0f32; h * w * c];
    let mut trace = Vec::with_capacity(n);

    for i in 0..n {
        let x_adv = quantize::apply(x, &stages)?.to_tensor();
        let di = DiTransform::sample(h, w, cfg.di_probability, rng);
        let input = di.apply(&x_adv);
        let mut grad = Tensor::zeros(&[h, w, c]);
        let mut loss = 0.0f32;
        for (m, &wk) in models.iter().zip(&weights) {
            if wk == 0.0 {
                continue;
            }
            let (l, gk) = m.loss_and_input_grad(&input, label)?;
            loss += wk * l;
            for (a, b) in grad.data_mut().iter_mut().zip(gk.data()) {
                *a += wk * b;
            }
        }
        let grad = ti_smooth(&di.transpose(&grad), &kernel)?;
        momentum_update(&mut g, grad.data(), cfg.momentum);

        let mask = if cfg.sa_enabled { sa_mask(&g, i, n) } else { SensitivityMask::all_ones(g.len()) };
        for ((d, gi), m) in delta.data_mut().iter_mut().zip(&g).zip(mask.values()) {
            *d += alpha * sign(*gi) * *m as f32;
        }
        stages = quantize::project(&mut delta, eps, xi, Some(&bounds))?;
        delta = quantize::stage_decode(&stages, c);
        let linf = delta.data().iter().fold(0.0f32, |a, v| a.max(v.abs()));
        trace.push(IterationTrace { loss, amplified: mask.amplified(), linf });
    }
    Ok(WhiteAttackResult { stages, trace })
}
