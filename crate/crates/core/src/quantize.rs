//! Channel aggregation and two-stage quantization of perturbations.
//!
//! A perturbation is stored as one signed stage per pixel, `s ∈ {-2..=2}`,
//! shared by every channel. The pixel-domain value is `s · ξ` with `ε = 2ξ`.
//!
//! Stage boundaries (`v` is the channel-mean perturbation, `|v| ≤ ε`):
//!
//! | `|v|`          | stage |
//! |----------------|-------|
//! | `0`            | 0     |
//! | `(0, ξ]`       | ±1    |
//! | `(ξ, 2ξ]`      | ±2    |
//!
//! `|v| = ξ` belongs to stage 1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Image8;
use crate::tensor::Tensor;

/// The five-symbol stage alphabet in canonical order.
pub const ALPHABET: [i8; 5] = [-2, -1, 0, 1, 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantizeError {
    #[error("stage threshold must be positive")]
    ZeroXi,
    #[error("epsilon {epsilon} must equal 2·xi (xi = {xi})")]
    EpsilonMismatch { epsilon: u32, xi: u32 },
    #[error("entry {index} has magnitude {value} > epsilon {epsilon}; clip before encoding")]
    ExceedsEpsilon { index: usize, value: f32, epsilon: u32 },
    #[error("entry {index} holds {value}, outside the stage alphabet")]
    BadSymbol { index: usize, value: i64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("perturbation saturates the carrier at row {row}, col {col}, channel {channel}")]
    Saturated { row: usize, col: usize, channel: usize },
}

/// `H × W` signed stages plus the stage threshold `ξ` in pixel units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawStages")]
pub struct StageMatrix {
    height: usize,
    width: usize,
    xi: u8,
    data: Vec<i8>,
}

#[derive(Deserialize)]
struct RawStages {
    height: usize,
    width: usize,
    xi: u8,
    data: Vec<i8>,
}

impl TryFrom<RawStages> for StageMatrix {
    type Error = QuantizeError;
    fn try_from(r: RawStages) -> Result<Self, QuantizeError> {
        Self::new(r.height, r.width, r.xi, r.data)
    }
}

impl StageMatrix {
    pub fn new(height: usize, width: usize, xi: u8, data: Vec<i8>) -> Result<Self, QuantizeError> {
        if xi == 0 {
            return Err(QuantizeError::ZeroXi);
        }
        if data.len() != height * width {
            return Err(QuantizeError::Shape(format!(
                "{height}x{width} stage matrix needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some((index, &v)) = data.iter().enumerate().find(|(_, v)| !(-2..=2).contains(*v)) {
            return Err(QuantizeError::BadSymbol { index, value: v as i64 });
        }
        Ok(Self { height, width, xi, data })
    }

    pub fn zeros(height: usize, width: usize, xi: u8) -> Self {
        assert!(xi > 0, "stage threshold must be positive");
        Self { height, width, xi, data: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn xi(&self) -> u8 {
        self.xi
    }

    pub fn epsilon(&self) -> u32 {
        2 * self.xi as u32
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.data[row * self.width + col]
    }

    /// Pixel-domain perturbation at flat pixel index `i`.
    pub fn delta_at(&self, i: usize) -> i32 {
        self.data[i] as i32 * self.xi as i32
    }

    /// Symbol counts in [`ALPHABET`] order.
    pub fn histogram(&self) -> [u64; 5] {
        let mut h = [0u64; 5];
        for &s in &self.data {
            h[(s + 2) as usize] += 1;
        }
        h
    }

    /// Sets pixel `i` to `stage` clamped into the alphabet and `bounds`.
    pub(crate) fn set_clamped(&mut self, i: usize, stage: i32, bounds: Option<(i8, i8)>) {
        let (lo, hi) = bounds.unwrap_or((-2, 2));
        self.data[i] = stage.clamp(lo as i32, hi as i32) as i8;
    }

    pub fn clamp_to(&mut self, bounds: &[(i8, i8)]) {
        for (s, &(lo, hi)) in self.data.iter_mut().zip(bounds) {
            *s = (*s).clamp(lo, hi);
        }
    }
}

/// Per-pixel mean over channels of an `[H, W, C]` tensor.
pub fn channel_aggregate(delta: &Tensor) -> Result<Vec<f32>, QuantizeError> {
    let (h, w, c) = match delta.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(QuantizeError::Shape(format!("expected [H, W, C], got {s:?}"))),
    };
    if c == 1 {
        return Ok(delta.data().to_vec());
    }
    Ok(delta
        .data()
        .chunks_exact(c)
        .take(h * w)
        .map(|px| px.iter().sum::<f32>() / c as f32)
        .collect())
}

fn check_thresholds(epsilon: u32, xi: u32) -> Result<(), QuantizeError> {
    if xi == 0 {
        return Err(QuantizeError::ZeroXi);
    }
    if epsilon != 2 * xi {
        return Err(QuantizeError::EpsilonMismatch { epsilon, xi });
    }
    Ok(())
}

/// Stage of one value; the caller guarantees `|v| ≤ 2ξ`.
pub fn stage_of(v: f32, xi: f32) -> i8 {
    let a = v.abs();
    let s = if a == 0.0 {
        0
    } else if a <= xi {
        1
    } else {
        2
    };
    if v < 0.0 {
        -s
    } else {
        s
    }
}

pub fn stage_encode(
    delta2d: &[f32],
    height: usize,
    width: usize,
    epsilon: u32,
    xi: u32,
) -> Result<StageMatrix, QuantizeError> {
    check_thresholds(epsilon, xi)?;
    if delta2d.len() != height * width {
        return Err(QuantizeError::Shape(format!(
            "{} values for a {height}x{width} matrix",
            delta2d.len()
        )));
    }
    let eps = epsilon as f32;
    let mut data = Vec::with_capacity(delta2d.len());
    for (index, &v) in delta2d.iter().enumerate() {
        if v.is_nan() || v.abs() > eps {
            return Err(QuantizeError::ExceedsEpsilon { index, value: v, epsilon });
        }
        data.push(stage_of(v, xi as f32));
    }
    Ok(StageMatrix { height, width, xi: xi as u8, data })
}

/// `stage · ξ` broadcast to every channel, as an `[H, W, C]` tensor in pixel
/// units.
pub fn stage_decode(stages: &StageMatrix, channels: usize) -> Tensor {
    let xi = stages.xi as f32;
    let mut out = Vec::with_capacity(stages.len() * channels);
    for &s in &stages.data {
        let v = s as f32 * xi;
        out.extend(std::iter::repeat_n(v, channels));
    }
    Tensor::new(vec![stages.height, stages.width, channels], out).expect("nonzero dims")
}

/// Stage interval per pixel keeping `x + s·ξ` inside `[0, 255]` on every
/// channel. Always contains 0.
pub fn feasible_bounds(x: &Image8, xi: u8) -> Vec<(i8, i8)> {
    let xi = xi as i32;
    x.data()
        .chunks_exact(x.channels())
        .map(|px| {
            let (mut lo, mut hi) = (-2i32, 2i32);
            for &v in px {
                let v = v as i32;
                // smallest s with v + s·xi >= 0, largest with v + s·xi <= 255
                lo = lo.max(-(v / xi));
                hi = hi.min((255 - v) / xi);
            }
            (lo as i8, hi as i8)
        })
        .collect()
}

/// Clip to `[-ε, ε]`, aggregate channels, encode, and restrict each pixel to
/// its feasible stage interval. `delta` is in pixel units.
pub fn project(
    delta: &mut Tensor,
    epsilon: u32,
    xi: u32,
    bounds: Option<&[(i8, i8)]>,
) -> Result<StageMatrix, QuantizeError> {
    let (h, w) = match delta.shape() {
        [h, w, _] => (*h, *w),
        s => return Err(QuantizeError::Shape(format!("expected [H, W, C], got {s:?}"))),
    };
    let eps = epsilon as f32;
    for v in delta.data_mut() {
        *v = v.clamp(-eps, eps);
    }
    let mut stages = stage_encode(&channel_aggregate(delta)?, h, w, epsilon, xi)?;
    if let Some(b) = bounds {
        stages.clamp_to(b);
    }
    Ok(stages)
}

/// `x + stage·ξ` per channel. Fails rather than clipping, since a clipped
/// pixel could not be restored.
pub fn apply(x: &Image8, stages: &StageMatrix) -> Result<Image8, QuantizeError> {
    let (h, w, c) = x.dims();
    if (h, w) != (stages.height, stages.width) {
        return Err(QuantizeError::Shape(format!(
            "image {h}x{w} vs stages {}x{}",
            stages.height, stages.width
        )));
    }
    let mut out = x.data().to_vec();
    for (i, px) in out.chunks_exact_mut(c).enumerate() {
        let d = stages.delta_at(i);
        for (ch, v) in px.iter_mut().enumerate() {
            let nv = *v as i32 + d;
            if !(0..=255).contains(&nv) {
                return Err(QuantizeError::Saturated { row: i / w, col: i % w, channel: ch });
            }
            *v = nv as u8;
        }
    }
    Ok(Image8::new(h, w, c, out).expect("same dims"))
}

/// Inverse of [`apply`], with values clamped into `[0, 255]`.
pub fn unapply(stego: &Image8, stages: &StageMatrix) -> Result<Image8, QuantizeError> {
    let (h, w, c) = stego.dims();
    if (h, w) != (stages.height, stages.width) {
        return Err(QuantizeError::Shape(format!(
            "image {h}x{w} vs stages {}x{}",
            stages.height, stages.width
        )));
    }
    let mut out = stego.data().to_vec();
    for (i, px) in out.chunks_exact_mut(c).enumerate() {
        let d = stages.delta_at(i);
        for v in px.iter_mut() {
            *v = (*v as i32 - d).clamp(0, 255) as u8;
        }
    }
    Ok(Image8::new(h, w, c, out).expect("same dims"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn aggregate_is_channel_mean() {
        let t = Tensor::new(vec![1, 2, 3], vec![3.0, 0.0, 0.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(channel_aggregate(&t).unwrap(), vec![1.0, 5.0]);
        let g = Tensor::new(vec![2, 1, 1], vec![-2.5, 7.0]).unwrap();
        assert_eq!(channel_aggregate(&g).unwrap(), vec![-2.5, 7.0]);
    }

    #[test]
    fn encode_examples() {
        let m = stage_encode(&[0.0, -7.0, 4.0, 4.5], 1, 4, 8, 4).unwrap();
        assert_eq!(m.data(), &[0, -2, 1, 2]);
    }

    #[test]
    fn encode_rejects_unclipped_and_bad_thresholds() {
        assert!(matches!(
            stage_encode(&[8.5], 1, 1, 8, 4),
            Err(QuantizeError::ExceedsEpsilon { index: 0, .. })
        ));
        assert!(matches!(stage_encode(&[0.0], 1, 1, 8, 3), Err(QuantizeError::EpsilonMismatch { .. })));
        assert!(matches!(stage_encode(&[0.0], 1, 1, 0, 0), Err(QuantizeError::ZeroXi)));
        assert!(stage_encode(&[f32::NAN], 1, 1, 8, 4).is_err());
    }

    #[test]
    fn decode_broadcasts() {
        let m = StageMatrix::new(1, 2, 4, vec![2, 0]).unwrap();
        assert_eq!(stage_decode(&m, 3).data(), &[8.0, 8.0, 8.0, 0.0, 0.0, 0.0]);
        assert!(StageMatrix::new(1, 1, 4, vec![3]).is_err());
        let z = StageMatrix::zeros(3, 3, 4);
        assert!(stage_decode(&z, 1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feasible_bounds_keep_pixels_in_range() {
        let x = Image8::new(1, 4, 1, vec![0, 5, 250, 128]).unwrap();
        assert_eq!(feasible_bounds(&x, 4), vec![(0, 2), (-1, 2), (-2, 1), (-2, 2)]);
        let mut m = StageMatrix::new(1, 4, 4, vec![-2, -2, 2, 2]).unwrap();
        m.clamp_to(&feasible_bounds(&x, 4));
        let adv = apply(&x, &m).unwrap();
        assert_eq!(adv.data(), &[0, 1, 254, 136]);
        assert_eq!(unapply(&adv, &m).unwrap(), x);
    }

    #[test]
    fn json_is_validated() {
        let ok: StageMatrix = serde_json::from_str(r#"{"height":1,"width":2,"xi":4,"data":[0,-2]}"#).unwrap();
        assert_eq!(ok.data(), &[0, -2]);
        assert!(serde_json::from_str::<StageMatrix>(r#"{"height":1,"width":2,"xi":4,"data":[0,3]}"#).is_err());
        assert!(serde_json::from_str::<StageMatrix>(r#"{"height":2,"width":2,"xi":4,"data":[0,0]}"#).is_err());
    }

    #[test]
    fn apply_refuses_to_clip() {
        let x = Image8::new(1, 1, 1, vec![254]).unwrap();
        let m = StageMatrix::new(1, 1, 4, vec![1]).unwrap();
        assert!(matches!(apply(&x, &m), Err(QuantizeError::Saturated { .. })));
    }

    fn stage_matrix() -> impl Strategy<Value = StageMatrix> {
        (1usize..12, 1usize..12, 1u8..16).prop_flat_map(|(h, w, xi)| {
            proptest::collection::vec(-2i8..=2, h * w)
                .prop_map(move |d| StageMatrix::new(h, w, xi, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn encode_decode_is_idempotent(m in stage_matrix(), c in 1usize..4) {
            let mut d = stage_decode(&m, c);
            let eps = m.epsilon();
            for v in d.data() {
                prop_assert!(v.abs() <= eps as f32);
                prop_assert_eq!(v.rem_euclid(m.xi() as f32), 0.0);
            }
            let back = project(&mut d, eps, m.xi() as u32, None).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
