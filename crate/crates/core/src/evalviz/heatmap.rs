use super::EvalError;
use crate::attention::{AttentionTrace, AttentionWeights};

/// Pixels per grid cell after upsampling.
pub const UPSAMPLE: usize = 16;
/// Default Gaussian width in pixels.
pub const DEFAULT_SIGMA: f64 = 8.0;

/// A grayscale intensity map with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub word: Option<String>,
}

impl Heatmap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Normalised Gaussian kernel truncated at `ceil(3 sigma)` on each side.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>, EvalError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(EvalError::Sigma(sigma));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

fn grid_side(locations: usize) -> Result<usize, EvalError> {
    let side = (locations as f64).sqrt().round() as usize;
    if side == 0 || side * side != locations {
        return Err(EvalError::NonSquare(locations));
    }
    Ok(side)
}

/// Upsampled and blurred attention map before max normalisation.
/// Returns `(side_pixels, data)`.
pub fn smooth_weights(weights: &AttentionWeights, sigma: f64) -> Result<(usize, Vec<f64>), EvalError> {
    let side = grid_side(weights.len())?;
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as i64;
    let px = side * UPSAMPLE;
    let alpha = weights.as_slice();
    let raw: Vec<f64> = (0..px * px)
        .map(|i| alpha[(i / px / UPSAMPLE) * side + (i % px) / UPSAMPLE])
        .collect();
    let clamp = |v: i64| v.clamp(0, px as i64 - 1) as usize;
    let mut horiz = vec![0.0; px * px];
    for r in 0..px {
        for c in 0..px {
            horiz[r * px + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * raw[r * px + clamp(c as i64 + k as i64 - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; px * px];
    for r in 0..px {
        for c in 0..px {
            out[r * px + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * horiz[clamp(r as i64 + k as i64 - radius) * px + c])
                .sum();
        }
    }
    Ok((px, out))
}

/// One heatmap per step: each `alpha_t` laid out on its square grid,
/// upsampled by [`UPSAMPLE`], blurred with an edge-clamped Gaussian and
/// scaled so its maximum is 1. An all-zero map stays zero.
pub fn render_attention(trace: &AttentionTrace, sigma: f64) -> Result<Vec<Heatmap>, EvalError> {
    trace
        .per_step
        .iter()
        .map(|w| {
            let (px, mut data) = smooth_weights(w, sigma)?;
            let max = data.iter().copied().fold(0.0, f64::max);
            if max > 0.0 {
                for v in &mut data {
                    *v = (*v / max).clamp(0.0, 1.0);
                }
            }
            Ok(Heatmap {
                width: px,
                height: px,
                data,
                word: None,
            })
        })
        .collect()
}
