//! Four-class motion task: a bright square drifting left, right, up or down.
//!
//! The square moves one pixel per step and wraps around the frame edges, and
//! its start position is uniform over the whole frame. Every single frame
//! therefore has the same distribution in all four classes; only the
//! displacement between frames identifies the class.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Label, LabelMode, SequenceDataset, SequenceRecord};
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Shape};

pub const SYNTHETIC_CLASSES: [&str; 4] = ["left", "right", "up", "down"];

/// Per-step (row, column) displacement of each class.
const STEPS: [(isize, isize); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

const MIN_FRAME_SIDE: usize = 8;
const T_LIMITS: (usize, usize) = (4, 64);
const INTENSITY: f64 = 1.0;

/// Side of the square for an `H x W` frame: a quarter of the shorter side.
pub fn square_size(height: usize, width: usize) -> Result<usize> {
    if height < MIN_FRAME_SIDE || width < MIN_FRAME_SIDE {
        return Err(Error::Argument(format!(
            "frames of {height}x{width} are too small for the moving square; both sides must be at least {MIN_FRAME_SIDE}"
        )));
    }
    Ok(height.min(width) / 4)
}

/// Generates `n_per_class` sequences per class, interleaved by class.
///
/// Lengths are uniform in the inclusive range `t_range`. Gaussian noise with
/// standard deviation `noise_std` is added and the result clipped to `[0, 1]`.
pub fn generate_synthetic(
    n_per_class: usize,
    t_range: (usize, usize),
    height: usize,
    width: usize,
    channels: usize,
    noise_std: f64,
    seed: u64,
) -> Result<SequenceDataset> {
    let side = square_size(height, width)?;
    let (t_min, t_max) = t_range;
    if t_min < T_LIMITS.0 || t_max > T_LIMITS.1 || t_min > t_max {
        return Err(Error::Argument(format!(
            "sequence lengths {t_min}..={t_max} must lie within {}..={}",
            T_LIMITS.0, T_LIMITS.1
        )));
    }
    if n_per_class == 0 || channels == 0 {
        return Err(Error::Argument("per-class count and channels must be positive".into()));
    }
    let noise = Normal::new(0.0, noise_std)
        .ok()
        .filter(|_| noise_std >= 0.0)
        .ok_or_else(|| Error::Argument(format!("noise standard deviation {noise_std} is invalid")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_per_class * STEPS.len());
    for _ in 0..n_per_class {
        for (class, &(dy, dx)) in STEPS.iter().enumerate() {
            let t_len = rng.random_range(t_min..=t_max);
            let y0 = rng.random_range(0..height);
            let x0 = rng.random_range(0..width);
            let frame = height * width * channels;
            let mut data = vec![0.0; t_len * frame];
            for t in 0..t_len {
                let y = wrap(y0, dy * t as isize, height);
                let x = wrap(x0, dx * t as isize, width);
                for r in 0..side {
                    for c in 0..side {
                        let base = t * frame + ((y + r) % height * width + (x + c) % width) * channels;
                        data[base..base + channels].fill(INTENSITY);
                    }
                }
            }
            if noise_std > 0.0 {
                for v in &mut data {
                    *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            let frames = DenseTensor::from_vec(Shape::new([t_len, height, width, channels])?, data)?;
            records.push(SequenceRecord::new(frames, Label::Single(class))?);
        }
    }
    SequenceDataset::new(
        records,
        SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(),
        LabelMode::Single,
    )
}

fn wrap(start: usize, offset: isize, extent: usize) -> usize {
    (start as isize + offset).rem_euclid(extent as isize) as usize
}
