//! Velocity-based and random masking plus Gaussian corruption.

use ndarray::{Array2, Array3, Axis, Zip};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Velocity,
    Random,
}

/// Which (frame, joint) positions are hidden, and what produced the choice.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// `frames x joints`, true = hidden.
    pub masked: Array2<bool>,
    /// `(frames - 1) x joints` displacement magnitudes.
    pub velocity_mag: Array2<f32>,
    /// Smallest selected magnitude; `+inf` when nothing is selected.
    pub threshold: f32,
    pub rate: f64,
}

impl MaskPlan {
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Flips the selection on frames 2.. so the selected high-velocity
    /// positions stay visible and all others are hidden.
    pub fn inverted(mut self) -> Self {
        for mut row in self.masked.axis_iter_mut(Axis(0)).skip(1) {
            row.mapv_inplace(|m| !m);
        }
        self
    }
}

/// Per-joint displacement norm between consecutive frames.
pub fn joint_velocity(x: &Array3<f32>) -> Result<Array2<f32>> {
    let (frames, joints, _) = x.dim();
    if frames < 2 {
        return Err(Error::InvalidSequence(format!(
            "velocity needs at least 2 frames, got {frames}"
        )));
    }
    Ok(Array2::from_shape_fn((frames - 1, joints), |(t, j)| {
        let a = x.index_axis(Axis(0), t);
        let b = x.index_axis(Axis(0), t + 1);
        Zip::from(b.row(j))
            .and(a.row(j))
            .fold(0.0f32, |acc, &p, &q| acc + (p - q) * (p - q))
            .sqrt()
    }))
}

/// Number of positions hidden at rate `r` over `(frames - 1) * joints` candidates.
pub fn mask_count(rate: f64, candidates: usize) -> usize {
    ((rate * candidates as f64).round() as usize).min(candidates)
}

/// Selects `round(r * (T-1) * J)` positions among frames 2..T.
///
/// The velocity strategy takes the largest magnitudes; ties at the
/// threshold go to the smallest (frame, joint) index. The random strategy
/// draws uniformly without replacement from the same candidates.
pub fn build_mask(velocity_mag: &Array2<f32>, rate: f64, strategy: MaskStrategy, seed: u64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config {
            key: "mask.rate".into(),
            message: format!("rate ∈ [0,1], got {rate}"),
        });
    }
    let (steps, joints) = velocity_mag.dim();
    let candidates = steps * joints;
    let k = mask_count(rate, candidates);
    let flat: Vec<f32> = velocity_mag.iter().copied().collect();
    let chosen: Vec<usize> = match strategy {
        MaskStrategy::Velocity => {
            let mut order: Vec<usize> = (0..candidates).collect();
            order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
            order.truncate(k);
            order
        }
        MaskStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, candidates, k).into_vec()
        }
    };
    let mut masked = Array2::from_elem((steps + 1, joints), false);
    let mut threshold = f32::INFINITY;
    for &i in &chosen {
        masked[[i / joints + 1, i % joints]] = true;
        threshold = threshold.min(flat[i]);
    }
    Ok(MaskPlan {
        masked,
        velocity_mag: velocity_mag.clone(),
        threshold,
        rate,
    })
}

/// Zeroes every coordinate of the hidden (frame, joint) positions.
pub fn apply_mask(x: &Array3<f32>, plan: &MaskPlan) -> Result<Array3<f32>> {
    let (frames, joints, _) = x.dim();
    if plan.masked.dim() != (frames, joints) {
        return Err(Error::Shape(format!(
            "mask is {:?}, sequence has {frames} frames x {joints} joints",
            plan.masked.dim()
        )));
    }
    let mut out = x.clone();
    for ((t, j), &m) in plan.masked.indexed_iter() {
        if m {
            out.index_axis_mut(Axis(0), t).row_mut(j).fill(0.0);
        }
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every coordinate.
pub fn add_noise(x: &Array3<f32>, sigma: f64, seed: u64) -> Result<Array3<f32>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config {
            key: "pretrain.noise_sigma".into(),
            message: format!("sigma must be a finite value >= 0, got {sigma}"),
        });
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(x.mapv(|v| v + normal.sample(&mut rng) as f32))
}
