//! Deterministic synthetic skeleton motion.
//!
//! Each class owns a fixed joint-angle signature (base frequency, per-joint
//! amplitudes, harmonics and phase offsets). A sequence draws a global
//! phase, small frequency/amplitude jitter, a heading and a walking speed
//! from the seed, then drives forward kinematics over the skeleton tree.

use std::f64::consts::TAU;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sequence::MotionSequence;
use crate::error::{Error, Result};

/// Seed of the class signatures; independent of the per-sequence seed so a
/// class means the same motion in every generated dataset.
const SIGNATURE_SEED: u64 = 0x5eed_c1a5;

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSpec {
    pub names: Vec<String>,
    /// Parent joint per joint, `-1` for the root.
    pub parents: Vec<i32>,
    pub bone_lengths: Vec<f64>,
    /// Rest-pose direction of the bone from the parent to each joint.
    pub rest_dirs: Vec<[f64; 3]>,
}

impl SkeletonSpec {
    pub fn new(
        names: Vec<String>,
        parents: Vec<i32>,
        bone_lengths: Vec<f64>,
        rest_dirs: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let spec = Self {
            names,
            parents,
            bone_lengths,
            rest_dirs,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn from_table(rows: &[(&str, i32, f64, [f64; 3])]) -> Self {
        let spec = Self {
            names: rows.iter().map(|r| r.0.to_string()).collect(),
            parents: rows.iter().map(|r| r.1).collect(),
            bone_lengths: rows.iter().map(|r| r.2).collect(),
            rest_dirs: rows.iter().map(|r| normalize(r.3)).collect(),
        };
        spec.validate().expect("built-in skeleton is valid");
        spec
    }

    /// 22-joint humanoid.
    pub fn humanoid() -> Self {
        Self::from_table(&[
            ("pelvis", -1, 0.0, [0.0, 1.0, 0.0]),
            ("l_hip", 0, 0.10, [1.0, 0.0, 0.0]),
            ("l_knee", 1, 0.45, [0.0, -1.0, 0.0]),
            ("l_ankle", 2, 0.42, [0.0, -1.0, 0.0]),
            ("l_toe", 3, 0.15, [0.0, 0.0, 1.0]),
            ("r_hip", 0, 0.10, [-1.0, 0.0, 0.0]),
            ("r_knee", 5, 0.45, [0.0, -1.0, 0.0]),
            ("r_ankle", 6, 0.42, [0.0, -1.0, 0.0]),
            ("r_toe", 7, 0.15, [0.0, 0.0, 1.0]),
            ("spine", 0, 0.25, [0.0, 1.0, 0.0]),
            ("chest", 9, 0.25, [0.0, 1.0, 0.0]),
            ("neck", 10, 0.15, [0.0, 1.0, 0.0]),
            ("head", 11, 0.12, [0.0, 1.0, 0.0]),
            ("l_collar", 10, 0.15, [1.0, 0.2, 0.0]),
            ("l_shoulder", 13, 0.12, [1.0, 0.0, 0.0]),
            ("l_elbow", 14, 0.28, [0.0, -1.0, 0.0]),
            ("l_wrist", 15, 0.25, [0.0, -1.0, 0.0]),
            ("r_collar", 10, 0.15, [-1.0, 0.2, 0.0]),
            ("r_shoulder", 17, 0.12, [-1.0, 0.0, 0.0]),
            ("r_elbow", 18, 0.28, [0.0, -1.0, 0.0]),
            ("r_wrist", 19, 0.25, [0.0, -1.0, 0.0]),
            ("head_top", 12, 0.10, [0.0, 1.0, 0.0]),
        ])
    }

    /// 11-joint stick figure for fast experiments.
    pub fn stick_figure() -> Self {
        Self::from_table(&[
            ("pelvis", -1, 0.0, [0.0, 1.0, 0.0]),
            ("l_knee", 0, 0.45, [0.25, -1.0, 0.0]),
            ("l_foot", 1, 0.42, [0.0, -1.0, 0.0]),
            ("r_knee", 0, 0.45, [-0.25, -1.0, 0.0]),
            ("r_foot", 3, 0.42, [0.0, -1.0, 0.0]),
            ("chest", 0, 0.50, [0.0, 1.0, 0.0]),
            ("head", 5, 0.25, [0.0, 1.0, 0.0]),
            ("l_elbow", 5, 0.35, [1.0, -0.3, 0.0]),
            ("l_hand", 7, 0.28, [0.0, -1.0, 0.0]),
            ("r_elbow", 5, 0.35, [-1.0, -0.3, 0.0]),
            ("r_hand", 9, 0.28, [0.0, -1.0, 0.0]),
        ])
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    pub fn root(&self) -> usize {
        self.parents.iter().position(|&p| p < 0).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.parents.len();
        if n == 0 {
            return Err(Error::InvalidSkeleton("no joints".into()));
        }
        if self.names.len() != n || self.bone_lengths.len() != n || self.rest_dirs.len() != n {
            return Err(Error::InvalidSkeleton("per-joint fields differ in length".into()));
        }
        if self.parents.iter().filter(|&&p| p < 0).count() != 1 {
            return Err(Error::InvalidSkeleton("expected exactly one root".into()));
        }
        if let Some(&p) = self.parents.iter().find(|&&p| p >= n as i32) {
            return Err(Error::InvalidSkeleton(format!("parent index {p} out of range")));
        }
        for start in 0..n {
            let mut j = start;
            for _ in 0..=n {
                match self.parents[j] {
                    p if p < 0 => break,
                    p => j = p as usize,
                }
            }
            if self.parents[j] >= 0 {
                return Err(Error::InvalidSkeleton(format!("cycle through joint {start}")));
            }
        }
        if self.bone_lengths.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidSkeleton("negative bone length".into()));
        }
        Ok(())
    }

    /// Joints ordered so that every parent precedes its children.
    fn topological_order(&self) -> Vec<usize> {
        let n = self.joints();
        let mut order = Vec::with_capacity(n);
        let mut placed = vec![false; n];
        while order.len() < n {
            for j in 0..n {
                let ready = match self.parents[j] {
                    p if p < 0 => true,
                    p => placed[p as usize],
                };
                if !placed[j] && ready {
                    placed[j] = true;
                    order.push(j);
                }
            }
        }
        order
    }
}

type Mat3 = [[f64; 3]; 3];

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn apply(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn rot_x(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Per-class motion signature.
#[derive(Clone, Debug)]
struct ClassSignature {
    freq_hz: f64,
    speed: f64,
    /// Per joint: (x amplitude, z amplitude, harmonic, phase offset).
    joints: Vec<(f64, f64, f64, f64)>,
}

fn class_signature(class: usize, joints: usize) -> ClassSignature {
    let mut rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED ^ ((class as u64 + 1) * 0x9e37_79b9));
    ClassSignature {
        freq_hz: 0.6 + 0.45 * class as f64,
        speed: 0.2 + 0.25 * (class % 3) as f64,
        joints: (0..joints)
            .map(|_| {
                let ax = rng.random_range(0.15..0.7);
                let az = rng.random_range(0.0..0.3);
                let harmonic = if rng.random_bool(0.3) { 2.0 } else { 1.0 };
                let offset = rng.random_range(0.0..TAU);
                (ax, az, harmonic, offset)
            })
            .collect(),
    }
}

/// Generates `classes * per_class` sequences, class-major, labels `0..classes`.
pub fn synth_generate(
    spec: &SkeletonSpec,
    classes: usize,
    per_class: usize,
    frames: usize,
    fps: u32,
    seed: u64,
) -> Result<Vec<MotionSequence>> {
    spec.validate()?;
    if classes == 0 {
        return Err(Error::Invalid("synth_generate needs at least one class".into()));
    }
    let order = spec.topological_order();
    let root = spec.root();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let sig = class_signature(class, spec.joints());
        for _ in 0..per_class {
            let phase = rng.random_range(0.0..TAU);
            let freq = sig.freq_hz * rng.random_range(0.95..1.05);
            let amp = rng.random_range(0.9..1.1);
            let heading = rng.random_range(0.0..TAU);
            let speed = sig.speed * rng.random_range(0.85..1.15);
            let origin = [rng.random_range(-0.5..0.5), 0.0, rng.random_range(-0.5..0.5)];

            let mut coords = Array3::<f32>::zeros((frames, spec.joints(), 3));
            let mut global = vec![[[0.0; 3]; 3]; spec.joints()];
            let mut pos = vec![[0.0; 3]; spec.joints()];
            for f in 0..frames {
                let t = f as f64 / fps as f64;
                let w = TAU * freq * t + phase;
                let yaw = rot_y(heading);
                let travel = speed * t;
                for &j in &order {
                    if j == root {
                        global[j] = yaw;
                        let bob = 0.03 * amp * (2.0 * w).sin();
                        let dir = apply(&yaw, [0.0, 0.0, 1.0]);
                        pos[j] = [origin[0] + travel * dir[0], 0.95 + bob, origin[2] + travel * dir[2]];
                    } else {
                        let (ax, az, h, off) = sig.joints[j];
                        let tx = amp * ax * (h * w + off).sin();
                        let tz = amp * az * (h * w + 0.5 * off).cos();
                        let parent = spec.parents[j] as usize;
                        global[j] = matmul3(&global[parent], &matmul3(&rot_z(tz), &rot_x(tx)));
                        let d = spec.rest_dirs[j];
                        let l = spec.bone_lengths[j];
                        let bone = apply(&global[j], [d[0] * l, d[1] * l, d[2] * l]);
                        pos[j] = [0, 1, 2].map(|k| pos[parent][k] + bone[k]);
                    }
                    for k in 0..3 {
                        coords[[f, j, k]] = pos[j][k] as f32;
                    }
                }
            }
            out.push(MotionSequence::new(coords, fps, Some(class as i32))?);
        }
    }
    Ok(out)
}
