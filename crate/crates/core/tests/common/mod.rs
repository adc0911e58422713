//! Independent scalar oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use diffcore::{Graph, ParamGroup};
use mrl::data::SampleWindow;
use mrl::model::{Fusion, Layout, Model, ModelConfig, Net};
use mrl::training::pretrain_loss_graph;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Full sort of every candidate by descending magnitude, then ascending
/// (frame, joint); the first `round(rate * candidates)` are hidden.
/// Frames are velocity rows + 1.
pub fn mask_oracle(vel: &Array2<f32>, rate: f64) -> Array2<bool> {
    let (rows, joints) = vel.dim();
    let mut cands: Vec<(f32, usize, usize)> = Vec::new();
    for r in 0..rows {
        for j in 0..joints {
            cands.push((vel[[r, j]], r + 1, j));
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let k = (rate * (rows * joints) as f64).round() as usize;
    let mut masked = Array2::from_elem((rows + 1, joints), false);
    for &(_, t, j) in &cands[..k] {
        masked[[t, j]] = true;
    }
    masked
}

/// Mean over (frame, joint) of the squared coordinate error, by loops.
pub fn sq_loss_oracle(rec: &Array3<f64>, gt: &Array3<f64>) -> f64 {
    let (f, j, k) = rec.dim();
    let mut total = 0.0;
    for a in 0..f {
        for b in 0..j {
            let mut norm2 = 0.0;
            for c in 0..k {
                let d = rec[[a, b, c]] - gt[[a, b, c]];
                norm2 += d * d;
            }
            total += norm2;
        }
    }
    total / (f * j) as f64
}

/// Mean joint distance at a 1-based frame, by loops.
pub fn mpjpe_oracle(pred: &Array3<f32>, gt: &Array3<f32>, frame: usize) -> f64 {
    let (_, j, k) = pred.dim();
    let mut total = 0.0;
    for b in 0..j {
        let mut norm2 = 0.0;
        for c in 0..k {
            let d = pred[[frame - 1, b, c]] as f64 - gt[[frame - 1, b, c]] as f64;
            norm2 += d * d;
        }
        total += norm2.sqrt();
    }
    total / j as f64
}

pub fn random_array(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f32> {
    Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_array_f64(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Uniformly random rotation (unit quaternion) and a translation.
pub fn random_rigid(rng: &mut ChaCha8Rng) -> ([[f64; 3]; 3], [f64; 3]) {
    let mut q = [0.0f64; 4];
    loop {
        for v in &mut q {
            *v = rng.random_range(-1.0..1.0);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    let r = [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ];
    let t = [
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
    ];
    (r, t)
}

pub fn apply_rigid(a: &Array3<f32>, (r, t): &([[f64; 3]; 3], [f64; 3])) -> Array3<f32> {
    let mut out = a.clone();
    let (f, j, _) = a.dim();
    for x in 0..f {
        for y in 0..j {
            for row in 0..3 {
                let v: f64 = (0..3).map(|c| r[row][c] * a[[x, y, c]] as f64).sum::<f64>() + t[row];
                out[[x, y, row]] = v as f32;
            }
        }
    }
    out
}

pub fn tiny_config() -> ModelConfig {
    tiny(Fusion::CrossAttention, Layout::Sequential)
}

pub fn random_windows(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<SampleWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| SampleWindow {
            past: random_array((cfg.past_frames, cfg.joints, cfg.coord_dims), &mut rng),
            future: random_array((cfg.future_frames, cfg.joints, cfg.coord_dims), &mut rng),
            source: i,
            start: 0,
            label: Some((i % 2) as i32),
        })
        .collect()
}

pub fn tiny(fusion: Fusion, layout: Layout) -> ModelConfig {
    ModelConfig {
        channels: 8,
        heads: 2,
        head_dim: 4,
        pme_layers: 1,
        fmp_layers: 1,
        past_frames: 4,
        future_frames: 4,
        joints: 3,
        coord_dims: 3,
        fusion,
        layout,
    }
}

pub fn random_seq(frames: usize, joints: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    Array3::from_shape_fn((frames, joints, 3), |_| rng.random_range(-1.0..1.0))
}

fn pretrain_loss(
    params: &ParamGroup<f64>,
    cfg: &ModelConfig,
    x: &[Array3<f32>; 4],
    track: bool,
) -> (f64, ParamGroup<f64>) {
    let mut g = Graph::new();
    let vars = if track {
        params.bind(&mut g)
    } else {
        params.bind_where(&mut g, |_| false)
    };
    let mut net = Net::new(&mut g, &vars, cfg);
    let xm = net.input(&[&x[0]]).unwrap();
    let rec_past = net.reconstruct_past(xm).unwrap();
    let xc = net.input(&[&x[1]]).unwrap();
    let h = net.encode_past(xc).unwrap();
    let xf = net.input(&[&x[2]]).unwrap();
    let rec_future = net.reconstruct_future(xf, Some(h)).unwrap();
    let gt = net.input(&[&x[3]]).unwrap();
    let loss = pretrain_loss_graph(&mut g, rec_past, xc, rec_future, gt, 0.7).unwrap();
    let value = g.value(loss)[0];
    let mut out = params.clone();
    if track {
        g.backward(loss).unwrap();
        out.zero_grad();
        out.accumulate_grads(&g, &vars).unwrap();
    }
    (value, out)
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter coordinate.
pub fn pretrain_gradcheck(cfg: &ModelConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::new(cfg.clone(), seed).unwrap();
    let mut params = model.params.clone();
    // Nonzero biases and encodings exercise every path.
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let x = [
        random_seq(cfg.past_frames, cfg.joints, &mut rng),
        random_seq(cfg.past_frames, cfg.joints, &mut rng),
        random_seq(cfg.future_frames, cfg.joints, &mut rng),
        random_seq(cfg.future_frames, cfg.joints, &mut rng),
    ];
    let (_, analytic) = pretrain_loss(&params, cfg, &x, true);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for name in names {
        let n = params.get(&name).unwrap().numel();
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let plus = pretrain_loss(&params, cfg, &x, false).0;
            params.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let minus = pretrain_loss(&params, cfg, &x, false).0;
            params.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(&name).unwrap().grad().map_or(0.0, |g| g[i]);
            let scale = a.abs().max(numeric.abs());
            // Gradients that vanish analytically only show FD noise.
            let rel = if scale < 1e-8 { 0.0 } else { (a - numeric).abs() / scale };
            worst = worst.max(rel);
        }
    }
    worst
}
