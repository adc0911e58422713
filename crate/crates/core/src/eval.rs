//! MPJPE evaluation, naive baselines, linear probing and reports.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ms_to_frame, SampleWindow};
use crate::error::{Error, Result};
use crate::model::{Model, Predictions};

/// Mean Euclidean joint error at a 1-based future frame.
pub fn mpjpe(pred: &Array3<f32>, gt: &Array3<f32>, frame: usize) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "mpjpe compares {:?} with {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (frames, joints, _) = pred.dim();
    if frame == 0 || frame > frames {
        return Err(Error::Invalid(format!("frame {frame} outside 1..={frames}")));
    }
    let p = pred.index_axis(Axis(0), frame - 1);
    let g = gt.index_axis(Axis(0), frame - 1);
    let total: f64 = (0..joints)
        .map(|j| {
            p.row(j)
                .iter()
                .zip(g.row(j))
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / joints as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    ZeroVelocity,
    ConstVelocity,
}

/// Repeats the last pose, or extrapolates the last displacement linearly.
pub fn baseline_predict(past: &Array3<f32>, future_len: usize, kind: Baseline) -> Result<Array3<f32>> {
    let (t, j, k) = past.dim();
    if t == 0 || (kind == Baseline::ConstVelocity && t < 2) {
        return Err(Error::InvalidSequence(format!(
            "{kind:?} baseline needs more than {t} past frames"
        )));
    }
    let last = past.index_axis(Axis(0), t - 1);
    let vel = match kind {
        Baseline::ZeroVelocity => Array2::zeros((j, k)),
        Baseline::ConstVelocity => &last - &past.index_axis(Axis(0), t - 2),
    };
    let mut out = Array3::zeros((future_len, j, k));
    for (l, mut frame) in out.axis_iter_mut(Axis(0)).enumerate() {
        frame.assign(&(&last + &(&vel * (l + 1) as f32)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon_ms: u32,
    pub frame: usize,
    pub mpjpe_model: f64,
    pub mpjpe_zero_vel: f64,
    pub mpjpe_const_vel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub horizons: Vec<HorizonRow>,
    /// Unweighted means over the requested horizons.
    pub average_model: f64,
    pub average_zero_vel: f64,
    pub average_const_vel: f64,
    pub probe_accuracy: Option<f64>,
    pub samples: usize,
    pub config_hash: String,
}

/// Scores given predictions against the windows' futures.
pub fn evaluate_predictions(
    preds: &[Array3<f32>],
    windows: &[SampleWindow],
    horizons_ms: &[u32],
    fps: u32,
) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one window".into()));
    }
    if preds.len() != windows.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} windows",
            preds.len(),
            windows.len()
        )));
    }
    if horizons_ms.is_empty() || horizons_ms.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config {
            key: "eval.horizons_ms".into(),
            message: "must be non-empty and strictly increasing".into(),
        });
    }
    let future_len = windows[0].future_frames();
    let baselines = |kind| {
        windows
            .iter()
            .map(|w| baseline_predict(&w.past, future_len, kind))
            .collect::<Result<Vec<_>>>()
    };
    let zero = baselines(Baseline::ZeroVelocity)?;
    let cv = baselines(Baseline::ConstVelocity)?;
    let n = windows.len() as f64;
    let mut rows = Vec::with_capacity(horizons_ms.len());
    for &ms in horizons_ms {
        let frame = ms_to_frame(ms, fps)?;
        if frame > future_len {
            return Err(Error::Config {
                key: "eval.horizons_ms".into(),
                message: format!("{ms} ms is frame {frame}, beyond the {future_len}-frame future"),
            });
        }
        let mean = |ps: &[Array3<f32>]| -> Result<f64> {
            let mut total = 0.0;
            for (p, w) in ps.iter().zip(windows) {
                total += mpjpe(p, &w.future, frame)?;
            }
            Ok(total / n)
        };
        rows.push(HorizonRow {
            horizon_ms: ms,
            frame,
            mpjpe_model: mean(preds)?,
            mpjpe_zero_vel: mean(&zero)?,
            mpjpe_const_vel: mean(&cv)?,
        });
    }
    let avg = |f: fn(&HorizonRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        average_model: avg(|r| r.mpjpe_model),
        average_zero_vel: avg(|r| r.mpjpe_zero_vel),
        average_const_vel: avg(|r| r.mpjpe_const_vel),
        horizons: rows,
        probe_accuracy: None,
        samples: windows.len(),
        config_hash: String::new(),
    })
}

/// Worker count from `MRL_THREADS`, else the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var("MRL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

const EVAL_CHUNK: usize = 32;

/// Predictions and pooled features for every window, sharded over workers.
pub fn predict_windows(model: &Model<f32>, windows: &[SampleWindow]) -> Result<Predictions> {
    let chunks: Vec<&[SampleWindow]> = windows.chunks(EVAL_CHUNK).collect();
    let run = |chunk: &[SampleWindow]| {
        let pasts: Vec<_> = chunk.iter().map(|w| &w.past).collect();
        model.predict_with_features(&pasts)
    };
    let workers = worker_count().min(chunks.len()).max(1);
    let results: Vec<Result<_>> = if workers == 1 {
        chunks.iter().map(|c| run(c)).collect()
    } else {
        std::thread::scope(|scope| {
            let per = chunks.len().div_ceil(workers);
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| scope.spawn(move || group.iter().map(|c| run(c)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut preds = Vec::with_capacity(windows.len());
    let mut feats = Vec::with_capacity(windows.len());
    for r in results {
        let (p, f) = r?;
        preds.extend(p);
        feats.extend(f);
    }
    Ok((preds, feats))
}

/// Runs the model on every window and scores it per horizon.
pub fn evaluate(model: &Model<f32>, windows: &[SampleWindow], horizons_ms: &[u32], fps: u32) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one window".into()));
    }
    let (preds, _) = predict_windows(model, windows)?;
    evaluate_predictions(&preds, windows, horizons_ms, fps)
}

pub const PROBE_ITERS: usize = 500;
pub const PROBE_LR: f64 = 0.1;

/// Eigenvalues below this fraction of the largest are raised to it before
/// whitening.
pub const PROBE_RIDGE: f64 = 1e-6;

/// Maps centered rows to decorrelated unit-variance coordinates, using the
/// eigenbasis of their covariance.
fn whitening(centered: &Array2<f64>) -> Array2<f64> {
    let (n, dim) = centered.dim();
    let cov = centered.t().dot(centered) / n as f64;
    let eig = nalgebra::DMatrix::from_fn(dim, dim, |i, j| cov[[i, j]]).symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v));
    let floor = (PROBE_RIDGE * top).max(1e-12);
    Array2::from_shape_fn((dim, dim), |(i, k)| {
        eig.eigenvectors[(i, k)] / eig.eigenvalues[k].max(floor).sqrt()
    })
}

/// Trains a multinomial logistic classifier on a seeded `split` fraction of
/// whitened features and returns accuracy on the rest.
pub fn linear_probe(features: &[Vec<f32>], labels: &[i32], split: f64, seed: u64) -> Result<f64> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Invalid(format!(
            "{} features for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut classes: Vec<i32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Invalid("linear probe needs at least two classes".into()));
    }
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::Config {
            key: "eval.probe_split".into(),
            message: format!("split ∈ (0,1), got {split}"),
        });
    }
    let n = features.len();
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("features differ in length".into()));
    }
    let x = Array2::from_shape_fn((n, dim), |(i, d)| features[i][d] as f64);
    let y: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).unwrap()).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((split * n as f64).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);

    let xt = x.select(Axis(0), train);
    let mean = xt.mean_axis(Axis(0)).unwrap();
    let whiten = whitening(&(&xt - &mean));
    let xt = (xt - &mean).dot(&whiten);
    let xe = (x.select(Axis(0), test) - &mean).dot(&whiten);

    let c = classes.len();
    let mut w = Array2::<f64>::zeros((dim, c));
    let mut b = Array1::<f64>::zeros(c);
    let mut onehot = Array2::<f64>::zeros((train.len(), c));
    for (r, &i) in train.iter().enumerate() {
        onehot[[r, y[i]]] = 1.0;
    }
    let softmax = |logits: &mut Array2<f64>| {
        for mut row in logits.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
    };
    for _ in 0..PROBE_ITERS {
        let mut p = xt.dot(&w) + &b;
        softmax(&mut p);
        let d = (p - &onehot) / train.len() as f64;
        w -= &(xt.t().dot(&d) * PROBE_LR);
        b -= &(d.sum_axis(Axis(0)) * PROBE_LR);
    }
    let logits = xe.dot(&w) + &b;
    let correct = test
        .iter()
        .zip(logits.rows())
        .filter(|(&i, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
                )
                .0;
            best == y[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Hex SHA-256 of configuration bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `report.csv` (one row per horizon) and `report.json`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("report.csv");
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&csv_path, io),
        other => Error::Invalid(format!("{}: {other:?}", csv_path.display())),
    };
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    for row in &report.horizons {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join("report.json");
    fs::write(&json_path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json_path, e))
}

/// Reads back a `report.json`.
pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mpjpe_examples() {
        let gt = Array3::<f32>::zeros((2, 2, 3));
        assert_eq!(mpjpe(&gt, &gt, 1).unwrap(), 0.0);
        let shifted = gt.mapv(|_| 0.0) + &Array1::from(vec![3.0f32, 0.0, 0.0]);
        assert_eq!(mpjpe(&shifted, &gt, 2).unwrap(), 3.0);
        let mut p = gt.clone();
        p[[0, 0, 0]] = 1.0;
        p[[0, 1, 2]] = 3.0;
        assert_eq!(mpjpe(&p, &gt, 1).unwrap(), 2.0);
        assert!(mpjpe(&p, &gt, 0).is_err());
        assert!(mpjpe(&p, &gt, 3).is_err());
    }

    #[test]
    fn baseline_examples() {
        let past = Array3::from_shape_vec((2, 1, 1), vec![0.0f32, 1.0]).unwrap();
        let cv = baseline_predict(&past, 3, Baseline::ConstVelocity).unwrap();
        assert_eq!(cv.iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
        let zv = baseline_predict(&past, 3, Baseline::ZeroVelocity).unwrap();
        assert_eq!(zv.iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 1.0]);
        let one = Array3::<f32>::zeros((1, 1, 1));
        assert!(baseline_predict(&one, 3, Baseline::ConstVelocity).is_err());
        assert!(baseline_predict(&one, 3, Baseline::ZeroVelocity).is_ok());
    }

    #[test]
    fn probe_separable_and_single_class() {
        let feats: Vec<Vec<f32>> = (0..40)
            .map(|i| vec![if i % 2 == 0 { -3.0 } else { 3.0 }, 0.1 * i as f32])
            .collect();
        let labels: Vec<i32> = (0..40).map(|i| i % 2).collect();
        assert_eq!(linear_probe(&feats, &labels, 0.5, 1).unwrap(), 1.0);
        assert!(linear_probe(&feats, &[0; 40], 0.5, 1).is_err());
    }

    #[test]
    fn config_hash_tracks_bytes() {
        assert_eq!(config_hash(b"{}"), config_hash(b"{}"));
        assert_ne!(config_hash(b"{}"), config_hash(b"{ }"));
    }
}
