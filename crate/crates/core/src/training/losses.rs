use diffcore::{Element, Graph, Var};
use ndarray::{Array3, Zip};

use crate::error::{Error, Result};

/// Mean over (frame, joint) of the squared per-joint error, averaged over
/// the batch. Both inputs are `[B, F, J, K]`.
pub fn sq_error_graph<E: Element>(g: &mut Graph<E>, rec: Var, gt: Var) -> Result<Var> {
    if g.shape(rec) != g.shape(gt) {
        return Err(Error::Shape(format!(
            "loss compares {:?} with {:?}",
            g.shape(rec),
            g.shape(gt)
        )));
    }
    let shape = g.shape(rec).to_vec();
    let positions = shape[..shape.len() - 1].iter().product::<usize>();
    let d = g.sub(rec, gt)?;
    let sq = g.square(d);
    let total = g.sum(sq);
    Ok(g.scale(total, E::from_f64(1.0 / positions as f64)))
}

/// Past reconstruction error plus `alpha` times future reconstruction error.
pub fn pretrain_loss_graph<E: Element>(
    g: &mut Graph<E>,
    rec_past: Var,
    gt_past: Var,
    rec_future: Var,
    gt_future: Var,
    alpha: f64,
) -> Result<Var> {
    let past = sq_error_graph(g, rec_past, gt_past)?;
    let future = sq_error_graph(g, rec_future, gt_future)?;
    let future = g.scale(future, E::from_f64(alpha));
    Ok(g.add(past, future)?)
}

pub fn finetune_loss_graph<E: Element>(g: &mut Graph<E>, pred: Var, gt: Var) -> Result<Var> {
    sq_error_graph(g, pred, gt)
}

fn mean_sq_norm<A: Copy + Into<f64>>(rec: &Array3<A>, gt: &Array3<A>) -> Result<f64> {
    if rec.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "loss compares {:?} with {:?}",
            rec.dim(),
            gt.dim()
        )));
    }
    let (f, j, _) = rec.dim();
    let total = Zip::from(rec).and(gt).fold(0.0, |acc, &a, &b| {
        let d = a.into() - b.into();
        acc + d * d
    });
    Ok(total / (f * j) as f64)
}

/// Single-window pretraining loss, evaluated in f64.
pub fn pretrain_loss<A: Copy + Into<f64>>(
    rec_past: &Array3<A>,
    gt_past: &Array3<A>,
    rec_future: &Array3<A>,
    gt_future: &Array3<A>,
    alpha: f64,
) -> Result<f64> {
    Ok(mean_sq_norm(rec_past, gt_past)? + alpha * mean_sq_norm(rec_future, gt_future)?)
}

/// Single-window prediction loss, evaluated in f64.
pub fn finetune_loss<A: Copy + Into<f64>>(pred: &Array3<A>, gt: &Array3<A>) -> Result<f64> {
    mean_sq_norm(pred, gt)
}
