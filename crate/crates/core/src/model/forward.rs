use diffcore::{Element, Graph, ParamVars, Var};
use ndarray::Array3;

use super::{Fusion, Layout, ModelConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    Temporal,
    Spatial,
}

/// Softmax output of one attention sublayer, for inspection.
#[derive(Clone, Debug)]
pub struct AttnTrace {
    pub name: String,
    pub kind: AttnKind,
    pub weights: Var,
}

/// Result of a prediction pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// `[B, L, J, K]`
    pub prediction: Var,
    /// FMP output `[B, L, J, C]`.
    pub hidden: Var,
}

/// Stacks windows into a `[B, F, J, K]` buffer.
pub fn batch_input<E: Element>(xs: &[&Array3<f32>]) -> Result<(Vec<usize>, Vec<E>)> {
    let first = xs.first().ok_or_else(|| Error::Invalid("empty batch".into()))?.dim();
    let mut data = Vec::with_capacity(xs.len() * first.0 * first.1 * first.2);
    for x in xs {
        if x.dim() != first {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", first, x.dim())));
        }
        data.extend(x.iter().map(|&v| E::from_f64(v as f64)));
    }
    Ok((vec![xs.len(), first.0, first.1, first.2], data))
}

/// Builds model computations on a graph with bound parameters.
///
/// Hidden states are `[B, F, J, C]`.
pub struct Net<'a, E: Element> {
    pub graph: &'a mut Graph<E>,
    vars: &'a ParamVars,
    cfg: &'a ModelConfig,
    pub traces: Vec<AttnTrace>,
    pub pme_passes: usize,
}

impl<'a, E: Element> Net<'a, E> {
    pub fn new(graph: &'a mut Graph<E>, vars: &'a ParamVars, cfg: &'a ModelConfig) -> Self {
        Self {
            graph,
            vars,
            cfg,
            traces: Vec::new(),
            pme_passes: 0,
        }
    }

    fn p(&self, name: &str) -> Result<Var> {
        Ok(self.vars.get(name)?)
    }

    pub fn input(&mut self, xs: &[&Array3<f32>]) -> Result<Var> {
        let (shape, data) = batch_input::<E>(xs)?;
        Ok(self.graph.constant(&shape, data)?)
    }

    fn dims(&self, h: Var) -> Result<[usize; 4]> {
        <[usize; 4]>::try_from(self.graph.shape(h))
            .map_err(|_| Error::Shape(format!("expected [B, F, J, C], got {:?}", self.graph.shape(h))))
    }

    /// `x W + b + P_t + P_s` with `prefix` one of `past_emb`, `future_emb`.
    pub fn embed_joints(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let [_, f, j, k] = self.dims(x)?;
        let pt = self.p(&format!("{prefix}.pt"))?;
        let ps = self.p(&format!("{prefix}.ps"))?;
        let frames = self.graph.shape(pt)[0];
        if f != frames || j != self.cfg.joints || k != self.cfg.coord_dims {
            return Err(Error::Shape(format!(
                "{prefix} expects [_, {frames}, {}, {}], got {:?}",
                self.cfg.joints,
                self.cfg.coord_dims,
                self.graph.shape(x)
            )));
        }
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.graph.linear(x, w, b)?;
        let pt = self.graph.reshape(pt, &[f, 1, self.cfg.channels])?;
        let y = self.graph.add(y, pt)?;
        Ok(self.graph.add(y, ps)?)
    }

    /// One pre-normalized multi-head attention sublayer with residual.
    ///
    /// Temporal attention mixes frames per joint; spatial attention mixes
    /// joints per frame. With `context`, keys and values come from it.
    pub fn attention(&mut self, h: Var, context: Option<Var>, prefix: &str, kind: AttnKind) -> Result<Var> {
        let delta = self.attention_delta(h, context, prefix, kind)?;
        Ok(self.graph.add(h, delta)?)
    }

    pub fn temporal_attention(&mut self, h: Var, context: Option<Var>, prefix: &str) -> Result<Var> {
        self.attention(h, context, prefix, AttnKind::Temporal)
    }

    pub fn spatial_attention(&mut self, h: Var, context: Option<Var>, prefix: &str) -> Result<Var> {
        self.attention(h, context, prefix, AttnKind::Spatial)
    }

    fn attention_delta(&mut self, h: Var, context: Option<Var>, prefix: &str, kind: AttnKind) -> Result<Var> {
        let [b, f, j, c] = self.dims(h)?;
        if c != self.cfg.channels {
            return Err(Error::Shape(format!(
                "{prefix}: {c} channels, model has {}",
                self.cfg.channels
            )));
        }
        let (heads, dh, dv) = (self.cfg.heads, self.cfg.head_dim, self.cfg.value_dim());
        let g = self.p(&format!("{prefix}.ln_g"))?;
        let beta = self.p(&format!("{prefix}.ln_b"))?;
        let x = self.graph.layer_norm(h, 3, g, beta)?;
        let ctx = match context {
            None => x,
            Some(ctx) => {
                let [cb, cf, cj, cc] = self.dims(ctx)?;
                if cb != b || cj != j || cc != c {
                    return Err(Error::Shape(format!(
                        "{prefix}: context {:?} incompatible with {:?}",
                        [cb, cf, cj, cc],
                        [b, f, j, c]
                    )));
                }
                if kind == AttnKind::Spatial && cf != f {
                    self.graph.mean_axis(ctx, 1, true)?
                } else {
                    ctx
                }
            }
        };
        let cf = self.graph.shape(ctx)[1];

        let (wq, bq) = (self.p(&format!("{prefix}.wq"))?, self.p(&format!("{prefix}.bq"))?);
        let (wk, bk) = (self.p(&format!("{prefix}.wk"))?, self.p(&format!("{prefix}.bk"))?);
        let (wv, bv) = (self.p(&format!("{prefix}.wv"))?, self.p(&format!("{prefix}.bv"))?);
        let q = self.graph.linear(x, wq, bq)?;
        let k = self.graph.linear(ctx, wk, bk)?;
        let v = self.graph.linear(ctx, wv, bv)?;
        let q = self.graph.reshape(q, &[b, f, j, heads, dh])?;
        let k = self.graph.reshape(k, &[b, cf, j, heads, dh])?;
        let v = self.graph.reshape(v, &[b, cf, j, heads, dv])?;

        // Bring the attended axis next to the feature axis.
        let (perm, inv): (&[usize], &[usize]) = match kind {
            AttnKind::Temporal => (&[0, 2, 3, 1, 4], &[0, 3, 1, 2, 4]),
            AttnKind::Spatial => (&[0, 1, 3, 2, 4], &[0, 1, 3, 2, 4]),
        };
        let q = self.graph.permute(q, perm)?;
        let k = self.graph.permute(k, perm)?;
        let v = self.graph.permute(v, perm)?;
        let kt = self.graph.transpose_last(k)?;
        let scores = self.graph.matmul(q, kt)?;
        let scores = self.graph.scale(scores, E::from_f64(1.0 / (dh as f64).sqrt()));
        let weights = self.graph.softmax(scores, 4)?;
        self.traces.push(AttnTrace {
            name: prefix.to_string(),
            kind,
            weights,
        });
        let z = self.graph.matmul(weights, v)?;
        let z = self.graph.permute(z, inv)?;
        let z = self.graph.reshape(z, &[b, f, j, c])?;
        let (wo, bo) = (self.p(&format!("{prefix}.wo"))?, self.p(&format!("{prefix}.bo"))?);
        Ok(self.graph.linear(z, wo, bo)?)
    }

    /// Temporal then spatial self-attention, or their average in the
    /// parallel layout.
    pub fn st_block(&mut self, h: Var, prefix: &str) -> Result<Var> {
        let t = format!("{prefix}.temporal");
        let s = format!("{prefix}.spatial");
        match self.cfg.layout {
            Layout::Sequential => {
                let h = self.temporal_attention(h, None, &t)?;
                self.spatial_attention(h, None, &s)
            }
            Layout::Parallel => {
                let at = self.attention_delta(h, None, &t, AttnKind::Temporal)?;
                let at_s = self.attention_delta(h, None, &s, AttnKind::Spatial)?;
                let sum = self.graph.add(at, at_s)?;
                let half = self.graph.scale(sum, E::from_f64(0.5));
                Ok(self.graph.add(h, half)?)
            }
        }
    }

    /// Brings the encoded past `h_past` into the future stream `h`.
    pub fn pmg_block(&mut self, h: Var, h_past: Var, prefix: &str) -> Result<Var> {
        let [b, f, j, c] = self.dims(h)?;
        let [pb, _, pj, pc] = self.dims(h_past)?;
        if (pb, pj, pc) != (b, j, c) {
            return Err(Error::Shape(format!(
                "{prefix}: past features {:?} incompatible with {:?}",
                self.graph.shape(h_past),
                [b, f, j, c]
            )));
        }
        match self.cfg.fusion {
            Fusion::CrossAttention => {
                let h = self.temporal_attention(h, Some(h_past), &format!("{prefix}.cross_temporal"))?;
                self.spatial_attention(h, Some(h_past), &format!("{prefix}.cross_spatial"))
            }
            Fusion::Add => {
                let pooled = self.graph.mean_axis(h_past, 1, true)?;
                let (w, bias) = (
                    self.p(&format!("{prefix}.fuse.w"))?,
                    self.p(&format!("{prefix}.fuse.b"))?,
                );
                let proj = self.graph.linear(pooled, w, bias)?;
                Ok(self.graph.add(h, proj)?)
            }
            Fusion::Concat => {
                let (g, beta) = (
                    self.p(&format!("{prefix}.fuse.ln_g"))?,
                    self.p(&format!("{prefix}.fuse.ln_b"))?,
                );
                let x = self.graph.layer_norm(h, 3, g, beta)?;
                let pooled = self.graph.mean_axis(h_past, 1, true)?;
                let pooled = self.graph.broadcast_to(pooled, &[b, f, j, c])?;
                let cat = self.graph.concat(&[x, pooled], 3)?;
                let (w, bias) = (
                    self.p(&format!("{prefix}.fuse.w"))?,
                    self.p(&format!("{prefix}.fuse.b"))?,
                );
                let proj = self.graph.linear(cat, w, bias)?;
                Ok(self.graph.add(h, proj)?)
            }
        }
    }

    /// `N` stacked ST blocks over embedded past motion.
    pub fn pme_forward(&mut self, x_emb: Var) -> Result<Var> {
        self.pme_passes += 1;
        let mut h = x_emb;
        for i in 0..self.cfg.pme_layers {
            h = self.st_block(h, &format!("pme.{i}"))?;
        }
        Ok(h)
    }

    /// `M` blocks of ST attention followed by past-guided fusion.
    pub fn fmp_forward(&mut self, h_future: Var, h_past: Var) -> Result<Var> {
        let mut h = h_future;
        for i in 0..self.cfg.fmp_layers {
            h = self.st_block(h, &format!("fmp.{i}"))?;
            h = self.pmg_block(h, h_past, &format!("fmp.{i}"))?;
        }
        Ok(h)
    }

    pub fn head(&mut self, h: Var) -> Result<Var> {
        let (w, b) = (self.p("head.w")?, self.p("head.b")?);
        Ok(self.graph.linear(h, w, b)?)
    }

    /// Encodes `[B, T, J, K]` past motion to `[B, T, J, C]`.
    pub fn encode_past(&mut self, x_past: Var) -> Result<Var> {
        let e = self.embed_joints(x_past, "past_emb")?;
        self.pme_forward(e)
    }

    /// Predicts `[B, L, J, K]` from a zero future input guided by the past.
    pub fn predict_future(&mut self, x_past: Var) -> Result<NetOutput> {
        let b = self.graph.shape(x_past)[0];
        let h_past = self.encode_past(x_past)?;
        let zeros = self
            .graph
            .zeros(&[b, self.cfg.future_frames, self.cfg.joints, self.cfg.coord_dims])?;
        let h_future = self.embed_joints(zeros, "future_emb")?;
        let hidden = self.fmp_forward(h_future, h_past)?;
        let prediction = self.head(hidden)?;
        Ok(NetOutput { prediction, hidden })
    }

    /// Reconstructs the past from its (masked) version using the PME only.
    pub fn reconstruct_past(&mut self, x_masked: Var) -> Result<Var> {
        let h = self.encode_past(x_masked)?;
        self.head(h)
    }

    /// Reconstructs the future from its (masked) version, guided by encoded
    /// past features.
    pub fn reconstruct_future(&mut self, x_masked: Var, h_past: Option<Var>) -> Result<Var> {
        let h_past = h_past.ok_or_else(|| Error::Invalid("future reconstruction needs past features".into()))?;
        let e = self.embed_joints(x_masked, "future_emb")?;
        let h = self.fmp_forward(e, h_past)?;
        self.head(h)
    }

    /// Mean over frames and joints: `[B, F, J, C]` to `[B, C]`.
    pub fn pool_features(&mut self, h: Var) -> Result<Var> {
        let h = self.graph.mean_axis(h, 1, false)?;
        Ok(self.graph.mean_axis(h, 1, false)?)
    }
}
