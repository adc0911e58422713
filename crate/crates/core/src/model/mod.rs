//! Spatiotemporal attention encoder/predictor and its parameters.

mod forward;

use diffcore::{DTensor, Element, Graph, ParamGroup};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use forward::{batch_input, AttnKind, AttnTrace, Net, NetOutput};

/// How FMP blocks bring in the encoded past.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    CrossAttention,
    Add,
    Concat,
}

/// Order of the temporal and spatial sublayers inside an ST block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub pme_layers: usize,
    pub fmp_layers: usize,
    pub past_frames: usize,
    pub future_frames: usize,
    pub joints: usize,
    pub coord_dims: usize,
    pub fusion: Fusion,
    pub layout: Layout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            heads: 8,
            head_dim: 32,
            pme_layers: 3,
            fmp_layers: 3,
            past_frames: 10,
            future_frames: 25,
            joints: 22,
            coord_dims: 3,
            fusion: Fusion::CrossAttention,
            layout: Layout::Sequential,
        }
    }
}

impl ModelConfig {
    /// Query/key width across all heads.
    pub fn inner_width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Value width of one head.
    pub fn value_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.channels", self.channels),
            ("model.heads", self.heads),
            ("model.head_dim", self.head_dim),
            ("model.fmp_layers", self.fmp_layers),
            ("data.past_frames", self.past_frames),
            ("data.future_frames", self.future_frames),
            ("model.joints", self.joints),
            ("model.coord_dims", self.coord_dims),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    message: "must be >= 1".into(),
                });
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config {
                key: "model.heads".into(),
                message: format!("must divide channels ({} % {} != 0)", self.channels, self.heads),
            });
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, k) = (self.channels, self.coord_dims);
        let mut out = Vec::new();
        for (prefix, frames) in [("past_emb", self.past_frames), ("future_emb", self.future_frames)] {
            out.push((format!("{prefix}.w"), vec![k, c]));
            out.push((format!("{prefix}.b"), vec![c]));
            out.push((format!("{prefix}.pt"), vec![frames, c]));
            out.push((format!("{prefix}.ps"), vec![self.joints, c]));
        }
        for i in 0..self.pme_layers {
            for sub in ["temporal", "spatial"] {
                self.attention_shapes(&format!("pme.{i}.{sub}"), &mut out);
            }
        }
        for i in 0..self.fmp_layers {
            for sub in ["temporal", "spatial"] {
                self.attention_shapes(&format!("fmp.{i}.{sub}"), &mut out);
            }
            match self.fusion {
                Fusion::CrossAttention => {
                    for sub in ["cross_temporal", "cross_spatial"] {
                        self.attention_shapes(&format!("fmp.{i}.{sub}"), &mut out);
                    }
                }
                Fusion::Add => {
                    out.push((format!("fmp.{i}.fuse.w"), vec![c, c]));
                    out.push((format!("fmp.{i}.fuse.b"), vec![c]));
                }
                Fusion::Concat => {
                    out.push((format!("fmp.{i}.fuse.ln_g"), vec![c]));
                    out.push((format!("fmp.{i}.fuse.ln_b"), vec![c]));
                    out.push((format!("fmp.{i}.fuse.w"), vec![2 * c, c]));
                    out.push((format!("fmp.{i}.fuse.b"), vec![c]));
                }
            }
        }
        out.push(("head.w".into(), vec![c, k]));
        out.push(("head.b".into(), vec![k]));
        out
    }

    fn attention_shapes(&self, prefix: &str, out: &mut Vec<(String, Vec<usize>)>) {
        let (c, inner) = (self.channels, self.inner_width());
        let mut push = |name: &str, shape: Vec<usize>| out.push((format!("{prefix}.{name}"), shape));
        push("ln_g", vec![c]);
        push("ln_b", vec![c]);
        push("wq", vec![c, inner]);
        push("bq", vec![inner]);
        push("wk", vec![c, inner]);
        push("bk", vec![inner]);
        push("wv", vec![c, c]);
        push("bv", vec![c]);
        push("wo", vec![c, c]);
        push("bo", vec![c]);
    }

    pub fn num_parameters(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Per-window predictions and pooled features.
pub type Predictions = (Vec<Array3<f32>>, Vec<Vec<f32>>);

/// Configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct Model<E> {
    pub config: ModelConfig,
    pub params: ParamGroup<E>,
}

impl<E: Element> Model<E> {
    /// Xavier-uniform weights, zero biases, unit norm gains and `N(0, 0.02)`
    /// positional encodings, drawn in f64 so both precisions share values.
    /// Projections that write into the residual stream start at zero, so
    /// every sublayer is initially the identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = Normal::new(0.0, 0.02).expect("valid sigma");
        let mut params = ParamGroup::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or_default();
            let data: Vec<f64> = match leaf {
                "pt" | "ps" => (0..n).map(|_| pos.sample(&mut rng)).collect(),
                "ln_g" => vec![1.0; n],
                _ if leaf == "wo" || name.ends_with("fuse.w") => vec![0.0; n],
                _ if shape.len() == 2 => {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    (0..n).map(|_| u.sample(&mut rng)).collect()
                }
                _ => vec![0.0; n],
            };
            let data = data.into_iter().map(E::from_f64).collect();
            params.insert(name, DTensor::new(&shape, data)?)?;
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamGroup<E>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        for (name, shape) in &expected {
            let t = params.get(name).ok_or_else(|| Error::IncompatibleTensor {
                name: name.clone(),
                expected: shape.clone(),
                found: vec![],
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::IncompatibleTensor {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if params.len() != expected.len() {
            let extra = params
                .names()
                .find(|n| !expected.iter().any(|(e, _)| e == n))
                .unwrap_or_default()
                .to_string();
            return Err(Error::Invalid(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Predicts the future of each past window.
    pub fn predict(&self, pasts: &[&Array3<f32>]) -> Result<Vec<Array3<f32>>> {
        Ok(self.predict_with_features(pasts)?.0)
    }

    /// Predictions plus the FMP output pooled over frames and joints.
    pub fn predict_with_features(&self, pasts: &[&Array3<f32>]) -> Result<Predictions> {
        let mut graph = Graph::new();
        let vars = self.params.bind_where(&mut graph, |_| false);
        let mut net = Net::new(&mut graph, &vars, &self.config);
        let x = net.input(pasts)?;
        let out = net.predict_future(x)?;
        let pooled = net.pool_features(out.hidden)?;
        let (l, j, k) = (self.config.future_frames, self.config.joints, self.config.coord_dims);
        let preds = graph
            .value(out.prediction)
            .chunks_exact(l * j * k)
            .map(|c| Array3::from_shape_vec((l, j, k), c.iter().map(|v| v.as_f64() as f32).collect()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        let feats = graph
            .value(pooled)
            .chunks_exact(self.config.channels)
            .map(|c| c.iter().map(|v| v.as_f64() as f32).collect())
            .collect();
        Ok((preds, feats))
    }

    pub fn cast<F: Element>(&self) -> Model<F> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_count_is_pinned() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.num_parameters(), 1_799_427);
        let m = Model::<f32>::new(cfg, 0).unwrap();
        assert_eq!(m.num_parameters(), 1_799_427);
        let rel: f64 = (1_799_427.0 - 1.66e6) / 1.66e6;
        assert!(rel.abs() < 0.25);
    }

    #[test]
    fn init_is_seeded_and_precision_independent() {
        let cfg = ModelConfig {
            channels: 8,
            heads: 2,
            head_dim: 4,
            joints: 3,
            ..ModelConfig::default()
        };
        let a = Model::<f64>::new(cfg.clone(), 5).unwrap();
        let b = Model::<f32>::new(cfg.clone(), 5).unwrap();
        for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            for (&p, &q) in x.data().iter().zip(y.data()) {
                assert_eq!(p as f32, q);
            }
        }
        let c = Model::<f64>::new(cfg, 6).unwrap();
        assert_ne!(
            a.params.get("pme.0.temporal.wq").unwrap().data(),
            c.params.get("pme.0.temporal.wq").unwrap().data()
        );
    }

    #[test]
    fn from_params_checks_shapes() {
        let cfg = ModelConfig {
            channels: 8,
            heads: 2,
            head_dim: 4,
            joints: 3,
            ..ModelConfig::default()
        };
        let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
        let other = ModelConfig { joints: 4, ..cfg };
        match Model::from_params(other, m.params) {
            Err(Error::IncompatibleTensor { name, .. }) => assert_eq!(name, "past_emb.ps"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let cfg = ModelConfig {
            channels: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}
