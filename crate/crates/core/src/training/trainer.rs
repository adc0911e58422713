use diffcore::{adam_step, cosine_lr, AdamState, CosineSchedule, Graph, ParamGroup};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::losses::{finetune_loss_graph, pretrain_loss_graph};
use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::masking::{add_noise, apply_mask, build_mask, joint_velocity, MaskStrategy};
use crate::model::{Model, Net};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    Mask,
    Denoise,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskOptions {
    pub rate: f64,
    pub strategy: MaskStrategy,
    /// Hide the low-velocity positions instead of the high-velocity ones.
    pub invert: bool,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            rate: 0.75,
            strategy: MaskStrategy::Velocity,
            invert: false,
        }
    }
}

/// Budget and optimizer settings of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOptions {
    pub steps: u64,
    pub lr: f64,
    pub lr_min: f64,
    pub batch: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 5e-4,
            lr_min: 0.0,
            batch: 24,
            grad_clip: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub mode: PretrainMode,
    pub alpha: f64,
    pub noise_sigma: f64,
    pub mask: MaskOptions,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            mode: PretrainMode::Mask,
            alpha: 1.0,
            noise_sigma: 0.05,
            mask: MaskOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneOptions {
    /// Keep the past embedder and PME fixed.
    pub freeze_pme: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// PME forward passes in this step (each covers the whole batch).
    pub pme_passes: usize,
}

/// Epoch-wise shuffled batches without replacement.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SHA-256 over parameter names, shapes and value bits.
pub fn param_hash(params: &ParamGroup<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One optimization stage over a model.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: AdamState<f32>,
    pub step: u64,
    pub options: StageOptions,
    pub seed: u64,
    schedule: CosineSchedule,
}

impl Trainer {
    /// Starts a stage with a fresh optimizer.
    pub fn new(model: Model<f32>, options: StageOptions, seed: u64) -> Result<Self> {
        if options.steps == 0 || options.batch == 0 {
            return Err(Error::Config {
                key: "steps/batch".into(),
                message: "must be >= 1".into(),
            });
        }
        let schedule = CosineSchedule::new(options.lr, options.steps).with_min(options.lr_min);
        Ok(Self {
            model,
            optimizer: AdamState::default(),
            step: 0,
            options,
            seed,
            schedule,
        })
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(&self.schedule, self.step as i64)
    }

    fn sample_seed(&self, w: &SampleWindow, salt: u64) -> u64 {
        mix(
            mix(self.seed, self.step),
            mix(w.source as u64 * 1_000_003 + w.start as u64, salt),
        )
    }

    fn update(
        &mut self,
        mut graph: Graph<f32>,
        vars: diffcore::ParamVars,
        loss: diffcore::Var,
        pme_passes: usize,
    ) -> Result<StepStats> {
        graph.backward(loss)?;
        self.model.params.zero_grad();
        self.model.params.accumulate_grads(&graph, &vars)?;
        let grad_norm = self.model.params.clip_grad_norm(self.options.grad_clip);
        let lr = self.current_lr();
        adam_step(&mut self.model.params, &mut self.optimizer, lr)?;
        let stats = StepStats {
            step: self.step,
            lr,
            loss: graph.value(loss)[0] as f64,
            grad_norm,
            pme_passes,
        };
        self.step += 1;
        Ok(stats)
    }

    /// Masked (or noised) past and future reconstruction, guided by the
    /// encoded complete past.
    pub fn pretrain_step(&mut self, batch: &[&SampleWindow], opts: &PretrainOptions) -> Result<StepStats> {
        if opts.mode == PretrainMode::None {
            return Ok(StepStats {
                step: self.step,
                lr: self.current_lr(),
                loss: 0.0,
                grad_norm: 0.0,
                pme_passes: 0,
            });
        }
        let corrupt = |x: &ndarray::Array3<f32>, seed: u64| -> Result<ndarray::Array3<f32>> {
            match opts.mode {
                PretrainMode::Mask => {
                    let vel = joint_velocity(x)?;
                    let mut plan = build_mask(&vel, opts.mask.rate, opts.mask.strategy, seed)?;
                    if opts.mask.invert {
                        plan = plan.inverted();
                    }
                    apply_mask(x, &plan)
                }
                PretrainMode::Denoise => add_noise(x, opts.noise_sigma, seed),
                PretrainMode::None => Ok(x.clone()),
            }
        };
        let mut past_in = Vec::with_capacity(batch.len());
        let mut future_in = Vec::with_capacity(batch.len());
        for w in batch {
            past_in.push(corrupt(&w.past, self.sample_seed(w, 1))?);
            future_in.push(corrupt(&w.future, self.sample_seed(w, 2))?);
        }
        let pasts: Vec<_> = batch.iter().map(|w| &w.past).collect();
        let futures: Vec<_> = batch.iter().map(|w| &w.future).collect();

        let mut graph = Graph::new();
        let vars = self.model.params.bind(&mut graph);
        let mut net = Net::new(&mut graph, &vars, &self.model.config);
        let xm = net.input(&past_in.iter().collect::<Vec<_>>())?;
        let rec_past = net.reconstruct_past(xm)?;
        let xc = net.input(&pasts)?;
        let h_past = net.encode_past(xc)?;
        let xf = net.input(&future_in.iter().collect::<Vec<_>>())?;
        let rec_future = net.reconstruct_future(xf, Some(h_past))?;
        let gt_future = net.input(&futures)?;
        let passes = net.pme_passes;
        let loss = pretrain_loss_graph(&mut graph, rec_past, xc, rec_future, gt_future, opts.alpha)?;
        self.update(graph, vars, loss, passes)
    }

    /// Future prediction from a zero-initialized future state.
    pub fn finetune_step(&mut self, batch: &[&SampleWindow], opts: &FinetuneOptions) -> Result<StepStats> {
        let pasts: Vec<_> = batch.iter().map(|w| &w.past).collect();
        let futures: Vec<_> = batch.iter().map(|w| &w.future).collect();
        let mut graph = Graph::new();
        let frozen = opts.freeze_pme;
        let vars = self.model.params.bind_where(&mut graph, |n| {
            !(frozen && (n.starts_with("pme.") || n.starts_with("past_emb.")))
        });
        let mut net = Net::new(&mut graph, &vars, &self.model.config);
        let x = net.input(&pasts)?;
        let out = net.predict_future(x)?;
        let gt = net.input(&futures)?;
        let passes = net.pme_passes;
        let loss = finetune_loss_graph(&mut graph, out.prediction, gt)?;
        self.update(graph, vars, loss, passes)
    }

    fn run(
        &mut self,
        windows: &[SampleWindow],
        mut step: impl FnMut(&mut Self, &[&SampleWindow]) -> Result<StepStats>,
        mut on_step: impl FnMut(&StepStats),
    ) -> Result<Vec<StepStats>> {
        if windows.is_empty() {
            return Err(Error::Invalid("no training windows".into()));
        }
        let mut sampler = BatchSampler::new(windows.len(), mix(self.seed, 0x5a3b));
        let mut trace = Vec::new();
        while self.step < self.options.steps {
            let idx = sampler.next_batch(self.options.batch);
            let batch: Vec<&SampleWindow> = idx.iter().map(|&i| &windows[i]).collect();
            let before = self.step;
            let stats = step(self, &batch)?;
            on_step(&stats);
            trace.push(stats);
            if self.step == before {
                break;
            }
        }
        Ok(trace)
    }

    pub fn run_pretrain(
        &mut self,
        windows: &[SampleWindow],
        opts: &PretrainOptions,
        on_step: impl FnMut(&StepStats),
    ) -> Result<Vec<StepStats>> {
        self.run(windows, |t, b| t.pretrain_step(b, opts), on_step)
    }

    pub fn run_finetune(
        &mut self,
        windows: &[SampleWindow],
        opts: &FinetuneOptions,
        on_step: impl FnMut(&StepStats),
    ) -> Result<Vec<StepStats>> {
        self.run(windows, |t, b| t.finetune_step(b, opts), on_step)
    }
}
