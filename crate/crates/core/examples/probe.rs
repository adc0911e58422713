//! Linear probe on pooled predictor features before and after masked
//! pretraining, with a shuffled-label control.
//!
//! `cargo run --release --example probe -- [pretrain_steps]`

use mrl::data::{make_windows, synth_generate, SkeletonSpec};
use mrl::eval::{linear_probe, predict_windows};
use mrl::model::{Model, ModelConfig};
use mrl::training::{PretrainOptions, StageOptions, Trainer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mrl::Result<()> {
    let steps: u64 = std::env::args().nth(1).map_or(200, |s| s.parse().expect("step count"));
    let spec = SkeletonSpec::stick_figure();
    let seqs = synth_generate(&spec, 4, 8, 200, 50, 1)?;
    let windows = make_windows(&seqs, 25, 10, 25, 5, Some(spec.root()))?;
    let labels: Vec<i32> = windows.iter().map(|w| w.label.unwrap_or(0)).collect();
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));

    let cfg = ModelConfig {
        channels: 32,
        heads: 4,
        head_dim: 8,
        pme_layers: 2,
        fmp_layers: 2,
        joints: spec.joints(),
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 9)?;
    let (_, feats) = predict_windows(&model, &windows)?;
    println!("untrained: accuracy {:.3}", linear_probe(&feats, &labels, 0.5, 0)?);

    let stage = StageOptions {
        steps,
        lr: 2e-3,
        batch: 8,
        ..StageOptions::default()
    };
    let mut trainer = Trainer::new(model, stage, 9)?;
    trainer.run_pretrain(&windows, &PretrainOptions::default(), |_| {})?;
    let (_, feats) = predict_windows(&trainer.model, &windows)?;
    println!(
        "pretrained {steps} steps: accuracy {:.3}, shuffled labels {:.3}, chance 0.25",
        linear_probe(&feats, &labels, 0.5, 0)?,
        linear_probe(&feats, &shuffled, 0.5, 0)?
    );
    Ok(())
}
