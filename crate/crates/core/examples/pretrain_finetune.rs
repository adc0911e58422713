//! Masked pretraining followed by finetuning on a small synthetic set, then
//! held-out MPJPE against the naive baselines.
//!
//! `cargo run --release --example pretrain_finetune -- [pretrain_steps] [finetune_steps]`

use mrl::data::{make_windows, split_every, synth_generate, SkeletonSpec};
use mrl::eval::evaluate;
use mrl::model::{Model, ModelConfig};
use mrl::training::{FinetuneOptions, PretrainOptions, StageOptions, Trainer};

fn main() -> mrl::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("step count"));
    let pretrain_steps = args.next().unwrap_or(200);
    let finetune_steps = args.next().unwrap_or(200);

    let spec = SkeletonSpec::stick_figure();
    let seqs = synth_generate(&spec, 4, 8, 200, 50, 1)?;
    let (train, test) = split_every(&seqs, 4);
    let train = make_windows(&train, 25, 10, 25, 5, Some(spec.root()))?;
    let test = make_windows(&test, 25, 10, 25, 5, Some(spec.root()))?;

    let cfg = ModelConfig {
        channels: 16,
        heads: 4,
        head_dim: 4,
        pme_layers: 1,
        fmp_layers: 1,
        joints: spec.joints(),
        ..ModelConfig::default()
    };
    println!(
        "{} parameters, {} train / {} test windows",
        cfg.num_parameters(),
        train.len(),
        test.len()
    );
    let stage = |steps| StageOptions {
        steps,
        lr: 2e-3,
        batch: 8,
        ..StageOptions::default()
    };

    let mut pre = Trainer::new(Model::new(cfg, 0)?, stage(pretrain_steps), 0)?;
    let stats = pre.run_pretrain(&train, &PretrainOptions::default(), |s| {
        if s.step % 50 == 0 {
            println!("pretrain step {:>4} loss {:.5}", s.step, s.loss);
        }
    })?;
    println!("pretrain final loss {:.5}", stats.last().map_or(f64::NAN, |s| s.loss));

    let mut fine = Trainer::new(pre.model, stage(finetune_steps), 0)?;
    fine.run_finetune(&train, &FinetuneOptions::default(), |s| {
        if s.step % 50 == 0 {
            println!("finetune step {:>4} loss {:.5}", s.step, s.loss);
        }
    })?;

    let report = evaluate(&fine.model, &test, &[80, 160, 320, 400, 560, 1000], 25)?;
    println!("horizon  model   zero-vel const-vel");
    for row in &report.horizons {
        println!(
            "{:>5}ms {:.4}  {:.4}   {:.4}",
            row.horizon_ms, row.mpjpe_model, row.mpjpe_zero_vel, row.mpjpe_const_vel
        );
    }
    Ok(())
}
