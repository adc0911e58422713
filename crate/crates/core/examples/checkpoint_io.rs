//! Saves a trained model with its optimizer state, reloads it and checks
//! that predictions are bit-identical. A checkpoint for a different
//! skeleton is rejected with the offending tensor named.

use mrl::data::{make_windows, synth_generate, SkeletonSpec};
use mrl::model::{Model, ModelConfig};
use mrl::training::{load_checkpoint, save_checkpoint, Checkpoint, FinetuneOptions, StageOptions, Trainer};

fn main() -> mrl::Result<()> {
    let spec = SkeletonSpec::stick_figure();
    let seqs = synth_generate(&spec, 2, 2, 100, 50, 4)?;
    let windows = make_windows(&seqs, 25, 10, 25, 5, Some(spec.root()))?;
    let cfg = ModelConfig {
        channels: 16,
        heads: 2,
        head_dim: 8,
        pme_layers: 1,
        fmp_layers: 1,
        joints: spec.joints(),
        ..ModelConfig::default()
    };
    let stage = StageOptions {
        steps: 20,
        lr: 1e-3,
        batch: 4,
        ..StageOptions::default()
    };
    let mut trainer = Trainer::new(Model::new(cfg.clone(), 0)?, stage, 0)?;
    trainer.run_finetune(&windows, &FinetuneOptions::default(), |_| {})?;

    let dir = std::env::temp_dir().join("mrl-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| mrl::Error::io(&dir, e))?;
    let path = dir.join("model.mckp");
    let ckpt = Checkpoint {
        model: trainer.model,
        optimizer: trainer.optimizer,
        step: trainer.step,
        seed: 0,
        run_config: serde_json::json!({"example": "checkpoint_io"}),
    };
    save_checkpoint(&path, &ckpt)?;
    let back = load_checkpoint(&path, Some(&cfg))?;

    let pasts: Vec<_> = windows.iter().map(|w| &w.past).collect();
    let a = ckpt.model.predict(&pasts)?;
    let b = back.model.predict(&pasts)?;
    let identical = a
        .iter()
        .zip(&b)
        .all(|(x, y)| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    println!(
        "{} (step {}), predictions bit-identical: {identical}",
        path.display(),
        back.step
    );

    let other = ModelConfig { joints: 22, ..cfg };
    match load_checkpoint(&path, Some(&other)) {
        Err(e) => println!("loading into a 22-joint model: {e}"),
        Ok(_) => println!("unexpectedly loaded"),
    }
    Ok(())
}
