//! Parses a run configuration, shows the resolved model and stage settings
//! and how a bad value is reported.

use mrl::config::parse_config_str;

fn main() -> mrl::Result<()> {
    let cfg = parse_config_str(
        r#"{
            "model": {"channels": 64, "heads": 4, "head_dim": 16},
            "mask": {"rate": 0.5, "strategy": "random"},
            "pretrain": {"steps": 500},
            "seed": 3
        }"#,
    )?;
    let model = cfg.model_config(22);
    println!("model: {model:?}");
    println!("parameters: {}", model.num_parameters());
    println!("pretrain: {:?}", cfg.pretrain_stage());
    println!("pretrain options: {:?}", cfg.pretrain_options());
    println!("resolved json: {}", cfg.to_json());

    for bad in [r#"{"mask": {"rate": 1.5}}"#, r#"{"model": {"chanels": 8}}"#] {
        match parse_config_str(bad) {
            Err(e) => println!("{bad} -> {e}"),
            Ok(_) => println!("{bad} -> accepted"),
        }
    }
    Ok(())
}
