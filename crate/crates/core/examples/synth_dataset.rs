//! Generates a synthetic skeleton dataset, writes it as MSEQ files with an
//! index, reads it back and cuts prediction windows.
//!
//! `cargo run --example synth_dataset -- [out_dir]`

use std::path::PathBuf;

use mrl::data::{make_windows, read_dataset, split_every, synth_generate, write_dataset, SkeletonSpec};

fn main() -> mrl::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("mrl-synth"), PathBuf::from);
    let spec = SkeletonSpec::humanoid();
    let seqs = synth_generate(&spec, 4, 4, 150, 50, 7)?;
    let index = write_dataset(&out, &seqs)?;
    println!(
        "wrote {} sequences of {} joints to {}",
        index.len(),
        spec.joints(),
        out.display()
    );

    let back = read_dataset(&out)?;
    let (train, test) = split_every(&back, 4);
    let windows = make_windows(&train, 25, 10, 25, 5, Some(spec.root()))?;
    let held_out = make_windows(&test, 25, 10, 25, 25, Some(spec.root()))?;
    println!(
        "{} training windows, {} held-out windows",
        windows.len(),
        held_out.len()
    );
    let w = &windows[0];
    println!(
        "window 0: past {:?}, future {:?}, class {:?}",
        w.past.dim(),
        w.future.dim(),
        w.label
    );
    Ok(())
}
