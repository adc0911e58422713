//! Prints the velocity mask of one past window as a frame-by-joint grid.
//!
//! `cargo run --example mask_inspect -- [rate]`

use mrl::data::{synth_generate, window_split, SkeletonSpec};
use mrl::masking::{apply_mask, build_mask, joint_velocity, MaskStrategy};

fn main() -> mrl::Result<()> {
    let rate: f64 = std::env::args()
        .nth(1)
        .map_or(0.75, |r| r.parse().expect("rate is a number"));
    let spec = SkeletonSpec::stick_figure();
    let seq = synth_generate(&spec, 1, 1, 40, 25, 3)?.remove(0);
    let window = window_split(&seq, 10, 25, 1)?.remove(0);

    let vel = joint_velocity(&window.past)?;
    for (name, strategy) in [("velocity", MaskStrategy::Velocity), ("random", MaskStrategy::Random)] {
        let plan = build_mask(&vel, rate, strategy, 1)?;
        println!(
            "{name} mask, rate {rate}: {} of {} hidden",
            plan.count(),
            plan.masked.len()
        );
        print!("frame ");
        for j in 0..spec.joints() {
            print!("{:>3}", j);
        }
        println!();
        for (t, row) in plan.masked.rows().into_iter().enumerate() {
            print!("{:>5} ", t + 1);
            for &m in row {
                print!("{:>3}", if m { "#" } else { "." });
            }
            println!();
        }
        let masked = apply_mask(&window.past, &plan)?;
        let zeros = masked.iter().filter(|&&v| v == 0.0).count();
        println!("zeroed coordinates: {zeros}\n");
    }
    Ok(())
}
