//! Imports a CSV motion clip (one frame per row), stores it as MSEQ and
//! reads it back.

use mrl::data::{csv_import, downsample, read_sequence, write_sequence};

fn main() -> mrl::Result<()> {
    let dir = std::env::temp_dir().join("mrl-csv-example");
    std::fs::create_dir_all(&dir).map_err(|e| mrl::Error::io(&dir, e))?;
    let csv = dir.join("clip.csv");
    let mut text = String::from("hip_x,hip_y,hip_z,knee_x,knee_y,knee_z\n");
    for f in 0..50 {
        let t = f as f32 / 50.0;
        text.push_str(&format!("{t},1,0,{t},{},0.1\n", 0.5 + 0.1 * (6.0 * t).sin()));
    }
    std::fs::write(&csv, text).map_err(|e| mrl::Error::io(&csv, e))?;

    let seq = csv_import(&csv, 50, 2, 3)?;
    println!(
        "imported {} frames x {} joints at {} fps",
        seq.frames(),
        seq.joints(),
        seq.fps()
    );
    let mseq = dir.join("clip.mseq");
    write_sequence(&mseq, &seq)?;
    let back = read_sequence(&mseq)?;
    println!("MSEQ round trip equal: {}", back.coords() == seq.coords());
    let slow = downsample(&back, 25)?;
    println!("downsampled to {} fps: {} frames", slow.fps(), slow.frames());
    Ok(())
}
