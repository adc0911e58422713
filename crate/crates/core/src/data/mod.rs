//! Motion sequences, file formats and synthetic data.

mod csv_import;
mod mseq;
mod sequence;
mod synth;

pub use csv_import::{csv_import, csv_import_reader};
pub use mseq::{
    decode_sequence, encode_sequence, read_dataset, read_sequence, write_dataset, write_sequence, IndexEntry,
    MSEQ_MAGIC, MSEQ_VERSION,
};
pub(crate) use sequence::window_split_tagged;
pub use sequence::{downsample, ms_to_frame, window_split, MotionSequence, SampleWindow};
pub use synth::{synth_generate, SkeletonSpec};

use crate::error::Result;

/// Downsamples every sequence to `fps` and cuts windows, tagging each with
/// the index of its source sequence. With `center_root`, each window is
/// expressed relative to that joint at its last past frame.
pub fn make_windows(
    seqs: &[MotionSequence],
    fps: u32,
    past_len: usize,
    future_len: usize,
    stride: usize,
    center_root: Option<usize>,
) -> Result<Vec<SampleWindow>> {
    let mut out = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        let seq = downsample(seq, fps)?;
        for mut w in window_split_tagged(&seq, past_len, future_len, stride, i)? {
            if let Some(root) = center_root {
                w.center_on_root(root);
            }
            out.push(w);
        }
    }
    Ok(out)
}

/// Splits sequences so every `test_every`-th one (counting from 0) is held out.
pub fn split_every(seqs: &[MotionSequence], test_every: usize) -> (Vec<MotionSequence>, Vec<MotionSequence>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in seqs.iter().enumerate() {
        if test_every > 0 && i % test_every == test_every - 1 {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, test)
}
