use ndarray::{s, Array3, Axis};

use crate::error::{Error, Result};

/// A recorded or generated motion: `frames x joints x coords`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    coords: Array3<f32>,
    fps: u32,
    pub class_label: Option<i32>,
}

impl MotionSequence {
    pub fn new(coords: Array3<f32>, fps: u32, class_label: Option<i32>) -> Result<Self> {
        let (frames, joints, dims) = coords.dim();
        if frames < 2 {
            return Err(Error::InvalidSequence(format!("{frames} frames, need at least 2")));
        }
        if joints < 1 || dims < 1 {
            return Err(Error::InvalidSequence(format!("{joints} joints x {dims} coordinates")));
        }
        if fps == 0 {
            return Err(Error::InvalidSequence("fps must be positive".into()));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSequence("non-finite coordinate".into()));
        }
        Ok(Self {
            coords: coords.as_standard_layout().into_owned(),
            fps,
            class_label,
        })
    }

    pub fn coords(&self) -> &Array3<f32> {
        &self.coords
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn frames(&self) -> usize {
        self.coords.dim().0
    }

    pub fn joints(&self) -> usize {
        self.coords.dim().1
    }

    pub fn coord_dims(&self) -> usize {
        self.coords.dim().2
    }
}

/// An observed past window followed directly by the future to predict.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    pub past: Array3<f32>,
    pub future: Array3<f32>,
    pub source: usize,
    pub start: usize,
    pub label: Option<i32>,
}

impl SampleWindow {
    pub fn past_frames(&self) -> usize {
        self.past.dim().0
    }

    pub fn future_frames(&self) -> usize {
        self.future.dim().0
    }

    /// Subtracts the position of `root` at the last past frame from every
    /// frame of both halves.
    pub fn center_on_root(&mut self, root: usize) {
        let anchor = self.past.slice(s![-1, root, ..]).to_owned();
        for mut frame in self.past.axis_iter_mut(Axis(0)) {
            for mut joint in frame.axis_iter_mut(Axis(0)) {
                joint -= &anchor;
            }
        }
        for mut frame in self.future.axis_iter_mut(Axis(0)) {
            for mut joint in frame.axis_iter_mut(Axis(0)) {
                joint -= &anchor;
            }
        }
    }
}

/// Keeps every `fps / target_fps`-th frame, starting with frame 0.
pub fn downsample(seq: &MotionSequence, target_fps: u32) -> Result<MotionSequence> {
    if target_fps == 0 || !seq.fps.is_multiple_of(target_fps) {
        return Err(Error::NonDivisibleRate {
            from: seq.fps,
            to: target_fps,
        });
    }
    let stride = (seq.fps / target_fps) as isize;
    let coords = seq.coords.slice(s![..;stride, .., ..]).to_owned();
    MotionSequence::new(coords, target_fps, seq.class_label)
}

/// Cuts `past_len + future_len` frame windows at offsets `0, stride, ...`.
pub fn window_split(
    seq: &MotionSequence,
    past_len: usize,
    future_len: usize,
    stride: usize,
) -> Result<Vec<SampleWindow>> {
    window_split_tagged(seq, past_len, future_len, stride, 0)
}

pub(crate) fn window_split_tagged(
    seq: &MotionSequence,
    past_len: usize,
    future_len: usize,
    stride: usize,
    source: usize,
) -> Result<Vec<SampleWindow>> {
    if past_len < 2 || future_len < 1 || stride < 1 {
        return Err(Error::Invalid(format!(
            "window_split needs T >= 2, L >= 1, stride >= 1 (got {past_len}, {future_len}, {stride})"
        )));
    }
    let span = past_len + future_len;
    if seq.frames() < span {
        return Ok(Vec::new());
    }
    let count = (seq.frames() - span) / stride + 1;
    Ok((0..count)
        .map(|w| {
            let start = w * stride;
            SampleWindow {
                past: seq.coords.slice(s![start..start + past_len, .., ..]).to_owned(),
                future: seq.coords.slice(s![start + past_len..start + span, .., ..]).to_owned(),
                source,
                start,
                label: seq.class_label,
            }
        })
        .collect())
}

/// Maps a horizon in milliseconds to its 1-based frame in the future window.
pub fn ms_to_frame(ms: u32, fps: u32) -> Result<usize> {
    if fps == 0 || 1000 % fps != 0 {
        return Err(Error::Invalid(format!("frame rate {fps} does not divide 1000 ms")));
    }
    let period = 1000 / fps;
    if ms == 0 || !ms.is_multiple_of(period) {
        return Err(Error::InvalidHorizon {
            ms,
            fps,
            period,
            valid: (1..=fps).map(|i| i * period).collect(),
        });
    }
    Ok((ms / period) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize, joints: usize, fps: u32) -> MotionSequence {
        let coords = Array3::from_shape_fn((frames, joints, 3), |(f, j, k)| (f * 100 + j * 10 + k) as f32);
        MotionSequence::new(coords, fps, Some(1)).unwrap()
    }

    #[test]
    fn rejects_degenerate_sequences() {
        assert!(MotionSequence::new(Array3::zeros((1, 2, 3)), 25, None).is_err());
        assert!(MotionSequence::new(Array3::zeros((4, 2, 0)), 25, None).is_err());
        let mut c = Array3::zeros((4, 2, 3));
        c[[1, 1, 1]] = f32::NAN;
        assert!(MotionSequence::new(c, 25, None).is_err());
    }

    #[test]
    fn downsample_keeps_even_frames() {
        let seq = ramp(100, 2, 50);
        let d = downsample(&seq, 25).unwrap();
        assert_eq!(d.frames(), 50);
        assert_eq!(d.fps(), 25);
        for f in 0..50 {
            assert_eq!(d.coords()[[f, 1, 2]], seq.coords()[[2 * f, 1, 2]]);
        }
        assert_eq!(downsample(&seq, 50).unwrap(), seq);
        assert!(matches!(
            downsample(&seq, 24),
            Err(Error::NonDivisibleRate { from: 50, to: 24 })
        ));
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_split(&ramp(35, 1, 25), 10, 25, 1).unwrap().len(), 1);
        assert!(window_split(&ramp(34, 1, 25), 10, 25, 1).unwrap().is_empty());
        let w = window_split(&ramp(37, 1, 25), 10, 25, 2).unwrap();
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 2]);
        assert!(window_split(&ramp(37, 1, 25), 1, 25, 2).is_err());
    }

    #[test]
    fn future_follows_past() {
        let seq = ramp(40, 2, 25);
        for w in window_split(&seq, 10, 25, 3).unwrap() {
            assert_eq!(w.past[[9, 0, 0]] + 100.0, w.future[[0, 0, 0]]);
            assert_eq!(w.label, Some(1));
        }
    }

    #[test]
    fn horizons_at_25_fps() {
        assert_eq!(ms_to_frame(80, 25).unwrap(), 2);
        assert_eq!(ms_to_frame(1000, 25).unwrap(), 25);
        assert_eq!(ms_to_frame(400, 25).unwrap(), 10);
        let err = ms_to_frame(100, 25).unwrap_err();
        assert!(err.to_string().contains("40"), "{err}");
        assert!(ms_to_frame(0, 25).is_err());
        assert!(ms_to_frame(80, 24).is_err());
    }

    #[test]
    fn centering_zeroes_anchor() {
        let mut w = window_split(&ramp(12, 3, 25), 5, 4, 1).unwrap().remove(0);
        w.center_on_root(0);
        assert!(w.past.slice(s![-1, 0, ..]).iter().all(|&v| v == 0.0));
        assert_eq!(w.future[[0, 0, 0]], 100.0);
    }
}
