use serde::{Deserialize, Serialize};

use super::Spectrogram;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub frame_len: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(frame_len: usize, stride: usize) -> Result<Self> {
        if stride == 0 || stride > frame_len {
            return Err(Error::invalid(format!(
                "window stride must be in 1..={frame_len}, got {stride}"
            )));
        }
        Ok(WindowSpec { frame_len, stride })
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            frame_len: 224,
            stride: 1,
        }
    }
}

/// One window cut from a continuous recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub start: usize,
    pub data: Tensor<f32>,
    pub label: usize,
}

/// `⌊(W − frame)/stride⌋ + 1`, or 0 when the recording is shorter than a frame.
pub fn window_count(width: usize, spec: WindowSpec) -> usize {
    if width < spec.frame_len || spec.stride == 0 {
        0
    } else {
        (width - spec.frame_len) / spec.stride + 1
    }
}

/// Most frequent label; ties go to the larger class index.
pub fn majority_label(labels: &[usize]) -> Option<usize> {
    let max = *labels.iter().max()?;
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let best = *counts.iter().max()?;
    counts.iter().rposition(|&c| c == best)
}

/// Cut `sp` into frames of `spec.frame_len` time bins, labeled by majority.
pub fn sliding_windows(sp: &Spectrogram, spec: WindowSpec) -> Result<Vec<Frame>> {
    WindowSpec::new(spec.frame_len, spec.stride)?;
    let (c, h, w) = (sp.channels(), sp.height(), sp.width());
    if w < spec.frame_len {
        return Err(Error::invalid(format!(
            "recording has {w} time bins, fewer than the {}-bin frame",
            spec.frame_len
        )));
    }
    if sp.label.len() != w {
        return Err(Error::invalid(format!(
            "continuous recording needs {w} per-bin labels, found {}",
            sp.label.len()
        )));
    }
    let fl = spec.frame_len;
    (0..window_count(w, spec))
        .map(|i| {
            let start = i * spec.stride;
            let mut data = Vec::with_capacity(c * h * fl);
            for row in 0..c * h {
                data.extend_from_slice(&sp.data.data()[row * w + start..row * w + start + fl]);
            }
            Ok(Frame {
                start,
                data: Tensor::new([c, h, fl], data)?,
                label: majority_label(&sp.label[start..start + fl]).unwrap_or(0),
            })
        })
        .collect()
}
