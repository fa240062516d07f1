use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trainer::batch_logits;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::ExecPolicy;
use crate::signal::{sliding_windows, Spectrogram, WindowSpec};
use crate::tensor::{Scalar, Tensor};

/// One row of the time-aligned prediction track.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackRow {
    pub window_start_bin: usize,
    pub predicted_class: usize,
    pub true_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousEval {
    pub track: Vec<TrackRow>,
    /// Fraction of windows whose prediction equals the majority label.
    pub accuracy: f64,
}

/// Frame-wise classification of a labeled continuous recording.
pub fn eval_continuous<T: Scalar>(
    model: &Model<T>,
    recording: &Spectrogram,
    spec: WindowSpec,
    policy: ExecPolicy,
) -> Result<ContinuousEval> {
    let frames = sliding_windows(recording, spec)?;
    let xs: Vec<Tensor<T>> = frames.iter().map(|f| f.data.cast()).collect();
    let refs: Vec<&Tensor<T>> = xs.iter().collect();
    let q = model.cfg.n_classes;
    let logits = batch_logits(model, &refs, policy)?;
    let track: Vec<TrackRow> = frames
        .iter()
        .zip(logits.chunks(q))
        .map(|(f, row)| TrackRow {
            window_start_bin: f.start,
            predicted_class: row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0,
            true_class: f.label,
        })
        .collect();
    let hits = track.iter().filter(|r| r.predicted_class == r.true_class).count();
    Ok(ContinuousEval {
        accuracy: hits as f64 / track.len() as f64,
        track,
    })
}

pub fn write_track(path: impl AsRef<Path>, track: &[TrackRow]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in track {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    fn recording(w: usize, labels: Vec<usize>) -> Spectrogram {
        Spectrogram {
            data: Tensor::full([1, 224, w], 0.25),
            doppler_hz_per_bin: 1.0,
            seconds_per_bin: 1.0,
            label: labels,
        }
    }

    #[test]
    fn counts_windows_and_scores_constant_model() {
        let mut cfg = presets::uog20();
        cfg.n_classes = 2;
        let mut model = Model::<f32>::init(cfg, 0).unwrap();
        // A head with zero weights and a biased class 1 always predicts 1.
        let head = model.store.get_mut("head.weight").unwrap();
        *head = Tensor::zeros(head.shape().to_vec());
        *model.store.get_mut("head.bias").unwrap() = Tensor::from_f64([2], &[0.0, 1.0]).unwrap();
        let rec = recording(226, vec![1; 226]);
        let out = eval_continuous(&model, &rec, WindowSpec::default(), ExecPolicy::default()).unwrap();
        assert_eq!(out.track.len(), 3);
        assert_eq!(out.accuracy, 1.0);
        let starts: Vec<usize> = out.track.iter().map(|r| r.window_start_bin).collect();
        assert_eq!(starts, vec![0, 1, 2]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.csv");
        write_track(&path, &out.track).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("window_start_bin,predicted_class,true_class"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn short_recording_is_an_error() {
        let model = Model::<f32>::init(presets::uog20(), 0).unwrap();
        let rec = recording(100, vec![0; 100]);
        assert!(eval_continuous(&model, &rec, WindowSpec::default(), ExecPolicy::Sequential).is_err());
    }
}
