use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magnitude spectrogram `[C, H, W]` in `[0, 1]`: H Doppler bins (ascending,
/// zero Doppler at row `H/2`) by W time bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub data: Tensor<f32>,
    pub doppler_hz_per_bin: f64,
    pub seconds_per_bin: f64,
    /// Per-time-bin class labels (length W), or empty when unlabeled.
    pub label: Vec<usize>,
}

impl Spectrogram {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Majority label over the time bins.
    pub fn class(&self) -> Option<usize> {
        super::majority_label(&self.label)
    }

    /// Join along time; channels, height and axis scales must agree.
    pub fn concat_time(parts: &[Spectrogram]) -> Result<Spectrogram> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let (c, h) = (first.channels(), first.height());
        let mut width = 0;
        for p in parts {
            if p.channels() != c || p.height() != h {
                return Err(Error::ShapeMismatch {
                    op: "concat_time",
                    lhs: first.data.shape().to_vec(),
                    rhs: p.data.shape().to_vec(),
                });
            }
            width += p.width();
        }
        let mut data = Vec::with_capacity(c * h * width);
        for row in 0..c * h {
            for p in parts {
                let w = p.width();
                data.extend_from_slice(&p.data.data()[row * w..(row + 1) * w]);
            }
        }
        Ok(Spectrogram {
            data: Tensor::new([c, h, width], data)?,
            doppler_hz_per_bin: first.doppler_hz_per_bin,
            seconds_per_bin: first.seconds_per_bin,
            label: parts.iter().flat_map(|p| p.label.iter().copied()).collect(),
        })
    }
}

fn hann(n: usize) -> Vec<f64> {
    // periodic Hann
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Hann-windowed STFT power `|X|²` as `[fft_len, frames]`, fftshifted so
/// that row `fft_len/2` is zero Doppler.
pub fn stft_power(signal: &[Complex64], fft_len: usize, hop: usize) -> Result<Tensor<f64>> {
    if fft_len == 0 || hop == 0 {
        return Err(Error::invalid("fft_len and hop must be positive"));
    }
    if signal.len() < fft_len {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than one {fft_len}-sample frame",
            signal.len()
        )));
    }
    let frames = (signal.len() - fft_len) / hop + 1;
    let win = hann(fft_len);
    let fft = FftPlanner::new().plan_fft_forward(fft_len);
    let mut out = vec![0.0; fft_len * frames];
    let mut buf = vec![Complex64::default(); fft_len];
    let half = fft_len / 2;
    for f in 0..frames {
        let seg = &signal[f * hop..f * hop + fft_len];
        for ((b, s), w) in buf.iter_mut().zip(seg).zip(&win) {
            *b = s * w;
        }
        fft.process(&mut buf);
        for (k, v) in buf.iter().enumerate() {
            let row = (k + half) % fft_len;
            out[row * frames + f] = v.norm_sqr();
        }
    }
    Tensor::new([fft_len, frames], out)
}

/// STFT magnitude in dB, clipped `dynamic_range_db` below the peak and
/// scaled to `[0, 1]`. Output is `[1, fft_len, frames]`.
pub fn stft(
    signal: &[Complex64],
    sample_rate: f64,
    fft_len: usize,
    hop: usize,
    dynamic_range_db: f64,
) -> Result<Spectrogram> {
    let power = stft_power(signal, fft_len, hop)?;
    let peak = power.data().iter().copied().fold(0.0, f64::max);
    let frames = power.shape()[1];
    let data = if peak > 0.0 {
        let top = 10.0 * peak.log10();
        let floor = top - dynamic_range_db;
        power
            .data()
            .iter()
            .map(|&p| {
                let db = if p > 0.0 { 10.0 * p.log10() } else { f64::NEG_INFINITY };
                ((db.max(floor) - floor) / dynamic_range_db) as f32
            })
            .collect()
    } else {
        vec![0.0; power.len()]
    };
    Ok(Spectrogram {
        data: Tensor::new([1, fft_len, frames], data)?,
        doppler_hz_per_bin: sample_rate / fft_len as f64,
        seconds_per_bin: hop as f64 / sample_rate,
        label: Vec::new(),
    })
}

/// Keep the centred `height` Doppler rows (zero Doppler stays at `height/2`).
pub fn crop_doppler(sp: &Spectrogram, height: usize) -> Result<Spectrogram> {
    let (c, h, w) = (sp.channels(), sp.height(), sp.width());
    if height == 0 || height > h {
        return Err(Error::invalid(format!("cannot crop {h} Doppler bins to {height}")));
    }
    let start = h / 2 - height / 2;
    let mut data = Vec::with_capacity(c * height * w);
    for ch in 0..c {
        let base = ch * h * w;
        data.extend_from_slice(&sp.data.data()[base + start * w..base + (start + height) * w]);
    }
    Ok(Spectrogram {
        data: Tensor::new([c, height, w], data)?,
        ..sp.clone()
    })
}
