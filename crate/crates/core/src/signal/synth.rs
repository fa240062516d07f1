use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::stft::{crop_doppler, stft, Spectrogram};
use crate::error::{Error, Result};

/// Parametric target: a bulk Doppler line (optionally chirping) plus one
/// sinusoidally swinging limb component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub bulk_velocity_hz: f64,
    pub limb_amp_hz: f64,
    pub limb_rate_hz: f64,
    /// Noise power relative to the unit-amplitude limb return; `-inf` disables it.
    pub noise_db: f64,
    /// Linear drift of the bulk line, for falls and other accelerating motion.
    #[serde(default)]
    pub bulk_chirp_hz_per_s: f64,
}

impl SynthClass {
    fn peak_hz(&self, duration_s: f64) -> f64 {
        let f_end = self.bulk_velocity_hz + self.bulk_chirp_hz_per_s * duration_s;
        self.bulk_velocity_hz.abs().max(f_end.abs()) + self.limb_amp_hz.abs()
    }

    /// Multiplicative jitter of the kinematic parameters, `±frac` uniform.
    fn jittered<R: Rng>(&self, frac: f64, rng: &mut R) -> SynthClass {
        let mut j = |v: f64| v * (1.0 + frac * (2.0 * rng.random::<f64>() - 1.0));
        SynthClass {
            name: self.name.clone(),
            bulk_velocity_hz: j(self.bulk_velocity_hz),
            limb_amp_hz: j(self.limb_amp_hz),
            limb_rate_hz: j(self.limb_rate_hz),
            noise_db: self.noise_db,
            bulk_chirp_hz_per_s: j(self.bulk_chirp_hz_per_s),
        }
    }
}

/// The four-class default pack: idle, walk, wave and a fall-like chirp.
pub fn default_pack() -> Vec<SynthClass> {
    let c = |name: &str, fb, amp, rate, chirp| SynthClass {
        name: name.to_string(),
        bulk_velocity_hz: fb,
        limb_amp_hz: amp,
        limb_rate_hz: rate,
        noise_db: -25.0,
        bulk_chirp_hz_per_s: chirp,
    };
    vec![
        c("idle", 0.0, 8.0, 0.5, 0.0),
        c("walk", 90.0, 120.0, 1.8, 0.0),
        c("wave", -20.0, 230.0, 0.8, 0.0),
        c("fall", 20.0, 40.0, 3.0, -140.0),
    ]
}

/// Radar and STFT settings shared by every synthesized sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub sample_rate: f64,
    pub fft_len: usize,
    pub hop: usize,
    /// Time bins per spectrogram.
    pub width: usize,
    /// Doppler bins kept after the centred crop.
    pub height: usize,
    pub dynamic_range_db: f64,
    /// Relative per-sample jitter of class parameters.
    pub jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sample_rate: 1000.0,
            fft_len: 256,
            hop: 8,
            width: 224,
            height: 224,
            dynamic_range_db: 40.0,
            jitter: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn samples_for(&self, width: usize) -> usize {
        self.fft_len + (width.max(1) - 1) * self.hop
    }

    pub fn duration_for(&self, width: usize) -> f64 {
        self.samples_for(width) as f64 / self.sample_rate
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.sample_rate > 0.0) {
            errs.push(format!("sample_rate must be positive, got {}", self.sample_rate));
        }
        if self.fft_len < 2 || self.hop == 0 || self.width == 0 {
            errs.push("fft_len ≥ 2, hop ≥ 1 and width ≥ 1 are required".to_string());
        }
        if self.height == 0 || self.height > self.fft_len {
            errs.push(format!("height must be in 1..={}", self.fft_len));
        }
        if !(self.dynamic_range_db > 0.0) {
            errs.push("dynamic_range_db must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

/// Complex baseband return of one target. The instantaneous frequency is
/// `f_b + k·t + A·sin(2π r t)`; a torso line at half amplitude follows the
/// bulk motion and complex white noise is added at `noise_db`.
pub fn synth_signal(
    cls: &SynthClass,
    duration_s: f64,
    sample_rate: f64,
    seed: u64,
) -> Result<Vec<Complex64>> {
    if !(cls.limb_rate_hz > 0.0) {
        return Err(Error::invalid(format!(
            "class {:?}: limb_rate_hz must be positive",
            cls.name
        )));
    }
    let peak = cls.peak_hz(duration_s);
    if !(sample_rate > 2.0 * peak) {
        return Err(Error::invalid(format!(
            "class {:?}: sample rate {sample_rate} Hz violates Nyquist for a {peak} Hz peak Doppler",
            cls.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase0 = 2.0 * PI * rng.random::<f64>();
    let swing0 = 2.0 * PI * rng.random::<f64>();
    let sigma = if cls.noise_db.is_finite() {
        (10f64.powf(cls.noise_db / 10.0) / 2.0).sqrt()
    } else {
        0.0
    };
    let n = (duration_s * sample_rate).round() as usize;
    let (fb, k, a, r) = (
        cls.bulk_velocity_hz,
        cls.bulk_chirp_hz_per_s,
        cls.limb_amp_hz,
        cls.limb_rate_hz,
    );
    let out = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate;
            let bulk = 2.0 * PI * (fb * t + 0.5 * k * t * t) + phase0;
            let swing = if a == 0.0 {
                0.0
            } else {
                -(a / r) * ((2.0 * PI * r * t + swing0).cos() - swing0.cos())
            };
            let mut s = Complex64::from_polar(1.0, bulk + swing) + Complex64::from_polar(0.5, bulk);
            if sigma > 0.0 {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                s += Complex64::new(sigma * re, sigma * im);
            }
            s
        })
        .collect();
    Ok(out)
}

/// One labeled spectrogram of `cfg.width` time bins for class `label`.
pub fn synth_spectrogram(
    cls: &SynthClass,
    label: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Spectrogram> {
    synth_block(cls, label, cfg, cfg.width, seed)
}

fn synth_block(
    cls: &SynthClass,
    label: usize,
    cfg: &SynthConfig,
    width: usize,
    seed: u64,
) -> Result<Spectrogram> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jittered = cls.jittered(cfg.jitter, &mut rng);
    let sig = synth_signal(
        &jittered,
        cfg.duration_for(width),
        cfg.sample_rate,
        rng.random(),
    )?;
    let mut sp = stft(&sig, cfg.sample_rate, cfg.fft_len, cfg.hop, cfg.dynamic_range_db)?;
    sp = crop_doppler(&sp, cfg.height)?;
    sp.label = vec![label; width];
    Ok(sp)
}

/// Continuous recording built from consecutive `(class index, time bins)`
/// segments, each synthesized and normalized independently.
pub fn synth_sequence(
    classes: &[SynthClass],
    segments: &[(usize, usize)],
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Spectrogram> {
    if segments.is_empty() {
        return Err(Error::invalid("synth_sequence needs at least one segment"));
    }
    let mut parts = Vec::with_capacity(segments.len());
    for (i, &(cls, bins)) in segments.iter().enumerate() {
        let c = classes.get(cls).ok_or(Error::LabelOutOfRange {
            label: cls,
            classes: classes.len(),
        })?;
        parts.push(synth_block(c, cls, cfg, bins, seed.wrapping_add(i as u64 * 0x9E37_79B9))?);
    }
    Spectrogram::concat_time(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(fb: f64) -> SynthClass {
        SynthClass {
            name: "tone".into(),
            bulk_velocity_hz: fb,
            limb_amp_hz: 0.0,
            limb_rate_hz: 1.0,
            noise_db: f64::NEG_INFINITY,
            bulk_chirp_hz_per_s: 0.0,
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let c = &default_pack()[1];
        let a = synth_signal(c, 0.5, 1000.0, 7).unwrap();
        let b = synth_signal(c, 0.5, 1000.0, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_signal(c, 0.5, 1000.0, 8).unwrap());
    }

    #[test]
    fn nyquist_violation_rejected() {
        let err = synth_signal(&tone(600.0), 1.0, 1000.0, 0).unwrap_err();
        assert!(err.to_string().contains("Nyquist"));
    }

    #[test]
    fn idle_tone_is_constant_magnitude() {
        let s = synth_signal(&tone(0.0), 0.1, 1000.0, 1).unwrap();
        assert!(s.iter().all(|v| (v.norm() - 1.5).abs() < 1e-12));
    }

    #[test]
    fn default_pack_fits_the_crop() {
        let cfg = SynthConfig::default();
        let half = cfg.height as f64 / 2.0 * cfg.sample_rate / cfg.fft_len as f64;
        for c in default_pack() {
            let peak = c.peak_hz(cfg.duration_for(cfg.width)) * (1.0 + cfg.jitter);
            assert!(peak < half, "{} peaks at {peak} Hz", c.name);
        }
    }

    #[test]
    fn sequence_labels_follow_segments() {
        let cfg = SynthConfig {
            height: 32,
            fft_len: 64,
            ..SynthConfig::default()
        };
        let sp = synth_sequence(&default_pack()[..2], &[(0, 5), (1, 3)], &cfg, 4).unwrap();
        assert_eq!(sp.data.shape(), &[1, 32, 8]);
        assert_eq!(sp.label, vec![0, 0, 0, 0, 0, 1, 1, 1]);
    }
}
