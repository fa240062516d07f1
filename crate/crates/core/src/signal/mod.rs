//! Synthetic micro-Doppler data, STFT spectrograms, dataset IO and sliding
//! windows over continuous recordings.

pub(crate) mod dataset;
mod stft;
mod synth;
mod window;

pub use dataset::{
    load_dataset, load_sequence, load_spectrogram, load_spectrogram_checked, make_dataset,
    save_dataset, save_sequence, Dataset, DatasetManifest, Sample,
};
pub use stft::{crop_doppler, stft, stft_power, Spectrogram};
pub use synth::{default_pack, synth_sequence, synth_signal, synth_spectrogram, SynthClass, SynthConfig};
pub use window::{majority_label, sliding_windows, window_count, Frame, WindowSpec};
