use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{synth_spectrogram, SynthClass, SynthConfig};
use super::Spectrogram;
use crate::error::{Error, Result};
use crate::par::{self, ExecPolicy};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const MANIFEST: &str = "dataset.json";
pub const LABELS: &str = "labels.csv";
pub const SEQUENCE: &str = "sequence.rmt";

/// One classification example, `[C,H,W]` in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub data: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn input_shape(&self) -> Option<[usize; 3]> {
        self.samples.first().map(|s| {
            let sh = s.data.shape();
            [sh[0], sh[1], sh[2]]
        })
    }
}

/// Contents of `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub doppler_hz_per_bin: f64,
    pub seconds_per_bin: f64,
    pub seed: Option<u64>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    /// Sample paths relative to the dataset root.
    pub train: Vec<String>,
    pub test: Vec<String>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-class shuffle, first `round(n·ratio)` to train.
pub(crate) fn stratified_split(
    by_class: &[Vec<usize>],
    ratio: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in by_class {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        let k = ((m.len() as f64) * ratio).round() as usize;
        train.extend_from_slice(&m[..k.min(m.len())]);
        test.extend_from_slice(&m[k.min(m.len())..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("split ratio must be in [0, 1], got {ratio}")));
    }
    if ratio == 1.0 {
        log::warn!("split ratio 1.0 leaves the test set empty");
    }
    Ok(())
}

/// Synthesize `n_per_class` samples per class and split them per class.
pub fn make_dataset(
    classes: &[SynthClass],
    n_per_class: usize,
    split_ratio: f64,
    seed: u64,
    cfg: &SynthConfig,
    policy: ExecPolicy,
) -> Result<(Dataset, Dataset)> {
    if classes.is_empty() {
        return Err(Error::invalid("class list is empty"));
    }
    if n_per_class < 2 {
        return Err(Error::invalid("need at least 2 samples per class"));
    }
    check_ratio(split_ratio)?;
    cfg.validate()?;
    let total = classes.len() * n_per_class;
    let generated = par::map_indices(policy, total, |k| {
        let (c, i) = (k / n_per_class, k % n_per_class);
        synth_spectrogram(&classes[c], c, cfg, mix(seed, c as u64, i as u64)).map(|sp| Sample {
            id: format!("{}_{i:04}", classes[c].name),
            data: sp.data,
            label: c,
        })
    });
    let samples: Vec<Sample> = generated.into_iter().collect::<Result<_>>()?;
    let by_class: Vec<Vec<usize>> = (0..classes.len())
        .map(|c| (c * n_per_class..(c + 1) * n_per_class).collect())
        .collect();
    let (tr, te) = stratified_split(&by_class, split_ratio, seed);
    let names: Vec<String> = classes.iter().map(|c| c.name.clone()).collect();
    let pick = |idx: &[usize]| Dataset {
        classes: names.clone(),
        samples: idx.iter().map(|&i| samples[i].clone()).collect(),
    };
    Ok((pick(&tr), pick(&te)))
}

fn rel_path(classes: &[String], s: &Sample) -> String {
    format!("{}/{}.rmt", classes[s.label], s.id)
}

/// Write `<root>/<class>/<id>.rmt` for every sample plus `dataset.json`.
pub fn save_dataset(
    root: &Path,
    train: &Dataset,
    test: &Dataset,
    manifest_extra: (f64, f64, Option<u64>, Option<SynthConfig>),
) -> Result<DatasetManifest> {
    for class in &train.classes {
        let dir = root.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in train.samples.iter().chain(&test.samples) {
        write_tensor(&s.data, root.join(rel_path(&train.classes, s)))?;
    }
    let (doppler_hz_per_bin, seconds_per_bin, seed, synth) = manifest_extra;
    let manifest = DatasetManifest {
        classes: train.classes.clone(),
        doppler_hz_per_bin,
        seconds_per_bin,
        seed,
        synth,
        train: train.samples.iter().map(|s| rel_path(&train.classes, s)).collect(),
        test: test.samples.iter().map(|s| rel_path(&train.classes, s)).collect(),
    };
    let path = root.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn load_sample(root: &Path, rel: &str, classes: &[String]) -> Result<Sample> {
    let path = root.join(rel);
    let class = rel.split('/').next().unwrap_or_default();
    let label = classes
        .iter()
        .position(|c| c == class)
        .ok_or_else(|| Error::format(&path, format!("class {class:?} not in manifest")))?;
    let id = Path::new(rel)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sample {
        id,
        data: load_spectrogram(&path)?,
        label,
    })
}

fn sample_files(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && matches!(ext.to_ascii_lowercase().as_str(), "rmt" | "png") {
            out.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

/// Load a dataset directory. With a `dataset.json` its recorded split is
/// used; otherwise class directories are discovered (sorted by name) and
/// split per class with `split_ratio` and `seed`.
pub fn load_dataset(
    root: &Path,
    split_ratio: f64,
    seed: u64,
    policy: ExecPolicy,
) -> Result<(Dataset, Dataset)> {
    let manifest_path = root.join(MANIFEST);
    let (classes, train_rel, test_rel) = if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        (m.classes, m.train, m.test)
    } else {
        check_ratio(split_ratio)?;
        let mut classes = Vec::new();
        for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let path = entry.map_err(|e| Error::io(root, e))?.path();
            if path.is_dir() {
                classes.push(path.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
        classes.sort();
        if classes.is_empty() {
            return Err(Error::format(root, "no class directories found"));
        }
        let mut all = Vec::new();
        let mut by_class = Vec::new();
        for c in &classes {
            let files = sample_files(&root.join(c))?;
            by_class.push((all.len()..all.len() + files.len()).collect());
            all.extend(files.into_iter().map(|f| format!("{c}/{f}")));
        }
        let (tr, te) = stratified_split(&by_class, split_ratio, seed);
        let pick = |idx: Vec<usize>| idx.into_iter().map(|i| all[i].clone()).collect();
        (classes, pick(tr), pick(te))
    };
    let load = |rels: &[String]| -> Result<Dataset> {
        let samples = par::map_slice(policy, rels, |r| load_sample(root, r, &classes))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            classes: classes.clone(),
            samples,
        })
    };
    let (train, test) = (load(&train_rel)?, load(&test_rel)?);
    let shapes: Vec<_> = train.samples.iter().chain(&test.samples).map(|s| s.data.shape()).collect();
    if let Some(first) = shapes.first() {
        if let Some(bad) = shapes.iter().find(|s| s != &first) {
            return Err(Error::format(
                root,
                format!("inconsistent sample shapes {first:?} and {bad:?}"),
            ));
        }
    }
    Ok((train, test))
}

/// Read one spectrogram: an `.rmt` tensor (`[H,W]` or `[C,H,W]`) or an
/// 8-bit PNG (gray → 1 channel, colour → 3 channels), scaled to `[0,1]`.
pub fn load_spectrogram(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let t = match ext.as_str() {
        "png" => {
            let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            let (c, bytes) = if img.color().has_color() {
                (3, img.to_rgb8().into_raw())
            } else {
                (1, img.to_luma8().into_raw())
            };
            // interleaved HWC -> planar CHW
            let mut data = vec![0f32; c * h * w];
            for (i, &b) in bytes.iter().enumerate() {
                let (pix, ch) = (i / c, i % c);
                data[ch * h * w + pix] = b as f32 / 255.0;
            }
            Tensor::new([c, h, w], data)?
        }
        _ => {
            let t = read_tensor(path)?.into_precision::<f32>();
            match t.rank() {
                2 => {
                    let sh = t.shape().to_vec();
                    t.reshape([1, sh[0], sh[1]])?
                }
                3 => t,
                r => return Err(Error::format(path, format!("expected rank 2 or 3, found {r}"))),
            }
        }
    };
    if !t.all_finite() {
        return Err(Error::format(path, "non-finite values"));
    }
    Ok(t)
}

/// [`load_spectrogram`] plus a check against the expected `[C,H,W]`.
pub fn load_spectrogram_checked(path: impl AsRef<Path>, expected: [usize; 3]) -> Result<Tensor<f32>> {
    let t = load_spectrogram(path.as_ref())?;
    if t.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "load_spectrogram",
            lhs: expected.to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    Ok(t)
}

/// Write a continuous recording as `<dir>/sequence.rmt` + `<dir>/labels.csv`.
pub fn save_sequence(dir: &Path, sp: &Spectrogram) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensor(&sp.data, dir.join(SEQUENCE))?;
    let path = dir.join(LABELS);
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&path)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    for (t, l) in sp.label.iter().enumerate() {
        w.write_record([t.to_string(), l.to_string()])
            .map_err(|e| Error::format(&path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Read a continuous recording: `path` is the tensor/PNG file or a directory
/// holding `sequence.rmt`; labels come from the sibling `labels.csv`.
pub fn load_sequence(path: &Path) -> Result<Spectrogram> {
    let (file, dir): (PathBuf, PathBuf) = if path.is_dir() {
        (path.join(SEQUENCE), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().unwrap_or(Path::new(".")).to_path_buf())
    };
    let data = load_spectrogram(&file)?;
    let width = data.shape()[2];
    let lpath = dir.join(LABELS);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(&lpath)
        .map_err(|e| Error::format(&lpath, e.to_string()))?;
    let mut by_bin = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(&lpath, e.to_string()))?;
        let parse = |i: usize| -> Result<usize> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(&lpath, format!("bad record {rec:?}")))
        };
        if rec.get(0).is_some_and(|v| v.eq_ignore_ascii_case("time_bin")) {
            continue;
        }
        by_bin.insert(parse(0)?, parse(1)?);
    }
    let label: Vec<usize> = by_bin.into_values().collect();
    if label.len() != width {
        return Err(Error::format(
            &lpath,
            format!("{} labels for {width} time bins", label.len()),
        ));
    }
    Ok(Spectrogram {
        data,
        doppler_hz_per_bin: 1.0,
        seconds_per_bin: 1.0,
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::default_pack;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            fft_len: 64,
            hop: 16,
            width: 16,
            height: 32,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn split_counts() {
        let (tr, te) =
            make_dataset(&default_pack(), 60, 0.8, 1, &small_cfg(), ExecPolicy::default()).unwrap();
        assert_eq!((tr.len(), te.len()), (192, 48));
        assert_eq!(tr.class_counts(), vec![48; 4]);
        assert_eq!(te.class_counts(), vec![12; 4]);
        let ids: std::collections::HashSet<_> = tr.samples.iter().map(|s| &s.id).collect();
        assert!(te.samples.iter().all(|s| !ids.contains(&s.id)));
    }

    #[test]
    fn deterministic_and_policy_independent() {
        let cfg = small_cfg();
        let a = make_dataset(&default_pack(), 4, 0.5, 9, &cfg, ExecPolicy::Parallel).unwrap();
        let b = make_dataset(&default_pack(), 4, 0.5, 9, &cfg, ExecPolicy::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_ratio_leaves_empty_test() {
        let (tr, te) =
            make_dataset(&default_pack(), 3, 1.0, 0, &small_cfg(), ExecPolicy::Sequential).unwrap();
        assert_eq!(tr.len(), 12);
        assert!(te.is_empty());
    }

    #[test]
    fn empty_class_list_rejected() {
        assert!(make_dataset(&[], 3, 0.8, 0, &small_cfg(), ExecPolicy::Sequential).is_err());
    }

    #[test]
    fn save_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, te) =
            make_dataset(&default_pack()[..2], 5, 0.6, 3, &small_cfg(), ExecPolicy::Sequential)
                .unwrap();
        save_dataset(dir.path(), &tr, &te, (1.0, 1.0, Some(3), None)).unwrap();
        let (tr2, te2) = load_dataset(dir.path(), 0.8, 0, ExecPolicy::Sequential).unwrap();
        assert_eq!((tr, te), (tr2, te2));
    }

    #[test]
    fn png_gray_and_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let gray = image::GrayImage::from_fn(5, 4, |x, y| image::Luma([(x * 50 + y) as u8]));
        gray.save(dir.path().join("g.png")).unwrap();
        let t = load_spectrogram_checked(dir.path().join("g.png"), [1, 4, 5]).unwrap();
        assert_eq!(t.at(&[0, 1, 2]), 101.0 / 255.0);
        let rgb = image::RgbImage::from_fn(3, 2, |x, _| image::Rgb([255, x as u8, 0]));
        rgb.save(dir.path().join("c.png")).unwrap();
        let t = load_spectrogram(dir.path().join("c.png")).unwrap();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(t.at(&[0, 1, 1]), 1.0);
        assert_eq!(t.at(&[1, 0, 2]), 2.0 / 255.0);
        assert!(load_spectrogram_checked(dir.path().join("c.png"), [1, 2, 3]).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.rmt");
        write_tensor(&Tensor::<f32>::ones([1, 4, 4]), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_spectrogram(&p).is_err());
        fs::write(dir.path().join("y.png"), b"\x89PNG\r\n").unwrap();
        assert!(load_spectrogram(dir.path().join("y.png")).is_err());
    }

    #[test]
    fn sequence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let sp = Spectrogram {
            data: Tensor::new([1, 2, 3], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap(),
            doppler_hz_per_bin: 1.0,
            seconds_per_bin: 1.0,
            label: vec![1, 1, 0],
        };
        save_sequence(dir.path(), &sp).unwrap();
        assert_eq!(load_sequence(dir.path()).unwrap(), sp);
    }
}
