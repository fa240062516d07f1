//! The ten acceptance criteria. Each prints one PASS/FAIL line; the process
//! fails when the set of failing criteria differs from `KNOWN_FAILURES`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radmamba::analysis::{calibrate_dim, corr_avg, count_flops, run_ablation, AblationGrid};
use radmamba::autodiff::Graph;
use radmamba::model::{block_forward, presets, Model, ModelConfig, ProjectionKind};
use radmamba::preprocess::{ChanDsConfig, PatchGeometry};
use radmamba::signal::{default_pack, make_dataset, SynthConfig};
use radmamba::ssm::{discretize, scan_parallel, scan_sequential, Discretization, ScanEngine, SsmParams};
use radmamba::train::{batch_loss, loss_and_grads, mean_std, train_sweep, TrainConfig};
use radmamba::{ExecPolicy, Tensor};

/// Criteria that fail for reasons analysed in the project notes. A change in
/// either direction (new failure or a fixed one) fails the run.
const KNOWN_FAILURES: &[usize] = &[1];

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn c1_params() -> Outcome {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, cfg, sweep, target, _) in presets::table() {
        let (dim, n) = calibrate_dim(&cfg, sweep, target).unwrap();
        let rel = (n as f64 - target) / target;
        ok &= rel.abs() <= 0.15;
        parts.push(format!("{name} dim {dim}: {n} vs {:.1}k ({:+.1}%)", target / 1e3, 100.0 * rel));
    }
    let el = t.elapsed();
    check(ok && within(el, 1.0), format!("{} [{el:.2?}]", parts.join("; ")))
}

fn c2_flops() -> Outcome {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, cfg, sweep, target_p, target_f) in presets::table() {
        let (dim, _) = calibrate_dim(&cfg, sweep, target_p).unwrap();
        let rep = count_flops(&ModelConfig { dim, ..cfg }, false).unwrap();
        let sum: u64 = rep.rows.iter().map(|r| r.flops).sum();
        let ratio = rep.total_flops as f64 / target_f;
        ok &= sum == rep.total_flops && (0.5..=2.0).contains(&ratio);
        parts.push(format!("{name} {:.2}M vs {:.1}M (x{ratio:.2})", rep.total_flops as f64 / 1e6, target_f / 1e6));
    }
    let el = t.elapsed();
    check(ok && within(el, 1.0), format!("{}; rows sum to totals [{el:.2?}]", parts.join("; ")))
}

fn scan_instance(rng: &mut ChaCha8Rng) -> (Tensor<f64>, SsmParams<f64>, Tensor<f64>) {
    let b = rng.random_range(1..=2);
    let n = rng.random_range(1..=128);
    let dim = rng.random_range(1..=16);
    let ds = rng.random_range(1..=16);
    let mut t = |shape: Vec<usize>, lo: f64, hi: f64| {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    };
    let x = t(vec![b, n, dim], -1.0, 1.0);
    let p = SsmParams {
        delta: t(vec![b, n, dim], 0.01, 0.1),
        b: t(vec![b, n, ds], -1.0, 1.0),
        c: t(vec![b, n, ds], -1.0, 1.0),
        abar: t(vec![b, n, dim, ds], 0.0, 1.0),
        bbar: t(vec![b, n, dim, ds], -1.0, 1.0),
    };
    let d = t(vec![dim], -1.0, 1.0);
    (x, p, d)
}

/// `max |a − b| / max |b|` over one instance.
fn normwise<T: radmamba::Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let scale = b.max_abs().as_f64().max(f64::MIN_POSITIVE);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
        / scale
}

fn c3_scan() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut e32, mut e64) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (x, p, d) = scan_instance(&mut rng);
        e64 = e64.max(normwise(&scan_parallel(&x, &p, &d).unwrap(), &scan_sequential(&x, &p, &d).unwrap()));
        let p32 = SsmParams {
            delta: p.delta.cast(),
            b: p.b.cast(),
            c: p.c.cast(),
            abar: p.abar.cast(),
            bbar: p.bbar.cast(),
        };
        let (x32, d32) = (x.cast::<f32>(), d.cast::<f32>());
        e32 = e32.max(normwise(
            &scan_parallel(&x32, &p32, &d32).unwrap(),
            &scan_sequential(&x32, &p32, &d32).unwrap(),
        ));
    }
    let el = t.elapsed();
    check(
        e32 <= 1e-5 && e64 <= 1e-10 && within(el, 30.0),
        format!("1000 instances, max rel err F32 {e32:.2e}, F64 {e64:.2e} [{el:.2?}]"),
    )
}

fn tiny() -> ModelConfig {
    ModelConfig {
        input_shape: [1, 8, 8],
        chan_ds: ChanDsConfig {
            layers: 1,
            channels: 1,
            kernel: (3, 3),
            factors: (2, 2),
            use_avgpool: true,
        },
        geometry: PatchGeometry::DopplerAligned,
        dim: 4,
        dim_s: 2,
        dt_rank: 1,
        projection: ProjectionKind::Conv1dK3,
        depth: 1,
        n_classes: 2,
        discretization: Discretization::Zoh,
        scan: ScanEngine::Sequential,
        seed: 0,
    }
}

fn c4_gradcheck() -> Outcome {
    let t = Instant::now();
    let model = Model::<f64>::init(tiny(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::uniform([1, 8, 8], 1.0, &mut rng)).collect();
    let refs: Vec<&Tensor<f64>> = xs.iter().collect();
    let labels = [0, 1];
    let pol = ExecPolicy::Sequential;
    let step = loss_and_grads(&model, &refs, &labels, pol).unwrap();
    let eps = 1e-5;
    let base = batch_loss(&model, &refs, &labels, pol).unwrap();
    // Rounding in the two loss evaluations bounds what a central difference can
    // resolve: roughly eps_mach * |loss| / eps. Gradients below a small
    // multiple of that are compared in absolute terms.
    let noise = 10.0 * f64::EPSILON * base.abs().max(1.0) / eps;
    let (mut worst, mut worst_abs, mut count, mut tiny) = (0.0f64, 0.0f64, 0usize, 0usize);
    for (name, g) in &step.grads {
        for i in 0..g.len() {
            let mut probe = model.clone();
            probe.store.get_mut(name).unwrap().data_mut()[i] += eps;
            let up = batch_loss(&probe, &refs, &labels, pol).unwrap();
            probe.store.get_mut(name).unwrap().data_mut()[i] -= 2.0 * eps;
            let down = batch_loss(&probe, &refs, &labels, pol).unwrap();
            let fd = (up - down) / (2.0 * eps);
            let a = g.data()[i];
            let scale = a.abs().max(fd.abs());
            if scale > noise / 1e-5 {
                worst = worst.max((a - fd).abs() / scale);
            } else {
                worst_abs = worst_abs.max((a - fd).abs());
                tiny += 1;
            }
            count += 1;
        }
    }
    let el = t.elapsed();
    check(
        worst <= 1e-5 && worst_abs <= noise && within(el, 60.0),
        format!(
            "{count} parameters, max rel err {worst:.2e}; {tiny} below {:.1e} within abs {worst_abs:.1e} <= {noise:.1e} [{el:.2?}]",
            noise / 1e-5
        ),
    )
}

fn synthetic_split() -> (radmamba::signal::Dataset, radmamba::signal::Dataset) {
    make_dataset(&default_pack(), 60, 0.8, 0, &SynthConfig::default(), ExecPolicy::default()).unwrap()
}

fn synthetic_cfg() -> (ModelConfig, TrainConfig) {
    let mut cfg = presets::uog20();
    cfg.n_classes = default_pack().len();
    let tcfg = TrainConfig {
        lr0: 5e-3,
        batch_size: 16,
        epochs: 10,
        seeds: (0..10).collect(),
        ..TrainConfig::default()
    };
    (cfg, tcfg)
}

fn c5_end_to_end() -> Outcome {
    let (tr, te) = synthetic_split();
    let (cfg, tcfg) = synthetic_cfg();
    let reports: Vec<_> = train_sweep::<f32>(&cfg, &tr, &te, &tcfg, ExecPolicy::default(), None)
        .into_iter()
        .map(Result::unwrap)
        .collect();
    let accs: Vec<f64> = reports.iter().map(|r| r.test_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let slowest = reports.iter().map(|r| r.wall_time_s).fold(0.0, f64::max);
    check(
        mean >= 0.95 && std <= 0.05 && slowest <= 300.0,
        format!(
            "10 seeds, {} train / {} test: mean {:.2}% std {:.2} pts, slowest run {slowest:.1}s",
            tr.len(),
            te.len(),
            100.0 * mean,
            100.0 * std
        ),
    )
}

fn c6_ablation() -> Outcome {
    let (tr, te) = synthetic_split();
    let (cfg, mut tcfg) = synthetic_cfg();
    tcfg.seeds = (0..6).collect();
    // row 9: linear1 + Doppler-aligned, 21: conv1d + 7×7, 27: conv1d + Doppler-aligned
    let grid = AblationGrid::full((7, 7), tcfg.seeds.clone()).rows(&[9, 21, 27]);
    let res = run_ablation::<f32>(&cfg, &grid, &tr, &te, &tcfg, ExecPolicy::default());
    let get = |row: usize| res.iter().find(|r| r.row == row).unwrap();
    let (lin, rect, ours) = (get(9), get(21), get(27));
    let fmt = |r: &radmamba::analysis::AblationResult| {
        format!("{:.2}±{:.2}", 100.0 * r.mean_accuracy, 100.0 * r.std_accuracy)
    };
    let errors = res.iter().any(|r| r.error.is_some());
    check(
        !errors && ours.mean_accuracy >= rect.mean_accuracy && ours.mean_accuracy >= lin.mean_accuracy,
        format!(
            "6 seeds: DA {} vs rect {} (gap {:+.2}); conv1d {} vs linear1 {} (gap {:+.2})",
            fmt(ours),
            fmt(rect),
            100.0 * (ours.mean_accuracy - rect.mean_accuracy),
            fmt(ours),
            fmt(lin),
            100.0 * (ours.mean_accuracy - lin.mean_accuracy)
        ),
    )
}

fn c7_identity() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for kind in ProjectionKind::ALL {
        let cfg = ModelConfig {
            projection: kind,
            ..presets::uog20()
        };
        let mut model = Model::<f32>::init(cfg.clone(), 7).unwrap();
        for (name, w) in model.store.params.iter_mut() {
            let p1 = match kind {
                ProjectionKind::Linear3 => name.starts_with("blocks.0.p1.2."),
                _ => name.starts_with("blocks.0.p1."),
            };
            if p1 || name == "blocks.0.p3.bias" {
                *w = Tensor::zeros(w.shape().to_vec());
            }
        }
        let (n, _) = cfg.layout().unwrap();
        let x = Tensor::<f32>::uniform([2, n, cfg.dim], 3.0, &mut ChaCha8Rng::seed_from_u64(7));
        let mut g = Graph::new(ExecPolicy::default());
        let xv = g.constant(x);
        let vars = model.store.bind(&mut g, false);
        let tr = block_forward(&mut g, xv, &cfg, &vars, 0).unwrap();
        let (a, b) = (g.value(tr.out), g.value(tr.x_proj));
        for (u, v) in a.data().iter().zip(b.data()) {
            worst = worst.max((u - v).abs() as f64);
        }
    }
    let el = t.elapsed();
    check(
        worst <= 1e-6 && within(el, 1.0),
        format!("3 projection kinds, F32, max |out − x_proj| {worst:.1e} [{el:.2?}]"),
    )
}

fn brute_corr_avg(x: &Tensor<f64>) -> f64 {
    let [b, n, d] = x.shape()[..] else { unreachable!() };
    let v = |bi: usize, ni: usize, m: usize| x.data()[(bi * n + ni) * d + m];
    let mut total = 0.0;
    for bi in 0..b {
        for i in 0..n {
            for j in 0..n {
                for m in 0..d {
                    for k in 0..d - m {
                        total += v(bi, i, m) * v(bi, j, m + k);
                    }
                }
            }
        }
    }
    total / (b * n * n) as f64
}

fn c8_corr() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let shape = [rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=16)];
        let x = Tensor::<f64>::uniform(shape, 1.0, &mut rng);
        let (fast, slow) = (corr_avg(&x).unwrap(), brute_corr_avg(&x));
        worst = worst.max((fast - slow).abs() / slow.abs().max(1.0));
    }
    let el = t.elapsed();
    check(
        worst <= 1e-10 && within(el, 10.0),
        format!("100 tensors, max err {worst:.1e} [{el:.2?}]"),
    )
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_radmamba"))
        .args(args)
        .env("RADMAMBA_THREADS", "2")
        .output()
        .expect("spawn radmamba")
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let synth = run_cli(&["synth", "--out", &p("data"), "--per-class", "20"]);
    if !synth.status.success() {
        return check(false, format!("synth failed: {}", String::from_utf8_lossy(&synth.stderr)));
    }
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = run_cli(&[
            "train", "--preset", "uog20", "--data", &p("data"), "--out", &p(run), "--seed", "0", "--lr",
            "5e-3", "--batch-size", "16", "--epochs", "3",
        ]);
        if !out.status.success() {
            return check(false, format!("train failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        bytes.push(std::fs::read(Path::new(&p(run)).join("report.json")).unwrap());
    }
    check(
        bytes[0] == bytes[1],
        format!("two `train --seed 0` runs at 2 threads: {} byte reports identical", bytes[0].len()),
    )
}

fn c10_discretize() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut worst_a, mut worst_b) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let a: f64 = -rng.random_range(1e-3..10.0);
        let dt: f64 = rng.random_range(1e-4..2.0);
        let b: f64 = rng.random_range(-5.0..5.0);
        let (abar, bbar): (Tensor<f64>, Tensor<f64>) = discretize(
            &Tensor::from_f64([1, 1], &[a]).unwrap(),
            &Tensor::from_f64([1], &[b]).unwrap(),
            &Tensor::from_f64([1], &[dt]).unwrap(),
            Discretization::Zoh,
        )
        .unwrap();
        let want_a = (dt * a).exp();
        let want_b = (dt * a).exp_m1() / a * b;
        worst_a = worst_a.max((abar.data()[0] - want_a).abs() / want_a.abs().max(1.0));
        worst_b = worst_b.max((bbar.data()[0] - want_b).abs() / want_b.abs().max(1.0));
    }
    let el = t.elapsed();
    check(
        worst_a <= 1e-12 && worst_b <= 1e-12 && within(el, 5.0),
        format!("10000 draws, max err Ā {worst_a:.1e}, B̄ {worst_b:.1e} [{el:.2?}]"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("parameter counts within ±15%", c1_params),
        ("FLOP counts within factor 2", c2_flops),
        ("parallel scan matches sequential", c3_scan),
        ("whole-model gradient check", c4_gradcheck),
        ("synthetic end-to-end accuracy", c5_end_to_end),
        ("ablation direction", c6_ablation),
        ("gate-closed block identity", c7_identity),
        ("corr_avg oracle", c8_corr),
        ("report determinism", c9_determinism),
        ("ZOH closed form", c10_discretize),
    ];
    // Numeric arguments select a subset, e.g. `cargo test --test acceptance -- 4 9`.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |id: usize| only.is_empty() || only.contains(&id);
    let mut failed = Vec::new();
    let mut ran = 0;
    for (i, (title, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected(id) {
            continue;
        }
        ran += 1;
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let known = if !o.pass && KNOWN_FAILURES.contains(&id) { " (known, see notes)" } else { "" };
        println!("criterion {id:>2} {tag} {title}{known}: {}", o.detail);
        if !o.pass {
            failed.push(id);
        }
    }
    let expected: Vec<usize> = KNOWN_FAILURES.iter().copied().filter(|&id| selected(id)).collect();
    println!(
        "acceptance: {}/{ran} pass; failing {failed:?}; known failures {expected:?}",
        ran - failed.len()
    );
    if failed != expected {
        eprintln!("acceptance: failing set differs from the documented known failures");
        std::process::exit(1);
    }
}
