use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::softmax_cross_entropy;
use super::optim::{AdamState, AdamW};
use super::scheduler::{PlateauScheduler, SchedulerConfig};
use crate::autodiff::{BnStats, Graph};
use crate::error::{Error, Result};
use crate::model::{hash_json, model_forward, stack, Model, ModelConfig};
use crate::par::{self, ExecPolicy};
use crate::preprocess::BN_MOMENTUM;
use crate::signal::{Dataset, Sample};
use crate::tensor::{Scalar, Tensor};

/// Which held-out split drives the scheduler and checkpoint selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    /// The test split, as in the reference protocol.
    #[default]
    Test,
    /// A stratified slice of the training split (`val_fraction`).
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub scheduler: SchedulerConfig,
    pub seeds: Vec<u64>,
    pub monitor: Monitor,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            batch_size: 16,
            epochs: 50,
            weight_decay: 0.01,
            scheduler: SchedulerConfig::default(),
            seeds: (0..10).collect(),
            monitor: Monitor::Test,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            p.push(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".to_string());
        }
        if !(self.weight_decay >= 0.0) {
            p.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.monitor == Monitor::Val && !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            p.push(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        p.extend(self.scheduler.problems());
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_accuracy: Option<f64>,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

/// Everything needed to audit one training run. Wall time is kept out of the
/// serialized form so that identical runs serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub train_config_hash: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub classes: Vec<String>,
    pub initial_test_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 means the initial weights were never beaten.
    pub best_epoch: usize,
    /// Test accuracy of the retained checkpoint, `trace / total` of `confusion`.
    pub test_accuracy: f64,
    /// `confusion[true][pred]` on the test split for the retained checkpoint.
    pub confusion: Vec<Vec<usize>>,
    pub interrupted: bool,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Test-set metrics for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Accuracy as `trace / total` of a confusion matrix.
pub fn confusion_accuracy(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    let trace: usize = confusion.iter().enumerate().map(|(i, r)| r[i]).sum();
    if total == 0 {
        0.0
    } else {
        trace as f64 / total as f64
    }
}

const EVAL_CHUNK: usize = 32;

/// Inference-mode logits for `samples`, evaluated in chunks.
pub fn batch_logits<T: Scalar>(model: &Model<T>, samples: &[&Tensor<T>], policy: ExecPolicy) -> Result<Vec<T>> {
    let chunks: Vec<&[&Tensor<T>]> = samples.chunks(EVAL_CHUNK).collect();
    let inner = if policy.is_parallel() && chunks.len() > 1 {
        ExecPolicy::Sequential
    } else {
        policy
    };
    let parts = par::map_slice(policy, &chunks, |c| model.logits(c, inner));
    let mut out = Vec::with_capacity(samples.len() * model.cfg.n_classes);
    for p in parts {
        out.extend_from_slice(p?.data());
    }
    Ok(out)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn inputs<T: Scalar>(samples: &[&Sample]) -> Vec<Tensor<T>> {
    samples.iter().map(|s| s.data.cast()).collect()
}

fn evaluate_samples<T: Scalar>(
    model: &Model<T>,
    samples: &[&Sample],
    xs: &[Tensor<T>],
    policy: ExecPolicy,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let q = model.cfg.n_classes;
    let refs: Vec<&Tensor<T>> = xs.iter().collect();
    let logits = batch_logits(model, &refs, policy)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= q) {
        return Err(Error::LabelOutOfRange { label: bad, classes: q });
    }
    let (loss, _) = softmax_cross_entropy(&logits, &labels, q);
    let mut confusion = vec![vec![0usize; q]; q];
    let predictions: Vec<usize> = logits.chunks(q).map(argmax).collect();
    for (&t, &p) in labels.iter().zip(&predictions) {
        confusion[t][p] += 1;
    }
    Ok(Evaluation {
        accuracy: confusion_accuracy(&confusion),
        loss: loss.as_f64(),
        confusion,
        predictions,
    })
}

/// Accuracy, mean loss and confusion matrix of `model` on `data`.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, policy: ExecPolicy) -> Result<Evaluation> {
    let samples: Vec<&Sample> = data.samples.iter().collect();
    let xs = inputs(&samples);
    evaluate_samples(model, &samples, &xs, policy)
}

/// Loss, per-parameter gradients and batch-norm batch statistics for one
/// training-mode mini-batch.
pub struct StepOutput<T> {
    pub loss: T,
    pub grads: IndexMap<String, Tensor<T>>,
    pub bn_stats: Vec<BnStats<T>>,
}

pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    xs: &[&Tensor<T>],
    labels: &[usize],
    policy: ExecPolicy,
) -> Result<StepOutput<T>> {
    let mut g = Graph::new(policy);
    let x = g.constant(stack(xs)?);
    let vars = model.store.bind(&mut g, true);
    let f = model_forward(&mut g, x, &model.cfg, &model.store, &vars, true)?;
    let loss = g.cross_entropy(f.logits, labels)?;
    let lv = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    let grads = vars
        .vars
        .iter()
        .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v)))
        .collect();
    Ok(StepOutput {
        loss: lv,
        grads,
        bn_stats: f.bn_stats,
    })
}

/// Training-mode loss without the backward sweep (finite-difference probes).
pub fn batch_loss<T: Scalar>(model: &Model<T>, xs: &[&Tensor<T>], labels: &[usize], policy: ExecPolicy) -> Result<T> {
    let mut g = Graph::new(policy);
    let x = g.constant(stack(xs)?);
    let vars = model.store.bind(&mut g, false);
    let f = model_forward(&mut g, x, &model.cfg, &model.store, &vars, true)?;
    let loss = g.cross_entropy(f.logits, labels)?;
    Ok(g.value(loss).data()[0])
}

fn update_running_stats<T: Scalar>(model: &mut Model<T>, stats: &[BnStats<T>]) -> Result<()> {
    let m = BN_MOMENTUM;
    for (l, st) in stats.iter().enumerate() {
        for (name, fresh) in [("running_mean", &st.mean), ("running_var", &st.var)] {
            let buf = model.store.buffer_mut(&format!("chan_ds.bn{l}.{name}"))?;
            for (r, &s) in buf.data_mut().iter_mut().zip(fresh) {
                *r = T::of((1.0 - m) * r.as_f64() + m * s.as_f64());
            }
        }
    }
    Ok(())
}

/// Result of [`train`]: the report and the retained (best) weights.
pub struct TrainOutcome<T: Scalar> {
    pub report: RunReport,
    pub best: Model<T>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions<'a> {
    pub policy: ExecPolicy,
    /// Checked between mini-batches; when set the run stops and the partial
    /// report is returned with `interrupted = true`.
    pub stop: Option<&'a AtomicBool>,
}

fn group_by_class(data: &Dataset) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); data.n_classes()];
    for (i, s) in data.samples.iter().enumerate() {
        if let Some(v) = by.get_mut(s.label) {
            v.push(i);
        }
    }
    by
}

fn check_data(cfg: &ModelConfig, train: &Dataset, test: &Dataset) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("training needs non-empty train and test splits"));
    }
    for (split, d) in [("train", train), ("test", test)] {
        if let Some(s) = d.samples.iter().find(|s| s.label >= cfg.n_classes) {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes: cfg.n_classes,
            });
        }
        if let Some(s) = d.samples.iter().find(|s| s.data.shape() != cfg.input_shape) {
            return Err(Error::invalid(format!(
                "{split} sample {} has shape {:?}, model expects {:?}",
                s.id,
                s.data.shape(),
                cfg.input_shape
            )));
        }
    }
    let ids: std::collections::HashSet<&str> = train.samples.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = test.samples.iter().find(|s| ids.contains(s.id.as_str())) {
        return Err(Error::invalid(format!("sample {} is in both train and test", s.id)));
    }
    Ok(())
}

/// Train one model from `seed` (weights and shuffling) and keep the
/// checkpoint with the best monitored accuracy; ties keep the earlier epoch.
pub fn train<T: Scalar>(
    cfg: &ModelConfig,
    train: &Dataset,
    test: &Dataset,
    tcfg: &TrainConfig,
    seed: u64,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    tcfg.validate()?;
    check_data(cfg, train, test)?;
    let started = Instant::now();
    let policy = opts.policy;

    let (fit_idx, val_idx) = match tcfg.monitor {
        Monitor::Test => ((0..train.len()).collect::<Vec<_>>(), Vec::new()),
        Monitor::Val => crate::signal::dataset::stratified_split(
            &group_by_class(train),
            1.0 - tcfg.val_fraction,
            seed ^ 0x5eed_7a1d,
        ),
    };
    let fit: Vec<&Sample> = fit_idx.iter().map(|&i| &train.samples[i]).collect();
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &train.samples[i]).collect();
    let test_s: Vec<&Sample> = test.samples.iter().collect();
    let (fit_x, val_x, test_x) = (inputs::<T>(&fit), inputs::<T>(&val), inputs::<T>(&test_s));

    let mut model = Model::<T>::init(cfg.clone(), cfg.seed.wrapping_add(seed))?;
    let eval_test = |m: &Model<T>| evaluate_samples(m, &test_s, &test_x, policy);
    let eval_val = |m: &Model<T>| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            Ok(Some(evaluate_samples(m, &val, &val_x, policy)?.accuracy))
        }
    };
    let monitored = |test_acc: f64, val_acc: Option<f64>| match tcfg.monitor {
        Monitor::Test => test_acc,
        Monitor::Val => val_acc.unwrap_or(test_acc),
    };

    let init_eval = eval_test(&model)?;
    let mut best = (
        monitored(init_eval.accuracy, eval_val(&model)?),
        0usize,
        model.clone(),
        init_eval.clone(),
    );

    let opt = AdamW {
        weight_decay: tcfg.weight_decay,
        ..AdamW::default()
    };
    let mut state = AdamState::default();
    let mut sched = PlateauScheduler::new(tcfg.lr0, tcfg.scheduler)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x7261_646d);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut epochs = Vec::with_capacity(tcfg.epochs);
    let mut interrupted = false;

    'outer: for epoch in 1..=tcfg.epochs {
        let lr = sched.lr();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(tcfg.batch_size) {
            if opts.stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
                interrupted = true;
                break 'outer;
            }
            let xs: Vec<&Tensor<T>> = batch.iter().map(|&i| &fit_x[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| fit[i].label).collect();
            let step = loss_and_grads(&model, &xs, &labels, policy)?;
            let l = step.loss.as_f64();
            if !l.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            opt.step(&mut model.store, &step.grads, &mut state, lr)?;
            update_running_stats(&mut model, &step.bn_stats)?;
            loss_sum += l * batch.len() as f64;
            seen += batch.len();
        }
        let ev = eval_test(&model)?;
        let val_acc = eval_val(&model)?;
        let metric = monitored(ev.accuracy, val_acc);
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            test_accuracy: ev.accuracy,
            val_accuracy: val_acc,
            lr,
        });
        log::info!(
            "seed {seed} epoch {epoch}: loss {:.4} test acc {:.4} lr {lr:.2e}",
            loss_sum / seen.max(1) as f64,
            ev.accuracy
        );
        if metric > best.0 {
            best = (metric, epoch, model.clone(), ev);
        }
        sched.step(metric);
    }

    let (_, best_epoch, best_model, best_eval) = best;
    let report = RunReport {
        seed,
        config_hash: cfg.hash(),
        train_config_hash: tcfg.hash(),
        model: cfg.clone(),
        train: tcfg.clone(),
        classes: test.classes.clone(),
        initial_test_accuracy: init_eval.accuracy,
        epochs,
        best_epoch,
        test_accuracy: best_eval.accuracy,
        confusion: best_eval.confusion,
        interrupted,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        report,
        best: best_model,
    })
}

/// One run per seed in `tcfg.seeds`, concurrently when `policy` allows.
/// Each run owns its model; the datasets are shared read-only.
pub fn train_sweep<T: Scalar>(
    cfg: &ModelConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    tcfg: &TrainConfig,
    policy: ExecPolicy,
    stop: Option<&AtomicBool>,
) -> Vec<Result<RunReport>> {
    let inner = if policy.is_parallel() && tcfg.seeds.len() > 1 {
        ExecPolicy::Sequential
    } else {
        policy
    };
    par::map_slice(policy, &tcfg.seeds, |&seed| {
        let opts = TrainOptions { policy: inner, stop };
        train::<T>(cfg, train_set, test_set, tcfg, seed, opts).map(|o| o.report)
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
