//! SGD training loop, multi-seed runs and training-log CSVs.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::config::{LrSchedule, ModelConfig, TrainConfig};
use crate::domain::{validate_case, BinaryMask, WeightMap};
use crate::error::{Error, Result};
use crate::eval::{evaluate, fmt_opt, EvalOptions, EvalReport};
use crate::hard_region::{build_weight_map, compute_hard_mask};
use crate::losses::{logit_grad, training_loss, ScaleTargets, SCALE_COEFFICIENTS};
use crate::metrics::dice;
use crate::model::{to_prediction, Logits, MicroSegNet};
use crate::nn::layers::sigmoid;
use crate::nn::{Module, Param, Scalar, Tensor};
use crate::synthdata::{mix_seed, preprocess_record, Dataset, PatientCase, Split};

/// Stream tags for [`mix_seed`].
const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

/// SGD with momentum and L2 weight decay:
/// `v ← m·v − lr·(∇L + wd·θ);  θ ← θ + v`.
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    pub momentum: F,
    pub weight_decay: F,
    velocity: Vec<Vec<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: F::of(momentum),
            weight_decay: F::of(weight_decay),
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param<F>>, lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
        }
        let lr = F::of(lr);
        for (p, v) in params.into_iter().zip(self.velocity.iter_mut()) {
            for ((theta, &g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = self.momentum * *vel - lr * (g + self.weight_decay * *theta);
                *theta += *vel;
            }
        }
    }
}

/// One preprocessed training sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub case_id: String,
    pub slice_index: usize,
    pub input: Tensor<f32>,
    pub targets: ScaleTargets,
    pub weights: WeightMap,
}

impl Sample {
    fn flipped(&self) -> Self {
        let flip = |m: &BinaryMask| {
            let mut out = m.clone();
            let w = m.width;
            for (dst, src) in out.labels.chunks_mut(w).zip(m.labels.chunks(w)) {
                dst.iter_mut().zip(src.iter().rev()).for_each(|(d, &s)| *d = s);
            }
            out
        };
        let (_, h, w) = self.input.chw();
        let mut input = self.input.clone();
        let mut weights = self.weights.clone();
        for r in 0..h {
            input.data[r * w..(r + 1) * w].reverse();
            weights.weights[r * w..(r + 1) * w].reverse();
        }
        Self {
            case_id: self.case_id.clone(),
            slice_index: self.slice_index,
            input,
            targets: ScaleTargets {
                y1: flip(&self.targets.y1),
                y2: flip(&self.targets.y2),
                y3: flip(&self.targets.y3),
                y4: flip(&self.targets.y4),
            },
            weights,
        }
    }
}

/// Preprocesses every slice of `cases` and attaches weight maps.
pub fn prepare_samples(cases: &[&PatientCase], input_size: usize, w_hard: f64, w_easy: f64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for case in cases {
        for rec in &case.slices {
            let problems = validate_case(rec);
            if !problems.is_empty() {
                return Err(Error::Dataset {
                    case_id: rec.case_id.clone(),
                    reason: format!("slice {}: {}", rec.slice_index, problems.join("; ")),
                });
            }
            let rec = preprocess_record(rec, input_size)?;
            let hard = match &rec.hard_mask {
                Some(h) => h.clone(),
                None => compute_hard_mask(&rec.expert_mask, &rec.nonexpert_mask)?,
            };
            out.push(Sample {
                case_id: rec.case_id.clone(),
                slice_index: rec.slice_index,
                input: MicroSegNet::<f32>::input_tensor(&rec.image),
                targets: ScaleTargets::from_mask(&rec.expert_mask)?,
                weights: build_weight_map(&hard, w_hard, w_easy)?,
            });
        }
    }
    Ok(out)
}

/// Refuses datasets where a patient appears in training and test.
pub fn check_leakage(dataset: &Dataset) -> Result<()> {
    let test: HashSet<&str> = dataset.cases_in(Split::Test).map(|c| c.case_id.as_str()).collect();
    let mut seen = HashSet::new();
    for c in &dataset.cases {
        if c.split != Split::Test && test.contains(c.case_id.as_str()) {
            return Err(Error::Leakage(format!("case {} is in both {} and test", c.case_id, c.split)));
        }
        if c.split != Split::Test && !seen.insert(c.case_id.as_str()) {
            return Err(Error::Leakage(format!("case {} listed twice in training data", c.case_id)));
        }
    }
    Ok(())
}

/// Training and validation patients. Explicit `val` cases are used as given;
/// otherwise the last `round(val_fraction · n)` training patients are held out.
pub fn split_train_val<'a>(dataset: &'a Dataset, val_fraction: f64) -> (Vec<&'a PatientCase>, Vec<&'a PatientCase>) {
    let train: Vec<&PatientCase> = dataset.cases_in(Split::Train).collect();
    let val: Vec<&PatientCase> = dataset.cases_in(Split::Val).collect();
    if !val.is_empty() {
        return (train, val);
    }
    let n = train.len();
    let k = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    let (a, b) = train.split_at(n - k);
    (a.to_vec(), b.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub loss_p1: f64,
    pub loss_p2: Option<f64>,
    pub loss_p3: Option<f64>,
    pub loss_p4: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted mean of the step losses.
    pub mean_loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    /// `step, epoch, loss, loss_p1, loss_p2, loss_p3, loss_p4`.
    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["step", "epoch", "loss", "loss_p1", "loss_p2", "loss_p3", "loss_p4"])?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.epoch.to_string(),
                format!("{:.9}", s.loss),
                format!("{:.9}", s.loss_p1),
                opt9(s.loss_p2),
                opt9(s.loss_p3),
                opt9(s.loss_p4),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `epoch, mean_loss, val_dice`.
    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["epoch", "mean_loss", "val_dice"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), format!("{:.9}", e.mean_loss), fmt_opt(e.val_dice)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn opt9(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.9}"))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(csv::Writer::from_path(path)?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
}

/// Loss and logit gradients of one sample, the latter already scaled by `1/batch`.
fn sample_loss(
    logits: &Logits<f32>,
    sample: &Sample,
    deep_supervision: bool,
    batch: usize,
) -> Result<(crate::losses::LossBreakdown, Logits<f32>)> {
    let pred = to_prediction(logits);
    let loss = training_loss(&pred, &sample.targets, &sample.weights, deep_supervision)?;
    let targets = [
        &sample.targets.y1,
        &sample.targets.y2,
        &sample.targets.y3,
        &sample.targets.y4,
    ];
    let inv_b = 1.0 / batch as f64;
    let grads: Logits<f32> = std::array::from_fn(|k| {
        let z = logits[k].as_ref()?;
        if k > 0 && !deep_supervision {
            return None;
        }
        let s: Vec<f64> = z.data.iter().map(|&v| sigmoid(f64::from(v))).collect();
        let w = (k == 0).then_some(&sample.weights);
        let g = logit_grad(&s, targets[k], w, SCALE_COEFFICIENTS[k] * inv_b);
        Some(Tensor::from_vec(&z.shape, g.into_iter().map(|v| v as f32).collect()))
    });
    Ok((loss, grads))
}

fn learning_rate(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Cosine => {
            let t = step as f64 / total.max(1) as f64;
            0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

fn mean_dice(model: &MicroSegNet<f32>, samples: &[Sample], threshold: f64) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut acc = 0.0;
    for s in samples {
        let logits = model.forward_logits(&s.input, false)?;
        let pred = to_prediction(&logits).p1.threshold(threshold, s.targets.y1.spacing);
        acc += dice(&s.targets.y1, &pred)?;
    }
    Ok(Some(acc / samples.len() as f64))
}

/// Trains one model. Initialisation, data order and augmentation all derive
/// from `train_cfg.seed`.
pub fn train(model_cfg: &ModelConfig, train_cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    check_leakage(dataset)?;
    let (train_cases, val_cases) = split_train_val(dataset, train_cfg.val_fraction);
    if train_cases.is_empty() {
        return Err(Error::InvalidParam("no training cases".into()));
    }
    let samples = prepare_samples(&train_cases, model_cfg.input_size, train_cfg.w_hard, train_cfg.w_easy)?;
    let val = prepare_samples(&val_cases, model_cfg.input_size, train_cfg.w_hard, train_cfg.w_easy)?;
    if samples.is_empty() {
        return Err(Error::InvalidParam("training cases contain no slices".into()));
    }
    let seed = train_cfg.seed;
    let mut model = MicroSegNet::<f32>::new(model_cfg, mix_seed(&[seed, STREAM_INIT]))?;
    let mut opt = Sgd::<f32>::new(train_cfg.momentum, train_cfg.weight_decay);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_AUGMENT]));
    let ds = train_cfg.deep_supervision;
    let steps_per_epoch = samples.len().div_ceil(train_cfg.batch_size);
    let total_steps = steps_per_epoch * train_cfg.epochs;
    let mut log = TrainingLog::default();
    let mut step = 0;
    for epoch in 1..=train_cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_ORDER, epoch as u64])));
        let mut epoch_sum = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            model.zero_grad();
            let mut acc = [0.0f64; 5];
            for &i in batch {
                let flipped;
                let sample = if train_cfg.augment && aug_rng.random::<bool>() {
                    flipped = samples[i].flipped();
                    &flipped
                } else {
                    &samples[i]
                };
                let (logits, cache) = model.forward_train(&sample.input, ds)?;
                let (loss, grads) = sample_loss(&logits, sample, ds, batch.len())?;
                if !loss.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: step + 1,
                        loss: loss.total,
                    });
                }
                model.backward(&cache, &grads);
                acc[0] += loss.total;
                acc[1] += loss.p1;
                acc[2] += loss.p2.unwrap_or(0.0);
                acc[3] += loss.p3.unwrap_or(0.0);
                acc[4] += loss.p4.unwrap_or(0.0);
            }
            if let Some(p) = model.params().iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
                log::error!("non-finite gradient in {}", p.name);
                return Err(Error::Diverged {
                    epoch,
                    step: step + 1,
                    loss: f64::NAN,
                });
            }
            opt.step(model.params_mut(), learning_rate(train_cfg, step, total_steps));
            step += 1;
            let b = batch.len() as f64;
            let comp = |v: f64| ds.then_some(v / b);
            log.steps.push(StepLog {
                step,
                epoch,
                loss: acc[0] / b,
                loss_p1: acc[1] / b,
                loss_p2: comp(acc[2]),
                loss_p3: comp(acc[3]),
                loss_p4: comp(acc[4]),
            });
            epoch_sum += acc[0];
        }
        let val_dice = mean_dice(&model, &val, train_cfg.threshold)?;
        let mean_loss = epoch_sum / samples.len() as f64;
        log::info!(
            "epoch {epoch}/{}: loss {mean_loss:.5}, val dice {}",
            train_cfg.epochs,
            fmt_opt(val_dice)
        );
        log.epochs.push(EpochLog {
            epoch,
            mean_loss,
            val_dice,
        });
    }
    let checkpoint = Checkpoint {
        model,
        train: train_cfg.clone(),
        meta: TrainingMeta {
            epoch: train_cfg.epochs,
            seed,
            loss_curve: log.epochs.iter().map(|e| e.mean_loss).collect(),
        },
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        train_cases: train_cases.iter().map(|c| c.case_id.clone()).collect(),
        val_cases: val_cases.iter().map(|c| c.case_id.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    /// `None` if the run failed; see `error`.
    pub report: Option<EvalReport>,
    pub error: Option<String>,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl MeanStd {
    /// Population standard deviation; `None` for an empty list.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiRunReport {
    pub n_runs: usize,
    pub base_seed: u64,
    pub runs: Vec<RunResult>,
    pub failed: usize,
    pub dice: Option<MeanStd>,
    pub hd95_mm: Option<MeanStd>,
    pub hard_dice: Option<MeanStd>,
    pub easy_dice: Option<MeanStd>,
}

/// Trains one model with `train_cfg` and evaluates it on the test split.
/// Failures are captured in the result rather than returned.
pub fn run_once(model_cfg: &ModelConfig, train_cfg: &TrainConfig, dataset: &Dataset, eval: EvalOptions) -> RunResult {
    let seed = train_cfg.seed;
    let result = train(model_cfg, train_cfg, dataset)
        .and_then(|out| Ok((evaluate(&out.checkpoint.model, dataset, Split::Test, eval)?, out)));
    match result {
        Ok((report, out)) => RunResult {
            seed,
            report: Some(report),
            error: None,
            loss_curve: out.checkpoint.meta.loss_curve,
        },
        Err(e) => {
            log::warn!("run with seed {seed} failed: {e}");
            RunResult {
                seed,
                report: None,
                error: Some(e.to_string()),
                loss_curve: Vec::new(),
            }
        }
    }
}

/// Maps `f` over `jobs` on up to `workers` threads, keeping input order.
pub fn run_jobs<T, R, F>(jobs: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        return jobs.into_iter().map(f).collect();
    }
    let n = jobs.len();
    let queue = std::sync::Mutex::new(jobs.into_iter().enumerate());
    let results = std::sync::Mutex::new((0..n).map(|_| None).collect::<Vec<Option<R>>>());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let next = queue.lock().expect("job queue poisoned").next();
                let Some((i, job)) = next else { break };
                let r = f(job);
                results.lock().expect("results poisoned")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results poisoned")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Trains `n_runs` models with seeds `seed, seed+1, …` and evaluates each on
/// the test split, on `train_cfg.workers` threads. Failed runs are recorded and skipped.
pub fn multi_run(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    n_runs: usize,
    eval: EvalOptions,
) -> Result<MultiRunReport> {
    if n_runs == 0 {
        return Err(Error::InvalidParam("n_runs must be at least 1".into()));
    }
    let configs = (0..n_runs)
        .map(|r| TrainConfig {
            seed: train_cfg.seed + r as u64,
            ..train_cfg.clone()
        })
        .collect();
    let runs = run_jobs(configs, train_cfg.workers, |cfg| run_once(model_cfg, &cfg, dataset, eval));
    Ok(summarize_runs(train_cfg.seed, runs))
}

pub fn summarize_runs(base_seed: u64, runs: Vec<RunResult>) -> MultiRunReport {
    let ok: Vec<&EvalReport> = runs.iter().filter_map(|r| r.report.as_ref()).collect();
    let col = |f: &dyn Fn(&EvalReport) -> Option<f64>| MeanStd::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
    MultiRunReport {
        n_runs: runs.len(),
        base_seed,
        failed: runs.len() - ok.len(),
        dice: col(&|r| Some(r.mean_dice)),
        hd95_mm: col(&|r| r.mean_hd95_mm),
        hard_dice: col(&|r| Some(r.mean_hard_dice)),
        easy_dice: col(&|r| Some(r.mean_easy_dice)),
        runs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, PerturbParams, SynthParams};

    #[test]
    fn sgd_matches_hand_stepped_quadratic() {
        // f(θ) = ½·a·θ², ∇f = a·θ
        let (a, lr, m, wd) = (3.0, 0.1, 0.9, 0.01);
        let mut p = Param::<f64>::filled("theta", &[1], 2.0);
        let mut opt = Sgd::<f64>::new(m, wd);
        let (mut theta, mut v) = (2.0f64, 0.0f64);
        for _ in 0..25 {
            p.grad[0] = a * p.value[0];
            opt.step(vec![&mut p], lr);
            v = m * v - lr * (a * theta + wd * theta);
            theta += v;
            assert!((p.value[0] - theta).abs() < 1e-15);
        }
        // a few steps of the recurrence by hand
        let mut q = Param::<f64>::filled("q", &[1], 1.0);
        let mut opt = Sgd::<f64>::new(0.5, 0.0);
        q.grad[0] = 1.0;
        opt.step(vec![&mut q], 0.1);
        assert!((q.value[0] - 0.9).abs() < 1e-15);
        q.grad[0] = 1.0;
        opt.step(vec![&mut q], 0.1);
        assert!((q.value[0] - 0.75).abs() < 1e-15);
    }

    fn tiny_data() -> Dataset {
        let p = SynthParams {
            num_cases: 5,
            slices_per_case: 1,
            image_size: 32,
            ..SynthParams::default()
        };
        generate_dataset(&p, &PerturbParams::default(), 1).unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_size: 32,
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            stem_channels: 4,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn leakage_is_refused() {
        let mut ds = tiny_data();
        let dup = ds.cases[4].clone();
        ds.cases[0].case_id = dup.case_id.clone();
        assert!(matches!(check_leakage(&ds), Err(Error::Leakage(_))));
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&tiny_model(), &cfg, &ds), Err(Error::Leakage(_))));
    }

    #[test]
    fn validation_carve_out() {
        let p = SynthParams {
            num_cases: 12,
            slices_per_case: 1,
            image_size: 32,
            ..SynthParams::default()
        };
        let ds = generate_dataset(&p, &PerturbParams::default(), 2).unwrap();
        let (tr, va) = split_train_val(&ds, 0.1);
        assert_eq!((tr.len(), va.len()), (9, 1));
        assert_eq!(va[0].case_id, "case_009");
    }

    #[test]
    fn short_run_is_deterministic_and_logs_components() {
        let ds = tiny_data();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(&tiny_model(), &cfg, &ds).unwrap();
        let b = train(&tiny_model(), &cfg, &ds).unwrap();
        assert_eq!(a.log, b.log);
        // 4 train patients, val_fraction 0.1 rounds to 0 held out
        assert_eq!(a.log.steps.len(), 4);
        assert!(a.log.steps.iter().all(|s| s.loss_p4.is_some()));
        let no_ds = TrainConfig {
            deep_supervision: false,
            ..cfg
        };
        let c = train(&tiny_model(), &no_ds, &ds).unwrap();
        assert!(c.log.steps.iter().all(|s| s.loss_p2.is_none() && s.loss == s.loss_p1));
    }

    #[test]
    fn mean_std_basics() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.min, m.max), (2.0, 1.0, 3.0));
        assert!((m.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(MeanStd::of(&[]).is_none());
    }
}
