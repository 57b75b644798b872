//! Optimization: Adam, augmentation, metrics and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::network::{Network, SamplingPolicy, Task};
use crate::nn::{BnAverage, Ctx, Mode};
use crate::params::ParamStore;
use crate::point_ops::PointCloud;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything the training loop can fit: a parameter store and a batched
/// forward pass producing logits.
pub trait Model<T: Scalar> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    fn task(&self) -> Task;
    fn classes(&self) -> usize;
    /// Smallest batch a train-mode forward can normalize.
    fn min_batch(&self) -> usize {
        1
    }
    fn logits<'t>(
        &self,
        tape: &'t Tape<T>,
        ctx: &Ctx<'_, T>,
        clouds: &[&PointCloud<T>],
        policy: SamplingPolicy,
    ) -> Result<Var<'t, T>>;
    fn save(&self, path: &Path) -> Result<()>;
}

impl<T: Scalar> Model<T> for Network<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn task(&self) -> Task {
        self.config.task
    }

    fn classes(&self) -> usize {
        self.config.head.classes
    }

    fn min_batch(&self) -> usize {
        // One cloud gives a classification head a single row, which batch
        // statistics cannot normalize.
        if self.config.task == Task::Classify && self.config.head.batch_norm {
            2
        } else {
            1
        }
    }

    fn logits<'t>(
        &self,
        tape: &'t Tape<T>,
        ctx: &Ctx<'_, T>,
        clouds: &[&PointCloud<T>],
        policy: SamplingPolicy,
    ) -> Result<Var<'t, T>> {
        let plans = self.plan(clouds, policy)?;
        self.forward(tape, ctx, clouds, &plans)
    }

    fn save(&self, path: &Path) -> Result<()> {
        Network::save(self, path)
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = |_| store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(()), v: zeros(()) }
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Update every trainable parameter from its gradient, then clear all
    /// gradients. Fails without touching anything if a gradient is missing.
    pub fn update(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid(format!("optimizer tracks {} tensors, store has {}", self.m.len(), store.len())));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = p.grad.as_ref().expect("checked above");
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.f64();
                let mj = b1 * m[j].f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].f64() + (1.0 - b2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let upd = self.lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                *w = T::of(w.f64() - upd);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && max_norm > 0.0 {
        store.scale_grads(T::of(max_norm / norm));
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Random rotation about z (about the normal axis for 2-D clouds).
    pub rotate: bool,
    pub jitter_sigma: f64,
    /// Rotate the first `dim` feature channels along with the positions
    /// (for coordinate or normal features).
    pub rotate_features: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { rotate: true, jitter_sigma: 0.02, rotate_features: true }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { rotate: false, jitter_sigma: 0.0, rotate_features: false }
    }
}

fn rotate_rows<T: Scalar>(data: &mut [T], width: usize, angle: f64) {
    let (s, c) = angle.sin_cos();
    for row in data.chunks_exact_mut(width) {
        let (x, y) = (row[0].f64(), row[1].f64());
        row[0] = T::of(c * x - s * y);
        row[1] = T::of(s * x + c * y);
    }
}

/// Rotate by `angle` about z, then add Gaussian jitter to the positions.
pub fn augment_with_angle<T: Scalar>(
    cloud: &PointCloud<T>,
    angle: f64,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> PointCloud<T> {
    let mut out = cloud.clone();
    let dim = out.dim;
    if angle != 0.0 {
        rotate_rows(&mut out.positions, dim, angle);
        if cfg.rotate_features && out.channels >= dim {
            let ch = out.channels;
            rotate_rows(&mut out.features, ch, angle);
        }
    }
    if cfg.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_sigma).expect("positive sigma");
        for p in &mut out.positions {
            *p = T::of(p.f64() + normal.sample(rng));
        }
    }
    out
}

/// Random rotation angle in `[0, 2pi)` when enabled, then jitter.
pub fn augment<T: Scalar>(cloud: &PointCloud<T>, cfg: &AugmentConfig, rng: &mut impl Rng) -> PointCloud<T> {
    let angle = if cfg.rotate { rng.random_range(0.0..std::f64::consts::TAU) } else { 0.0 };
    augment_with_angle(cloud, angle, cfg, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl Metrics {
    /// Accuracy and IoU from label pairs; `loss` is left at 0.
    pub fn from_predictions(pred: &[usize], truth: &[usize], classes: usize) -> Result<Metrics> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch { op: "metrics", lhs: vec![pred.len()], rhs: vec![truth.len()] });
        }
        if truth.is_empty() {
            return Err(Error::invalid("no labels to evaluate"));
        }
        let mut inter = vec![0usize; classes];
        let mut pred_n = vec![0usize; classes];
        let mut true_n = vec![0usize; classes];
        for (&p, &t) in pred.iter().zip(truth) {
            for (l, n) in [(p, &mut pred_n), (t, &mut true_n)] {
                if l >= classes {
                    return Err(Error::LabelOutOfRange { label: l, classes });
                }
                n[l] += 1;
            }
            if p == t {
                inter[p] += 1;
            }
        }
        let correct: usize = inter.iter().sum();
        let per_class_iou: Vec<Option<f64>> = (0..classes)
            .map(|c| {
                let union = pred_n[c] + true_n[c] - inter[c];
                (union > 0).then(|| inter[c] as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Metrics { loss: 0.0, accuracy: correct as f64 / truth.len() as f64, per_class_iou, miou })
    }
}

fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().expect("rank 2");
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Labels a network of `task` is trained against, stacked over `clouds`.
pub fn batch_labels<T>(task: Task, clouds: &[&PointCloud<T>]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for c in clouds {
        match task {
            Task::Classify => out.push(c.class_label.ok_or_else(|| Error::invalid("cloud has no class label"))?),
            Task::Segment => out.extend(c.point_labels.as_ref().ok_or_else(|| Error::invalid("cloud has no point labels"))?),
        }
    }
    Ok(out)
}

/// Eval-mode metrics with canonical sampling, `batch_size` clouds at a time.
pub fn evaluate<T: Scalar, M: Model<T>>(net: &M, data: &[PointCloud<T>], batch_size: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::invalid("no labels to evaluate: dataset is empty"));
    }
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut loss = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let clouds: Vec<&PointCloud<T>> = chunk.iter().collect();
        let labels = batch_labels(net.task(), &clouds)?;
        let tape = Tape::new();
        let ctx = Ctx::eval(net.store());
        let logits = net.logits(&tape, &ctx, &clouds, SamplingPolicy::Canonical)?;
        let l = tape.softmax_cross_entropy(logits, &labels)?.value().item().f64();
        loss += l * labels.len() as f64;
        pred.extend(argmax_rows(&logits.value()));
        truth.extend(labels);
    }
    let mut m = Metrics::from_predictions(&pred, &truth, net.classes())?;
    m.loss = loss / truth.len() as f64;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// CSV log destination.
    pub log_path: Option<PathBuf>,
    /// Where to write the checkpoint with the best test metric.
    pub checkpoint: Option<PathBuf>,
    /// Evaluate on the test split every this many epochs (and always after
    /// the last one).
    pub eval_every: usize,
    /// Before each evaluation, replace the BN running statistics with the
    /// average batch statistics over the training set at the current weights.
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            clip_norm: 10.0,
            augment: AugmentConfig::default(),
            seed: 1,
            log_path: None,
            checkpoint: None,
            eval_every: 1,
            recalibrate_bn: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub miou: f64,
}

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!("{},{},{:.6},{:.6},{:.6}", self.epoch, self.split, self.loss, self.accuracy, self.miou)
    }
}

pub const LOG_HEADER: &str = "epoch,split,loss,accuracy,miou";

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// Last test-split metrics, if a test split was given.
    pub final_test: Option<Metrics>,
    /// Best test accuracy (classification) or mIoU (segmentation).
    pub best_metric: Option<f64>,
}

impl TrainReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for l in &self.log {
            s.push_str(&l.csv_line());
            s.push('\n');
        }
        s
    }
}

/// One optimizer step on `batch`. Returns (loss, predictions, labels).
pub fn train_step<T: Scalar, M: Model<T>>(
    net: &mut M,
    adam: &mut Adam<T>,
    batch: &[PointCloud<T>],
    policy: SamplingPolicy,
    dropout_seed: u64,
    clip_norm: f64,
) -> Result<(f64, Vec<usize>, Vec<usize>)> {
    let clouds: Vec<&PointCloud<T>> = batch.iter().collect();
    let labels = batch_labels(net.task(), &clouds)?;
    let tape = Tape::new();
    let (loss, pred, grads, stats) = {
        let ctx = Ctx::new(net.store(), Mode::Train, dropout_seed);
        let logits = net.logits(&tape, &ctx, &clouds, policy)?;
        let loss_var = tape.softmax_cross_entropy(logits, &labels)?;
        let loss = loss_var.value().item().f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {loss}")));
        }
        let pred = argmax_rows(&logits.value());
        let grads = tape.gradients(loss_var)?;
        (loss, pred, grads, ctx.take_stats())
    };
    let store = net.store_mut();
    store.zero_grads();
    grads.accumulate_into(store);
    let norm = clip_grad_norm(store, clip_norm);
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm is {norm}")));
    }
    adam.update(store)?;
    stats.commit(store);
    Ok((loss, pred, labels))
}

/// Set BN running statistics to the mean of the train-mode batch statistics
/// over `data` (canonical sampling, no augmentation). Weights are untouched.
pub fn recalibrate_bn<T: Scalar, M: Model<T>>(net: &mut M, data: &[PointCloud<T>], batch_size: usize) -> Result<()> {
    let mut avg = BnAverage::default();
    for chunk in data.chunks(batch_size.max(1)) {
        if chunk.len() < net.min_batch() {
            continue;
        }
        let clouds: Vec<&PointCloud<T>> = chunk.iter().collect();
        let tape = Tape::new();
        let ctx = Ctx::new(net.store(), Mode::Train, 0);
        net.logits(&tape, &ctx, &clouds, SamplingPolicy::Canonical)?;
        avg.add(ctx.take_stats());
    }
    avg.commit(net.store_mut());
    Ok(())
}

/// Train `net` in place. Deterministic for a fixed seed: shuffling,
/// augmentation, sampling starts and dropout all derive from `cfg.seed`.
pub fn train<T: Scalar, M: Model<T>>(
    net: &mut M,
    train_set: &[PointCloud<T>],
    test_set: &[PointCloud<T>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut log_file = match &cfg.log_path {
        Some(p) => {
            let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
            Some((f, p.clone()))
        }
        None => None,
    };
    let mut adam = Adam::new(net.store(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport { log: Vec::new(), final_test: None, best_metric: None };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let min_batch = net.min_batch();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut rows, mut correct) = (0.0, 0usize, 0usize);
        let mut pred_all = Vec::new();
        let mut truth_all = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let batch: Vec<PointCloud<T>> = chunk.iter().map(|&i| augment(&train_set[i], &cfg.augment, &mut rng)).collect();
            let policy = SamplingPolicy::Random(rng.random());
            let (loss, pred, labels) = train_step(net, &mut adam, &batch, policy, rng.random(), cfg.clip_norm)?;
            loss_sum += loss * labels.len() as f64;
            rows += labels.len();
            correct += pred.iter().zip(&labels).filter(|(p, t)| p == t).count();
            pred_all.extend(pred);
            truth_all.extend(labels);
        }
        if rows == 0 {
            return Err(Error::Config(format!("no batch of at least {min_batch} clouds; enlarge the training set")));
        }
        let train_m = Metrics::from_predictions(&pred_all, &truth_all, net.classes())?;
        let mut lines = vec![EpochLog {
            epoch,
            split: "train",
            loss: loss_sum / rows as f64,
            accuracy: correct as f64 / rows as f64,
            miou: train_m.miou,
        }];
        let eval_now = !test_set.is_empty() && (epoch == cfg.epochs || epoch % cfg.eval_every.max(1) == 0);
        if eval_now {
            if cfg.recalibrate_bn {
                recalibrate_bn(net, train_set, cfg.batch_size)?;
            }
            let m = evaluate(net, test_set, cfg.batch_size)?;
            lines.push(EpochLog { epoch, split: "test", loss: m.loss, accuracy: m.accuracy, miou: m.miou });
            let score = match net.task() {
                Task::Classify => m.accuracy,
                Task::Segment => m.miou,
            };
            if report.best_metric.is_none_or(|b| score > b) {
                report.best_metric = Some(score);
                if let Some(p) = &cfg.checkpoint {
                    net.save(p)?;
                }
            }
            report.final_test = Some(m);
        }
        if let Some((f, p)) = log_file.as_mut() {
            for l in &lines {
                writeln!(f, "{}", l.csv_line()).map_err(|e| Error::io(&*p, e))?;
            }
        }
        report.log.extend(lines);
    }
    if test_set.is_empty() {
        if let Some(p) = &cfg.checkpoint {
            net.save(p)?;
        }
    }
    Ok(report)
}
