//! Two-stage training: encoder pretraining (Rank-N-Contrast, or a supervised
//! L1 baseline), then a linear probe on the frozen encoder with validation-R²
//! model selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, flip_horizontal, Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::io;
use crate::metrics::{kendall_tau, r_squared, MetricsReport};
use crate::nn::{init_encoder, LinearHead, MlpEncoder};
use crate::rnc::{rnc_loss, RncBatch, RncConfig};
use crate::tensor::{dot, sq_dist, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Pretraining length, in optimizer steps or in passes over the train split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    Steps(usize),
    Epochs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    pub noise_std: f64,
    pub horizontal_flip: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            noise_std: 0.02,
            horizontal_flip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden and embedding widths; the input width comes from the dataset.
    pub encoder_widths: Vec<usize>,
    pub pretrain_budget: Budget,
    /// Initial rate, cosine-annealed to zero over the budget.
    pub pretrain_lr: f64,
    pub batch_scenes: usize,
    pub rnc: RncConfig,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Per-epoch multiplicative decay of the probe rate.
    pub probe_lr_decay: f64,
    pub probe_batch: usize,
    pub optimizer: OptimizerKind,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![64, 64, 16],
            pretrain_budget: Budget::Steps(400),
            pretrain_lr: 0.05,
            batch_scenes: 32,
            rnc: RncConfig::default(),
            probe_epochs: 100,
            probe_lr: 0.05,
            probe_lr_decay: 0.97,
            probe_batch: 32,
            optimizer: OptimizerKind::Sgd,
            augmentation: Augmentation::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(invalid("encoder_widths", "need at least one positive width"));
        }
        if self.batch_scenes < 1 || self.probe_batch < 1 || self.probe_epochs < 1 {
            return Err(invalid("config", "batch sizes and probe epochs must be positive"));
        }
        let rates = [self.pretrain_lr, self.probe_lr];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(invalid("learning rate", "must be finite and nonnegative"));
        }
        if !(self.probe_lr_decay > 0.0 && self.probe_lr_decay <= 1.0) {
            return Err(invalid("probe_lr_decay", "must lie in (0, 1]"));
        }
        if !(self.augmentation.noise_std >= 0.0 && self.augmentation.noise_std.is_finite()) {
            return Err(invalid("noise_std", "must be finite and nonnegative"));
        }
        self.rnc.validate()
    }

    fn pretrain_steps(&self, train_len: usize) -> usize {
        match self.pretrain_budget {
            Budget::Steps(n) => n,
            Budget::Epochs(e) => e * train_len.div_ceil(self.batch_scenes),
        }
    }
}

/// First-order optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { n } else { 0 };
        Self {
            kind,
            m: vec![0.0; state],
            v: vec![0.0; state],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Cosine annealing from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Cycles through shuffled train indices in fixed-size batches.
struct BatchSampler {
    pool: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(pool: Vec<usize>) -> Self {
        Self {
            cursor: pool.len(),
            pool,
        }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.pool.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.pool.len() {
                self.pool.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.pool[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Two independently augmented views per scene, with duplicated labels.
fn two_view_batch(
    dataset: &Dataset,
    indices: &[usize],
    aug: &Augmentation,
    rng: &mut ChaCha8Rng,
) -> Result<(Matrix, Vec<f64>)> {
    let dim = dataset.feature_dim();
    let mut data = Vec::with_capacity(indices.len() * 2 * dim);
    let mut labels = Vec::with_capacity(indices.len() * 2);
    let noise = if aug.noise_std > 0.0 {
        Some(Normal::new(0.0, aug.noise_std).expect("validated std"))
    } else {
        None
    };
    for &i in indices {
        let scene = &dataset.scenes[i];
        let y = scene.target.ok_or(Error::Empty("scene target"))?;
        for _ in 0..2 {
            let mut view = if aug.horizontal_flip && rng.random_bool(0.5) {
                flip_horizontal(scene.features(), dataset.grid_size)
            } else {
                scene.features().to_vec()
            };
            if let Some(n) = &noise {
                for v in &mut view {
                    *v += n.sample(rng);
                }
            }
            data.extend_from_slice(&view);
            labels.push(y);
        }
    }
    Ok((Matrix::from_raw(labels.len(), dim, data), labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    /// Rank-N-Contrast pretraining.
    RncPretrained,
    /// Encoder and head trained jointly on the L1 regression loss.
    SupervisedBaseline,
    /// No pretraining.
    RandomInit,
}

impl EncoderVariant {
    pub fn tag(self) -> &'static str {
        match self {
            EncoderVariant::RncPretrained => "rnc-pretrained",
            EncoderVariant::SupervisedBaseline => "supervised-baseline",
            EncoderVariant::RandomInit => "random-init",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [
            EncoderVariant::RncPretrained,
            EncoderVariant::SupervisedBaseline,
            EncoderVariant::RandomInit,
        ]
        .into_iter()
        .find(|v| v.tag() == tag)
    }
}

/// Encoder, probe head and training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPipeline {
    pub variant: EncoderVariant,
    pub encoder: MlpEncoder,
    pub encoder_frozen: bool,
    pub head: LinearHead,
    /// One loss value per pretraining step.
    pub pretrain_curve: Vec<f64>,
    pub probe: Option<ProbeOutcome>,
    pub config: TrainConfig,
    /// Training RNG at the end of the run.
    pub rng_state: ChaCha8Rng,
}

impl TrainedPipeline {
    /// Encoder output for every scene in `indices`.
    pub fn embeddings(&self, dataset: &Dataset, indices: &[usize]) -> Result<Matrix> {
        self.encoder.embed(&dataset.features(indices))
    }

    pub fn predict(&self, dataset: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
        self.head.predict(&self.embeddings(dataset, indices)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, CHECKPOINT_SCHEMA, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = io::read_json(path, CHECKPOINT_SCHEMA)?;
        p.encoder.validate()?;
        LinearHead::new(p.head.weights.clone(), p.head.bias)?;
        Ok(p)
    }
}

pub const CHECKPOINT_SCHEMA: &str = "landprobe.checkpoint";

fn train_indices(dataset: &Dataset) -> Result<Vec<usize>> {
    let idx = dataset.indices(Split::Train);
    if idx.is_empty() {
        return Err(Error::Empty("train split"));
    }
    Ok(idx)
}

/// RNC pretraining. Returns the per-step loss curve.
pub fn pretrain_rnc(
    encoder: &mut MlpEncoder,
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    config.validate()?;
    let pool = train_indices(dataset)?;
    let steps = config.pretrain_steps(pool.len());
    let mut sampler = BatchSampler::new(pool);
    let mut params = encoder.params();
    let mut opt = Optimizer::new(config.optimizer, params.len());
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sampler.next(config.batch_scenes, rng);
        let (x, y) = two_view_batch(dataset, &batch, &config.augmentation, rng)?;
        let trace = encoder.forward(&x)?;
        let out = rnc_loss(&RncBatch::new(trace.embedding(), &y)?, &config.rnc)?;
        let grads = encoder.backward(&trace, &out.grad)?;
        opt.step(&mut params, &grads, cosine_lr(config.pretrain_lr, step, steps));
        encoder.set_params(&params)?;
        curve.push(out.value);
    }
    Ok(curve)
}

/// Joint encoder + head training on the mean absolute error, with the same
/// batching, augmentation, optimizer and schedule as [`pretrain_rnc`].
pub fn pretrain_supervised(
    encoder: &mut MlpEncoder,
    head: &mut LinearHead,
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    config.validate()?;
    let pool = train_indices(dataset)?;
    let steps = config.pretrain_steps(pool.len());
    let mut sampler = BatchSampler::new(pool);
    let n_enc = encoder.param_count();
    let mut params = encoder.params();
    params.extend_from_slice(&head.weights);
    params.push(head.bias);
    let mut opt = Optimizer::new(config.optimizer, params.len());
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sampler.next(config.batch_scenes, rng);
        let (x, y) = two_view_batch(dataset, &batch, &config.augmentation, rng)?;
        let trace = encoder.forward(&x)?;
        let emb = trace.embedding();
        let m = y.len() as f64;
        let mut grad_emb = Matrix::zeros(emb.rows(), emb.cols());
        let mut grad_head = vec![0.0; head.dim() + 1];
        let mut loss = 0.0;
        for (r, &target) in y.iter().enumerate() {
            let e = emb.row(r);
            let residual = dot(&head.weights, e) + head.bias - target;
            loss += residual.abs();
            let s = l1_subgradient(residual) / m;
            for (k, w) in head.weights.iter().enumerate() {
                grad_emb.set(r, k, s * w);
                grad_head[k] += s * e[k];
            }
            grad_head[head.dim()] += s;
        }
        let mut grads = encoder.backward(&trace, &grad_emb)?;
        grads.extend_from_slice(&grad_head);
        opt.step(&mut params, &grads, cosine_lr(config.pretrain_lr, step, steps));
        encoder.set_params(&params[..n_enc])?;
        let dim = head.dim();
        head.weights.copy_from_slice(&params[n_enc..n_enc + dim]);
        head.bias = params[n_enc + dim];
        curve.push(loss / m);
    }
    Ok(curve)
}

/// `sign(r)` with `sign(0) = 0`.
fn l1_subgradient(residual: f64) -> f64 {
    if residual > 0.0 {
        1.0
    } else if residual < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub head: LinearHead,
    /// Zero-based epoch whose head was kept.
    pub best_epoch: usize,
    pub best_val_r2: f64,
    pub train_l1_curve: Vec<f64>,
    pub val_r2_curve: Vec<f64>,
}

/// Fits the linear head on frozen embeddings by L1 subgradient descent with
/// an exponentially decaying rate, keeping the epoch with the best
/// validation R².
pub fn train_probe(
    pipeline: &TrainedPipeline,
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeOutcome> {
    if !pipeline.encoder_frozen {
        return Err(invalid("pipeline", "encoder must be frozen before probing"));
    }
    config.validate()?;
    let train = train_indices(dataset)?;
    let val = dataset.indices(Split::Val);
    if val.is_empty() {
        return Err(Error::Empty("val split"));
    }
    let train_emb = pipeline.embeddings(dataset, &train)?;
    let train_y = dataset.targets(&train)?;
    let val_emb = pipeline.embeddings(dataset, &val)?;
    let val_y = dataset.targets(&val)?;
    fit_probe(&train_emb, &train_y, &val_emb, &val_y, config, rng)
}

/// Probe fitting on precomputed embeddings.
pub fn fit_probe(
    train_emb: &Matrix,
    train_y: &[f64],
    val_emb: &Matrix,
    val_y: &[f64],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeOutcome> {
    if train_y.is_empty() {
        return Err(Error::Empty("train split"));
    }
    if val_y.is_empty() {
        return Err(Error::Empty("val split"));
    }
    let dim = train_emb.cols();
    let mut sorted = train_y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut head = LinearHead::zeros(dim);
    head.bias = sorted[sorted.len() / 2];
    let mut params: Vec<f64> = head.weights.iter().copied().chain([head.bias]).collect();
    let mut opt = Optimizer::new(config.optimizer, params.len());
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut best: Option<(f64, usize, LinearHead)> = None;
    let (mut l1_curve, mut r2_curve) = (Vec::new(), Vec::new());
    let mut lr = config.probe_lr;
    for epoch in 0..config.probe_epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.probe_batch) {
            let mut grads = vec![0.0; dim + 1];
            let m = chunk.len() as f64;
            for &r in chunk {
                let e = train_emb.row(r);
                let residual = dot(&params[..dim], e) + params[dim] - train_y[r];
                epoch_loss += residual.abs();
                let s = l1_subgradient(residual) / m;
                for k in 0..dim {
                    grads[k] += s * e[k];
                }
                grads[dim] += s;
            }
            opt.step(&mut params, &grads, lr);
        }
        lr *= config.probe_lr_decay;
        head = LinearHead::new(params[..dim].to_vec(), params[dim])?;
        let r2 = r_squared(&head.predict(val_emb)?, val_y)?;
        l1_curve.push(epoch_loss / train_y.len() as f64);
        r2_curve.push(r2);
        if best.as_ref().is_none_or(|(b, _, _)| r2 > *b) {
            best = Some((r2, epoch, head.clone()));
        }
    }
    let (best_val_r2, best_epoch, head) = best.expect("at least one epoch");
    Ok(ProbeOutcome {
        head,
        best_epoch,
        best_val_r2,
        train_l1_curve: l1_curve,
        val_r2_curve: r2_curve,
    })
}

/// Full two-stage run for one encoder variant.
pub fn train_pipeline(dataset: &Dataset, config: &TrainConfig, variant: EncoderVariant) -> Result<TrainedPipeline> {
    config.validate()?;
    let mut sizes = vec![dataset.feature_dim()];
    sizes.extend_from_slice(&config.encoder_widths);
    // encoder init depends only on the seed, so all variants start equal
    let mut encoder = init_encoder(&sizes, derive_seed(config.seed, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2));
    let pretrain_curve = match variant {
        EncoderVariant::RncPretrained => pretrain_rnc(&mut encoder, dataset, config, &mut rng)?,
        EncoderVariant::SupervisedBaseline => {
            let mut head = LinearHead::zeros(encoder.embedding_dim());
            let mut init = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 3));
            let s = 1.0 / (head.dim() as f64).sqrt();
            for w in &mut head.weights {
                *w = init.random_range(-s..s);
            }
            pretrain_supervised(&mut encoder, &mut head, dataset, config, &mut rng)?
        }
        EncoderVariant::RandomInit => Vec::new(),
    };
    let mut pipeline = TrainedPipeline {
        variant,
        head: LinearHead::zeros(encoder.embedding_dim()),
        encoder,
        encoder_frozen: true,
        pretrain_curve,
        probe: None,
        config: config.clone(),
        rng_state: rng.clone(),
    };
    let probe = train_probe(&pipeline, dataset, config, &mut rng)?;
    pipeline.head = probe.head.clone();
    pipeline.probe = Some(probe);
    pipeline.rng_state = rng;
    Ok(pipeline)
}

/// R² and Kendall tau of the pipeline's predictions on one split.
pub fn evaluate(pipeline: &TrainedPipeline, dataset: &Dataset, split: Split) -> Result<MetricsReport> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let preds = pipeline.predict(dataset, &idx)?;
    MetricsReport::compute(split.name(), &preds, &dataset.targets(&idx)?)
}

/// Mean over random anchors of Kendall tau between embedding distance and
/// label distance from the anchor. Higher means the latent space is ordered
/// by the target.
pub fn latent_ordering_tau(embeddings: &Matrix, labels: &[f64], anchors: usize, seed: u64) -> Result<f64> {
    crate::error::ensure_len("latent ordering labels", embeddings.rows(), labels.len())?;
    let n = labels.len();
    if n < 3 || anchors == 0 {
        return Err(invalid("embeddings", "need at least three rows and one anchor"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = (0..n).collect();
    picks.shuffle(&mut rng);
    let mut total = 0.0;
    let mut used = 0;
    for &a in picks.iter().cycle().take(anchors) {
        let others: Vec<usize> = (0..n).filter(|&k| k != a).collect();
        let emb_d: Vec<f64> = others
            .iter()
            .map(|&k| sq_dist(embeddings.row(a), embeddings.row(k)).sqrt())
            .collect();
        let lab_d: Vec<f64> = others.iter().map(|&k| (labels[a] - labels[k]).abs()).collect();
        total += kendall_tau(&emb_d, &lab_d)?;
        used += 1;
    }
    Ok(total / used as f64)
}

/// Writes the loss curve as `step,loss` CSV.
pub fn write_loss_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = curve
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), io::fmt_f64(*l)])
        .collect();
    io::write_csv(path, "landprobe.loss-curve", &["step", "loss"], &rows)
}

/// Mean of the first and last `window` entries.
pub fn curve_endpoints(curve: &[f64], window: usize) -> Option<(f64, f64)> {
    if curve.is_empty() {
        return None;
    }
    let w = window.clamp(1, curve.len());
    let head = curve[..w].iter().sum::<f64>() / w as f64;
    let tail = curve[curve.len() - w..].iter().sum::<f64>() / w as f64;
    Some((head, tail))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_task_dataset, SplitFractions, TaskDatasetConfig};

    fn small_dataset(seed: u64) -> Dataset {
        let mut ds = build_task_dataset(
            &TaskDatasetConfig {
                n: 400,
                ..Default::default()
            },
            seed,
        )
        .unwrap();
        ds.stratified_split(5, SplitFractions::default(), seed).unwrap();
        ds
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            pretrain_budget: Budget::Steps(60),
            probe_epochs: 20,
            ..Default::default()
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-15);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let ds = small_dataset(1);
        let cfg = TrainConfig {
            pretrain_lr: 0.0,
            ..quick_config()
        };
        let mut enc = init_encoder(&[ds.feature_dim(), 16, 8], 3).unwrap();
        let before = enc.fingerprint();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        pretrain_rnc(&mut enc, &ds, &cfg, &mut rng).unwrap();
        assert_eq!(before, enc.fingerprint());
    }

    #[test]
    fn pretraining_is_deterministic_and_descends() {
        let ds = small_dataset(2);
        let cfg = quick_config();
        let run = || {
            let mut enc = init_encoder(&[ds.feature_dim(), 32, 8], 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            pretrain_rnc(&mut enc, &ds, &cfg, &mut rng).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        let (first, last) = curve_endpoints(&a, 10).unwrap();
        assert!(last < first, "loss went from {first} to {last}");
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let ds = build_task_dataset(
            &TaskDatasetConfig {
                n: 100,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let mut enc = init_encoder(&[ds.feature_dim(), 4], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            pretrain_rnc(&mut enc, &ds, &quick_config(), &mut rng),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn probe_recovers_identity_on_one_dimensional_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ys: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let emb = Matrix::new(300, 1, ys.clone()).unwrap();
        let cfg = TrainConfig {
            probe_lr: 0.02,
            ..Default::default()
        };
        let out = fit_probe(&emb, &ys, &emb, &ys, &cfg, &mut rng).unwrap();
        assert!(out.best_val_r2 > 0.99, "val R² {}", out.best_val_r2);
        assert!((out.head.weights[0] - 1.0).abs() < 0.05);
        assert!(out.head.bias.abs() < 0.05);
    }

    #[test]
    fn probe_on_constant_labels_is_an_error() {
        let emb = Matrix::new(20, 1, (0..20).map(f64::from).collect()).unwrap();
        let ys = vec![3.0; 20];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = fit_probe(&emb, &ys, &emb, &ys, &TrainConfig::default(), &mut rng);
        assert!(matches!(r, Err(Error::ZeroVariance)));
    }

    #[test]
    fn probe_keeps_the_best_validation_epoch_and_encoder_is_untouched() {
        let ds = small_dataset(3);
        let cfg = quick_config();
        let pipeline = train_pipeline(&ds, &cfg, EncoderVariant::RncPretrained).unwrap();
        let probe = pipeline.probe.as_ref().unwrap();
        let max = probe.val_r2_curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(probe.best_val_r2, max);
        assert_eq!(probe.val_r2_curve[probe.best_epoch], max);
        // re-evaluating the saved head reproduces the selected R² bit-exactly
        let val = evaluate(&pipeline, &ds, Split::Val).unwrap();
        assert_eq!(val.r2.to_bits(), max.to_bits());

        let before = pipeline.encoder.fingerprint();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        train_probe(&pipeline, &ds, &cfg, &mut rng).unwrap();
        assert_eq!(before, pipeline.encoder.fingerprint());

        let mut unfrozen = pipeline.clone();
        unfrozen.encoder_frozen = false;
        assert!(train_probe(&unfrozen, &ds, &cfg, &mut rng).is_err());
    }

    #[test]
    fn evaluate_reports_split_size_and_beats_untrained_head() {
        let ds = small_dataset(4);
        let pipeline = train_pipeline(&ds, &quick_config(), EncoderVariant::RncPretrained).unwrap();
        let test = evaluate(&pipeline, &ds, Split::Test).unwrap();
        assert_eq!(test.n, ds.indices(Split::Test).len());
        let mut random = pipeline.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for w in &mut random.head.weights {
            *w = rng.random_range(-1.0..1.0);
        }
        let untrained = evaluate(&random, &ds, Split::Test).unwrap();
        assert!(untrained.r2 < test.r2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = small_dataset(5);
        let pipeline = train_pipeline(
            &ds,
            &TrainConfig {
                pretrain_budget: Budget::Epochs(1),
                probe_epochs: 3,
                ..Default::default()
            },
            EncoderVariant::SupervisedBaseline,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        pipeline.save(&path).unwrap();
        assert_eq!(TrainedPipeline::load(&path).unwrap(), pipeline);
        // one epoch over 256 train scenes in batches of 32
        assert_eq!(pipeline.pretrain_curve.len(), 8);
    }

    #[test]
    fn latent_ordering_of_label_embeddings_is_perfect() {
        let ys: Vec<f64> = (0..30).map(|i| (i * i) as f64 * 0.1).collect();
        let emb = Matrix::new(30, 1, ys.clone()).unwrap();
        let tau = latent_ordering_tau(&emb, &ys, 10, 1).unwrap();
        assert!((tau - 1.0).abs() < 1e-12);
    }
}
