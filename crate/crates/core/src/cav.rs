//! Concept activation vectors: unit normals of linear classifiers separating a
//! concept's layer activations from activations of other concepts.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Concept, Dataset};
use crate::error::{ensure_len, invalid, Error, Result};
use crate::io;
use crate::nn::MlpEncoder;
use crate::tensor::{axpy, dot, norm2, Matrix};

/// One concept's activations at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptActivations {
    pub concept: String,
    pub layer: usize,
    pub activations: Matrix,
    pub ids: Vec<String>,
}

impl ConceptActivations {
    pub fn new(concept: impl Into<String>, layer: usize, activations: Matrix, ids: Vec<String>) -> Result<Self> {
        ensure_len("concept activation ids", activations.rows(), ids.len())?;
        if !activations.is_finite() {
            return Err(Error::NonFinite("concept activations"));
        }
        Ok(Self {
            concept: concept.into(),
            layer,
            activations,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Runs every scene through the encoder and keeps layer `layer`.
pub fn collect_activations(
    encoder: &MlpEncoder,
    scenes: &Dataset,
    layer: usize,
    concept: impl Into<String>,
) -> Result<ConceptActivations> {
    encoder.check_layer(layer)?;
    let trace = encoder.forward(&scenes.all_features())?;
    ConceptActivations::new(
        concept,
        layer,
        trace.layers[layer].clone(),
        scenes.scenes.iter().map(|s| s.id.clone()).collect(),
    )
}

/// Negatives drawn from the pooled activations of all other concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSample {
    pub activations: ConceptActivations,
    pub requested: usize,
    /// The pool held fewer than `requested` rows, so all of it was taken.
    pub shortfall: bool,
}

pub const DEFAULT_NEGATIVES: usize = 500;

/// Uniform sample without replacement from the union of every concept except
/// `target`.
pub fn sample_negatives(
    all_concepts: &[ConceptActivations],
    target: &str,
    n: usize,
    seed: u64,
) -> Result<NegativeSample> {
    let pool: Vec<(&ConceptActivations, usize)> = all_concepts
        .iter()
        .filter(|c| c.concept != target)
        .flat_map(|c| (0..c.len()).map(move |r| (c, r)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Empty("negative pool"));
    }
    let layer = pool[0].0.layer;
    let width = pool[0].0.activations.cols();
    if pool
        .iter()
        .any(|(c, _)| c.layer != layer || c.activations.cols() != width)
    {
        return Err(invalid("all_concepts", "negatives must come from a single layer"));
    }
    let take = n.min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), take);
    let mut data = Vec::with_capacity(take * width);
    let mut ids = Vec::with_capacity(take);
    for p in picks.iter() {
        let (c, r) = pool[p];
        data.extend_from_slice(c.activations.row(r));
        ids.push(c.ids[r].clone());
    }
    Ok(NegativeSample {
        activations: ConceptActivations::new(format!("not-{target}"), layer, Matrix::new(take, width, data)?, ids)?,
        requested: n,
        shortfall: take < n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierLoss {
    #[default]
    Hinge,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CavConfig {
    pub holdout_fraction: f64,
    /// L2 regularization strength.
    pub lambda: f64,
    /// Full-batch subgradient steps.
    pub steps: usize,
    pub loss: ClassifierLoss,
    pub negatives: usize,
}

impl Default for CavConfig {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.2,
            lambda: 1e-3,
            steps: 1000,
            loss: ClassifierLoss::Hinge,
            negatives: DEFAULT_NEGATIVES,
        }
    }
}

impl CavConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(invalid("holdout_fraction", "must lie in [0, 1)"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", "must be positive"));
        }
        if self.steps == 0 {
            return Err(invalid("steps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub concept: String,
    pub layer: usize,
    /// Unit normal, pointing towards the concept.
    pub direction: Vec<f64>,
    /// Offset such that `direction · a + bias > 0` classifies as the concept.
    pub bias: f64,
    pub holdout_accuracy: f64,
    pub seed: u64,
    pub negative_shortfall: bool,
    pub train_ids: Vec<String>,
    pub holdout_ids: Vec<String>,
}

impl Cav {
    pub fn score(&self, activation: &[f64]) -> f64 {
        dot(&self.direction, activation) + self.bias
    }
}

pub const MIN_ROWS_PER_CLASS: usize = 10;

/// Trains a regularized linear classifier (positives vs negatives) and
/// returns its normal as the concept direction.
///
/// Rows are put in id order before the seeded holdout shuffle, so swapping
/// the two classes yields the same split and the negated direction. The
/// classifier sees features centred on the training mean and scaled to unit
/// RMS norm, which makes the direction independent of a common translation.
pub fn train_cav(
    positives: &ConceptActivations,
    negatives: &ConceptActivations,
    config: &CavConfig,
    seed: u64,
) -> Result<Cav> {
    config.validate()?;
    let width = positives.activations.cols();
    ensure_len("cav negatives width", width, negatives.activations.cols())?;
    let mut rows: Vec<(&str, &[f64], f64)> = positives
        .ids
        .iter()
        .zip(positives.activations.iter_rows())
        .map(|(id, r)| (id.as_str(), r, 1.0))
        .chain(
            negatives
                .ids
                .iter()
                .zip(negatives.activations.iter_rows())
                .map(|(id, r)| (id.as_str(), r, -1.0)),
        )
        .collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_holdout = (config.holdout_fraction * rows.len() as f64).round() as usize;
    let (holdout, train) = order.split_at(n_holdout);

    let pos_train = train.iter().filter(|&&i| rows[i].2 > 0.0).count();
    let neg_train = train.len() - pos_train;
    for (class, got) in [("positive", pos_train), ("negative", neg_train)] {
        if got < MIN_ROWS_PER_CLASS {
            return Err(Error::TooFewRows {
                class,
                got,
                need: MIN_ROWS_PER_CLASS,
            });
        }
    }

    // centre and scale on the training rows
    let mut mean = vec![0.0; width];
    for &i in train {
        axpy(1.0, rows[i].1, &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let x: Vec<Vec<f64>> = train
        .iter()
        .map(|&i| rows[i].1.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let y: Vec<f64> = train.iter().map(|&i| rows[i].2).collect();
    let rms = (x.iter().map(|r| dot(r, r)).sum::<f64>() / x.len() as f64).sqrt();
    let scale = if rms > 0.0 { rms } else { 1.0 };
    let x: Vec<Vec<f64>> = x
        .into_iter()
        .map(|r| r.into_iter().map(|v| v / scale).collect())
        .collect();

    let (mut w, mut b) = fit_linear(&x, &y, config);
    if norm2(&w) == 0.0 {
        // no margin violations to learn from; fall back to the mean difference
        w = vec![0.0; width];
        for (r, &label) in x.iter().zip(&y) {
            let k = if label > 0.0 {
                1.0 / pos_train as f64
            } else {
                -1.0 / neg_train as f64
            };
            axpy(k, r, &mut w);
        }
        b = 0.0;
        if norm2(&w) == 0.0 {
            return Err(invalid("activations", "classes are indistinguishable; CAV undefined"));
        }
    }

    // back to raw activation space: f(x) = (w/scale)·x + (b - w·mean/scale)
    let raw_w: Vec<f64> = w.iter().map(|v| v / scale).collect();
    let raw_b = b - dot(&raw_w, &mean);
    let norm = norm2(&raw_w);
    let mut direction: Vec<f64> = raw_w.iter().map(|v| v / norm).collect();
    let mut bias = raw_b / norm;
    // make sure positives score higher on average
    let mean_score = |label: f64| {
        let (sum, count) = train
            .iter()
            .filter(|&&i| rows[i].2 == label)
            .fold((0.0, 0usize), |(s, c), &i| (s + dot(&direction, rows[i].1), c + 1));
        sum / count as f64
    };
    if mean_score(1.0) < mean_score(-1.0) {
        direction.iter_mut().for_each(|v| *v = -*v);
        bias = -bias;
    }

    let holdout_accuracy = if holdout.is_empty() {
        f64::NAN
    } else {
        let correct = holdout
            .iter()
            .filter(|&&i| {
                let s = dot(&direction, rows[i].1) + bias;
                (s > 0.0) == (rows[i].2 > 0.0)
            })
            .count();
        correct as f64 / holdout.len() as f64
    };

    Ok(Cav {
        concept: positives.concept.clone(),
        layer: positives.layer,
        direction,
        bias,
        holdout_accuracy,
        seed,
        negative_shortfall: false,
        train_ids: train.iter().map(|&i| rows[i].0.to_owned()).collect(),
        holdout_ids: holdout.iter().map(|&i| rows[i].0.to_owned()).collect(),
    })
}

/// Deterministic full-batch subgradient descent with the `1/(λt)` step of
/// Pegasos, projection onto the `1/sqrt(λ)` ball, and iterate averaging over
/// the second half of the budget.
fn fit_linear(x: &[Vec<f64>], y: &[f64], config: &CavConfig) -> (Vec<f64>, f64) {
    let width = x[0].len();
    let n = x.len() as f64;
    let lambda = config.lambda;
    let radius = 1.0 / lambda.sqrt();
    let (mut w, mut b) = (vec![0.0; width], 0.0);
    let (mut avg_w, mut avg_b, mut averaged) = (vec![0.0; width], 0.0, 0usize);
    let mut gw = vec![0.0; width];
    for t in 1..=config.steps {
        let eta = 1.0 / (lambda * t as f64);
        gw.iter_mut().zip(&w).for_each(|(g, wi)| *g = lambda * wi);
        let mut gb = 0.0;
        for (row, &label) in x.iter().zip(y) {
            let margin = label * (dot(&w, row) + b);
            let coeff = match config.loss {
                ClassifierLoss::Hinge => {
                    if margin < 1.0 {
                        -label
                    } else {
                        0.0
                    }
                }
                ClassifierLoss::Logistic => -label / (1.0 + margin.exp()),
            };
            if coeff != 0.0 {
                axpy(coeff / n, row, &mut gw);
                gb += coeff / n;
            }
        }
        axpy(-eta, &gw, &mut w);
        b -= eta * gb;
        let norm = norm2(&w);
        if norm > radius {
            w.iter_mut().for_each(|v| *v *= radius / norm);
        }
        if 2 * t > config.steps {
            axpy(1.0, &w, &mut avg_w);
            avg_b += b;
            averaged += 1;
        }
    }
    let k = averaged.max(1) as f64;
    (avg_w.into_iter().map(|v| v / k).collect(), avg_b / k)
}

/// Holdout accuracy per (concept, layer), and the CAVs behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub concepts: Vec<String>,
    pub layers: Vec<usize>,
    /// `accuracy[concept][layer position]`
    pub accuracy: Vec<Vec<f64>>,
    #[serde(skip)]
    pub cavs: Vec<Cav>,
}

impl AccuracyTable {
    pub fn mean_accuracy(&self, layer: usize) -> Option<f64> {
        let pos = self.layers.iter().position(|&l| l == layer)?;
        Some(self.accuracy.iter().map(|row| row[pos]).sum::<f64>() / self.accuracy.len() as f64)
    }

    pub fn cav(&self, concept: &str, layer: usize) -> Option<&Cav> {
        self.cavs.iter().find(|c| c.concept == concept && c.layer == layer)
    }

    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .concepts
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| {
                self.layers
                    .iter()
                    .enumerate()
                    .map(move |(li, l)| vec![c.clone(), l.to_string(), io::fmt_f64(self.accuracy[ci][li])])
            })
            .collect();
        io::csv_string(ACCURACY_SCHEMA, &["concept", "layer", "accuracy"], &rows)
    }
}

pub const ACCURACY_SCHEMA: &str = "landprobe.concept-accuracy";
pub const CAV_SCHEMA: &str = "landprobe.cavs";

/// Trains one CAV per (concept, layer) against negatives pooled from the
/// other concepts.
pub fn concept_accuracy_by_layer(
    encoder: &MlpEncoder,
    concept_sets: &[(Concept, Dataset)],
    layers: &[usize],
    config: &CavConfig,
    seed: u64,
) -> Result<AccuracyTable> {
    if concept_sets.len() < 2 {
        return Err(invalid("concept_sets", "need at least two concepts"));
    }
    let mut accuracy = vec![vec![0.0; layers.len()]; concept_sets.len()];
    let mut cavs = Vec::with_capacity(concept_sets.len() * layers.len());
    for (li, &layer) in layers.iter().enumerate() {
        let acts = concept_sets
            .iter()
            .map(|(c, ds)| collect_activations(encoder, ds, layer, c.name()))
            .collect::<Result<Vec<_>>>()?;
        for (ci, (concept, _)) in concept_sets.iter().enumerate() {
            let job_seed = derive_seed(seed, (concept.index() * 1000 + layer) as u64);
            let neg = sample_negatives(&acts, concept.name(), config.negatives, job_seed)?;
            let mut cav = train_cav(&acts[ci], &neg.activations, config, job_seed)?;
            cav.negative_shortfall = neg.shortfall;
            accuracy[ci][li] = cav.holdout_accuracy;
            cavs.push(cav);
        }
    }
    Ok(AccuracyTable {
        concepts: concept_sets.iter().map(|(c, _)| c.name().to_owned()).collect(),
        layers: layers.to_vec(),
        accuracy,
        cavs,
    })
}

/// Persisted form of a CAV (ids of the split are omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavRecord {
    pub concept: String,
    pub layer: usize,
    pub direction: Vec<f64>,
    pub bias: f64,
    pub accuracy: f64,
    pub seed: u64,
    pub shortfall: bool,
}

impl From<&Cav> for CavRecord {
    fn from(c: &Cav) -> Self {
        Self {
            concept: c.concept.clone(),
            layer: c.layer,
            direction: c.direction.clone(),
            bias: c.bias,
            accuracy: c.holdout_accuracy,
            seed: c.seed,
            shortfall: c.negative_shortfall,
        }
    }
}

impl From<CavRecord> for Cav {
    fn from(r: CavRecord) -> Self {
        Self {
            concept: r.concept,
            layer: r.layer,
            direction: r.direction,
            bias: r.bias,
            holdout_accuracy: r.accuracy,
            seed: r.seed,
            negative_shortfall: r.shortfall,
            train_ids: Vec::new(),
            holdout_ids: Vec::new(),
        }
    }
}

pub fn save_cavs(path: &Path, cavs: &[Cav]) -> Result<()> {
    let records: Vec<CavRecord> = cavs.iter().map(CavRecord::from).collect();
    io::write_json(path, CAV_SCHEMA, &records)
}

pub fn load_cavs(path: &Path) -> Result<Vec<Cav>> {
    let records: Vec<CavRecord> = io::read_json(path, CAV_SCHEMA)?;
    Ok(records.into_iter().map(Cav::from).collect())
}
