//! Synthetic land-cover scenes with a known composition → score mapping,
//! concept probe sets and target-stratified splits.
//!
//! Each scene is a square grid of cells. Every cell carries one land-cover
//! class and an RGB triple drawn around that class's mean colour; the whole
//! scene is then min-max normalized to `[0, 1]`. Targets are a linear function
//! of the realized class fractions plus Gaussian noise.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::io;
use crate::nn::to_hex;
use crate::tensor::Matrix;

pub const NUM_CLASSES: usize = 6;
pub const CHANNELS: usize = 3;
pub const COLOR_STD: f64 = 0.05;
pub const DEFAULT_GRID_SIZE: usize = 8;
pub const MIN_GRID_SIZE: usize = 4;
/// Positive-set size per concept when none is given.
pub const DEFAULT_CONCEPT_SET_SIZE: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LandCoverClass {
    Water,
    Vegetation,
    Agriculture,
    ImperviousSurface,
    Buildings,
    Other,
}

impl LandCoverClass {
    pub const ALL: [LandCoverClass; NUM_CLASSES] = [
        LandCoverClass::Water,
        LandCoverClass::Vegetation,
        LandCoverClass::Agriculture,
        LandCoverClass::ImperviousSurface,
        LandCoverClass::Buildings,
        LandCoverClass::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Mean RGB of the class before per-cell noise.
    pub fn mean_color(self) -> [f64; CHANNELS] {
        match self {
            LandCoverClass::Water => [0.10, 0.30, 0.70],
            LandCoverClass::Vegetation => [0.15, 0.60, 0.20],
            LandCoverClass::Agriculture => [0.75, 0.70, 0.30],
            LandCoverClass::ImperviousSurface => [0.50, 0.50, 0.55],
            LandCoverClass::Buildings => [0.85, 0.35, 0.30],
            LandCoverClass::Other => [0.40, 0.25, 0.10],
        }
    }
}

/// Area fraction per land-cover class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositionProfile {
    fractions: [f64; NUM_CLASSES],
}

impl CompositionProfile {
    pub fn new(fractions: [f64; NUM_CLASSES]) -> Result<Self> {
        if fractions.iter().any(|f| !f.is_finite() || !(0.0..=1.0).contains(f)) {
            return Err(invalid("fractions", "each fraction must lie in [0, 1]"));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid("fractions", format!("fractions sum to {sum}, not 1")));
        }
        Ok(Self { fractions })
    }

    /// All mass on one class.
    pub fn pure(class: LandCoverClass) -> Self {
        let mut fractions = [0.0; NUM_CLASSES];
        fractions[class.index()] = 1.0;
        Self { fractions }
    }

    /// Normalizes nonnegative weights onto the simplex.
    pub fn from_weights(weights: [f64; NUM_CLASSES]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || sum <= 0.0 {
            return Err(invalid("weights", "need nonnegative weights with positive sum"));
        }
        let mut fractions = weights.map(|w| w / sum);
        // push the rounding residue onto the largest entry
        let residue = 1.0 - fractions.iter().sum::<f64>();
        let imax = argmax(&fractions);
        fractions[imax] = (fractions[imax] + residue).clamp(0.0, 1.0);
        Self::new(fractions)
    }

    fn from_counts(counts: &[usize; NUM_CLASSES]) -> Self {
        let total: usize = counts.iter().sum();
        Self {
            fractions: counts.map(|c| c as f64 / total as f64),
        }
    }

    pub fn get(&self, class: LandCoverClass) -> f64 {
        self.fractions[class.index()]
    }

    pub fn fractions(&self) -> &[f64; NUM_CLASSES] {
        &self.fractions
    }

    pub fn group_fraction(&self, classes: &[LandCoverClass]) -> f64 {
        classes.iter().map(|c| self.get(*c)).sum()
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Concept {
    Water,
    Vegetation,
    Agriculture,
    ImperviousSurface,
    SparseResidential,
    MediumResidential,
    DenseResidential,
}

impl Concept {
    pub const ALL: [Concept; 7] = [
        Concept::Water,
        Concept::Vegetation,
        Concept::Agriculture,
        Concept::ImperviousSurface,
        Concept::SparseResidential,
        Concept::MediumResidential,
        Concept::DenseResidential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Concept::Water => "water",
            Concept::Vegetation => "vegetation",
            Concept::Agriculture => "agriculture",
            Concept::ImperviousSurface => "impervious_surface",
            Concept::SparseResidential => "sparse_residential",
            Concept::MediumResidential => "medium_residential",
            Concept::DenseResidential => "dense_residential",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The composition bounds for this concept's probe images.
    pub fn spec(self) -> ConceptSpec {
        use LandCoverClass::*;
        let one = |class, lo, hi| ClassRange::new(&[class], lo, hi);
        let green = [Vegetation, Agriculture];
        let ranges = match self {
            Concept::Water => vec![one(Water, 0.9, 1.0)],
            Concept::Vegetation => vec![one(Vegetation, 0.9, 1.0)],
            Concept::Agriculture => vec![one(Agriculture, 0.9, 1.0)],
            Concept::ImperviousSurface => vec![one(ImperviousSurface, 0.9, 1.0)],
            Concept::DenseResidential => vec![one(Buildings, 0.9, 1.0)],
            Concept::MediumResidential => vec![one(Buildings, 0.4, 0.6), ClassRange::new(&green, 0.4, 0.6)],
            Concept::SparseResidential => vec![one(Buildings, 0.1, 0.3), ClassRange::new(&green, 0.7, 0.9)],
        };
        ConceptSpec {
            name: self.name().to_owned(),
            ranges,
        }
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bound on the summed fraction of a group of classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRange {
    pub classes: Vec<LandCoverClass>,
    pub lo: f64,
    pub hi: f64,
}

impl ClassRange {
    pub fn new(classes: &[LandCoverClass], lo: f64, hi: f64) -> Self {
        Self {
            classes: classes.to_vec(),
            lo,
            hi,
        }
    }
}

/// Composition constraints. Classes not named by any range are "free" and
/// absorb whatever mass the ranges leave over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub ranges: Vec<ClassRange>,
}

impl ConceptSpec {
    fn free_classes(&self) -> Vec<LandCoverClass> {
        LandCoverClass::ALL
            .into_iter()
            .filter(|c| !self.ranges.iter().any(|r| r.classes.contains(c)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let infeasible = || Error::Infeasible(self.name.clone());
        let mut seen = Vec::new();
        for r in &self.ranges {
            if r.classes.is_empty() || !(0.0 <= r.lo && r.lo <= r.hi && r.hi <= 1.0) {
                return Err(infeasible());
            }
            for c in &r.classes {
                if seen.contains(c) {
                    return Err(infeasible());
                }
                seen.push(*c);
            }
        }
        let lo: f64 = self.ranges.iter().map(|r| r.lo).sum();
        let hi: f64 = self.ranges.iter().map(|r| r.hi).sum();
        if lo > 1.0 + 1e-12 || (self.free_classes().is_empty() && hi < 1.0 - 1e-12) {
            return Err(infeasible());
        }
        Ok(())
    }

    /// True when `profile` satisfies every range (with a small slack).
    pub fn admits(&self, profile: &CompositionProfile) -> bool {
        self.ranges.iter().all(|r| {
            let f = profile.group_fraction(&r.classes);
            f >= r.lo - 1e-12 && f <= r.hi + 1e-12
        })
    }
}

fn exp_weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>()
}

/// Splits `total` units in proportion to `weights` using largest-remainder
/// rounding; ties go to the lower index.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

const MAX_REJECTIONS: usize = 10_000;

fn sample_profile_with(spec: &ConceptSpec, rng: &mut impl Rng) -> Result<CompositionProfile> {
    spec.validate()?;
    let free = spec.free_classes();
    for _ in 0..MAX_REJECTIONS {
        let totals: Vec<f64> = spec
            .ranges
            .iter()
            .map(|r| {
                if r.hi > r.lo {
                    rng.random_range(r.lo..=r.hi)
                } else {
                    r.lo
                }
            })
            .collect();
        let used: f64 = totals.iter().sum();
        let remainder = 1.0 - used;
        if remainder < -1e-12 || (free.is_empty() && remainder.abs() > 1e-12) {
            continue;
        }
        let mut fractions = [0.0; NUM_CLASSES];
        for (r, t) in spec.ranges.iter().zip(&totals) {
            let w = exp_weights(rng, r.classes.len());
            let s: f64 = w.iter().sum();
            for (c, wi) in r.classes.iter().zip(&w) {
                fractions[c.index()] = t * wi / s;
            }
        }
        if !free.is_empty() && remainder > 0.0 {
            let w = exp_weights(rng, free.len());
            let s: f64 = w.iter().sum();
            for (c, wi) in free.iter().zip(&w) {
                fractions[c.index()] = remainder * wi / s;
            }
        }
        let profile = CompositionProfile::from_weights(fractions)?;
        if spec.admits(&profile) {
            return Ok(profile);
        }
    }
    Err(Error::Infeasible(spec.name.clone()))
}

/// Draws a composition inside the spec's bounds.
pub fn sample_profile(spec: &ConceptSpec, seed: u64) -> Result<CompositionProfile> {
    sample_profile_with(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Like [`sample_profile`] but on the lattice of `cells` cells, so a rendered
/// scene realizes the bounds exactly.
fn sample_counts_with(spec: &ConceptSpec, cells: usize, rng: &mut impl Rng) -> Result<[usize; NUM_CLASSES]> {
    spec.validate()?;
    let free = spec.free_classes();
    let bounds: Vec<(usize, usize)> = spec
        .ranges
        .iter()
        .map(|r| {
            let lo = (r.lo * cells as f64 - 1e-9).ceil().max(0.0) as usize;
            let hi = (r.hi * cells as f64 + 1e-9).floor() as usize;
            (lo, hi.min(cells))
        })
        .collect();
    if bounds.iter().any(|(lo, hi)| lo > hi) {
        return Err(Error::Infeasible(spec.name.clone()));
    }
    for _ in 0..MAX_REJECTIONS {
        let totals: Vec<usize> = bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
        let used: usize = totals.iter().sum();
        if used > cells || (free.is_empty() && used != cells) {
            continue;
        }
        let mut counts = [0usize; NUM_CLASSES];
        for (r, &t) in spec.ranges.iter().zip(&totals) {
            let split = apportion(t, &exp_weights(rng, r.classes.len()));
            for (c, n) in r.classes.iter().zip(split) {
                counts[c.index()] = n;
            }
        }
        if !free.is_empty() {
            let split = apportion(cells - used, &exp_weights(rng, free.len()));
            for (c, n) in free.iter().zip(split) {
                counts[c.index()] = n;
            }
        }
        return Ok(counts);
    }
    Err(Error::Infeasible(spec.name.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test, Split::Unassigned]
            .into_iter()
            .find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    /// `cells × 3`, cells in row-major grid order.
    pub grid: Matrix,
    /// Class of every cell, same order as `grid` rows.
    pub class_map: Vec<LandCoverClass>,
    /// Realized fractions, i.e. class counts of `class_map` over the cell count.
    pub composition: CompositionProfile,
    pub target: Option<f64>,
    pub concept: Option<Concept>,
    pub split: Split,
}

impl Scene {
    /// Flattened features fed to the encoder.
    pub fn features(&self) -> &[f64] {
        self.grid.data()
    }

    pub fn class_count(&self, class: LandCoverClass) -> usize {
        self.class_map.iter().filter(|c| **c == class).count()
    }
}

/// Features of the same scene mirrored left-right.
pub fn flip_horizontal(features: &[f64], grid_size: usize) -> Vec<f64> {
    let mut out = vec![0.0; features.len()];
    for r in 0..grid_size {
        for c in 0..grid_size {
            let src = (r * grid_size + c) * CHANNELS;
            let dst = (r * grid_size + grid_size - 1 - c) * CHANNELS;
            out[dst..dst + CHANNELS].copy_from_slice(&features[src..src + CHANNELS]);
        }
    }
    out
}

/// Lays out the profile on a `grid_size × grid_size` grid and colours it.
pub fn render_scene(profile: &CompositionProfile, seed: u64, grid_size: usize) -> Result<Scene> {
    render_with(profile, &mut ChaCha8Rng::seed_from_u64(seed), grid_size)
}

fn render_with(profile: &CompositionProfile, rng: &mut impl Rng, grid_size: usize) -> Result<Scene> {
    if grid_size < MIN_GRID_SIZE {
        return Err(invalid(
            "grid_size",
            format!("need at least {MIN_GRID_SIZE}x{MIN_GRID_SIZE}, got {grid_size}"),
        ));
    }
    let cells = grid_size * grid_size;
    let counts: [usize; NUM_CLASSES] = apportion(cells, profile.fractions())
        .try_into()
        .expect("one count per class");
    render_counts(&counts, rng, grid_size)
}

fn render_counts(counts: &[usize; NUM_CLASSES], rng: &mut impl Rng, grid_size: usize) -> Result<Scene> {
    let mut class_map: Vec<LandCoverClass> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat_n(LandCoverClass::ALL[i], n))
        .collect();
    class_map.shuffle(rng);
    let noise = Normal::new(0.0, COLOR_STD).expect("valid std");
    let mut data = Vec::with_capacity(class_map.len() * CHANNELS);
    for class in &class_map {
        for m in class.mean_color() {
            data.push(m + noise.sample(rng));
        }
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in &mut data {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
    Ok(Scene {
        id: String::new(),
        grid: Matrix::new(grid_size * grid_size, CHANNELS, data)?,
        composition: CompositionProfile::from_counts(counts),
        class_map,
        target: None,
        concept: None,
        split: Split::Unassigned,
    })
}

/// Composition → score mapping used to label task scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundTruthModel {
    pub weights: [f64; NUM_CLASSES],
    pub noise_std: f64,
    /// Adds a saturating `0.5 * tanh(4 * vegetation)` term.
    pub nonlinear: bool,
}

impl Default for GroundTruthModel {
    fn default() -> Self {
        Self {
            // water, vegetation, agriculture, impervious, buildings, other
            weights: [0.5, 1.0, 0.2, -0.8, -0.3, 0.0],
            noise_std: 0.05,
            nonlinear: false,
        }
    }
}

impl GroundTruthModel {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("ground-truth weights"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid("noise_std", "must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Noise-free score.
    pub fn mean_score(&self, profile: &CompositionProfile) -> f64 {
        let linear: f64 = self.weights.iter().zip(profile.fractions()).map(|(w, p)| w * p).sum();
        if self.nonlinear {
            linear + 0.5 * (4.0 * profile.get(LandCoverClass::Vegetation)).tanh()
        } else {
            linear
        }
    }

    /// Sign of each class weight; the direction a concept built from that
    /// class should push the score.
    pub fn weight_sign(&self, class: LandCoverClass) -> f64 {
        self.weights[class.index()].signum()
    }

    fn score_with(&self, profile: &CompositionProfile, rng: &mut impl Rng) -> f64 {
        let mean = self.mean_score(profile);
        if self.noise_std > 0.0 {
            mean + Normal::new(0.0, self.noise_std).expect("validated std").sample(rng)
        } else {
            mean
        }
    }
}

pub fn ground_truth_score(model: &GroundTruthModel, profile: &CompositionProfile, seed: u64) -> Result<f64> {
    model.validate()?;
    Ok(model.score_with(profile, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Scenes sharing one grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid_size: usize,
    pub scenes: Vec<Scene>,
}

pub const MIN_TASK_SCENES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskDatasetConfig {
    pub n: usize,
    pub grid_size: usize,
    pub model: GroundTruthModel,
}

impl Default for TaskDatasetConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            grid_size: DEFAULT_GRID_SIZE,
            model: GroundTruthModel::default(),
        }
    }
}

fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Task scenes: profiles drawn from an equal mixture of the seven concept
/// specs and a flat Dirichlet over all classes, labelled by `model`.
pub fn build_task_dataset(config: &TaskDatasetConfig, seed: u64) -> Result<Dataset> {
    if config.n < MIN_TASK_SCENES {
        return Err(invalid(
            "n",
            format!(
                "need at least {MIN_TASK_SCENES} scenes for stratification, got {}",
                config.n
            ),
        ));
    }
    config.model.validate()?;
    let specs: Vec<ConceptSpec> = Concept::ALL.iter().map(|c| c.spec()).collect();
    let scenes = (0..config.n)
        .map(|i| {
            let mut rng = scene_rng(seed, i as u64);
            let component = rng.random_range(0..=specs.len());
            let profile = if component < specs.len() {
                sample_profile_with(&specs[component], &mut rng)?
            } else {
                let w: [f64; NUM_CLASSES] = exp_weights(&mut rng, NUM_CLASSES).try_into().expect("six weights");
                CompositionProfile::from_weights(w)?
            };
            let mut scene = render_with(&profile, &mut rng, config.grid_size)?;
            scene.id = format!("s{i:06}");
            scene.target = Some(config.model.score_with(&scene.composition, &mut rng));
            Ok(scene)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        grid_size: config.grid_size,
        scenes,
    })
}

/// Task dataset with its stratified split; the split seed is derived from `seed`.
pub fn build_split_task_dataset(
    config: &TaskDatasetConfig,
    quantiles: usize,
    fractions: SplitFractions,
    seed: u64,
) -> Result<Dataset> {
    let mut ds = build_task_dataset(config, seed)?;
    ds.stratified_split(quantiles, fractions, derive_seed(seed, 20))?;
    Ok(ds)
}

pub const MIN_CONCEPT_SCENES: usize = 10;

/// Probe scenes for one concept, all inside its composition bounds.
pub fn build_concept_set(concept: Concept, n: usize, grid_size: usize, seed: u64) -> Result<Dataset> {
    build_concept_set_from_spec(&concept.spec(), Some(concept), n, grid_size, seed)
}

pub fn build_concept_set_from_spec(
    spec: &ConceptSpec,
    concept: Option<Concept>,
    n: usize,
    grid_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if n < MIN_CONCEPT_SCENES {
        return Err(invalid(
            "n",
            format!("need at least {MIN_CONCEPT_SCENES} concept scenes, got {n}"),
        ));
    }
    if grid_size < MIN_GRID_SIZE {
        return Err(invalid("grid_size", format!("need at least {MIN_GRID_SIZE}")));
    }
    spec.validate()?;
    // separate stream family per concept so concept sets never share draws
    let family = seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(concept.map_or(99, |c| c.index() as u64 + 1)));
    let scenes = (0..n)
        .map(|i| {
            let mut rng = scene_rng(family, i as u64);
            let counts = sample_counts_with(spec, grid_size * grid_size, &mut rng)?;
            let mut scene = render_counts(&counts, &mut rng, grid_size)?;
            scene.id = format!("{}-{i:05}", spec.name);
            scene.concept = concept;
            Ok(scene)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { grid_size, scenes })
}

/// The seven concept sets of a run with global seed `seed`.
pub fn build_run_concept_sets(n: usize, grid_size: usize, seed: u64) -> Result<Vec<(Concept, Dataset)>> {
    build_all_concept_sets(n, grid_size, derive_seed(seed, 10))
}

/// Builds all seven concept sets.
pub fn build_all_concept_sets(n: usize, grid_size: usize, seed: u64) -> Result<Vec<(Concept, Dataset)>> {
    Concept::ALL
        .into_iter()
        .map(|c| Ok((c, build_concept_set(c, n, grid_size, seed)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.64,
            val: 0.16,
            test: 0.20,
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.grid_size * self.grid_size * CHANNELS
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.scenes.len())
            .filter(|&i| self.scenes[i].split == split)
            .collect()
    }

    /// Feature rows for the given scenes.
    pub fn features(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim());
        for &i in indices {
            data.extend_from_slice(self.scenes[i].features());
        }
        Matrix::from_raw(indices.len(), self.feature_dim(), data)
    }

    pub fn all_features(&self) -> Matrix {
        self.features(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Targets for the given scenes; errors if any is unlabelled.
    pub fn targets(&self, indices: &[usize]) -> Result<Vec<f64>> {
        indices
            .iter()
            .map(|&i| {
                self.scenes[i]
                    .target
                    .ok_or_else(|| invalid("dataset", format!("scene {} has no target", self.scenes[i].id)))
            })
            .collect()
    }

    /// Assigns train/val/test within each target-quantile bin.
    pub fn stratified_split(&mut self, quantile_count: usize, fractions: SplitFractions, seed: u64) -> Result<()> {
        let parts = [fractions.train, fractions.val, fractions.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("fractions", "split fractions must be in [0,1] and sum to 1"));
        }
        if quantile_count == 0 {
            return Err(invalid("quantile_count", "must be positive"));
        }
        let n = self.scenes.len();
        if n < quantile_count * 5 {
            return Err(invalid(
                "dataset",
                format!("{n} scenes is too few for {quantile_count} quantile bins"),
            ));
        }
        let targets = self.targets(&(0..n).collect::<Vec<_>>())?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            targets[a]
                .total_cmp(&targets[b])
                .then_with(|| self.scenes[a].id.cmp(&self.scenes[b].id))
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for q in 0..quantile_count {
            let mut bin = order[q * n / quantile_count..(q + 1) * n / quantile_count].to_vec();
            bin.shuffle(&mut rng);
            let counts = apportion(bin.len(), &parts);
            let mut it = bin.into_iter();
            for (split, count) in [Split::Train, Split::Val, Split::Test].into_iter().zip(counts) {
                for i in it.by_ref().take(count) {
                    self.scenes[i].split = split;
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over ids, splits, targets, compositions and grids.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.grid_size as u64).to_le_bytes());
        for s in &self.scenes {
            h.update(s.id.as_bytes());
            h.update([0, s.split as u8, s.concept.map_or(255, |c| c as u8)]);
            h.update(s.target.map_or(u64::MAX, f64::to_bits).to_le_bytes());
            for f in s.composition.fractions() {
                h.update(f.to_bits().to_le_bytes());
            }
            for v in s.grid.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        to_hex(&h.finalize())
    }

    /// Writes `manifest.json` and `grids.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest {
            grid_size: self.grid_size,
            channels: CHANNELS,
            grids_file: GRIDS_FILE.to_owned(),
            scenes: self
                .scenes
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id.clone(),
                    split: s.split,
                    target: s.target,
                    concept: s.concept.map(|c| c.name().to_owned()),
                    composition: *s.composition.fractions(),
                    class_map: s.class_map.iter().map(|c| char::from(b'0' + c.index() as u8)).collect(),
                })
                .collect(),
        };
        io::write_json(&dir.join(MANIFEST_FILE), MANIFEST_SCHEMA, &manifest)?;
        io::write_grids(&dir.join(GRIDS_FILE), &self.all_features())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = io::read_json(&dir.join(MANIFEST_FILE), MANIFEST_SCHEMA)?;
        let grids = io::read_grids(&dir.join(&manifest.grids_file))?;
        let cells = manifest.grid_size * manifest.grid_size;
        let bad = |reason: String| Error::Format {
            what: "dataset",
            reason,
        };
        if grids.rows() != manifest.scenes.len() || grids.cols() != cells * manifest.channels {
            return Err(bad("grid file does not match manifest".into()));
        }
        let scenes = manifest
            .scenes
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let class_map = e
                    .class_map
                    .bytes()
                    .map(|b| {
                        LandCoverClass::from_index(b.wrapping_sub(b'0') as usize)
                            .ok_or_else(|| bad(format!("bad class code in scene {}", e.id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if class_map.len() != cells {
                    return Err(bad(format!("class map of scene {} has wrong length", e.id)));
                }
                let concept = match e.concept {
                    Some(name) => {
                        Some(Concept::from_name(&name).ok_or_else(|| bad(format!("unknown concept {name}")))?)
                    }
                    None => None,
                };
                Ok(Scene {
                    grid: Matrix::new(cells, manifest.channels, grids.row(i).to_vec())?,
                    composition: CompositionProfile::new(e.composition)?,
                    id: e.id,
                    class_map,
                    target: e.target,
                    concept,
                    split: e.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid_size: manifest.grid_size,
            scenes,
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GRIDS_FILE: &str = "grids.bin";
pub const MANIFEST_SCHEMA: &str = "landprobe.dataset";

#[derive(Serialize, Deserialize)]
struct Manifest {
    grid_size: usize,
    channels: usize,
    grids_file: String,
    scenes: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    split: Split,
    target: Option<f64>,
    concept: Option<String>,
    composition: [f64; NUM_CLASSES],
    /// One digit per cell, the class index.
    class_map: String,
}

/// A seed derived from a parent seed and a label, for independent sub-streams.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut rng = scene_rng(seed, label.wrapping_add(1 << 40));
    rng.next_u64()
}
