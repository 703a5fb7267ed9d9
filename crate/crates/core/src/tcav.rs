//! Conceptual sensitivities, TCAV scores, layer-space integrated gradients,
//! signed magnitude normalization and instance-to-concept alignment.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cav::Cav;
use crate::data::{Dataset, Scene};
use crate::error::{ensure_len, invalid, Error, Result};
use crate::io;
use crate::nn::{grad_at_layer_activation, grad_wrt_layer, LinearHead, MlpEncoder};
use crate::tensor::{axpy, dot, norm2, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitivityMethod {
    PlainGradient,
    IntegratedGradients,
}

impl SensitivityMethod {
    pub const ALL: [SensitivityMethod; 2] = [Self::PlainGradient, Self::IntegratedGradients];

    pub fn name(self) -> &'static str {
        match self {
            Self::PlainGradient => "plain-gradient",
            Self::IntegratedGradients => "integrated-gradients",
        }
    }

    /// Accepts the long names and the short CLI forms `plain` / `ig`.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "plain" | "plain-gradient" => Some(Self::PlainGradient),
            "ig" | "integrated-gradients" => Some(Self::IntegratedGradients),
            _ => None,
        }
    }
}

impl fmt::Display for SensitivityMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub scene_id: String,
    pub label: Option<f64>,
    pub concept: String,
    pub layer: usize,
    pub method: SensitivityMethod,
    pub value: f64,
    /// Filled in by [`normalize_magnitudes`].
    pub normalized: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IgConfig {
    pub steps: usize,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

impl IgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(invalid("steps", "integrated gradients needs at least 2 steps"));
        }
        Ok(())
    }
}

fn check_cav(encoder: &MlpEncoder, cav: &Cav) -> Result<()> {
    let width = encoder.layer_width(cav.layer)?;
    ensure_len("cav direction", width, cav.direction.len())
}

/// Directional derivative of the output along the CAV at the instance's
/// layer activation.
pub fn plain_sensitivity(encoder: &MlpEncoder, head: &LinearHead, x: &[f64], cav: &Cav) -> Result<f64> {
    check_cav(encoder, cav)?;
    Ok(dot(&grad_wrt_layer(encoder, head, x, cav.layer)?, &cav.direction))
}

/// Integrated gradients attributions over layer `layer`, along the straight
/// path from the activation of the all-zero input to that of `x`, with a
/// midpoint rule of `ig.steps` points.
pub fn integrated_gradients_layer(
    encoder: &MlpEncoder,
    head: &LinearHead,
    x: &[f64],
    layer: usize,
    ig: &IgConfig,
) -> Result<Vec<f64>> {
    ig.validate()?;
    encoder.check_layer(layer)?;
    ensure_len("input", encoder.input_dim(), x.len())?;
    let a = encoder.forward_one(x)?.swap_remove(layer);
    let base = encoder.forward_one(&vec![0.0; x.len()])?.swap_remove(layer);
    let delta: Vec<f64> = a.iter().zip(&base).map(|(a, b)| a - b).collect();
    let mut acc = vec![0.0; a.len()];
    let mut point = vec![0.0; a.len()];
    let m = ig.steps as f64;
    for t in 0..ig.steps {
        let alpha = (t as f64 + 0.5) / m;
        for ((p, b), d) in point.iter_mut().zip(&base).zip(&delta) {
            *p = b + alpha * d;
        }
        axpy(1.0, &grad_at_layer_activation(encoder, head, layer, &point)?, &mut acc);
    }
    Ok(acc.iter().zip(&delta).map(|(g, d)| d * g / m).collect())
}

pub fn ig_sensitivity(encoder: &MlpEncoder, head: &LinearHead, x: &[f64], cav: &Cav, ig: &IgConfig) -> Result<f64> {
    check_cav(encoder, cav)?;
    Ok(dot(
        &integrated_gradients_layer(encoder, head, x, cav.layer, ig)?,
        &cav.direction,
    ))
}

fn record(scene: &Scene, cav: &Cav, method: SensitivityMethod, value: f64) -> Result<SensitivityRecord> {
    if !value.is_finite() {
        return Err(Error::NonFinite("sensitivity"));
    }
    Ok(SensitivityRecord {
        scene_id: scene.id.clone(),
        label: scene.target,
        concept: cav.concept.clone(),
        layer: cav.layer,
        method,
        value,
        normalized: None,
    })
}

pub fn sensitivity_plain(
    encoder: &MlpEncoder,
    head: &LinearHead,
    scene: &Scene,
    cav: &Cav,
) -> Result<SensitivityRecord> {
    let s = plain_sensitivity(encoder, head, scene.features(), cav)?;
    record(scene, cav, SensitivityMethod::PlainGradient, s)
}

pub fn sensitivity_ig(
    encoder: &MlpEncoder,
    head: &LinearHead,
    scene: &Scene,
    cav: &Cav,
    ig: &IgConfig,
) -> Result<SensitivityRecord> {
    let s = ig_sensitivity(encoder, head, scene.features(), cav, ig)?;
    record(scene, cav, SensitivityMethod::IntegratedGradients, s)
}

/// Records for every scene in `indices`, in index order.
pub fn compute_sensitivities(
    encoder: &MlpEncoder,
    head: &LinearHead,
    dataset: &Dataset,
    indices: &[usize],
    cav: &Cav,
    method: SensitivityMethod,
    ig: &IgConfig,
) -> Result<Vec<SensitivityRecord>> {
    indices
        .iter()
        .map(|&i| {
            let scene = &dataset.scenes[i];
            match method {
                SensitivityMethod::PlainGradient => sensitivity_plain(encoder, head, scene, cav),
                SensitivityMethod::IntegratedGradients => sensitivity_ig(encoder, head, scene, cav, ig),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavScore {
    pub concept: String,
    pub layer: usize,
    pub method: SensitivityMethod,
    pub score: f64,
    pub positive: usize,
    pub n: usize,
}

/// Fraction of records with strictly positive sensitivity.
pub fn tcav_score(records: &[SensitivityRecord]) -> Result<TcavScore> {
    let first = records.first().ok_or(Error::Empty("sensitivity records"))?;
    if records
        .iter()
        .any(|r| r.concept != first.concept || r.layer != first.layer || r.method != first.method)
    {
        return Err(invalid("records", "must share concept, layer and method"));
    }
    let positive = records.iter().filter(|r| r.value > 0.0).count();
    Ok(TcavScore {
        concept: first.concept.clone(),
        layer: first.layer,
        method: first.method,
        score: positive as f64 / records.len() as f64,
        positive,
        n: records.len(),
    })
}

/// Min-max scales negatives onto [-1, 0] and positives onto [0, 1]
/// independently. Zeros stay 0. A sign group with a single member, or
/// whose members are all equal, maps to ±1.
pub fn normalize_signed(values: &[f64]) -> Vec<f64> {
    let range = |pred: fn(f64) -> bool| {
        values
            .iter()
            .copied()
            .filter(|&v| pred(v))
            .fold(None, |acc: Option<(f64, f64)>, v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    };
    let neg = range(|v| v < 0.0);
    let pos = range(|v| v > 0.0);
    values
        .iter()
        .map(|&v| {
            if v < 0.0 {
                let (lo, hi) = neg.unwrap();
                if hi > lo {
                    (v - hi) / (hi - lo)
                } else {
                    -1.0
                }
            } else if v > 0.0 {
                let (lo, hi) = pos.unwrap();
                if hi > lo {
                    (v - lo) / (hi - lo)
                } else {
                    1.0
                }
            } else {
                0.0
            }
        })
        .collect()
}

pub fn normalize_magnitudes(records: &mut [SensitivityRecord]) {
    let values: Vec<f64> = records.iter().map(|r| r.value).collect();
    for (r, n) in records.iter_mut().zip(normalize_signed(&values)) {
        r.normalized = Some(n);
    }
}

/// Equal-count bins over the label ranking; ties are ordered by position.
pub fn label_bins(labels: &[f64], bins: usize) -> Result<Vec<usize>> {
    if bins < 2 {
        return Err(invalid("bins", "need at least 2 bins"));
    }
    if labels.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("labels"));
    }
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| labels[a].total_cmp(&labels[b]).then(a.cmp(&b)));
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * bins / n;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileBin {
    pub bin: usize,
    /// Label interval covered by the members (None when empty).
    pub label_lo: Option<f64>,
    pub label_hi: Option<f64>,
    pub count: usize,
    pub mean_normalized: Option<f64>,
}

/// Mean normalized sensitivity per label-quantile bin. Normalization is
/// recomputed over the whole record set.
pub fn profile_from_records(records: &[SensitivityRecord], bins: usize) -> Result<Vec<ProfileBin>> {
    let labels = records
        .iter()
        .map(|r| {
            r.label
                .ok_or(invalid("records", "sensitivity profile needs labelled scenes"))
        })
        .collect::<Result<Vec<f64>>>()?;
    let assigned = label_bins(&labels, bins)?;
    let values: Vec<f64> = records.iter().map(|r| r.value).collect();
    let normalized = normalize_signed(&values);
    Ok((0..bins)
        .map(|b| {
            let members: Vec<usize> = (0..records.len()).filter(|&i| assigned[i] == b).collect();
            let count = members.len();
            let fold = |f: fn(f64, f64) -> f64| members.iter().map(|&i| labels[i]).reduce(f);
            ProfileBin {
                bin: b,
                label_lo: fold(f64::min),
                label_hi: fold(f64::max),
                count,
                mean_normalized: (count > 0)
                    .then(|| members.iter().map(|&i| normalized[i]).sum::<f64>() / count as f64),
            }
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn sensitivity_profile(
    encoder: &MlpEncoder,
    head: &LinearHead,
    dataset: &Dataset,
    indices: &[usize],
    cav: &Cav,
    method: SensitivityMethod,
    ig: &IgConfig,
    bins: usize,
) -> Result<Vec<ProfileBin>> {
    let records = compute_sensitivities(encoder, head, dataset, indices, cav, method, ig)?;
    profile_from_records(&records, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub scene_id: String,
    pub label: Option<f64>,
    /// Cosine with each CAV, in CAV order.
    pub cosine: Vec<f64>,
    /// Cosines divided by the L2 norm of their concept's column.
    pub normalized: Vec<f64>,
    pub best_concept: String,
}

/// How cosines are rescaled before the argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentNormalization {
    /// Divide each concept's column of cosines by its L2 norm.
    #[default]
    Column,
    /// Only the CAVs are normalized, so the argmax is over raw cosines.
    None,
}

/// Assigns every embedding to the concept with the highest normalized
/// cosine similarity. Ties go to the earlier CAV.
pub fn align_instances(
    embeddings: &Matrix,
    ids: &[String],
    labels: &[Option<f64>],
    cavs: &[Cav],
    normalization: AlignmentNormalization,
) -> Result<Vec<AlignmentRecord>> {
    ensure_len("alignment ids", embeddings.rows(), ids.len())?;
    ensure_len("alignment labels", embeddings.rows(), labels.len())?;
    let first = cavs.first().ok_or(Error::Empty("cavs"))?;
    if cavs.iter().any(|c| c.layer != first.layer) {
        return Err(invalid("cavs", "all CAVs must come from the same layer"));
    }
    for c in cavs {
        ensure_len("cav direction", embeddings.cols(), c.direction.len())?;
        if norm2(&c.direction) == 0.0 {
            return Err(invalid("cavs", "zero CAV direction"));
        }
    }
    let cosines = embeddings
        .iter_rows()
        .enumerate()
        .map(|(i, e)| {
            let ne = norm2(e);
            if ne == 0.0 {
                return Err(Error::ZeroVector(i));
            }
            Ok(cavs
                .iter()
                .map(|c| (dot(e, &c.direction) / (ne * norm2(&c.direction))).clamp(-1.0, 1.0))
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let col_norms: Vec<f64> = (0..cavs.len())
        .map(|c| match normalization {
            AlignmentNormalization::Column => cosines.iter().map(|row| row[c] * row[c]).sum::<f64>().sqrt(),
            AlignmentNormalization::None => 1.0,
        })
        .collect();
    Ok(cosines
        .into_iter()
        .enumerate()
        .map(|(i, cosine)| {
            let normalized: Vec<f64> = cosine
                .iter()
                .zip(&col_norms)
                .map(|(v, n)| if *n > 0.0 { v / n } else { 0.0 })
                .collect();
            let mut best = 0;
            for (c, v) in normalized.iter().enumerate() {
                if *v > normalized[best] {
                    best = c;
                }
            }
            AlignmentRecord {
                scene_id: ids[i].clone(),
                label: labels[i],
                best_concept: cavs[best].concept.clone(),
                cosine,
                normalized,
            }
        })
        .collect())
}

/// Mean label of the instances aligned to `concept`, if any.
pub fn mean_label_of_aligned(records: &[AlignmentRecord], concept: &str) -> Option<f64> {
    let labels: Vec<f64> = records
        .iter()
        .filter(|r| r.best_concept == concept)
        .filter_map(|r| r.label)
        .collect();
    (!labels.is_empty()).then(|| labels.iter().sum::<f64>() / labels.len() as f64)
}

pub const SENSITIVITY_SCHEMA: &str = "landprobe.sensitivity";
pub const ALIGNMENT_SCHEMA: &str = "landprobe.alignment";
pub const PROFILE_SCHEMA: &str = "landprobe.sensitivity-profile";
pub const TCAV_SCHEMA: &str = "landprobe.tcav";

pub const SENSITIVITY_COLUMNS: [&str; 8] = [
    "scene_id",
    "label",
    "concept",
    "layer",
    "method",
    "S",
    "S_normalized",
    "bin",
];

fn opt(v: Option<f64>) -> String {
    v.map(io::fmt_f64).unwrap_or_default()
}

/// Records with their label bins; the record order is kept.
pub fn sensitivity_csv(records: &[SensitivityRecord], bins: &[usize]) -> Result<String> {
    ensure_len("sensitivity bins", records.len(), bins.len())?;
    let rows: Vec<Vec<String>> = records
        .iter()
        .zip(bins)
        .map(|(r, b)| {
            vec![
                r.scene_id.clone(),
                opt(r.label),
                r.concept.clone(),
                r.layer.to_string(),
                r.method.name().to_owned(),
                io::fmt_f64(r.value),
                opt(r.normalized),
                b.to_string(),
            ]
        })
        .collect();
    Ok(io::csv_string(SENSITIVITY_SCHEMA, &SENSITIVITY_COLUMNS, &rows))
}

pub fn alignment_csv(records: &[AlignmentRecord], concepts: &[String]) -> Result<String> {
    let mut header: Vec<String> = vec!["scene_id".into(), "label".into()];
    header.extend(concepts.iter().map(|c| format!("cos_{c}")));
    header.extend(concepts.iter().map(|c| format!("norm_{c}")));
    header.push("best_concept".into());
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        ensure_len("alignment columns", concepts.len(), r.cosine.len())?;
        let mut row = vec![r.scene_id.clone(), opt(r.label)];
        row.extend(r.cosine.iter().map(|&v| io::fmt_f64(v)));
        row.extend(r.normalized.iter().map(|&v| io::fmt_f64(v)));
        row.push(r.best_concept.clone());
        rows.push(row);
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    Ok(io::csv_string(ALIGNMENT_SCHEMA, &header, &rows))
}

/// One table with a block of bins per (concept, layer, method).
pub fn profile_csv(profiles: &[(&TcavScore, &[ProfileBin])]) -> String {
    let rows: Vec<Vec<String>> = profiles
        .iter()
        .flat_map(|(key, bins)| {
            bins.iter().map(move |b| {
                vec![
                    key.concept.clone(),
                    key.layer.to_string(),
                    key.method.name().to_owned(),
                    b.bin.to_string(),
                    opt(b.label_lo),
                    opt(b.label_hi),
                    b.count.to_string(),
                    opt(b.mean_normalized),
                ]
            })
        })
        .collect();
    io::csv_string(
        PROFILE_SCHEMA,
        &[
            "concept",
            "layer",
            "method",
            "bin",
            "label_lo",
            "label_hi",
            "count",
            "mean_S_normalized",
        ],
        &rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_encoder, output_from_layer, Activation, DenseLayer};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cav(layer: usize, direction: Vec<f64>) -> Cav {
        Cav {
            concept: "c".into(),
            layer,
            direction,
            bias: 0.0,
            holdout_accuracy: 1.0,
            seed: 0,
            negative_shortfall: false,
            train_ids: vec![],
            holdout_ids: vec![],
        }
    }

    fn align(e: &Matrix, ids: &[String], labels: &[Option<f64>], cavs: &[Cav]) -> Result<Vec<AlignmentRecord>> {
        align_instances(e, ids, labels, cavs, AlignmentNormalization::Column)
    }

    fn rec(value: f64) -> SensitivityRecord {
        SensitivityRecord {
            scene_id: "s".into(),
            label: Some(value),
            concept: "c".into(),
            layer: 0,
            method: SensitivityMethod::PlainGradient,
            value,
            normalized: None,
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn identity_top(dim: usize) -> MlpEncoder {
        // a ReLU layer followed by an identity layer
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::new(dim, dim, random_vec(&mut rng, dim * dim)).unwrap();
        MlpEncoder::new(vec![
            DenseLayer::new(w, vec![0.1; dim], Activation::Relu).unwrap(),
            DenseLayer::new(Matrix::identity(dim), vec![0.0; dim], Activation::Identity).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn linear_case_is_head_dot_direction() {
        let enc = identity_top(4);
        let head = LinearHead::new(vec![0.3, -1.2, 0.5, 2.0], 0.7).unwrap();
        let v = vec![0.5, 0.5, -0.5, 0.5];
        let x = [0.2, -0.4, 0.9, 0.1];
        for layer in 0..2 {
            let s = plain_sensitivity(&enc, &head, &x, &cav(layer, v.clone())).unwrap();
            assert!((s - dot(&head.weights, &v)).abs() < 1e-12);
        }
        // orthogonal to the gradient
        let s = plain_sensitivity(&enc, &head, &x, &cav(1, vec![1.2, 0.3, 0.0, 0.0])).unwrap();
        assert!(s.abs() < 1e-12);
        assert!(plain_sensitivity(&enc, &head, &x, &cav(1, vec![1.0; 3])).is_err());
        assert!(plain_sensitivity(&enc, &head, &x, &cav(2, v)).is_err());
    }

    #[test]
    fn plain_sensitivity_matches_directional_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = init_encoder(&[6, 8, 8, 3], 5).unwrap();
        let head = LinearHead::new(random_vec(&mut rng, 3), 0.2).unwrap();
        let eps = 1e-6;
        for _ in 0..50 {
            let x = random_vec(&mut rng, 6);
            let layer = rng.random_range(0..3);
            let width = enc.layer_width(layer).unwrap();
            let v = random_vec(&mut rng, width);
            let s = plain_sensitivity(&enc, &head, &x, &cav(layer, v.clone())).unwrap();
            let a = enc.forward_one(&x).unwrap().swap_remove(layer);
            let moved: Vec<f64> = a.iter().zip(&v).map(|(a, v)| a + eps * v).collect();
            let fd = (output_from_layer(&enc, &head, layer, &moved).unwrap()
                - output_from_layer(&enc, &head, layer, &a).unwrap())
                / eps;
            assert!((s - fd).abs() <= 1e-4 * s.abs().max(1e-8), "{s} vs {fd}");
        }
    }

    #[test]
    fn ig_linear_completeness_and_empty_path() {
        let enc = identity_top(3);
        let head = LinearHead::new(vec![1.0, -2.0, 0.5], 0.0).unwrap();
        let x = [0.5, 0.1, -0.3];
        let ig = integrated_gradients_layer(&enc, &head, &x, 1, &IgConfig::default()).unwrap();
        let a = enc.forward_one(&x).unwrap().swap_remove(1);
        let a0 = enc.forward_one(&[0.0; 3]).unwrap().swap_remove(1);
        for k in 0..3 {
            assert!((ig[k] - (a[k] - a0[k]) * head.weights[k]).abs() < 1e-12);
        }
        let total = output_from_layer(&enc, &head, 1, &a).unwrap() - output_from_layer(&enc, &head, 1, &a0).unwrap();
        assert!((ig.iter().sum::<f64>() - total).abs() < 1e-12);

        let zero = integrated_gradients_layer(&enc, &head, &[0.0; 3], 0, &IgConfig::default()).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(IgConfig { steps: 1 }.validate().is_err());

        // identity layers and a zero baseline: S = (a ⊙ w)·v
        let id = MlpEncoder::new(vec![DenseLayer::new(
            Matrix::identity(3),
            vec![0.0; 3],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let v = vec![0.6, 0.0, 0.8];
        let s = ig_sensitivity(&id, &head, &x, &cav(0, v.clone()), &IgConfig::default()).unwrap();
        let expect: f64 = (0..3).map(|k| x[k] * head.weights[k] * v[k]).sum();
        assert!((s - expect).abs() < 1e-12);
    }

    #[test]
    fn ig_completeness_on_relu_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = init_encoder(&[5, 16, 16, 4], 9).unwrap();
        let head = LinearHead::new(random_vec(&mut rng, 4), 0.0).unwrap();
        for _ in 0..30 {
            let x = random_vec(&mut rng, 5);
            let layer = rng.random_range(0..2);
            let ig = integrated_gradients_layer(&enc, &head, &x, layer, &IgConfig { steps: 200 }).unwrap();
            let a = enc.forward_one(&x).unwrap().swap_remove(layer);
            let a0 = enc.forward_one(&[0.0; 5]).unwrap().swap_remove(layer);
            let total = output_from_layer(&enc, &head, layer, &a).unwrap()
                - output_from_layer(&enc, &head, layer, &a0).unwrap();
            let err = (ig.iter().sum::<f64>() - total).abs();
            assert!(err <= 1e-3 * total.abs() + 1e-9, "{err} vs {total}");
        }
    }

    #[test]
    fn tcav_examples() {
        let score = |v: &[f64]| {
            tcav_score(&v.iter().map(|&x| rec(x)).collect::<Vec<_>>())
                .unwrap()
                .score
        };
        assert_eq!(score(&[0.2, 0.5, 1.1]), 1.0);
        assert_eq!(score(&[0.2, -0.1, 0.3]), 2.0 / 3.0);
        assert_eq!(score(&[0.0, 0.0, 1.0]), 1.0 / 3.0);
        assert!(tcav_score(&[]).is_err());
        let mut mixed = vec![rec(1.0), rec(2.0)];
        mixed[1].layer = 1;
        assert!(tcav_score(&mixed).is_err());
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_signed(&[-4.0, -1.0, 2.0, 8.0]), vec![-1.0, 0.0, 0.0, 1.0]);
        assert_eq!(normalize_signed(&[1.0, 2.0, 3.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_signed(&[7.0]), vec![1.0]);
        assert_eq!(normalize_signed(&[-3.0, 0.0, 5.0, 5.0]), vec![-1.0, 0.0, 1.0, 1.0]);
        let mut recs = vec![rec(-2.0), rec(3.0)];
        normalize_magnitudes(&mut recs);
        assert_eq!(recs[0].normalized, Some(-1.0));
        assert_eq!(recs[1].normalized, Some(1.0));
    }

    #[test]
    fn profile_partitions_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let recs: Vec<SensitivityRecord> = (0..1000)
            .map(|i| SensitivityRecord {
                label: Some(rng.random_range(0.0..1.0)),
                scene_id: format!("s{i}"),
                ..rec(rng.random_range(-1.0..1.0))
            })
            .collect();
        let prof = profile_from_records(&recs, 5).unwrap();
        assert_eq!(prof.len(), 5);
        assert_eq!(prof.iter().map(|b| b.count).sum::<usize>(), 1000);
        for w in prof.windows(2) {
            assert!(w[0].label_hi.unwrap() <= w[1].label_lo.unwrap());
        }

        let constant: Vec<SensitivityRecord> = recs
            .iter()
            .map(|r| SensitivityRecord {
                value: 0.4,
                ..r.clone()
            })
            .collect();
        let prof = profile_from_records(&constant, 5).unwrap();
        assert!(prof.iter().all(|b| b.mean_normalized == prof[0].mean_normalized));

        let few = profile_from_records(&recs[..3], 5).unwrap();
        assert_eq!(few.iter().filter(|b| b.count == 0).count(), 2);
        assert!(few.iter().any(|b| b.count == 0 && b.mean_normalized.is_none()));
        assert!(profile_from_records(&recs, 1).is_err());
    }

    #[test]
    fn alignment_examples() {
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let labels = vec![Some(1.0), Some(2.0)];
        let e = Matrix::from_rows(&[[1.0, 0.0], [0.0, 3.0]]).unwrap();
        let mut c1 = cav(0, vec![1.0, 0.0]);
        c1.concept = "x".into();
        let mut c2 = cav(0, vec![0.0, 1.0]);
        c2.concept = "y".into();
        let out = align(&e, &ids, &labels, &[c1.clone(), c2.clone()]).unwrap();
        assert_eq!(out[0].best_concept, "x");
        assert_eq!(out[1].best_concept, "y");
        let single = align(&e, &ids, &labels, std::slice::from_ref(&c1)).unwrap();
        assert!(single.iter().all(|r| r.best_concept == "x"));

        // ties resolve to the first concept
        let tie = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let out = align(&tie, &ids, &labels, &[c2.clone(), c1.clone()]).unwrap();
        assert!(out.iter().all(|r| r.best_concept == "y"));

        let zero = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            align(&zero, &ids, &labels, &[c1.clone()]),
            Err(Error::ZeroVector(1))
        ));
        // raw cosines: the large embedding wins for both concepts without column scaling
        let wide = Matrix::from_rows(&[[1.0, 0.9], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let three: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let raw = align_instances(
            &wide,
            &three,
            &[None; 3],
            &[c1.clone(), c2.clone()],
            AlignmentNormalization::None,
        )
        .unwrap();
        assert_eq!(raw[0].best_concept, "x");
        assert_eq!(raw[0].normalized, raw[0].cosine);
        let col = align(&wide, &three, &[None; 3], &[c1.clone(), c2.clone()]).unwrap();
        assert_eq!(col[0].best_concept, "x");
        let mut other_layer = c2;
        other_layer.layer = 1;
        assert!(align(&e, &ids, &labels, &[c1, other_layer]).is_err());
    }

    #[test]
    fn csv_layouts() {
        let mut recs = vec![rec(-1.0), rec(2.0)];
        normalize_magnitudes(&mut recs);
        let text = sensitivity_csv(&recs, &[0, 1]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# schema=landprobe.sensitivity version=1"));
        assert_eq!(
            lines.next(),
            Some("scene_id,label,concept,layer,method,S,S_normalized,bin")
        );
        assert_eq!(lines.count(), 2);
        assert!(sensitivity_csv(&recs, &[0]).is_err());
    }

    proptest! {
        #[test]
        fn normalization_keeps_sign_and_order(values in prop::collection::vec(-100.0f64..100.0, 1..40)) {
            let out = normalize_signed(&values);
            for (i, (&v, &n)) in values.iter().zip(&out).enumerate() {
                prop_assert!((-1.0..=1.0).contains(&n));
                prop_assert!(v.signum() * n >= 0.0 || (v == 0.0 && n == 0.0));
                for (&w, &m) in values.iter().zip(&out).skip(i + 1) {
                    if v.signum() == w.signum() && v < w {
                        prop_assert!(n <= m);
                    }
                }
            }
        }

        #[test]
        fn tcav_count_is_exact(values in prop::collection::vec(prop_oneof![Just(0.0), -5.0f64..5.0], 1..60)) {
            let recs: Vec<_> = values.iter().map(|&v| rec(v)).collect();
            let s = tcav_score(&recs).unwrap();
            let count = values.iter().filter(|&&v| v > 0.0).count();
            prop_assert_eq!(s.positive, count);
            prop_assert_eq!(s.score, count as f64 / values.len() as f64);
            prop_assert!((s.score * s.n as f64 - count as f64).abs() < 1e-9);
        }

        #[test]
        fn direction_scale_scales_sensitivity(seed in 0u64..1000, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = init_encoder(&[4, 6, 3], seed).unwrap();
            let head = LinearHead::new(random_vec(&mut rng, 3), 0.0).unwrap();
            let x = random_vec(&mut rng, 4);
            let v = random_vec(&mut rng, 6);
            let scaled: Vec<f64> = v.iter().map(|a| a * c).collect();
            let s = plain_sensitivity(&enc, &head, &x, &cav(0, v.clone())).unwrap();
            let sc = plain_sensitivity(&enc, &head, &x, &cav(0, scaled.clone())).unwrap();
            prop_assert!((sc - c * s).abs() <= 1e-12 * (1.0 + sc.abs()));
            prop_assert_eq!(s > 0.0, sc > 0.0);
            let ig = IgConfig { steps: 8 };
            let g = ig_sensitivity(&enc, &head, &x, &cav(0, v), &ig).unwrap();
            let gc = ig_sensitivity(&enc, &head, &x, &cav(0, scaled), &ig).unwrap();
            prop_assert!((gc - c * g).abs() <= 1e-12 * (1.0 + gc.abs()));
        }

        #[test]
        fn alignment_ignores_positive_rescaling(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = Matrix::new(12, 4, random_vec(&mut rng, 48)).unwrap();
            let scaled = Matrix::new(12, 4, e.data().iter().map(|v| v * scale).collect()).unwrap();
            let cavs: Vec<Cav> = (0..3).map(|_| cav(0, random_vec(&mut rng, 4))).collect();
            let ids: Vec<String> = (0..12).map(|i| i.to_string()).collect();
            let labels = vec![None; 12];
            let cavs: Vec<Cav> = cavs.into_iter().enumerate().map(|(i, mut c)| { c.concept = i.to_string(); c }).collect();
            let a = align(&e, &ids, &labels, &cavs).unwrap();
            let b = align(&scaled, &ids, &labels, &cavs).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(&x.best_concept, &y.best_concept);
            }
            let stretched: Vec<Cav> = cavs.iter().map(|c| cav(0, c.direction.iter().map(|v| v * 3.0).collect())).collect();
            let stretched: Vec<Cav> = stretched.into_iter().zip(&cavs).map(|(mut s, c)| { s.concept = c.concept.clone(); s }).collect();
            let d = align(&e, &ids, &labels, &stretched).unwrap();
            for (x, y) in a.iter().zip(&d) {
                prop_assert_eq!(&x.best_concept, &y.best_concept);
            }
        }
    }
}
