//! The full concept analysis of a trained pipeline: per-layer CAVs and their
//! accuracy, sensitivities with both methods, TCAV scores, label-binned
//! profiles and embedding alignment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cav::{concept_accuracy_by_layer, save_cavs, AccuracyTable, Cav, CavConfig};
use crate::data::{Concept, Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::io;
use crate::tcav::{
    align_instances, alignment_csv, compute_sensitivities, label_bins, normalize_magnitudes, profile_csv,
    profile_from_records, sensitivity_csv, tcav_score, AlignmentNormalization, AlignmentRecord, IgConfig, ProfileBin,
    SensitivityMethod, SensitivityRecord, TcavScore, TCAV_SCHEMA,
};
use crate::train::TrainedPipeline;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Layers to analyse; `None` means every layer.
    pub layers: Option<Vec<usize>>,
    pub methods: Vec<SensitivityMethod>,
    pub cav: CavConfig,
    pub ig: IgConfig,
    pub bins: usize,
    pub split: Split,
    pub alignment: AlignmentNormalization,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            layers: None,
            methods: SensitivityMethod::ALL.to_vec(),
            cav: CavConfig::default(),
            ig: IgConfig::default(),
            bins: 5,
            split: Split::Test,
            alignment: AlignmentNormalization::Column,
            seed: 0,
        }
    }
}

/// Sensitivities for one (concept, layer, method).
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityGroup {
    pub score: TcavScore,
    pub records: Vec<SensitivityRecord>,
    pub bins: Vec<usize>,
    pub profile: Vec<ProfileBin>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainReport {
    pub accuracy: AccuracyTable,
    pub groups: Vec<SensitivityGroup>,
    pub alignment: Vec<AlignmentRecord>,
    /// CAVs of the embedding layer, in concept order, used for alignment.
    pub alignment_cavs: Vec<Cav>,
    pub model_fingerprint: String,
}

/// Contents of `tcav.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavSummary {
    pub model_fingerprint: String,
    pub scores: Vec<TcavScore>,
}

impl ExplainReport {
    pub fn group(&self, concept: &str, layer: usize, method: SensitivityMethod) -> Option<&SensitivityGroup> {
        self.groups
            .iter()
            .find(|g| g.score.concept == concept && g.score.layer == layer && g.score.method == method)
    }

    pub fn tcav_json(&self) -> Result<String> {
        io::json_string(
            TCAV_SCHEMA,
            &TcavSummary {
                model_fingerprint: self.model_fingerprint.clone(),
                scores: self.groups.iter().map(|g| g.score.clone()).collect(),
            },
        )
    }

    pub fn sensitivity_csv(&self) -> Result<String> {
        let records: Vec<SensitivityRecord> = self.groups.iter().flat_map(|g| g.records.iter().cloned()).collect();
        let bins: Vec<usize> = self.groups.iter().flat_map(|g| g.bins.iter().copied()).collect();
        sensitivity_csv(&records, &bins)
    }

    pub fn profile_csv(&self) -> String {
        let blocks: Vec<(&TcavScore, &[ProfileBin])> =
            self.groups.iter().map(|g| (&g.score, g.profile.as_slice())).collect();
        profile_csv(&blocks)
    }

    pub fn alignment_csv(&self) -> Result<String> {
        let concepts: Vec<String> = self.alignment_cavs.iter().map(|c| c.concept.clone()).collect();
        alignment_csv(&self.alignment, &concepts)
    }

    /// Writes every table into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_cavs(&dir.join("cavs.json"), &self.accuracy.cavs)?;
        io::write_text(&dir.join("concept_accuracy.csv"), &self.accuracy.to_csv())?;
        io::write_text(&dir.join("tcav.json"), &self.tcav_json()?)?;
        io::write_text(&dir.join("sensitivity.csv"), &self.sensitivity_csv()?)?;
        io::write_text(&dir.join("sensitivity_profile.csv"), &self.profile_csv())?;
        io::write_text(&dir.join("alignment.csv"), &self.alignment_csv()?)?;
        Ok(())
    }
}

pub fn explain(
    pipeline: &TrainedPipeline,
    dataset: &Dataset,
    concept_sets: &[(Concept, Dataset)],
    config: &ExplainConfig,
) -> Result<ExplainReport> {
    let encoder = &pipeline.encoder;
    let head = &pipeline.head;
    let top = encoder.num_layers() - 1;
    let layers = config
        .layers
        .clone()
        .unwrap_or_else(|| (0..encoder.num_layers()).collect());
    if layers.is_empty() {
        return Err(invalid("layers", "no layers selected"));
    }
    for &l in &layers {
        encoder.layer_width(l)?;
    }
    if config.methods.is_empty() {
        return Err(invalid("methods", "no sensitivity methods selected"));
    }
    let eval = dataset.indices(config.split);
    if eval.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }

    let accuracy = concept_accuracy_by_layer(encoder, concept_sets, &layers, &config.cav, config.seed)?;
    let labels = dataset.targets(&eval)?;
    let bins = label_bins(&labels, config.bins)?;

    let mut groups = Vec::new();
    for (concept, _) in concept_sets {
        for &layer in &layers {
            let cav = accuracy
                .cav(concept.name(), layer)
                .ok_or(invalid("accuracy", "missing CAV"))?;
            for &method in &config.methods {
                let mut records = compute_sensitivities(encoder, head, dataset, &eval, cav, method, &config.ig)?;
                normalize_magnitudes(&mut records);
                groups.push(SensitivityGroup {
                    score: tcav_score(&records)?,
                    profile: profile_from_records(&records, config.bins)?,
                    records,
                    bins: bins.clone(),
                });
            }
        }
    }

    let alignment_cavs: Vec<Cav> = if layers.contains(&top) {
        accuracy.cavs.iter().filter(|c| c.layer == top).cloned().collect()
    } else {
        concept_accuracy_by_layer(encoder, concept_sets, &[top], &config.cav, config.seed)?.cavs
    };
    let embeddings = pipeline.embeddings(dataset, &eval)?;
    let ids: Vec<String> = eval.iter().map(|&i| dataset.scenes[i].id.clone()).collect();
    let targets: Vec<Option<f64>> = eval.iter().map(|&i| dataset.scenes[i].target).collect();
    let alignment = align_instances(&embeddings, &ids, &targets, &alignment_cavs, config.alignment)?;

    Ok(ExplainReport {
        accuracy,
        groups,
        alignment,
        alignment_cavs,
        model_fingerprint: encoder.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_all_concept_sets, build_task_dataset, SplitFractions, TaskDatasetConfig};
    use crate::train::{train_pipeline, Budget, EncoderVariant, TrainConfig};

    #[test]
    fn report_cardinalities() {
        let mut ds = build_task_dataset(
            &TaskDatasetConfig {
                n: 200,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        ds.stratified_split(5, SplitFractions::default(), 1).unwrap();
        let cfg = TrainConfig {
            pretrain_budget: Budget::Steps(20),
            probe_epochs: 5,
            ..Default::default()
        };
        let p = train_pipeline(&ds, &cfg, EncoderVariant::RncPretrained).unwrap();
        let sets = build_all_concept_sets(30, 8, 3).unwrap();
        let ecfg = ExplainConfig {
            cav: CavConfig {
                steps: 100,
                ..Default::default()
            },
            ig: IgConfig { steps: 4 },
            ..Default::default()
        };
        let report = explain(&p, &ds, &sets, &ecfg).unwrap();
        assert_eq!(report.groups.len(), 7 * 3 * 2);
        let n_test = ds.indices(Split::Test).len();
        assert_eq!(report.alignment.len(), n_test);
        assert!(report.groups.iter().all(|g| g.records.len() == n_test));
        assert_eq!(report.accuracy.cavs.len(), 21);

        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        let acc = std::fs::read_to_string(dir.path().join("concept_accuracy.csv")).unwrap();
        assert_eq!(acc, report.accuracy.to_csv());
        let again = explain(&p, &ds, &sets, &ecfg).unwrap();
        assert_eq!(again.tcav_json().unwrap(), report.tcav_json().unwrap());

        let only = ExplainConfig {
            layers: Some(vec![0]),
            ..ecfg.clone()
        };
        let r = explain(&p, &ds, &sets, &only).unwrap();
        assert_eq!(r.groups.len(), 14);
        assert_eq!(r.alignment_cavs[0].layer, 2);
        assert!(explain(
            &p,
            &ds,
            &sets,
            &ExplainConfig {
                layers: Some(vec![3]),
                ..ecfg
            }
        )
        .is_err());
    }
}
