use std::path::{Path, PathBuf};

use anyhow::anyhow;
use landprobe::data::{build_run_concept_sets, build_split_task_dataset, derive_seed, MIN_TASK_SCENES};
use landprobe::explain::TcavSummary;
use landprobe::metrics::{kendall_tau, MetricsReport};
use landprobe::tcav::{SensitivityMethod, TCAV_SCHEMA};
use landprobe::train::{curve_endpoints, evaluate, latent_ordering_tau, train_pipeline, write_loss_curve};
use landprobe::{io, Concept, Dataset, EmbeddingProjection, EncoderVariant, Split, TrainedPipeline};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{Common, Failure};

const METRICS_SCHEMA: &str = "landprobe.metrics";
const REPORT_SCHEMA: &str = "landprobe.report";
const LATENT_ANCHORS: usize = 50;

type CmdResult<T = ()> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

/// Invalid arguments surfaced by the library are configuration errors.
fn lib<T>(r: landprobe::Result<T>, what: &str) -> CmdResult<T> {
    r.map_err(|e| match e {
        landprobe::Error::InvalidArgument { .. } | landprobe::Error::InvalidLayer { .. } => {
            Failure::Usage(anyhow!(e).context(what.to_owned()))
        }
        other => Failure::Runtime(anyhow!(other).context(what.to_owned())),
    })
}

fn setup(common: &Common) -> CmdResult<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(common.config.as_deref()).map_err(usage)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    lib(cfg.validate(), "invalid configuration")?;
    let out = cfg.out_dir();
    Ok((cfg, out))
}

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn concept_dir(out: &Path, c: Concept) -> PathBuf {
    out.join("concepts").join(c.name())
}

fn checkpoint_path(out: &Path, variant: EncoderVariant) -> PathBuf {
    out.join("train").join(format!("{}.checkpoint.json", variant.tag()))
}

fn parse_variant(tag: &str) -> CmdResult<EncoderVariant> {
    EncoderVariant::from_tag(tag).ok_or_else(|| {
        usage(anyhow!(
            "unknown variant `{tag}` (expected rnc-pretrained, supervised-baseline or random-init)"
        ))
    })
}

fn load_dataset(out: &Path) -> CmdResult<Dataset> {
    let dir = data_dir(out);
    lib(
        Dataset::load(&dir),
        &format!("loading dataset from {} (run gen-data first)", dir.display()),
    )
}

fn load_checkpoint(out: &Path, variant: EncoderVariant) -> CmdResult<TrainedPipeline> {
    let path = checkpoint_path(out, variant);
    lib(
        TrainedPipeline::load(&path),
        &format!("loading checkpoint {} (run train first)", path.display()),
    )
}

pub fn gen_data(common: &Common, n: Option<usize>) -> CmdResult {
    let (mut cfg, out) = setup(common)?;
    if let Some(n) = n {
        cfg.dataset.n = n;
    }
    if cfg.dataset.n < MIN_TASK_SCENES {
        return Err(usage(anyhow!(
            "--n {} is below the stratification minimum of {MIN_TASK_SCENES} scenes",
            cfg.dataset.n
        )));
    }
    let ds = lib(
        build_split_task_dataset(
            &cfg.task_dataset(),
            cfg.dataset.quantiles,
            cfg.dataset.fractions,
            cfg.seed,
        ),
        "generating scenes",
    )?;
    let dir = data_dir(&out);
    lib(ds.save(&dir), "writing dataset")?;
    println!("wrote {} scenes to {}", ds.len(), dir.display());
    Ok(())
}

pub fn gen_concepts(common: &Common, n: Option<usize>) -> CmdResult {
    let (mut cfg, out) = setup(common)?;
    if let Some(n) = n {
        cfg.concepts.n = n;
    }
    let sets = lib(
        build_run_concept_sets(cfg.concepts.n, cfg.dataset.grid_size, cfg.seed),
        "generating concept scenes",
    )?;
    for (c, ds) in &sets {
        lib(ds.save(&concept_dir(&out, *c)), "writing concept set")?;
    }
    println!(
        "wrote {} concept sets of {} scenes to {}",
        sets.len(),
        cfg.concepts.n,
        out.join("concepts").display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct VariantMetrics {
    variant: String,
    encoder_fingerprint: String,
    pretrain_loss_start: Option<f64>,
    pretrain_loss_end: Option<f64>,
    probe_best_epoch: Option<usize>,
    val: MetricsReport,
    test: MetricsReport,
    latent_ordering_tau: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsFile {
    dataset_fingerprint: String,
    runs: Vec<VariantMetrics>,
}

pub fn train(common: &Common, baseline: bool, random_init: bool) -> CmdResult {
    let (cfg, out) = setup(common)?;
    let ds = load_dataset(&out)?;
    let mut variants = vec![EncoderVariant::RncPretrained];
    if baseline {
        variants.push(EncoderVariant::SupervisedBaseline);
    }
    if random_init {
        variants.push(EncoderVariant::RandomInit);
    }
    let tcfg = cfg.train_config();
    let dir = out.join("train");
    let test = ds.indices(Split::Test);
    let test_y = lib(ds.targets(&test), "reading test labels")?;
    let mut runs = Vec::new();
    for v in variants {
        let p = lib(train_pipeline(&ds, &tcfg, v), &format!("training {}", v.tag()))?;
        lib(p.save(&checkpoint_path(&out, v)), "writing checkpoint")?;
        if !p.pretrain_curve.is_empty() {
            lib(
                write_loss_curve(&dir.join(format!("{}.loss.csv", v.tag())), &p.pretrain_curve),
                "writing loss curve",
            )?;
        }
        let ends = curve_endpoints(&p.pretrain_curve, 20);
        let emb = lib(p.embeddings(&ds, &test), "embedding test split")?;
        let m = VariantMetrics {
            variant: v.tag().to_owned(),
            encoder_fingerprint: p.encoder.fingerprint(),
            pretrain_loss_start: ends.map(|e| e.0),
            pretrain_loss_end: ends.map(|e| e.1),
            probe_best_epoch: p.probe.as_ref().map(|o| o.best_epoch),
            val: lib(evaluate(&p, &ds, Split::Val), "evaluating")?,
            test: lib(evaluate(&p, &ds, Split::Test), "evaluating")?,
            latent_ordering_tau: lib(
                latent_ordering_tau(&emb, &test_y, LATENT_ANCHORS, derive_seed(cfg.seed, 30)),
                "latent ordering",
            )?,
        };
        println!(
            "{:<20} val R2 {:.3} tau {:.3} | test R2 {:.3} tau {:.3} | latent tau {:.3}",
            m.variant, m.val.r2, m.val.kendall_tau, m.test.r2, m.test.kendall_tau, m.latent_ordering_tau
        );
        runs.push(m);
    }
    let metrics = MetricsFile {
        dataset_fingerprint: ds.fingerprint(),
        runs,
    };
    lib(
        io::write_json(&dir.join("metrics.json"), METRICS_SCHEMA, &metrics),
        "writing metrics",
    )?;
    Ok(())
}

pub fn explain(common: &Common, variant: &str, method: Option<&str>, layers: Option<Vec<usize>>) -> CmdResult {
    let (mut cfg, out) = setup(common)?;
    let variant = parse_variant(variant)?;
    if let Some(m) = method {
        let m = SensitivityMethod::from_name(m).ok_or_else(|| usage(anyhow!("unknown method `{m}`")))?;
        cfg.tcav.methods = vec![m];
    }
    if layers.is_some() {
        cfg.tcav.layers = layers;
    }
    let ds = load_dataset(&out)?;
    let pipeline = load_checkpoint(&out, variant)?;
    let sets = Concept::ALL
        .iter()
        .map(|&c| {
            let dir = concept_dir(&out, c);
            lib(
                Dataset::load(&dir),
                &format!("loading {} (run gen-concepts first)", dir.display()),
            )
            .map(|d| (c, d))
        })
        .collect::<CmdResult<Vec<_>>>()?;
    let report = lib(
        landprobe::explain(&pipeline, &ds, &sets, &cfg.explain_config()),
        "explaining",
    )?;
    let dir = out.join("explain").join(variant.tag());
    lib(report.write(&dir), "writing explanation tables")?;
    for g in &report.groups {
        println!(
            "{:<20} layer {} {:<20} TCAV {:.3}",
            g.score.concept,
            g.score.layer,
            g.score.method.name(),
            g.score.score
        );
    }
    println!("wrote {} TCAV rows to {}", report.groups.len(), dir.display());
    Ok(())
}

pub fn project(common: &Common, variant: &str, split: &str) -> CmdResult {
    let (_, out) = setup(common)?;
    let variant = parse_variant(variant)?;
    let ds = load_dataset(&out)?;
    let indices: Vec<usize> = if split == "all" {
        (0..ds.len()).collect()
    } else {
        let s = Split::from_name(split).ok_or_else(|| usage(anyhow!("unknown split `{split}`")))?;
        ds.indices(s)
    };
    let pipeline = load_checkpoint(&out, variant)?;
    let emb = lib(pipeline.embeddings(&ds, &indices), "embedding")?;
    let ids = indices.iter().map(|&i| ds.scenes[i].id.clone()).collect();
    let labels: Vec<Option<f64>> = indices.iter().map(|&i| ds.scenes[i].target).collect();
    let proj = lib(
        EmbeddingProjection::new(&emb, ids, labels.clone(), variant.tag()),
        "projecting",
    )?;
    let path = out.join("project").join(format!("{}.csv", variant.tag()));
    lib(io::write_text(&path, &proj.to_csv()), "writing projection")?;
    let xs: Vec<f64> = proj.coords.iter().map(|c| c[0]).collect();
    let ys: Option<Vec<f64>> = labels.into_iter().collect();
    if let Some(ys) = ys {
        if let Ok(t) = kendall_tau(&xs, &ys) {
            println!("|tau(first component, label)| = {:.3}", t.abs());
        }
    }
    println!("wrote {} points to {}", proj.coords.len(), path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct AccuracyRow {
    concept: String,
    layer: usize,
    accuracy: f64,
}

#[derive(Debug, Serialize)]
struct VariantReport {
    variant: String,
    tcav: Vec<landprobe::TcavScore>,
    concept_accuracy: Vec<AccuracyRow>,
}

#[derive(Debug, Serialize)]
struct Report {
    metrics: Option<MetricsFile>,
    explanations: Vec<VariantReport>,
}

pub fn report(common: &Common) -> CmdResult {
    let (_, out) = setup(common)?;
    let metrics_path = out.join("train").join("metrics.json");
    let metrics: Option<MetricsFile> = if metrics_path.exists() {
        Some(lib(io::read_json(&metrics_path, METRICS_SCHEMA), "reading metrics")?)
    } else {
        None
    };
    let mut explanations = Vec::new();
    for v in [
        EncoderVariant::RncPretrained,
        EncoderVariant::SupervisedBaseline,
        EncoderVariant::RandomInit,
    ] {
        let dir = out.join("explain").join(v.tag());
        if !dir.join("tcav.json").exists() {
            continue;
        }
        let summary: TcavSummary = lib(
            io::read_json(&dir.join("tcav.json"), TCAV_SCHEMA),
            "reading TCAV summary",
        )?;
        let (_, rows) = lib(
            io::read_csv(&dir.join("concept_accuracy.csv"), landprobe::cav::ACCURACY_SCHEMA),
            "reading accuracy table",
        )?;
        let concept_accuracy = rows
            .into_iter()
            .map(|r| -> anyhow::Result<AccuracyRow> {
                Ok(AccuracyRow {
                    concept: r[0].clone(),
                    layer: r[1].parse()?,
                    accuracy: r[2].parse()?,
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()
            .map_err(Failure::Runtime)?;
        explanations.push(VariantReport {
            variant: v.tag().to_owned(),
            tcav: summary.scores,
            concept_accuracy,
        });
    }
    if metrics.is_none() && explanations.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "nothing to report under {} (run train and explain first)",
            out.display()
        )));
    }
    if let Some(m) = &metrics {
        for r in &m.runs {
            println!(
                "{:<20} test R2 {:.3} tau {:.3} latent tau {:.3}",
                r.variant, r.test.r2, r.test.kendall_tau, r.latent_ordering_tau
            );
        }
    }
    for e in &explanations {
        let n = e.concept_accuracy.len().max(1) as f64;
        let mean = e.concept_accuracy.iter().map(|r| r.accuracy).sum::<f64>() / n;
        println!(
            "{:<20} mean concept accuracy {:.3} over {} rows",
            e.variant,
            mean,
            e.concept_accuracy.len()
        );
    }
    let path = out.join("report.json");
    lib(
        io::write_json(&path, REPORT_SCHEMA, &Report { metrics, explanations }),
        "writing report",
    )?;
    println!("wrote {}", path.display());
    Ok(())
}
