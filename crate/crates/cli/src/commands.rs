use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hbmc::metrics::{AggregateReport, MetricsReport, PredictionCorpus, REPORT_SCHEMA};
use hbmc::oracle::{network_to_bf, oracle_row, OracleRow, QuadratureConfig};
use hbmc::perturb::{perturb as run_perturb, RobustnessReport};
use hbmc::rng::{derive_seed, substream};
use hbmc::simulators::Family;
use hbmc::store::{read_store, write_store, INDEX_FILE};
use hbmc::summary::{HierarchicalDataset, InputScaling, SummaryNet};
use hbmc::trainer::{simulate_labeled, simulate_reference_set, TrainReport, Trainer};
use hbmc::Error;
use log::info;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Cell, RunConfig};
use crate::{CompareArgs, OracleArgs, PerturbArgs, SimulateArgs, TrainArgs, ValidateArgs};

const STREAM_INIT: u64 = 101;
const STREAM_HOLDOUT: u64 = 102;
const STREAM_VALIDATE: u64 = 103;
const STREAM_LABEL: u64 = 104;
const STREAM_SIMULATE: u64 = 105;

/// Datasets scored per forward pass; bounds peak memory.
const PREDICT_CHUNK: usize = 256;

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn load_net(dir: &Path) -> Result<SummaryNet> {
    SummaryNet::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

/// Candidate families recorded in a checkpoint's model names.
fn net_families(net: &SummaryNet) -> Result<Vec<Family>> {
    net.models
        .iter()
        .map(|m| m.parse::<Family>().map_err(anyhow::Error::from))
        .collect()
}

/// Datasets from files or store directories, with display ids.
fn load_datasets(paths: &[PathBuf]) -> Result<Vec<(String, HierarchicalDataset)>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            if !p.join(INDEX_FILE).exists() {
                bail!(config_error(format!("{} is not a dataset store", p.display())));
            }
            let index = hbmc::store::read_index(p)?;
            for (e, d) in index.entries.iter().zip(read_store(p)?) {
                out.push((e.file.trim_end_matches(".json").to_owned(), d));
            }
        } else {
            let d = HierarchicalDataset::load(p).with_context(|| format!("loading {}", p.display()))?;
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            out.push((id, d));
        }
    }
    Ok(out)
}

fn predict_all(net: &SummaryNet, data: &[HierarchicalDataset]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(PREDICT_CHUNK) {
        out.extend(net.predict(&chunk.iter().collect::<Vec<_>>())?);
    }
    Ok(out)
}

pub fn simulate(cfg: &RunConfig, a: &SimulateArgs, out: &Path) -> Result<()> {
    if a.groups == 0 || a.observations == 0 {
        bail!(config_error("--groups and --observations must be positive"));
    }
    let sizes = vec![a.observations; a.groups];
    let data = (0..a.count as u64)
        .into_par_iter()
        .map(|i| {
            let mut d = a.family.simulate(
                &sizes,
                &cfg.training.eam,
                cfg.seed,
                &mut substream(cfg.seed, &[STREAM_SIMULATE, i]),
            )?;
            d.meta.model_index = a.model_index;
            Ok(d)
        })
        .collect::<hbmc::Result<Vec<_>>>()?;
    write_store(out, &data)?;
    println!(
        "simulated {} datasets of {} ({}x{}) into {}",
        a.count,
        a.family,
        a.groups,
        a.observations,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    schema_version: u32,
    models: Vec<String>,
    steps: u64,
    final_val_loss: Option<f64>,
    pretrained: Option<PathBuf>,
    checkpoints: Vec<PathBuf>,
}

pub fn train(cfg: &RunConfig, a: &TrainArgs, out: &Path) -> Result<()> {
    let names = cfg.model_names();
    let mut store = Vec::new();
    for dir in &a.store {
        store.extend(read_store(dir)?);
    }
    let v = &cfg.validation;
    let holdout = simulate_reference_set(
        &cfg.models,
        v.holdout_per_model,
        &vec![v.observations; v.groups],
        &cfg.training.eam,
        derive_seed(cfg.seed, &[STREAM_HOLDOUT]),
    )?;
    let mut net = match &a.pretrained {
        Some(dir) => {
            let net = load_net(dir)?;
            if net.models != names {
                bail!(config_error(format!(
                    "pretrained network compares {:?}, config lists {:?}",
                    net.models, names
                )));
            }
            net
        }
        None => {
            let mut summary = cfg.summary.clone();
            if cfg.standardize_inputs && summary.input_scaling.is_none() {
                let sample = if store.is_empty() { &holdout } else { &store };
                if sample.is_empty() {
                    bail!(config_error(
                        "standardize_inputs needs a store or holdout_per_model > 0"
                    ));
                }
                summary.input_scaling = Some(InputScaling::fit(sample)?);
            }
            SummaryNet::new(summary, &mut substream(cfg.seed, &[STREAM_INIT]))?.with_models(names.clone())?
        }
    };
    let ckpt = out.join("checkpoints");
    let mut trainer = Trainer::new(&cfg.training, &cfg.models)?.checkpoint_dir(&ckpt);
    if !a.store.is_empty() {
        trainer = trainer.store(&store);
    }
    if !holdout.is_empty() {
        trainer = trainer.validation(&holdout);
    }
    let report: TrainReport = match trainer.run(&mut net) {
        Ok(r) => r,
        Err(Error::NonFiniteLoss { step, last_good }) => {
            let safe = SummaryNet::from_params(net.config().clone(), *last_good.clone())?.with_models(names)?;
            safe.save(&ckpt.join("last_good"), None)?;
            return Err(Error::NonFiniteLoss { step, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };
    report.write_trace_csv(&out.join("trace.csv"))?;
    let summary = TrainSummary {
        schema_version: REPORT_SCHEMA,
        models: net.models.clone(),
        steps: report.steps,
        final_val_loss: report.final_val_loss(),
        pretrained: a.pretrained.clone(),
        checkpoints: report.checkpoints.clone(),
    };
    write_json(&out.join("train.json"), &summary)?;
    match summary.final_val_loss {
        Some(l) => println!(
            "trained {} steps, validation loss {l:.4}, checkpoint {}",
            report.steps,
            ckpt.join("final").display()
        ),
        None => println!(
            "trained {} steps, checkpoint {}",
            report.steps,
            ckpt.join("final").display()
        ),
    }
    Ok(())
}

/// One held-out corpus with uniformly drawn generating models.
fn validation_corpus(
    net: &SummaryNet,
    models: &[Family],
    cfg: &RunConfig,
    cell: Cell,
    cell_index: u64,
    rep: u64,
    count: usize,
) -> Result<PredictionCorpus> {
    let sizes = vec![cell.observations; cell.groups];
    let labelled = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let j = substream(cfg.seed, &[STREAM_LABEL, cell_index, rep, i]).random_range(0..models.len());
            let d = simulate_labeled(
                models,
                j,
                &sizes,
                &cfg.training.eam,
                cfg.seed,
                &[STREAM_VALIDATE, cell_index, rep, i],
            )?;
            Ok((d, j))
        })
        .collect::<hbmc::Result<Vec<_>>>()?;
    let (data, labels): (Vec<_>, Vec<_>) = labelled.into_iter().unzip();
    Ok(PredictionCorpus::new(predict_all(net, &data)?, labels)?)
}

pub fn validate(cfg: &RunConfig, a: &ValidateArgs, out: &Path) -> Result<()> {
    let net = load_net(&a.checkpoint)?;
    let models = net_families(&net)?;
    let count = a.datasets.unwrap_or(cfg.validation.datasets);
    let reps = a.repetitions.unwrap_or(cfg.validation.repetitions);
    if count == 0 || reps == 0 {
        bail!(config_error("need at least one dataset and one repetition"));
    }
    let cells = if a.grid {
        if cfg.validation.grid.is_empty() {
            bail!(config_error("--grid needs validation.grid cells in the config"));
        }
        cfg.validation.grid.clone()
    } else {
        vec![Cell {
            groups: cfg.validation.groups,
            observations: cfg.validation.observations,
        }]
    };
    for (ci, &cell) in cells.iter().enumerate() {
        let dir = if a.grid {
            out.join(format!("cell-M{}-N{}", cell.groups, cell.observations))
        } else {
            out.to_path_buf()
        };
        fs::create_dir_all(&dir)?;
        let mut reports = Vec::with_capacity(reps);
        for r in 0..reps {
            let corpus = validation_corpus(&net, &models, cfg, cell, ci as u64, r as u64, count)?;
            let report = MetricsReport::compute(&corpus, &net.models, None, cfg.validation.bins)?;
            report.write_json(&dir.join(format!("report-{r:02}.json")))?;
            report.write_calibration_csv(&dir.join(format!("calibration-{r:02}.csv")))?;
            report.write_confusion_csv(&dir.join(format!("confusion-{r:02}.csv")))?;
            info!("cell {ci} repetition {r}: accuracy {:.4}", report.overall_accuracy);
            reports.push(report);
        }
        let agg = AggregateReport::from_reports(&reports)?;
        write_json(&dir.join("aggregate.json"), &agg)?;
        let eces: Vec<String> = agg
            .per_model
            .iter()
            .map(|m| format!("{} {:.4}", m.model, m.ece.median))
            .collect();
        println!(
            "M={} N={}: median accuracy {:.4}, median ECE [{}] over {reps} x {count} datasets",
            cell.groups,
            cell.observations,
            agg.overall_accuracy.median,
            eces.join(", ")
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    dataset: String,
    pmp: Vec<f64>,
    /// Bayes factor of each model against the reference model.
    bf: Vec<f64>,
    saturated: bool,
}

#[derive(Serialize)]
struct CompareReport {
    schema_version: u32,
    models: Vec<String>,
    reference: String,
    rows: Vec<CompareRow>,
}

pub fn compare(_cfg: &RunConfig, a: &CompareArgs, out: &Path) -> Result<()> {
    let net = load_net(&a.checkpoint)?;
    let j = net.models.len();
    let reference = match &a.reference {
        Some(r) => net
            .models
            .iter()
            .position(|m| m.eq_ignore_ascii_case(r))
            .ok_or_else(|| config_error(format!("reference model '{r}' is not one of {:?}", net.models)))?,
        None => 0,
    };
    let data = load_datasets(&a.data)?;
    let sets: Vec<HierarchicalDataset> = data.iter().map(|(_, d)| d.clone()).collect();
    let pmps = predict_all(&net, &sets)?;
    let prior = vec![1.0 / j as f64; j];
    let rows = data
        .iter()
        .zip(pmps)
        .map(|((id, _), pmp)| {
            let t = network_to_bf(&pmp, &prior)?;
            Ok(CompareRow {
                dataset: id.clone(),
                bf: t.bf.iter().map(|row| row[reference]).collect(),
                pmp,
                saturated: t.saturated,
            })
        })
        .collect::<hbmc::Result<Vec<_>>>()?;
    let mut w = csv_writer(&out.join("compare.csv"))?;
    let mut header = vec!["dataset".to_owned()];
    header.extend(net.models.iter().map(|m| format!("pmp_{m}")));
    header.extend(
        net.models
            .iter()
            .map(|m| format!("bf_{m}_vs_{}", net.models[reference])),
    );
    header.push("saturated".into());
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.dataset.clone()];
        rec.extend(r.pmp.iter().chain(&r.bf).map(|v| v.to_string()));
        rec.push(r.saturated.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    let n = rows.len();
    write_json(
        &out.join("compare.json"),
        &CompareReport {
            schema_version: REPORT_SCHEMA,
            reference: net.models[reference].clone(),
            models: net.models,
            rows,
        },
    )?;
    println!("compared {n} datasets, table in {}", out.join("compare.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct OracleReport {
    schema_version: u32,
    quadrature: QuadratureConfig,
    rows: Vec<OracleRow>,
}

pub fn oracle(cfg: &RunConfig, a: &OracleArgs, out: &Path) -> Result<()> {
    let data = load_datasets(&a.data)?;
    let rows = data
        .par_iter()
        .map(|(id, d)| oracle_row(id, d, &cfg.quadrature))
        .collect::<hbmc::Result<Vec<_>>>()?;
    let net_pmps = match &a.checkpoint {
        Some(dir) => {
            let net = load_net(dir)?;
            if net_families(&net)? != [Family::NormalM1, Family::NormalM2] {
                bail!(config_error(
                    "the oracle covers normal-M1 versus normal-M2 networks only"
                ));
            }
            let sets: Vec<HierarchicalDataset> = data.iter().map(|(_, d)| d.clone()).collect();
            Some(predict_all(&net, &sets)?)
        }
        None => None,
    };
    let mut w = csv_writer(&out.join("scatter.csv"))?;
    let mut header = vec!["dataset", "oracle_pmp_m1", "oracle_pmp_m2", "oracle_log_bf21"];
    if net_pmps.is_some() {
        header.extend(["network_pmp_m1", "network_pmp_m2", "network_log_bf21"]);
    }
    w.write_record(&header)?;
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![
            r.dataset.clone(),
            r.pmp[0].to_string(),
            r.pmp[1].to_string(),
            r.log_bf21.to_string(),
        ];
        if let Some(p) = &net_pmps {
            let bf = network_to_bf(&p[i], &[0.5, 0.5])?;
            rec.extend([p[i][0].to_string(), p[i][1].to_string(), bf.bf[1][0].ln().to_string()]);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    let n = rows.len();
    write_json(
        &out.join("oracle.json"),
        &OracleReport {
            schema_version: REPORT_SCHEMA,
            quadrature: cfg.quadrature,
            rows,
        },
    )?;
    println!(
        "oracle evidence for {n} datasets in {}",
        out.join("oracle.json").display()
    );
    Ok(())
}

pub fn perturb(cfg: &RunConfig, a: &PerturbArgs, out: &Path) -> Result<()> {
    let net = load_net(&a.checkpoint)?;
    let data = HierarchicalDataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let report: RobustnessReport = run_perturb(&net, &data, a.mode.into(), a.repetitions, cfg.seed)?;
    write_json(&out.join("robustness.json"), &report)?;
    let mut w = csv_writer(&out.join("robustness.csv"))?;
    let mut header = vec!["label".to_owned(), "repetitions".to_owned()];
    for prefix in ["mean", "sd", "argmax"] {
        header.extend(report.models.iter().map(|m| format!("{prefix}_{m}")));
    }
    w.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![r.label.clone(), r.repetitions.to_string()];
        rec.extend(r.mean.iter().chain(&r.sd).chain(&r.argmax_freq).map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    match report.stable_through() {
        Some(f) => println!(
            "{} rows; argmax stable through {:.0}% masking",
            report.rows.len(),
            100.0 * f
        ),
        None => println!(
            "{} perturbation rows in {}",
            report.rows.len(),
            out.join("robustness.json").display()
        ),
    }
    Ok(())
}
