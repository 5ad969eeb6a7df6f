//! Training runs, leave-one-domain-out tables, threshold sweeps and the
//! standalone MMD / A-distance statistics.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdcm_core::data::{mix_seed, Batch, DatasetBundle, Domain};
use rdcm_core::eval::{a_distance, mean_std, MetricRow};
use rdcm_core::mmd::{marginal_mmd, DomainFeatures, MmdKernels, MmdVariant};
use rdcm_core::model::{HyperParams, Mode, RdcmModel};
use rdcm_core::train::{domain_accuracy, fit_with_clock, Clock, TrainReport};
use rdcm_core::Tensor;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_dataset, write_json};
use crate::error::{Result, RunError};

/// Target label used when a DG run has no held-out domain.
pub const NO_TARGET: &str = "sources";

struct WallClock(Instant);

impl Clock for WallClock {
    fn now_secs(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Loads `cfg.data` and arranges the target domain: a held-out domain of the
/// same dataset, or the (single or named) domain of `cfg.target_data`.
pub fn prepare_bundle(cfg: &RunConfig) -> Result<DatasetBundle> {
    let data = cfg
        .data
        .as_deref()
        .ok_or_else(|| RunError::Config("no dataset given (--data or \"data\")".into()))?;
    let bundle = load_dataset(data)?;
    match (&cfg.target_data, &cfg.target) {
        (Some(path), target) => {
            let extra = load_dataset(path)?;
            if extra.layout != bundle.layout {
                return Err(RunError::Config(format!(
                    "{}: feature dimensions differ from {}",
                    path.display(),
                    data.display()
                )));
            }
            let mut domains = extra.sources;
            let domain = match target {
                Some(id) => {
                    let pos = domains.iter().position(|d| &d.id == id).ok_or_else(|| {
                        RunError::Config(format!("target domain '{id}' not found in {}", path.display()))
                    })?;
                    domains.swap_remove(pos)
                }
                None if domains.len() == 1 => domains.remove(0),
                None => {
                    return Err(RunError::Config(format!(
                        "{} has {} domains; choose one with --target",
                        path.display(),
                        domains.len()
                    )))
                }
            };
            if bundle.sources.iter().any(|d| d.id == domain.id) {
                return Err(RunError::Config(format!(
                    "target domain '{}' is also a source",
                    domain.id
                )));
            }
            Ok(DatasetBundle {
                target: Some(domain),
                ..bundle
            })
        }
        (None, Some(id)) => Ok(bundle.hold_out(id)?),
        (None, None) => Ok(bundle),
    }
}

pub struct RunOutcome {
    pub row: MetricRow,
    pub report: TrainReport,
    pub model: RdcmModel,
}

/// Splits, trains with `hyper` and evaluates on the entire target domain.
/// Without a target, the row carries the best source test accuracy.
pub fn train_once(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    experiment_id: &str,
    hyper: &HyperParams,
) -> Result<RunOutcome> {
    if hyper.mode == Mode::Da && bundle.target.is_none() {
        return Err(RunError::Config(
            "DA mode needs target data: hold out a domain with --target or pass --target-data".into(),
        ));
    }
    let seed = hyper.seed;
    let b = bundle.clone().split_70_30(seed)?;
    let mut model = RdcmModel::new(cfg.model_config(&b.layout), seed)?;
    let report = fit_with_clock(&mut model, &b, hyper, &mut WallClock(Instant::now()))?;
    let (target, accuracy, a_dist) = match &b.target {
        Some(t) => {
            let acc = domain_accuracy(&model, &b.layout, t)?;
            let ad = if cfg.adist {
                let src = source_test_features(&model, &b)?;
                let tgt = model.encode_joint(&full_batch(&b, t)?)?;
                Some(a_distance(&src, &tgt, cfg.adist_folds, seed)?)
            } else {
                None
            };
            (t.id.clone(), acc, ad)
        }
        None => (NO_TARGET.to_string(), report.best_val_accuracy, None),
    };
    Ok(RunOutcome {
        row: MetricRow {
            experiment_id: experiment_id.into(),
            target,
            seed,
            accuracy,
            a_distance: a_dist,
        },
        report,
        model,
    })
}

fn full_batch(b: &DatasetBundle, d: &Domain) -> Result<Batch> {
    let idx: Vec<usize> = (0..d.samples.len()).collect();
    Ok(Batch::from_indices(&b.layout, d, &idx)?)
}

/// Encoded features of the pooled source test splits.
fn source_test_features(model: &RdcmModel, b: &DatasetBundle) -> Result<Tensor> {
    let parts = b
        .sources
        .iter()
        .map(|d| Ok(model.encode_joint(&Batch::from_indices(&b.layout, d, d.test()?)?)?))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::concat_rows(&refs)?)
}

#[derive(Serialize)]
struct EpochJson {
    epoch: usize,
    cls: f64,
    inter: f64,
    intra: f64,
    total: f64,
    val_accuracy: f64,
    wall_clock_secs: f64,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    experiment_id: &'a str,
    target: &'a str,
    seed: u64,
    mode: &'a str,
    best_epoch: usize,
    best_val_accuracy: f64,
    empty_anchor_steps: usize,
    vanilla_equivalent: bool,
    target_accuracy: f64,
    a_distance: Option<f64>,
    epochs: Vec<EpochJson>,
}

/// Writes `report.json`, `params.bin` and `params.json` into `dir`.
pub fn write_run(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    checkpoint::save(&outcome.model, dir)?;
    let r = &outcome.report;
    let json = ReportJson {
        experiment_id: &outcome.row.experiment_id,
        target: &outcome.row.target,
        seed: r.seed,
        mode: r.mode.as_str(),
        best_epoch: r.best_epoch,
        best_val_accuracy: r.best_val_accuracy,
        empty_anchor_steps: r.empty_anchor_steps,
        vanilla_equivalent: r.vanilla_equivalent,
        target_accuracy: outcome.row.accuracy,
        a_distance: outcome.row.a_distance,
        epochs: r
            .epochs
            .iter()
            .map(|e| EpochJson {
                epoch: e.epoch,
                cls: e.cls,
                inter: e.inter,
                intra: e.intra,
                total: e.total,
                val_accuracy: e.val_accuracy,
                wall_clock_secs: e.wall_clock_secs,
            })
            .collect(),
    };
    write_json(&dir.join("report.json"), &json)
}

pub fn seed_dir(base: &Path, seed: u64) -> PathBuf {
    base.join(format!("seed-{seed}"))
}

/// One `train` invocation: every configured seed, one metrics row each.
pub fn run_train(cfg: &RunConfig, bundle: &DatasetBundle) -> Result<Vec<MetricRow>> {
    let mode = cfg.mode()?;
    let id = if cfg.lambda_inter == 0.0 && cfg.lambda_intra == 0.0 {
        "vanilla".to_string()
    } else {
        format!("rdcm-{mode}")
    };
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let outcome = train_once(cfg, bundle, &id, &cfg.hyper(seed)?)?;
        write_run(&seed_dir(&cfg.out, seed), &outcome)?;
        rows.push(outcome.row);
    }
    write_metrics(&cfg.out.join("metrics.csv"), &rows)?;
    Ok(rows)
}

/// A named hyperparameter transform, one row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub id: String,
    pub mode: Mode,
    pub lambda_inter: bool,
    pub lambda_intra: bool,
}

impl Experiment {
    pub fn hyper(&self, cfg: &RunConfig, seed: u64) -> Result<HyperParams> {
        let mut h = cfg.hyper(seed)?;
        h.mode = self.mode;
        if !self.lambda_inter {
            h.lambda_inter = 0.0;
        }
        if !self.lambda_intra {
            h.lambda_intra = 0.0;
        }
        Ok(h)
    }

    /// `vanilla` (both alignment weights zero, DG), `dg` or `da`.
    pub fn method(name: &str) -> Result<Self> {
        let (id, mode, on) = match name.to_ascii_lowercase().as_str() {
            "vanilla" => ("vanilla", Mode::Dg, false),
            "dg" => ("rdcm-dg", Mode::Dg, true),
            "da" => ("rdcm-da", Mode::Da, true),
            other => return Err(RunError::Config(format!("unknown method '{other}' (vanilla, dg, da)"))),
        };
        Ok(Self {
            id: id.into(),
            mode,
            lambda_inter: on,
            lambda_intra: on,
        })
    }

    /// Full model, then without the inter-domain term, without the
    /// cross-modal term, and without both.
    pub fn ablation(mode: Mode) -> Vec<Self> {
        [
            (format!("rdcm-{mode}"), true, true),
            ("w/o-inter".to_string(), false, true),
            ("w/o-cross".to_string(), true, false),
            ("w/o-both".to_string(), false, false),
        ]
        .into_iter()
        .map(|(id, lambda_inter, lambda_intra)| Self {
            id,
            mode,
            lambda_inter,
            lambda_intra,
        })
        .collect()
    }
}

/// Cell of a results table: mean and population std over seeds.
pub type Cell = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub cells: Vec<Cell>,
    /// Mean and std over seeds of the per-seed average across targets.
    pub avg: Cell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub targets: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn row(&self, method: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Builds a table from metric rows, using `value` as the statistic. Rows
/// follow `methods`, columns follow `targets`.
pub fn tabulate(
    rows: &[MetricRow],
    methods: &[String],
    targets: &[String],
    value: impl Fn(&MetricRow) -> Option<f64>,
) -> Table {
    let mut out = Vec::new();
    for m in methods {
        let of = |t: &str| -> Vec<&MetricRow> {
            let mut v: Vec<&MetricRow> = rows.iter().filter(|r| &r.experiment_id == m && r.target == t).collect();
            v.sort_by_key(|r| r.seed);
            v
        };
        let cells = targets
            .iter()
            .map(|t| mean_std(&of(t).iter().filter_map(|r| value(r)).collect::<Vec<_>>()))
            .collect();
        let mut seeds: Vec<u64> = rows.iter().filter(|r| &r.experiment_id == m).map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let per_seed: Vec<f64> = seeds
            .iter()
            .filter_map(|&s| {
                let vals: Vec<f64> = targets
                    .iter()
                    .filter_map(|t| of(t).into_iter().find(|r| r.seed == s).and_then(&value))
                    .collect();
                (vals.len() == targets.len()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        out.push(TableRow {
            method: m.clone(),
            cells,
            avg: mean_std(&per_seed),
        });
    }
    Table {
        targets: targets.to_vec(),
        rows: out,
    }
}

pub fn run_dir_name(id: &str) -> String {
    id.replace('/', "-")
}

/// Trains every experiment on every held-out domain and seed. Writes
/// `metrics.csv`, `summary.csv` (and `adist_summary.csv` when A-distances are
/// computed) into `cfg.out`.
pub fn run_loo(cfg: &RunConfig, bundle: &DatasetBundle, experiments: &[Experiment]) -> Result<(Vec<MetricRow>, Table)> {
    let targets: Vec<String> = bundle.domain_ids().into_iter().map(String::from).collect();
    if targets.len() < 3 {
        return Err(RunError::Config(format!(
            "leave-one-domain-out needs at least 3 domains, dataset has {}",
            targets.len()
        )));
    }
    let mut rows = Vec::new();
    for e in experiments {
        for t in &targets {
            let held = bundle.clone().hold_out(t)?;
            for &seed in &cfg.seeds {
                let outcome = train_once(cfg, &held, &e.id, &e.hyper(cfg, seed)?)?;
                let dir = seed_dir(&cfg.out.join("runs").join(run_dir_name(&e.id)).join(t), seed);
                write_run(&dir, &outcome)?;
                rows.push(outcome.row);
            }
        }
    }
    let methods: Vec<String> = experiments.iter().map(|e| e.id.clone()).collect();
    let table = tabulate(&rows, &methods, &targets, |r| Some(r.accuracy));
    write_metrics(&cfg.out.join("metrics.csv"), &rows)?;
    write_table(&cfg.out.join("summary.csv"), &table)?;
    if cfg.adist {
        let ad = tabulate(&rows, &methods, &targets, |r| r.a_distance);
        write_table(&cfg.out.join("adist_summary.csv"), &ad)?;
    }
    Ok((rows, table))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub target: String,
    pub seed: u64,
    pub accuracy: f64,
    /// Mean contrastive loss over the epochs of the run.
    pub mean_intra: f64,
}

pub fn run_sweep(cfg: &RunConfig, bundle: &DatasetBundle) -> Result<Vec<SweepRow>> {
    if cfg.betas.is_empty() {
        return Err(RunError::Config("betas must list at least one value".into()));
    }
    let mut rows = Vec::new();
    for &beta in &cfg.betas {
        if !(0.0..=1.0).contains(&beta) {
            return Err(RunError::Config(format!("beta {beta} outside [0,1]")));
        }
        for &seed in &cfg.seeds {
            let mut h = cfg.hyper(seed)?;
            h.contrastive.beta = beta;
            let id = format!("beta-{beta}");
            let outcome = train_once(cfg, bundle, &id, &h)?;
            write_run(&seed_dir(&cfg.out.join("runs").join(&id), seed), &outcome)?;
            let e = &outcome.report.epochs;
            rows.push(SweepRow {
                beta,
                target: outcome.row.target.clone(),
                seed,
                accuracy: outcome.row.accuracy,
                mean_intra: e.iter().map(|r| r.intra).sum::<f64>() / e.len() as f64,
            });
        }
    }
    let path = cfg.out.join("sweep.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["beta", "target", "seed", "accuracy", "mean_intra"])?;
    for r in &rows {
        w.write_record([
            r.beta.to_string(),
            r.target.clone(),
            r.seed.to_string(),
            r.accuracy.to_string(),
            r.mean_intra.to_string(),
        ])?;
    }
    w.flush().map_err(RunError::io(&path))?;
    Ok(rows)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(RunError::io(dir))?;
    }
    let f = fs::File::create(path).map_err(RunError::io(path))?;
    Ok(csv::Writer::from_writer(f))
}

/// `experiment_id,target,seed,accuracy,a_distance`; an absent A-distance is
/// an empty field.
pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["experiment_id", "target", "seed", "accuracy", "a_distance"])?;
    for r in rows {
        w.write_record([
            r.experiment_id.clone(),
            r.target.clone(),
            r.seed.to_string(),
            r.accuracy.to_string(),
            r.a_distance.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(RunError::io(path))
}

pub fn format_cell((mean, std): Cell) -> String {
    format!("{mean:.4} ± {std:.4}")
}

/// `method,<target>...,Avg` with `mean ± std` cells.
pub fn write_table(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["method".to_string()];
    header.extend(table.targets.iter().cloned());
    header.push("Avg".into());
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![r.method.clone()];
        rec.extend(r.cells.iter().copied().map(format_cell));
        rec.push(format_cell(r.avg));
        w.write_record(&rec)?;
    }
    w.flush().map_err(RunError::io(path))
}

/// Raw `[text ‖ visual]` rows, or the encoder outputs when a model is given.
pub fn domain_features(bundle: &DatasetBundle, d: &Domain, model: Option<&RdcmModel>) -> Result<DomainFeatures> {
    let batch = full_batch(bundle, d)?;
    let (text, visual) = match model {
        Some(m) => (m.encode_text(&batch.text)?, m.encode_image(&batch.visual)?),
        None => {
            let n = batch.len();
            let w = batch.text.len() / n.max(1);
            (Tensor::matrix(n, w, batch.text.into_data())?, batch.visual)
        }
    };
    Ok(DomainFeatures::new(text, visual, 0)?)
}

pub fn find_domain<'a>(bundle: &'a DatasetBundle, id: &str) -> Result<&'a Domain> {
    bundle
        .sources
        .iter()
        .chain(bundle.target.as_ref())
        .find(|d| d.id == id)
        .ok_or_else(|| RunError::Config(format!("unknown domain '{id}'")))
}

pub fn mmd_between(
    bundle: &DatasetBundle,
    a: &str,
    b: &str,
    variant: MmdVariant,
    kernels: &MmdKernels,
    model: Option<&RdcmModel>,
) -> Result<f64> {
    let fa = domain_features(bundle, find_domain(bundle, a)?, model)?;
    let fb = domain_features(bundle, find_domain(bundle, b)?, model)?;
    Ok(marginal_mmd(&fa, &fb, kernels, variant)?)
}

/// Proxy A-distance between two domains. With one domain, its samples are
/// shuffled and cut into two halves.
pub fn adist_between(
    bundle: &DatasetBundle,
    domains: &[String],
    model: Option<&RdcmModel>,
    folds: usize,
    seed: u64,
) -> Result<f64> {
    let joint = |d: &Domain| -> Result<Tensor> {
        let f = domain_features(bundle, d, model)?;
        Ok(f.concatenated())
    };
    match domains {
        [one] => {
            let x = joint(find_domain(bundle, one)?)?;
            let mut idx: Vec<usize> = (0..x.rows()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA11)));
            let half = idx.len() / 2;
            Ok(a_distance(
                &x.select_rows(&idx[..half]),
                &x.select_rows(&idx[half..]),
                folds,
                seed,
            )?)
        }
        [a, b] => Ok(a_distance(
            &joint(find_domain(bundle, a)?)?,
            &joint(find_domain(bundle, b)?)?,
            folds,
            seed,
        )?),
        _ => Err(RunError::Config(format!(
            "adist takes one or two domains, got {}",
            domains.len()
        ))),
    }
}
