//! Subcommand implementations behind the `confu` binary.
//!
//! Output layout under `output_dir`:
//!
//! | command   | files |
//! |-----------|-------|
//! | `gen-xor` | `data/train.json`, `data/test.json`, `data/manifest.json` |
//! | `train`   | `checkpoint.json`, `trace.jsonl`, `report.json` |
//! | `eval`    | `eval.csv`, `eval_summary.json` |
//! | `sweep`   | `cells/<hash>/{result.json,trace.jsonl}`, `sweep.csv`, `sweep_summary.json` |
//! | `tc-oracle` | `tc_oracle.csv` (when an output path is given) |
//!
//! Every artifact carries a config hash so results from different configs
//! cannot be mixed silently.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{run_hash, ExperimentConfig, ModelSpec};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_model, summarize, supports, sweep_eval, write_csv, GridOutcome, RetrievalResult, Row,
};
use crate::io::{sha256_hex, write_atomic};
use crate::nets::{init_model, load_checkpoint, save_checkpoint, ModelBundle};
use crate::objectives::ObjectiveKind;
use crate::synth::{
    generate, load_dataset, save_dataset, tc_decomposition, TripletDataset, XorConfig,
};
use crate::train::{train_with_eval, EvalHook, TrainConfig, TrainReport};

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub xor: XorConfig,
    pub files: Vec<FileEntry>,
}

/// Writes the train/test containers and a manifest. Reruns with the same
/// config produce identical bytes.
pub fn cmd_gen_xor(cfg: &ExperimentConfig) -> Result<DataManifest> {
    let dir = cfg.output_dir.join("data");
    mkdir(&dir)?;
    let (train, test) = generate(&cfg.xor)?;
    let hash = cfg.data_hash();
    let mut files = Vec::new();
    for (name, ds) in [("train.json", &train), ("test.json", &test)] {
        let path = dir.join(name);
        save_dataset(&path, ds, &cfg.xor, &hash)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        files.push(FileEntry {
            name: name.into(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = DataManifest {
        format: "confu-xor-manifest".into(),
        config_hash: hash,
        seed: cfg.xor.seed,
        xor: cfg.xor.clone(),
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Loads a generated data directory, rejecting data made from another config.
pub fn load_data_dir(
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<(TripletDataset, TripletDataset)> {
    let want = cfg.data_hash();
    let mut out = Vec::new();
    for name in ["train.json", "test.json"] {
        let (ds, _, hash) = load_dataset(&dir.join(name))?;
        if hash != want {
            return Err(Error::ArtifactMismatch(format!(
                "{} was generated from config {hash}, expected {want}",
                dir.join(name).display()
            )));
        }
        out.push(ds);
    }
    let test = out.pop().expect("two splits");
    let train = out.pop().expect("two splits");
    Ok((train, test))
}

fn datasets(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
) -> Result<(TripletDataset, TripletDataset)> {
    match data {
        Some(dir) => load_data_dir(cfg, dir),
        None => generate(&cfg.xor),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub objective: ObjectiveKind,
    pub steps: usize,
    pub final_checksum: String,
    pub best_epoch: Option<usize>,
    pub epoch_seconds: Vec<f64>,
    pub final_eval: Vec<RetrievalResult>,
}

/// Trains one model and evaluates every supported retrieval spec at the end.
pub fn run_training(
    xor: &XorConfig,
    model: &ModelSpec,
    train_cfg: &TrainConfig,
    train: &TripletDataset,
    test: &TripletDataset,
    specs: &[crate::eval::RetrievalSpec],
    init_seed: u64,
) -> Result<(ModelBundle, TrainReport)> {
    let mut bundle = init_model(&model.build(xor.d), init_seed)?;
    bundle.objective = train_cfg.objective;
    let usable: Vec<_> = specs
        .iter()
        .filter(|s| supports(train_cfg.objective, s))
        .cloned()
        .collect();
    let hook = EvalHook {
        data: test,
        specs: &usable,
    };
    train_with_eval(bundle, train, train_cfg, Some(hook))
}

pub fn cmd_train(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<RunSummary> {
    mkdir(&cfg.output_dir)?;
    let (train, test) = datasets(cfg, data)?;
    let (bundle, report) = run_training(
        &cfg.xor,
        &cfg.model,
        &cfg.train,
        &train,
        &test,
        &cfg.retrieval,
        cfg.seed,
    )?;
    let hash = cfg.run_hash();
    save_checkpoint(&cfg.output_dir.join("checkpoint.json"), &bundle, &hash)?;
    report.write_trace(&cfg.output_dir.join("trace.jsonl"))?;
    let summary = RunSummary {
        config_hash: hash,
        objective: bundle.objective,
        steps: report.steps.len(),
        final_checksum: report.final_checksum.clone(),
        best_epoch: report.best_epoch,
        epoch_seconds: report.epoch_seconds.clone(),
        final_eval: report.final_eval.clone(),
    };
    write_json(&cfg.output_dir.join("report.json"), &summary)?;
    Ok(summary)
}

fn label(p_hat: f64, lambda: Option<f64>, embed_dim: usize) -> String {
    match lambda {
        Some(l) => format!("p_hat={p_hat};lambda={l};embed_dim={embed_dim}"),
        None => format!("p_hat={p_hat};embed_dim={embed_dim}"),
    }
}

/// Evaluates a saved checkpoint on the test split of `cfg`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    data: Option<&Path>,
) -> Result<Vec<Row>> {
    let (bundle, hash) = load_checkpoint(checkpoint)?;
    if hash != cfg.run_hash() {
        return Err(Error::ArtifactMismatch(format!(
            "checkpoint was trained under config {hash}, this config is {}",
            cfg.run_hash()
        )));
    }
    let (_, test) = datasets(cfg, data)?;
    let specs: Vec<_> = cfg
        .retrieval
        .iter()
        .filter(|s| supports(bundle.objective, s))
        .cloned()
        .collect();
    let results = evaluate_model(&bundle, &test, &specs)?;
    let lambda = (bundle.objective == ObjectiveKind::Confu).then_some(bundle.lambda);
    let outcome = GridOutcome {
        objective: bundle.objective,
        grid_param: label(cfg.xor.p_hat, lambda, bundle.embed_dim()),
        seed: cfg.seed,
        results: Some(results),
    };
    let rows = sweep_eval(&[outcome], &cfg.retrieval);
    mkdir(&cfg.output_dir)?;
    write_csv(&cfg.output_dir.join("eval.csv"), &rows)?;
    write_json(&cfg.output_dir.join("eval_summary.json"), &summarize(&rows))?;
    Ok(rows)
}

/// One point of a sweep grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub objective: ObjectiveKind,
    pub p_hat: f64,
    pub lambda: Option<f64>,
    pub embed_dim: usize,
    pub seed: u64,
}

impl GridCell {
    pub fn label(&self) -> String {
        label(self.p_hat, self.lambda, self.embed_dim)
    }

    fn configs(&self, base: &ExperimentConfig) -> (XorConfig, ModelSpec, TrainConfig) {
        let xor = XorConfig {
            p_hat: self.p_hat,
            seed: self.seed,
            ..base.xor.clone()
        };
        let model = ModelSpec {
            embed_dim: self.embed_dim,
            ..base.model.clone()
        };
        let train = TrainConfig {
            objective: self.objective,
            lambda: self.lambda.unwrap_or(base.train.lambda),
            seed: self.seed,
            ..base.train.clone()
        };
        (xor, model, train)
    }

    /// Identity of the cell's work: its settings plus the retrieval specs.
    pub fn hash(&self, base: &ExperimentConfig) -> String {
        let (xor, model, train) = self.configs(base);
        let v = serde_json::json!({
            "run": run_hash(&xor, &model, &train),
            "retrieval": base.retrieval,
        });
        sha256_hex(v.to_string().as_bytes())
    }
}

/// Cross product of objectives and grid axes, in a fixed order.
pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<GridCell> {
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let p_hats = or(&cfg.grid.p_hat, cfg.xor.p_hat);
    let lambdas = or(&cfg.grid.lambda, cfg.train.lambda);
    let dims = if cfg.grid.embed_dim.is_empty() {
        vec![cfg.model.embed_dim]
    } else {
        cfg.grid.embed_dim.clone()
    };
    let seeds = if cfg.grid.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.grid.seeds.clone()
    };
    let mut cells = Vec::new();
    for &objective in &cfg.objectives {
        let ls: Vec<Option<f64>> = if objective == ObjectiveKind::Confu {
            lambdas.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        for &p_hat in &p_hats {
            for &lambda in &ls {
                for &embed_dim in &dims {
                    for &seed in &seeds {
                        cells.push(GridCell {
                            objective,
                            p_hat,
                            lambda,
                            embed_dim,
                            seed,
                        });
                    }
                }
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CellRecord {
    format: String,
    cell_hash: String,
    cell: GridCell,
    results: Vec<RetrievalResult>,
    final_checksum: String,
}

const CELL_FORMAT: &str = "confu-sweep-cell/2";

fn cached(path: &Path, hash: &str) -> Option<CellRecord> {
    let text = std::fs::read_to_string(path).ok()?;
    let rec: CellRecord = serde_json::from_str(&text).ok()?;
    (rec.format == CELL_FORMAT && rec.cell_hash == hash).then_some(rec)
}

fn run_cell(cfg: &ExperimentConfig, cell: &GridCell) -> Result<CellRecord> {
    let hash = cell.hash(cfg);
    let dir = cfg.output_dir.join("cells").join(&hash[..16]);
    let result_path = dir.join("result.json");
    if let Some(rec) = cached(&result_path, &hash) {
        return Ok(rec);
    }
    mkdir(&dir)?;
    let (xor, model, train_cfg) = cell.configs(cfg);
    let (train, test) = generate(&xor)?;
    let (_, report) = run_training(
        &xor,
        &model,
        &train_cfg,
        &train,
        &test,
        &cfg.retrieval,
        cell.seed,
    )?;
    report.write_trace(&dir.join("trace.jsonl"))?;
    let rec = CellRecord {
        format: CELL_FORMAT.into(),
        cell_hash: hash,
        cell: cell.clone(),
        results: report.final_eval.clone(),
        final_checksum: report.final_checksum,
    };
    write_json(&result_path, &rec)?;
    Ok(rec)
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<Row>,
    pub cells: usize,
    /// Failed cells with their errors, in grid order.
    pub failures: Vec<(GridCell, Error)>,
}

/// Runs every grid cell on `cfg.workers` threads. Finished cells are cached
/// on disk by hash, so an interrupted sweep resumes where it stopped. The
/// table is written even when some cells fail; those rows carry the gap
/// marker.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    mkdir(&cfg.output_dir)?;
    let cells = grid_cells(cfg);
    if cells.is_empty() {
        return Err(Error::config("grid", "no cells to run"));
    }
    let slots: Mutex<Vec<Option<Result<CellRecord>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..cfg.workers.min(cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let r = run_cell(cfg, cell);
                slots.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let slots = slots.into_inner().expect("results lock");
    let mut outcomes = Vec::with_capacity(cells.len());
    let mut failures = Vec::new();
    for (cell, slot) in cells.iter().zip(slots) {
        let results = match slot.expect("every cell ran") {
            Ok(rec) => Some(rec.results),
            Err(e) => {
                failures.push((cell.clone(), e));
                None
            }
        };
        outcomes.push(GridOutcome {
            objective: cell.objective,
            grid_param: cell.label(),
            seed: cell.seed,
            results,
        });
    }
    let rows = sweep_eval(&outcomes, &cfg.retrieval);
    write_csv(&cfg.output_dir.join("sweep.csv"), &rows)?;
    write_json(
        &cfg.output_dir.join("sweep_summary.json"),
        &summarize(&rows),
    )?;
    Ok(SweepOutcome {
        rows,
        cells: cells.len(),
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcRow {
    pub p_hat: f64,
    pub tc_nats: f64,
    pub tc_bits: f64,
    pub i12: f64,
    pub i13: f64,
    pub i23: f64,
    pub i3_12: f64,
    pub i2_13: f64,
    pub i1_23: f64,
}

/// Exact per-coordinate total correlation and its mutual-information terms.
pub fn cmd_tc_oracle(p_hats: &[f64]) -> Result<Vec<TcRow>> {
    p_hats
        .iter()
        .map(|&p| {
            let t = tc_decomposition(p)?;
            Ok(TcRow {
                p_hat: p,
                tc_nats: t.tc,
                tc_bits: t.tc / std::f64::consts::LN_2,
                i12: t.i12,
                i13: t.i13,
                i23: t.i23,
                i3_12: t.i3_12,
                i2_13: t.i2_13,
                i1_23: t.i1_23,
            })
        })
        .collect()
}

pub fn tc_rows_csv(rows: &[TcRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::contract(format!("csv buffer: {e}")))
}

/// Fixed-width table for the terminal.
pub fn tc_rows_table(rows: &[TcRow]) -> String {
    let mut s = format!(
        "{:>6} {:>9} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "p_hat", "tc_nats", "tc_bits", "I12", "I13", "I23", "I3;12", "I2;13", "I1;23"
    );
    for r in rows {
        s.push_str(&format!(
            "{:>6.3} {:>9.4} {:>8.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
            r.p_hat, r.tc_nats, r.tc_bits, r.i12, r.i13, r.i23, r.i3_12, r.i2_13, r.i1_23
        ));
    }
    s
}

pub fn write_tc_csv(path: &Path, rows: &[TcRow]) -> Result<()> {
    write_atomic(path, &tc_rows_csv(rows)?)
}
