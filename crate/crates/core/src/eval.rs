//! Pool-based zero-shot retrieval.
//!
//! A retrieval ranks `C` candidates of a target modality given either one
//! query modality (1→1) or a pair (2→1). Each objective supports only the
//! modes its similarity can express; see [`score`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{embed_dataset, pair_index, EmbeddingValues, ModelBundle};
use crate::objectives::{triangle_area, triple_product, ObjectiveKind};
use crate::rng::{self, substream};
use crate::synth::TripletDataset;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    /// Top-1 accuracy.
    Accuracy,
    /// Mate among the top `K`.
    RecallAt(usize),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Accuracy => f.write_str("accuracy@1"),
            Metric::RecallAt(k) => write!(f, "recall@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "accuracy@1" || s == "accuracy" {
            return Ok(Metric::Accuracy);
        }
        s.strip_prefix("recall@")
            .and_then(|k| k.parse().ok())
            .map(Metric::RecallAt)
            .ok_or_else(|| Error::config("metric", format!("unknown metric {s:?}")))
    }
}

impl Serialize for Metric {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Metric {
    fn k(&self) -> usize {
        match *self {
            Metric::Accuracy => 1,
            Metric::RecallAt(k) => k,
        }
    }
}

fn default_pool() -> usize {
    32
}

fn default_pools() -> usize {
    500
}

fn default_metric() -> Metric {
    Metric::Accuracy
}

/// Modalities are 1-based here, matching how they are written in configs
/// and result tables.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSpec {
    pub target: usize,
    pub queries: Vec<usize>,
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    #[serde(default = "default_pools")]
    pub n_pools: usize,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default)]
    pub seed: u64,
}

impl RetrievalSpec {
    /// Target X2 from (X1, X3), 32-candidate pools.
    pub fn xor_default() -> Self {
        Self::new(2, &[1, 3])
    }

    pub fn new(target: usize, queries: &[usize]) -> Self {
        Self {
            target,
            queries: queries.to_vec(),
            pool_size: default_pool(),
            n_pools: default_pools(),
            metric: Metric::Accuracy,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |m: usize| (1..=3).contains(&m);
        if !ok(self.target) {
            return Err(Error::config(
                "retrieval.target",
                format!("{} is not in 1..=3", self.target),
            ));
        }
        match self.queries.as_slice() {
            [q] if ok(*q) => {}
            [a, b] if ok(*a) && ok(*b) && a != b => {}
            q => {
                return Err(Error::config(
                    "retrieval.queries",
                    format!("{q:?} must be one modality or two distinct ones"),
                ))
            }
        }
        if self.queries.contains(&self.target) {
            return Err(Error::config(
                "retrieval.queries",
                "must not contain the target",
            ));
        }
        if self.pool_size == 0 {
            return Err(Error::config("retrieval.pool_size", "must be at least 1"));
        }
        if self.n_pools == 0 {
            return Err(Error::config("retrieval.n_pools", "must be at least 1"));
        }
        let k = self.metric.k();
        if k == 0 || k > self.pool_size {
            return Err(Error::config(
                "retrieval.metric",
                format!("K = {k} must lie in 1..=pool_size"),
            ));
        }
        Ok(())
    }

    pub fn mode(&self) -> &'static str {
        if self.queries.len() == 1 {
            "1->1"
        } else {
            "2->1"
        }
    }

    pub fn queries_label(&self) -> String {
        self.queries
            .iter()
            .map(|q| format!("X{q}"))
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn chance(&self) -> f64 {
        self.metric.k() as f64 / self.pool_size as f64
    }
}

/// Query side of a retrieval, already embedded.
#[derive(Clone, Copy, Debug)]
pub enum Query<'a> {
    Single(&'a [f64]),
    Pair {
        a: &'a [f64],
        b: &'a [f64],
        /// Fusion-network embedding of the pair, when the bundle has one.
        fused: Option<&'a [f64]>,
    },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Unit-vector Gram determinant of three vectors from their pairwise dots.
fn gram3(ab: f64, ac: f64, bc: f64) -> f64 {
    (1.0 + 2.0 * ab * ac * bc - ab * ab - ac * ac - bc * bc)
        .max(0.0)
        .sqrt()
}

/// Scores every candidate row; higher always means a better match.
pub fn score(kind: ObjectiveKind, query: Query<'_>, candidates: &Tensor) -> Result<Vec<f64>> {
    let rows = 0..candidates.rows();
    let unsupported = |mode: &str| Error::UnsupportedRetrievalMode {
        objective: kind.name().into(),
        mode: mode.into(),
    };
    let out = match (kind, query) {
        (ObjectiveKind::Confu | ObjectiveKind::TriClip, Query::Single(q)) => {
            rows.map(|r| dot(q, candidates.row(r))).collect()
        }
        (ObjectiveKind::Confu, Query::Pair { fused, .. }) => {
            let f = fused
                .ok_or_else(|| Error::contract("ConFu 2->1 retrieval needs the fused embedding"))?;
            rows.map(|r| dot(f, candidates.row(r))).collect()
        }
        (ObjectiveKind::Gram, Query::Single(q)) => rows
            .map(|r| {
                let c = dot(q, candidates.row(r));
                -(1.0 - c * c).max(0.0).sqrt()
            })
            .collect(),
        (ObjectiveKind::Gram, Query::Pair { a, b, .. }) => {
            let ab = dot(a, b);
            rows.map(|r| {
                let c = candidates.row(r);
                -gram3(ab, dot(a, c), dot(b, c))
            })
            .collect()
        }
        (ObjectiveKind::Symile, Query::Pair { a, b, .. }) => rows
            .map(|r| triple_product(a, b, candidates.row(r)))
            .collect(),
        (ObjectiveKind::Triangle, Query::Pair { a, b, .. }) => rows
            .map(|r| -triangle_area(a, b, candidates.row(r)))
            .collect(),
        (ObjectiveKind::TriClip, Query::Pair { .. }) => return Err(unsupported("2->1")),
        (ObjectiveKind::Symile | ObjectiveKind::Triangle, Query::Single(_)) => {
            return Err(unsupported("1->1"))
        }
    };
    Ok(out)
}

/// Whether `kind` can answer `spec` at all.
pub fn supports(kind: ObjectiveKind, spec: &RetrievalSpec) -> bool {
    match (kind, spec.queries.len()) {
        (ObjectiveKind::Confu | ObjectiveKind::Gram, _) => true,
        (ObjectiveKind::TriClip, n) => n == 1,
        (ObjectiveKind::Symile | ObjectiveKind::Triangle, n) => n == 2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub objective: ObjectiveKind,
    pub spec: RetrievalSpec,
    pub value: f64,
    pub chance: f64,
    pub std_err: f64,
    pub per_pool: Vec<f64>,
}

/// Probability that a correct candidate lands in the top `k` when ties are
/// ordered uniformly at random. `correct` must hold at least one `true`.
pub fn expected_hit(scores: &[f64], correct: &[bool], k: usize) -> f64 {
    let best = scores
        .iter()
        .zip(correct)
        .filter(|(_, &c)| c)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut above, mut tied_wrong, mut tied_right) = (0usize, 0usize, 0usize);
    for (&v, &c) in scores.iter().zip(correct) {
        match (v > best, v == best, c) {
            (true, _, _) => above += 1,
            (_, true, false) => tied_wrong += 1,
            (_, true, true) => tied_right += 1,
            _ => {}
        }
    }
    if above >= k {
        return 0.0;
    }
    let slots = k - above;
    if slots > tied_wrong {
        return 1.0;
    }
    // all `slots` leading places of the tied block go to wrong candidates
    let tied = tied_wrong + tied_right;
    let miss: f64 = (0..slots)
        .map(|i| (tied_wrong - i) as f64 / (tied - i) as f64)
        .product();
    1.0 - miss
}

/// Evaluates frozen embeddings against the raw vectors of the same split.
///
/// Each pool is `C` distinct indices drawn without replacement; the first
/// drawn index is the query and its row in the target modality is the mate.
/// A pick counts as correct when its raw target vector equals the mate's, so
/// duplicate inputs are never penalized. Exact score ties are broken
/// uniformly at random in expectation (see [`expected_hit`]), so a pool's
/// value can be fractional.
pub fn evaluate(
    kind: ObjectiveKind,
    emb: &EmbeddingValues,
    raw: &TripletDataset,
    spec: &RetrievalSpec,
) -> Result<RetrievalResult> {
    spec.validate()?;
    if !supports(kind, spec) {
        return Err(Error::UnsupportedRetrievalMode {
            objective: kind.name().into(),
            mode: spec.mode().into(),
        });
    }
    let n = raw.len();
    if emb.z[0].rows() != n {
        return Err(Error::contract(format!(
            "{} embeddings for a {n}-row dataset",
            emb.z[0].rows()
        )));
    }
    if spec.pool_size > n {
        return Err(Error::contract(format!(
            "pool of {} exceeds the {n} available samples",
            spec.pool_size
        )));
    }
    let t = spec.target - 1;
    let targets = &emb.z[t];
    let target_raw = raw.block(t);
    let k = spec.metric.k();
    let mut rng = substream(spec.seed, rng::EVAL);
    let mut per_pool = Vec::with_capacity(spec.n_pools);
    for _ in 0..spec.n_pools {
        let pool = sample(&mut rng, n, spec.pool_size).into_vec();
        let q = pool[0];
        let query = match spec.queries.as_slice() {
            [a] => Query::Single(emb.z[a - 1].row(q)),
            [a, b] => {
                let (i, j) = ((a - 1).min(b - 1), (a - 1).max(b - 1));
                Query::Pair {
                    a: emb.z[a - 1].row(q),
                    b: emb.z[b - 1].row(q),
                    fused: Some(emb.fused[pair_index(i, j)?].row(q)),
                }
            }
            _ => unreachable!("validated"),
        };
        let cands = targets.select_rows(&pool);
        let s = score(kind, query, &cands)?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("retrieval scores are not finite"));
        }
        let mate = target_raw.row(q);
        let correct: Vec<bool> = pool.iter().map(|&c| target_raw.row(c) == mate).collect();
        per_pool.push(expected_hit(&s, &correct, k));
    }
    let value = per_pool.iter().sum::<f64>() / per_pool.len() as f64;
    let std_err = (value * (1.0 - value) / per_pool.len() as f64).sqrt();
    Ok(RetrievalResult {
        objective: kind,
        spec: spec.clone(),
        value,
        chance: spec.chance(),
        std_err,
        per_pool,
    })
}

/// Embeds `raw` with the bundle in evaluation mode and runs every spec.
pub fn evaluate_model(
    bundle: &ModelBundle,
    raw: &TripletDataset,
    specs: &[RetrievalSpec],
) -> Result<Vec<RetrievalResult>> {
    let emb = embed_dataset(bundle, [raw.block(0), raw.block(1), raw.block(2)], 1024)?;
    specs
        .iter()
        .map(|s| evaluate(bundle.objective, &emb, raw, s))
        .collect()
}

/// Value of one table cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cell {
    Value(f64),
    /// The grid run did not complete.
    Missing,
    /// The objective cannot answer this retrieval mode.
    Unsupported,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Value(v) => write!(f, "{v}"),
            Cell::Missing => f.write_str(GAP),
            Cell::Unsupported => f.write_str("unsupported"),
        }
    }
}

/// Marker written for grid cells without a result.
pub const GAP: &str = "NA";

/// One long-format row.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub objective: ObjectiveKind,
    pub grid_param: String,
    pub seed: u64,
    pub target: usize,
    pub queries: String,
    pub pool_size: usize,
    pub metric: Metric,
    pub value: Cell,
}

impl Row {
    fn key(&self) -> (String, ObjectiveKind, u64, usize, String, usize, Metric) {
        (
            self.grid_param.clone(),
            self.objective,
            self.seed,
            self.target,
            self.queries.clone(),
            self.pool_size,
            self.metric,
        )
    }
}

/// Outcome of one grid run, ready to be tabulated.
#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub objective: ObjectiveKind,
    pub grid_param: String,
    pub seed: u64,
    /// `None` when the run failed or never happened.
    pub results: Option<Vec<RetrievalResult>>,
}

/// Flattens grid outcomes into rows, one per (cell, spec), sorted by grid
/// parameter, objective, seed and spec.
pub fn sweep_eval(outcomes: &[GridOutcome], specs: &[RetrievalSpec]) -> Vec<Row> {
    let mut rows = Vec::new();
    for o in outcomes {
        for spec in specs {
            let value = if !supports(o.objective, spec) {
                Cell::Unsupported
            } else {
                o.results
                    .as_ref()
                    .and_then(|rs| rs.iter().find(|r| &r.spec == spec))
                    .map_or(Cell::Missing, |r| Cell::Value(r.value))
            };
            rows.push(Row {
                objective: o.objective,
                grid_param: o.grid_param.clone(),
                seed: o.seed,
                target: spec.target,
                queries: spec.queries_label(),
                pool_size: spec.pool_size,
                metric: spec.metric,
                value,
            });
        }
    }
    rows.sort_by_key(Row::key);
    rows
}

pub const CSV_HEADER: [&str; 8] = [
    "objective",
    "grid_param",
    "seed",
    "target",
    "queries",
    "pool_size",
    "metric",
    "value",
];

pub fn rows_to_csv(rows: &[Row]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.objective.name().to_string(),
            r.grid_param.clone(),
            r.seed.to_string(),
            format!("X{}", r.target),
            r.queries.clone(),
            r.pool_size.to_string(),
            r.metric.to_string(),
            r.value.to_string(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::contract(format!("csv buffer: {e}")))
}

pub fn write_csv(path: &Path, rows: &[Row]) -> Result<()> {
    crate::io::write_atomic(path, &rows_to_csv(rows)?)
}

/// Mean ± sample standard deviation of one cell across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub objective: ObjectiveKind,
    pub grid_param: String,
    pub target: String,
    pub queries: String,
    pub pool_size: usize,
    pub metric: Metric,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
    pub missing: usize,
}

pub fn summarize(rows: &[Row]) -> Vec<SummaryEntry> {
    type Key = (String, ObjectiveKind, usize, String, usize, Metric);
    let mut groups: BTreeMap<Key, (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        if matches!(r.value, Cell::Unsupported) {
            continue;
        }
        let e = groups
            .entry((
                r.grid_param.clone(),
                r.objective,
                r.target,
                r.queries.clone(),
                r.pool_size,
                r.metric,
            ))
            .or_default();
        match r.value {
            Cell::Value(v) => e.0.push(v),
            _ => e.1 += 1,
        }
    }
    groups
        .into_iter()
        .map(
            |((grid_param, objective, target, queries, pool_size, metric), (vals, missing))| {
                let (mean, std) = mean_std(&vals);
                SummaryEntry {
                    objective,
                    grid_param,
                    target: format!("X{target}"),
                    queries,
                    pool_size,
                    metric,
                    mean,
                    std,
                    n: vals.len(),
                    missing,
                }
            },
        )
        .collect()
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(vals: &[f64]) -> (Option<f64>, Option<f64>) {
    if vals.is_empty() {
        return (None, None);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 {
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (Some(mean), Some(var.sqrt()))
}
