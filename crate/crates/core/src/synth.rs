//! Synthetic XOR triplets with a tunable synergy level.
//!
//! Each coordinate draws `x1, x2 ~ Bernoulli(0.5)` and a mixing bit
//! `i ~ Bernoulli(p_hat)`; then `x3 = x1 XOR x2` when `i = 1` and `x3 = x1`
//! otherwise. At `p_hat = 1` every pairwise mutual information vanishes while
//! the total correlation is one bit per coordinate.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, substream};
use crate::tensor::Tensor;

/// Granularity of the mixing indicator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Independent per coordinate and per sample; coordinates are i.i.d.
    #[default]
    PerCoordinate,
    /// One indicator per sample shared by all coordinates. Not covered by
    /// the exact oracle's per-coordinate scaling.
    PerSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XorConfig {
    pub d: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub p_hat: f64,
    pub seed: u64,
    pub mixing: Mixing,
}

impl Default for XorConfig {
    fn default() -> Self {
        Self {
            d: 10,
            n_train: 10_000,
            n_test: 5_000,
            p_hat: 1.0,
            seed: 0,
            mixing: Mixing::PerCoordinate,
        }
    }
}

impl XorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::config("xor.d", "must be >= 1"));
        }
        if self.n_train < 1 {
            return Err(Error::config("xor.n_train", "must be >= 1"));
        }
        if self.n_test < 1 {
            return Err(Error::config("xor.n_test", "must be >= 1"));
        }
        check_p_hat(self.p_hat).map_err(|_| Error::config("xor.p_hat", "must lie in [0, 1]"))
    }
}

fn check_p_hat(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::contract(format!("p_hat {p} outside [0, 1]")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Aligned binary triplets, stored as `0.0 / 1.0` floats.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletDataset {
    pub blocks: [Tensor; 3],
    pub p_hat: f64,
    pub split: Split,
}

impl TripletDataset {
    pub fn len(&self) -> usize {
        self.blocks[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.blocks[0].cols()
    }

    /// Block for modality `m` in `0..3`.
    pub fn block(&self, m: usize) -> &Tensor {
        &self.blocks[m]
    }

    /// Rows `idx` of all three blocks.
    pub fn batch(&self, idx: &[usize]) -> [Tensor; 3] {
        [0, 1, 2].map(|m| self.blocks[m].select_rows(idx))
    }
}

fn sample_split(cfg: &XorConfig, n: usize, stream: &str, split: Split) -> TripletDataset {
    let mut rng = substream(cfg.seed, stream);
    let d = cfg.d;
    let mut x1 = Vec::with_capacity(n * d);
    let mut x2 = Vec::with_capacity(n * d);
    let mut x3 = Vec::with_capacity(n * d);
    for _ in 0..n {
        let shared = rng.gen_bool(cfg.p_hat);
        for _ in 0..d {
            let a = rng.gen_bool(0.5);
            let b = rng.gen_bool(0.5);
            let mix = match cfg.mixing {
                Mixing::PerCoordinate => rng.gen_bool(cfg.p_hat),
                Mixing::PerSample => shared,
            };
            let c = if mix { a ^ b } else { a };
            x1.push(f64::from(u8::from(a)));
            x2.push(f64::from(u8::from(b)));
            x3.push(f64::from(u8::from(c)));
        }
    }
    let mk = |v| Tensor::from_vec(n, d, v).expect("positive dims");
    TripletDataset {
        blocks: [mk(x1), mk(x2), mk(x3)],
        p_hat: cfg.p_hat,
        split,
    }
}

/// Draws the train and test splits from independent substreams of `cfg.seed`.
pub fn generate(cfg: &XorConfig) -> Result<(TripletDataset, TripletDataset)> {
    cfg.validate()?;
    Ok((
        sample_split(cfg, cfg.n_train, rng::DATA_TRAIN, Split::Train),
        sample_split(cfg, cfg.n_test, rng::DATA_TEST, Split::Test),
    ))
}

/// Joint pmf of one coordinate triple, indexed `[x1][x2][x3]`.
pub fn joint_pmf(p_hat: f64) -> Result<[[[f64; 2]; 2]; 2]> {
    check_p_hat(p_hat)?;
    let mut p = [[[0.0; 2]; 2]; 2];
    for x1 in 0..2 {
        for x2 in 0..2 {
            p[x1][x2][x1 ^ x2] += 0.25 * p_hat;
            p[x1][x2][x1] += 0.25 * (1.0 - p_hat);
        }
    }
    Ok(p)
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

fn entropy(ps: impl IntoIterator<Item = f64>) -> f64 {
    -ps.into_iter().map(plogp).sum::<f64>()
}

/// Information-theoretic quantities of a 3-variable discrete pmf, in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TcDecomposition {
    pub tc: f64,
    pub i12: f64,
    pub i13: f64,
    pub i23: f64,
    /// `I(X3; X1, X2)`
    pub i3_12: f64,
    /// `I(X2; X1, X3)`
    pub i2_13: f64,
    /// `I(X1; X2, X3)`
    pub i1_23: f64,
}

/// Decomposes an arbitrary 2×2×2 joint pmf (must sum to one).
pub fn decompose(p: &[[[f64; 2]; 2]; 2]) -> TcDecomposition {
    let cell = |a: usize, b: usize, c: usize| p[a][b][c];
    let m1 = |a| {
        (0..2)
            .flat_map(|b| (0..2).map(move |c| (b, c)))
            .map(|(b, c)| cell(a, b, c))
            .sum::<f64>()
    };
    let m2 = |b| {
        (0..2)
            .flat_map(|a| (0..2).map(move |c| (a, c)))
            .map(|(a, c)| cell(a, b, c))
            .sum::<f64>()
    };
    let m3 = |c| {
        (0..2)
            .flat_map(|a| (0..2).map(move |b| (a, b)))
            .map(|(a, b)| cell(a, b, c))
            .sum::<f64>()
    };
    let h1 = entropy((0..2).map(m1));
    let h2 = entropy((0..2).map(m2));
    let h3 = entropy((0..2).map(m3));
    let pairs = |f: &dyn Fn(usize, usize) -> f64| entropy((0..4).map(|k| f(k / 2, k % 2)));
    let h12 = pairs(&|a, b| cell(a, b, 0) + cell(a, b, 1));
    let h13 = pairs(&|a, c| cell(a, 0, c) + cell(a, 1, c));
    let h23 = pairs(&|b, c| cell(0, b, c) + cell(1, b, c));
    let h123 = entropy((0..8).map(|k| cell(k >> 2, (k >> 1) & 1, k & 1)));
    TcDecomposition {
        tc: h1 + h2 + h3 - h123,
        i12: h1 + h2 - h12,
        i13: h1 + h3 - h13,
        i23: h2 + h3 - h23,
        i3_12: h3 + h12 - h123,
        i2_13: h2 + h13 - h123,
        i1_23: h1 + h23 - h123,
    }
}

/// Exact total correlation of one coordinate triple, in nats. Multiply by
/// `d` for `d` independent coordinates.
pub fn tc_exact(p_hat: f64) -> Result<f64> {
    let p = joint_pmf(p_hat)?;
    let mut marg = [[0.0; 2]; 3];
    for (k, prob) in (0..8).map(|k| (k, p[k >> 2][(k >> 1) & 1][k & 1])) {
        marg[0][k >> 2] += prob;
        marg[1][(k >> 1) & 1] += prob;
        marg[2][k & 1] += prob;
    }
    let mut kl = 0.0;
    for k in 0..8 {
        let (a, b, c) = (k >> 2, (k >> 1) & 1, k & 1);
        let pj = p[a][b][c];
        if pj > 0.0 {
            kl += pj * (pj / (marg[0][a] * marg[1][b] * marg[2][c])).ln();
        }
    }
    Ok(kl)
}

pub fn tc_decomposition(p_hat: f64) -> Result<TcDecomposition> {
    Ok(decompose(&joint_pmf(p_hat)?))
}

/// Minimum sample count for plug-in estimates.
pub const MIN_PLUGIN_SAMPLES: usize = 1_000;

fn bit(t: &Tensor, r: usize, c: usize) -> usize {
    usize::from(t.get(r, c) > 0.5)
}

/// Plug-in mutual information between modalities `pair.0` and `pair.1`
/// (0-based), from empirical 2×2 counts, averaged over coordinates.
pub fn empirical_pairwise_mi(ds: &TripletDataset, pair: (usize, usize)) -> Result<f64> {
    if ds.len() < MIN_PLUGIN_SAMPLES {
        return Err(Error::contract(format!(
            "plug-in MI needs >= {MIN_PLUGIN_SAMPLES} samples, got {}",
            ds.len()
        )));
    }
    if pair.0 > 2 || pair.1 > 2 || pair.0 == pair.1 {
        return Err(Error::contract(format!("invalid modality pair {pair:?}")));
    }
    let (a, b) = (ds.block(pair.0), ds.block(pair.1));
    let n = ds.len() as f64;
    let mut total = 0.0;
    for j in 0..ds.dim() {
        let mut counts = [[0usize; 2]; 2];
        for r in 0..ds.len() {
            counts[bit(a, r, j)][bit(b, r, j)] += 1;
        }
        let pa = [0, 1].map(|x| (counts[x][0] + counts[x][1]) as f64 / n);
        let pb = [0, 1].map(|y| (counts[0][y] + counts[1][y]) as f64 / n);
        for x in 0..2 {
            for y in 0..2 {
                let pj = counts[x][y] as f64 / n;
                if pj > 0.0 {
                    total += pj * (pj / (pa[x] * pb[y])).ln();
                }
            }
        }
    }
    Ok(total / ds.dim() as f64)
}

/// Empirical 2×2×2 pmf of coordinate `j`.
pub fn empirical_pmf(ds: &TripletDataset, j: usize) -> [[[f64; 2]; 2]; 2] {
    let mut p = [[[0.0; 2]; 2]; 2];
    let w = 1.0 / ds.len() as f64;
    for r in 0..ds.len() {
        p[bit(ds.block(0), r, j)][bit(ds.block(1), r, j)][bit(ds.block(2), r, j)] += w;
    }
    p
}

/// Plug-in total correlation per coordinate, averaged over coordinates.
pub fn empirical_tc(ds: &TripletDataset) -> Result<f64> {
    if ds.len() < MIN_PLUGIN_SAMPLES {
        return Err(Error::contract(format!(
            "plug-in TC needs >= {MIN_PLUGIN_SAMPLES} samples, got {}",
            ds.len()
        )));
    }
    let sum: f64 = (0..ds.dim())
        .map(|j| decompose(&empirical_pmf(ds, j)).tc)
        .sum();
    Ok(sum / ds.dim() as f64)
}

/// Result of additive Gaussian perturbation.
#[derive(Clone, Debug)]
pub struct Noisy {
    pub block: Tensor,
    /// `10·log10(signal variance / realized noise power)`; infinite for
    /// `sigma = 0`.
    pub snr_db: f64,
}

pub fn add_gaussian_noise(block: &Tensor, sigma: f64, seed: u64) -> Result<Noisy> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::contract(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(Noisy {
            block: block.clone(),
            snr_db: f64::INFINITY,
        });
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut rng = substream(seed, rng::NOISE);
    let mut out = block.clone();
    let mut noise_pow = 0.0;
    for v in out.data_mut() {
        let e = normal.sample(&mut rng);
        noise_pow += e * e;
        *v += e;
    }
    let n = block.len() as f64;
    noise_pow /= n;
    let mean = block.data().iter().sum::<f64>() / n;
    let signal = block
        .data()
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / n;
    Ok(Noisy {
        block: out,
        snr_db: 10.0 * (signal / noise_pow).log10(),
    })
}

const DATASET_FORMAT: &str = "confu-xor-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    config: XorConfig,
    config_hash: String,
    split: Split,
    rows: usize,
    dim: usize,
    /// Row-major bit strings, one character per entry.
    x1: String,
    x2: String,
    x3: String,
}

fn encode_bits(t: &Tensor) -> String {
    t.data()
        .iter()
        .map(|&v| if v > 0.5 { '1' } else { '0' })
        .collect()
}

fn decode_bits(s: &str, rows: usize, dim: usize) -> Result<Tensor> {
    let data: Vec<f64> = s
        .chars()
        .map(|c| match c {
            '0' => Ok(0.0),
            '1' => Ok(1.0),
            other => Err(Error::contract(format!("invalid bit character {other:?}"))),
        })
        .collect::<Result<_>>()?;
    Ok(Tensor::from_vec(rows, dim, data)?)
}

/// Writes one split as a JSON container.
pub fn save_dataset(
    path: &Path,
    ds: &TripletDataset,
    cfg: &XorConfig,
    config_hash: &str,
) -> Result<()> {
    let file = DatasetFile {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        config: cfg.clone(),
        config_hash: config_hash.into(),
        split: ds.split,
        rows: ds.len(),
        dim: ds.dim(),
        x1: encode_bits(ds.block(0)),
        x2: encode_bits(ds.block(1)),
        x3: encode_bits(ds.block(2)),
    };
    crate::io::write_atomic(path, serde_json::to_string(&file)?.as_bytes())
}

/// Loads a split, returning it with its generating config and hash.
pub fn load_dataset(path: &Path) -> Result<(TripletDataset, XorConfig, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: DatasetFile = serde_json::from_str(&text)?;
    if file.format != DATASET_FORMAT || file.version != DATASET_VERSION {
        return Err(Error::ArtifactMismatch(format!(
            "{} is not a {DATASET_FORMAT} v{DATASET_VERSION} file",
            path.display()
        )));
    }
    let blocks = [
        decode_bits(&file.x1, file.rows, file.dim)?,
        decode_bits(&file.x2, file.rows, file.dim)?,
        decode_bits(&file.x3, file.rows, file.dim)?,
    ];
    Ok((
        TripletDataset {
            blocks,
            p_hat: file.config.p_hat,
            split: file.split,
        },
        file.config,
        file.config_hash,
    ))
}
