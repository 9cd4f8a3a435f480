//! Modality encoders, projectors and pairwise fusion networks.
//!
//! Encoder `i` maps raw input to features `h_i`; projector `i` maps `h_i` into
//! the shared embedding space; fusion network `(i, j)` consumes the
//! concatenation `[h_i ; h_j]`. Embeddings are row-normalized unless a bundle opts out for the unimodal blocks.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sha256_hex, write_atomic};
use crate::objectives::{Critic, ObjectiveKind};
use crate::rng::{self, substream, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// Modality pairs feeding the three fusion networks, in storage order.
pub const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Index into [`PAIRS`] for an unordered 0-based pair.
pub fn pair_index(i: usize, j: usize) -> Result<usize> {
    let key = if i < j { (i, j) } else { (j, i) };
    PAIRS
        .iter()
        .position(|&p| p == key)
        .ok_or_else(|| Error::contract(format!("invalid fusion pair ({i}, {j})")))
}

/// Layer sizes of one rectifier MLP. `hidden_dims` may be empty, giving a
/// single affine map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
        }
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }
}

/// Architecture of the full three-modality bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoders: [MlpConfig; 3],
    pub projectors: [MlpConfig; 3],
    /// Ordered as [`PAIRS`]: (1,2), (1,3), (2,3).
    pub fusions: [MlpConfig; 3],
}

impl ModelConfig {
    /// Two-layer encoders of width `hidden`, linear projectors, and two-layer
    /// fusion networks, all sharing embedding size `embed_dim`.
    pub fn symmetric(input_dim: usize, hidden: usize, embed_dim: usize) -> Self {
        let enc = MlpConfig::new(input_dim, &[hidden], hidden);
        let proj = MlpConfig::new(hidden, &[], embed_dim);
        let fus = MlpConfig::new(2 * hidden, &[hidden], embed_dim);
        Self {
            encoders: [enc.clone(), enc.clone(), enc],
            projectors: [proj.clone(), proj.clone(), proj],
            fusions: [fus.clone(), fus.clone(), fus],
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.projectors[0].output_dim
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .encoders
            .iter()
            .chain(&self.projectors)
            .chain(&self.fusions);
        for (k, c) in all.enumerate() {
            if c.dims().contains(&0) {
                return Err(Error::config(
                    format!("model.network[{k}]"),
                    "all dimensions must be >= 1",
                ));
            }
        }
        let d = self.embed_dim();
        for m in 0..3 {
            if self.projectors[m].input_dim != self.encoders[m].output_dim {
                return Err(Error::config(
                    format!("model.projectors[{m}].input_dim"),
                    "must equal the encoder output dim",
                ));
            }
            if self.projectors[m].output_dim != d {
                return Err(Error::config(
                    format!("model.projectors[{m}].output_dim"),
                    format!("all embeddings must share dimension {d}"),
                ));
            }
        }
        for (k, &(i, j)) in PAIRS.iter().enumerate() {
            let want = self.encoders[i].output_dim + self.encoders[j].output_dim;
            if self.fusions[k].input_dim != want {
                return Err(Error::config(
                    format!("model.fusions[{k}].input_dim"),
                    format!("must equal {want} (concatenated features)"),
                ));
            }
            if self.fusions[k].output_dim != d {
                return Err(Error::config(
                    format!("model.fusions[{k}].output_dim"),
                    format!("all embeddings must share dimension {d}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` for weights and biases.
    pub fn init(cfg: &MlpConfig, rng: &mut Rng) -> Self {
        let dims = cfg.dims();
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw =
                    |n| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..=bound)).collect() };
                Linear {
                    weight: Tensor::from_vec(fan_in, fan_out, draw(fan_in * fan_out))
                        .expect("positive dims"),
                    bias: Tensor::from_vec(1, fan_out, draw(fan_out)).expect("positive dims"),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weight.data_mut().fill(0.0);
            l.bias.data_mut().fill(0.0);
        }
    }
}

/// Tape handles for one [`Mlp`]'s parameters.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    fn bind(mlp: &Mlp, tape: &mut Tape, trainable: bool) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.clone(), trainable),
                        tape.leaf(l.bias.clone(), trainable),
                    )
                })
                .collect(),
        }
    }

    /// Affine layers with rectifiers between them, none after the last.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let y = tape.matmul(h, w)?;
            h = tape.add(y, b)?;
            if k != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// All trainable state of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub encoders: [Mlp; 3],
    pub projectors: [Mlp; 3],
    pub fusions: [Mlp; 3],
    pub critic: Critic,
    pub lambda: f64,
    pub mask_ratio: f64,
    /// Objective the bundle is trained for; decides whether unimodal
    /// embeddings are row-normalized.
    pub objective: ObjectiveKind,
}

/// Deterministically initializes a bundle; each network draws from its own
/// named substream of `seed`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    cfg.validate()?;
    let mk = |kind: &str, m: usize, c: &MlpConfig| {
        let mut r = substream(seed, &format!("{}/{kind}{m}", rng::INIT));
        Mlp::init(c, &mut r)
    };
    Ok(ModelBundle {
        config: cfg.clone(),
        encoders: [0, 1, 2].map(|m| mk("encoder", m, &cfg.encoders[m])),
        projectors: [0, 1, 2].map(|m| mk("projector", m, &cfg.projectors[m])),
        fusions: [0, 1, 2].map(|k| mk("fusion", k, &cfg.fusions[k])),
        critic: Critic::default(),
        lambda: 0.5,
        mask_ratio: 0.0,
        objective: ObjectiveKind::Confu,
    })
}

/// Tape view of a [`ModelBundle`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoders: [BoundMlp; 3],
    pub projectors: [BoundMlp; 3],
    pub fusions: [BoundMlp; 3],
    pub log_scale: Var,
    pub normalize: bool,
}

impl BoundModel {
    /// Parameter handles in [`ModelBundle::params_mut`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.log_scale];
        for m in self
            .encoders
            .iter()
            .chain(&self.projectors)
            .chain(&self.fusions)
        {
            v.extend(m.vars());
        }
        v
    }
}

/// Embedding handles of one batch. Blocks are indexed by modality
/// (`z`, `h`) and by [`PAIRS`] order (`fused`).
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingSet {
    pub h: [Var; 3],
    pub z: [Var; 3],
    pub fused: [Var; 3],
}

impl EmbeddingSet {
    pub fn rows(&self, tape: &Tape) -> usize {
        tape.shape(self.z[0])[0]
    }

    /// Concrete copies of all six embedding blocks.
    pub fn values(&self, tape: &Tape) -> EmbeddingValues {
        EmbeddingValues {
            z: self.z.map(|v| tape.value(v).clone()),
            fused: self.fused.map(|v| tape.value(v).clone()),
        }
    }
}

/// Frozen embeddings of a dataset, used by evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingValues {
    pub z: [Tensor; 3],
    pub fused: [Tensor; 3],
}

impl EmbeddingValues {
    pub fn fused_of(&self, i: usize, j: usize) -> Result<&Tensor> {
        Ok(&self.fused[pair_index(i, j)?])
    }
}

impl ModelBundle {
    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|m| self.encoders[m].input_dim())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let log_scale = tape.leaf(self.critic.log_scale.clone(), trainable);
        BoundModel {
            encoders: [0, 1, 2].map(|m| BoundMlp::bind(&self.encoders[m], tape, trainable)),
            projectors: [0, 1, 2].map(|m| BoundMlp::bind(&self.projectors[m], tape, trainable)),
            fusions: [0, 1, 2].map(|k| BoundMlp::bind(&self.fusions[k], tape, trainable)),
            log_scale,
            normalize: self.objective.normalizes_embeddings(),
        }
    }

    /// Mutable parameter list: the critic log-scale first, then networks in
    /// encoder, projector, fusion order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let Self {
            encoders,
            projectors,
            fusions,
            critic,
            ..
        } = self;
        let mut out: Vec<&mut Tensor> = vec![&mut critic.log_scale];
        for m in encoders
            .iter_mut()
            .chain(projectors.iter_mut())
            .chain(fusions.iter_mut())
        {
            for l in &mut m.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    /// Named, read-only parameters in [`Self::params_mut`] order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("critic.log_scale".to_string(), &self.critic.log_scale)];
        let groups = [
            ("encoder", &self.encoders),
            ("projector", &self.projectors),
            ("fusion", &self.fusions),
        ];
        for (kind, nets) in groups {
            for (m, net) in nets.iter().enumerate() {
                let tag = if kind == "fusion" {
                    let (i, j) = PAIRS[m];
                    format!("{kind}{}{}", i + 1, j + 1)
                } else {
                    format!("{kind}{}", m + 1)
                };
                for (k, l) in net.layers.iter().enumerate() {
                    out.push((format!("{tag}.layer{k}.weight"), &l.weight));
                    out.push((format!("{tag}.layer{k}.bias"), &l.bias));
                }
            }
        }
        out
    }

    /// Whether weight decay applies to each entry of [`Self::params_mut`].
    /// Only the critic temperature is exempt.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.named_params()
            .iter()
            .map(|(n, _)| n != "critic.log_scale")
            .collect()
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for (name, t) in self.named_params() {
            bytes.extend_from_slice(name.as_bytes());
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    pub fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }
}

/// `h_i = f_i(X_i)` and `z_i = normalize(p_i(h_i))` for 0-based modality `m`.
/// With normalization disabled `z_i` is the raw projector output.
pub fn encode_project(model: &BoundModel, tape: &mut Tape, x: Var, m: usize) -> Result<(Var, Var)> {
    if m > 2 {
        return Err(Error::contract(format!("modality index {m} out of range")));
    }
    let want = tape.value(model.encoders[m].layers[0].0).rows();
    let got = tape.shape(x)[1];
    if got != want {
        return Err(Error::contract(format!(
            "modality {} expects input dim {want}, got {got}",
            m + 1
        )));
    }
    let h = model.encoders[m].forward(tape, x)?;
    let p = model.projectors[m].forward(tape, h)?;
    let z = if model.normalize {
        tape.l2_normalize(p)?
    } else {
        p
    };
    Ok((h, z))
}

/// Feature mask with each entry zeroed independently with probability
/// `ratio`. Kept entries are not rescaled.
pub fn feature_mask(rows: usize, cols: usize, ratio: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < ratio { 0.0 } else { 1.0 })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("positive dims")
}

/// `z_ij = normalize(g_ij([mask(h_i) ; mask(h_j)]))`.
///
/// Masking applies only when `training` is set and `mask_ratio > 0`; with a
/// zero ratio no random numbers are consumed.
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    model: &BoundModel,
    tape: &mut Tape,
    h_i: Var,
    h_j: Var,
    pair: (usize, usize),
    mask_ratio: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    if pair.0 >= pair.1 {
        return Err(Error::contract(format!("invalid fusion pair {pair:?}")));
    }
    let k = pair_index(pair.0, pair.1)?;
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::config("mask_ratio", "must lie in [0, 1]"));
    }
    let (mut a, mut b) = (h_i, h_j);
    if training && mask_ratio > 0.0 {
        for h in [&mut a, &mut b] {
            let s = tape.shape(*h).to_vec();
            let mask = tape.constant(feature_mask(s[0], s[1], mask_ratio, rng));
            *h = tape.mul(*h, mask)?;
        }
    }
    let cat = tape.concat_cols(a, b)?;
    let out = model.fusions[k].forward(tape, cat)?;
    Ok(tape.l2_normalize(out)?)
}

/// Runs every encoder, projector and fusion network on one aligned batch.
pub fn forward_all(
    bundle: &ModelBundle,
    model: &BoundModel,
    tape: &mut Tape,
    batch: [&Tensor; 3],
    training: bool,
    rng: &mut Rng,
) -> Result<EmbeddingSet> {
    let n = batch[0].rows();
    if batch.iter().any(|b| b.rows() != n) {
        return Err(Error::contract(format!(
            "modality blocks have unequal row counts {:?}",
            batch.map(Tensor::rows)
        )));
    }
    let mut hz = Vec::with_capacity(3);
    for (m, block) in batch.iter().enumerate() {
        let x = tape.constant((*block).clone());
        hz.push(encode_project(model, tape, x, m)?);
    }
    let h = [hz[0].0, hz[1].0, hz[2].0];
    let z = [hz[0].1, hz[1].1, hz[2].1];
    let mut fused = Vec::with_capacity(3);
    for &(i, j) in &PAIRS {
        fused.push(fuse(
            model,
            tape,
            h[i],
            h[j],
            (i, j),
            bundle.mask_ratio,
            training,
            rng,
        )?);
    }
    Ok(EmbeddingSet {
        h,
        z,
        fused: [fused[0], fused[1], fused[2]],
    })
}

/// Evaluation-mode embeddings of a whole dataset, computed in chunks.
pub fn embed_dataset(
    bundle: &ModelBundle,
    blocks: [&Tensor; 3],
    chunk: usize,
) -> Result<EmbeddingValues> {
    let n = blocks[0].rows();
    let mut z: [Vec<f64>; 3] = Default::default();
    let mut fused: [Vec<f64>; 3] = Default::default();
    let mut rng = substream(0, rng::MASK);
    let chunk = chunk.max(1);
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let rows = blocks.map(|b| b.select_rows(&idx));
        let mut tape = Tape::new();
        let model = bundle.bind(&mut tape, false);
        let e = forward_all(
            bundle,
            &model,
            &mut tape,
            [&rows[0], &rows[1], &rows[2]],
            false,
            &mut rng,
        )?;
        for m in 0..3 {
            z[m].extend_from_slice(tape.value(e.z[m]).data());
            fused[m].extend_from_slice(tape.value(e.fused[m]).data());
        }
    }
    let d = bundle.embed_dim();
    let mk = |v: Vec<f64>| Tensor::from_vec(n, d, v);
    Ok(EmbeddingValues {
        z: {
            let [a, b, c] = z;
            [mk(a)?, mk(b)?, mk(c)?]
        },
        fused: {
            let [a, b, c] = fused;
            [mk(a)?, mk(b)?, mk(c)?]
        },
    })
}

const CHECKPOINT_FORMAT: &str = "confu-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config_hash: String,
    model: ModelConfig,
    lambda: f64,
    mask_ratio: f64,
    objective: ObjectiveKind,
    max_scale: f64,
    checksum: String,
    params: Vec<ParamRecord>,
}

/// Writes the bundle as a versioned JSON container of named arrays.
pub fn save_checkpoint(path: &Path, bundle: &ModelBundle, config_hash: &str) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.into(),
        model: bundle.config.clone(),
        lambda: bundle.lambda,
        mask_ratio: bundle.mask_ratio,
        objective: bundle.objective,
        max_scale: bundle.critic.max_scale,
        checksum: bundle.checksum(),
        params: bundle
            .named_params()
            .into_iter()
            .map(|(name, t)| ParamRecord {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    write_atomic(path, serde_json::to_string(&file)?.as_bytes())
}

/// Loads a checkpoint, returning the bundle and its recorded config hash.
pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::ArtifactMismatch(format!(
            "{} is not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file",
            path.display()
        )));
    }
    let mut bundle = init_model(&file.model, 0)?;
    bundle.lambda = file.lambda;
    bundle.mask_ratio = file.mask_ratio;
    bundle.objective = file.objective;
    bundle.critic.max_scale = file.max_scale;
    let names: Vec<String> = bundle.named_params().into_iter().map(|(n, _)| n).collect();
    if names.len() != file.params.len() {
        return Err(Error::ArtifactMismatch(format!(
            "expected {} parameters, found {}",
            names.len(),
            file.params.len()
        )));
    }
    for ((slot, name), rec) in bundle.params_mut().into_iter().zip(&names).zip(file.params) {
        if &rec.name != name || rec.shape != slot.shape() {
            return Err(Error::ArtifactMismatch(format!(
                "parameter {} {:?} does not match {name} {:?}",
                rec.name,
                rec.shape,
                slot.shape()
            )));
        }
        *slot = Tensor::from_vec(rec.shape[0], rec.shape[1], rec.data)?;
    }
    if bundle.checksum() != file.checksum {
        return Err(Error::ArtifactMismatch(
            "checkpoint checksum mismatch".into(),
        ));
    }
    Ok((bundle, file.config_hash))
}
