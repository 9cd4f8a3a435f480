//! Contrastive objectives over an [`EmbeddingSet`].
//!
//! ConFu combines three pairwise InfoNCE terms with three fused terms that
//! align each modality against the fused embedding of the other two:
//!
//! ```text
//! total = (1 − λ)·(L(1,2) + L(1,3) + L(2,3)) + λ·(L(3,12) + L(2,13) + L(1,23))
//! ```
//!
//! TriCLIP is the `λ = 0` special case. The Symile, Gram and Triangle
//! baselines score a whole triplet at once and contrast it against in-batch
//! substitutions of one modality at a time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::EmbeddingSet;
use crate::tensor::{Tape, Tensor, Var};

/// Inverse temperature initialised to `1 / 0.07`.
pub const DEFAULT_LOG_SCALE: f64 = 2.659_260_036_932_778;
pub const DEFAULT_MAX_SCALE: f64 = 100.0;

/// Temperature-scaled dot-product critic. One learnable log-scale is shared
/// by every term of an objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    /// `[1, 1]`
    pub log_scale: Tensor,
    pub max_scale: f64,
}

impl Default for Critic {
    fn default() -> Self {
        Self {
            log_scale: Tensor::scalar(DEFAULT_LOG_SCALE),
            max_scale: DEFAULT_MAX_SCALE,
        }
    }
}

impl Critic {
    /// Effective scale `min(exp(log_scale), max_scale)`.
    pub fn scale(&self) -> f64 {
        self.log_scale.item().exp().min(self.max_scale)
    }

    /// Records the effective scale on `tape` from the bound log-scale leaf.
    pub fn scale_var(&self, tape: &mut Tape, log_scale: Var) -> Var {
        let e = tape.exp(log_scale);
        tape.clamp_max(e, self.max_scale)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Average of anchor→candidate and candidate→anchor.
    #[default]
    Symmetric,
    /// Anchor→candidate only.
    OneWay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Confu,
    #[serde(rename = "triclip")]
    TriClip,
    Symile,
    Gram,
    Triangle,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::Confu,
        ObjectiveKind::TriClip,
        ObjectiveKind::Symile,
        ObjectiveKind::Gram,
        ObjectiveKind::Triangle,
    ];

    /// Effective λ of the ConFu family; TriCLIP is ConFu with λ = 0.
    pub fn confu_lambda(&self, lambda: f64) -> Option<f64> {
        match self {
            ObjectiveKind::Confu => Some(lambda),
            ObjectiveKind::TriClip => Some(0.0),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Confu => "confu",
            ObjectiveKind::TriClip => "triclip",
            ObjectiveKind::Symile => "symile",
            ObjectiveKind::Gram => "gram",
            ObjectiveKind::Triangle => "triangle",
        }
    }

    /// Whether unimodal embeddings are row-normalized for this objective.
    /// Symile's multilinear score is computed on raw projector outputs.
    pub fn normalizes_embeddings(&self) -> bool {
        !matches!(self, ObjectiveKind::Symile)
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("objective", format!("unknown objective {s:?}")))
    }
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::config("lambda", format!("{lambda} outside [0, 1]")))
    }
}

/// InfoNCE with scores `S[m, n] = scale·⟨a_m, c_n⟩`.
pub fn infonce(
    tape: &mut Tape,
    anchors: Var,
    candidates: Var,
    scale: Var,
    direction: Direction,
) -> Result<Var> {
    let (sa, sc) = (
        tape.shape(anchors).to_vec(),
        tape.shape(candidates).to_vec(),
    );
    if sa != sc {
        return Err(Error::contract(format!(
            "infonce needs equally shaped blocks, got {sa:?} and {sc:?}"
        )));
    }
    let dots = tape.matmul_t(anchors, candidates)?;
    let logits = tape.mul(dots, scale)?;
    let both = direction == Direction::Symmetric;
    Ok(tape.diag_cross_entropy(logits, true, both)?)
}

/// Handles of the six ConFu terms.
#[derive(Clone, Copy, Debug)]
pub struct ConfuTerms {
    /// `L(1,2), L(1,3), L(2,3)`
    pub pair: [Var; 3],
    /// `L(3,12), L(2,13), L(1,23)`
    pub fused: [Var; 3],
}

pub fn pair_loss(
    tape: &mut Tape,
    e: &EmbeddingSet,
    scale: Var,
    dir: Direction,
) -> Result<[Var; 3]> {
    let a = infonce(tape, e.z[0], e.z[1], scale, dir)?;
    let b = infonce(tape, e.z[0], e.z[2], scale, dir)?;
    let c = infonce(tape, e.z[1], e.z[2], scale, dir)?;
    Ok([a, b, c])
}

pub fn fused_loss(
    tape: &mut Tape,
    e: &EmbeddingSet,
    scale: Var,
    dir: Direction,
) -> Result<[Var; 3]> {
    let a = infonce(tape, e.z[2], e.fused[0], scale, dir)?;
    let b = infonce(tape, e.z[1], e.fused[1], scale, dir)?;
    let c = infonce(tape, e.z[0], e.fused[2], scale, dir)?;
    Ok([a, b, c])
}

fn sum3(tape: &mut Tape, v: [Var; 3]) -> Result<Var> {
    let s = tape.add(v[0], v[1])?;
    Ok(tape.add(s, v[2])?)
}

/// `(1 − λ)·L_pair + λ·L_fused` on the tape.
pub fn confu_loss(
    tape: &mut Tape,
    e: &EmbeddingSet,
    scale: Var,
    lambda: f64,
    dir: Direction,
) -> Result<(Var, ConfuTerms)> {
    check_lambda(lambda)?;
    let pair = pair_loss(tape, e, scale, dir)?;
    let fused = fused_loss(tape, e, scale, dir)?;
    let lp = sum3(tape, pair)?;
    let lf = sum3(tape, fused)?;
    let a = tape.scale(lp, 1.0 - lambda);
    let b = tape.scale(lf, lambda);
    let total = tape.add(a, b)?;
    Ok((total, ConfuTerms { pair, fused }))
}

/// Scalar values of every ConFu term for one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pair_12: f64,
    pub pair_13: f64,
    pub pair_23: f64,
    pub fused_3_12: f64,
    pub fused_2_13: f64,
    pub fused_1_23: f64,
    pub l_pair: f64,
    pub l_fused: f64,
    pub total: f64,
    /// `None` when the batch has fewer than two rows.
    pub tc_lower_bound_nats: Option<f64>,
}

impl LossBreakdown {
    /// Assembles a breakdown from the six term values with the same
    /// arithmetic the tape uses.
    pub fn new(pair: [f64; 3], fused: [f64; 3], lambda: f64, n: usize) -> Result<Self> {
        check_lambda(lambda)?;
        let l_pair = pair[0] + pair[1] + pair[2];
        let l_fused = fused[0] + fused[1] + fused[2];
        let mut b = Self {
            pair_12: pair[0],
            pair_13: pair[1],
            pair_23: pair[2],
            fused_3_12: fused[0],
            fused_2_13: fused[1],
            fused_1_23: fused[2],
            l_pair,
            l_fused,
            total: (1.0 - lambda) * l_pair + lambda * l_fused,
            tc_lower_bound_nats: None,
        };
        b.tc_lower_bound_nats = tc_lower_bound(&b, n).ok();
        Ok(b)
    }

    pub fn from_terms(tape: &Tape, terms: &ConfuTerms, lambda: f64, n: usize) -> Result<Self> {
        Self::new(
            terms.pair.map(|v| tape.value(v).item()),
            terms.fused.map(|v| tape.value(v).item()),
            lambda,
            n,
        )
    }

    pub fn pair_terms(&self) -> [f64; 3] {
        [self.pair_12, self.pair_13, self.pair_23]
    }

    pub fn fused_terms(&self) -> [f64; 3] {
        [self.fused_3_12, self.fused_2_13, self.fused_1_23]
    }
}

/// Contrastive total-correlation bound:
/// `2·ln N − (1/3)·Σ_perm [L(i,j) + L(k,ij)]`, where the six permutations
/// visit every pair term and every fused term twice.
pub fn tc_lower_bound(b: &LossBreakdown, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::contract(format!(
            "TC bound needs a batch of at least 2, got {n}"
        )));
    }
    let perm_sum = 2.0 * b.l_pair + 2.0 * b.l_fused;
    Ok(2.0 * (n as f64).ln() - perm_sum / 3.0)
}

/// Per-row multilinear similarity `Σ_d a_d·b_d·c_d`.
pub fn symile_similarity(a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.shape() != c.shape() {
        return Err(Error::contract(format!(
            "symile similarity needs equal shapes, got {:?} {:?} {:?}",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    Ok((0..a.rows())
        .map(|r| triple_product(a.row(r), b.row(r), c.row(r)))
        .collect())
}

pub fn triple_product(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(c)
        .fold(0.0, |acc, ((x, y), z)| acc + x * y * z)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

const UNIT_TOL: f64 = 1e-6;

/// Determinant by Gaussian elimination with partial pivoting.
fn det(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut d = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .expect("non-empty");
        if m[piv][col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            m.swap(piv, col);
            d = -d;
        }
        d *= m[col][col];
        let (upper, lower) = m.split_at_mut(col + 1);
        let pivot_row = &upper[col];
        for row in lower {
            let f = row[col] / pivot_row[col];
            for (x, p) in row.iter_mut().zip(pivot_row).skip(col) {
                *x -= f * p;
            }
        }
    }
    d
}

/// Volume `sqrt(det G)` of the parallelotope spanned by `k ≥ 2` unit
/// vectors, with `G[a, b] = ⟨v_a, v_b⟩`.
pub fn gram_volume(vectors: &[&[f64]]) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(Error::contract("gram volume needs at least two vectors"));
    }
    let dim = vectors[0].len();
    for (k, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::contract("gram volume vectors differ in length"));
        }
        let n = dot(v, v).sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::contract(format!(
                "gram volume needs unit vectors; vector {k} has norm {n}"
            )));
        }
    }
    let g: Vec<Vec<f64>> = vectors
        .iter()
        .map(|a| vectors.iter().map(|b| dot(a, b)).collect())
        .collect();
    Ok(det(g).max(0.0).sqrt())
}

/// Area of the triangle with vertices at the three endpoints.
pub fn triangle_area(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let u: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let v: Vec<f64> = c.iter().zip(a).map(|(x, y)| x - y).collect();
    let q = dot(&u, &u) * dot(&v, &v) - dot(&u, &v).powi(2);
    0.5 * q.max(0.0).sqrt()
}

/// Which triplet measure a substitution loss uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletMeasure {
    Symile,
    Gram,
    Triangle,
}

/// `[N, N]` logits for substituting modality `anchor` with every in-batch
/// candidate while the other two modalities stay fixed at row `m`.
/// Larger is better; the positive triplet sits on the diagonal.
pub fn substitution_logits(
    tape: &mut Tape,
    e: &EmbeddingSet,
    anchor: usize,
    measure: TripletMeasure,
    scale: Var,
) -> Result<Var> {
    let (b, c) = match anchor {
        0 => (1, 2),
        1 => (0, 2),
        2 => (0, 1),
        _ => return Err(Error::contract(format!("anchor {anchor} out of range"))),
    };
    let (za, zb, zc) = (e.z[anchor], e.z[b], e.z[c]);
    let raw = match measure {
        TripletMeasure::Symile => {
            let bc = tape.mul(zb, zc)?;
            tape.matmul_t(bc, za)?
        }
        TripletMeasure::Gram => {
            // unit diagonal: det G = 1 + 2·ab·ac·bc − ab² − ac² − bc²
            let ab = tape.matmul_t(zb, za)?;
            let ac = tape.matmul_t(zc, za)?;
            let bc = tape.row_dot(zb, zc)?;
            let t1 = tape.mul(ab, ac)?;
            let t1 = tape.mul(t1, bc)?;
            let t1 = tape.scale(t1, 2.0);
            let ab2 = tape.square(ab)?;
            let ac2 = tape.square(ac)?;
            let bc2 = tape.square(bc)?;
            let d = tape.add_scalar(t1, 1.0);
            let d = tape.sub(d, ab2)?;
            let d = tape.sub(d, ac2)?;
            let d = tape.sub(d, bc2)?;
            let d = tape.clamp_min(d, 0.0);
            let vol = tape.sqrt(d)?;
            tape.neg(vol)
        }
        TripletMeasure::Triangle => {
            // edges from the fixed vertex b: u = a − b, v = c − b
            let ab = tape.matmul_t(zb, za)?;
            let ac = tape.matmul_t(zc, za)?;
            let bc = tape.row_dot(zb, zc)?;
            let uu = tape.scale(ab, -2.0);
            let uu = tape.add_scalar(uu, 2.0);
            let vv = tape.scale(bc, -2.0);
            let vv = tape.add_scalar(vv, 2.0);
            let uv = tape.sub(ac, ab)?;
            let uv = tape.sub(uv, bc)?;
            let uv = tape.add_scalar(uv, 1.0);
            let p = tape.mul(uu, vv)?;
            let uv2 = tape.square(uv)?;
            let q = tape.sub(p, uv2)?;
            let q = tape.clamp_min(q, 0.0);
            let r = tape.sqrt(q)?;
            let area = tape.scale(r, 0.5);
            tape.neg(area)
        }
    };
    Ok(tape.mul(raw, scale)?)
}

/// Mean over the three anchor choices of the substitution InfoNCE.
pub fn triplet_loss(
    tape: &mut Tape,
    e: &EmbeddingSet,
    measure: TripletMeasure,
    scale: Var,
) -> Result<(Var, [Var; 3])> {
    let mut terms = Vec::with_capacity(3);
    for anchor in 0..3 {
        let logits = substitution_logits(tape, e, anchor, measure, scale)?;
        terms.push(tape.diag_cross_entropy(logits, true, false)?);
    }
    let t = [terms[0], terms[1], terms[2]];
    let s = sum3(tape, t)?;
    Ok((tape.scale(s, 1.0 / 3.0), t))
}

pub fn symile_loss(tape: &mut Tape, e: &EmbeddingSet, scale: Var) -> Result<Var> {
    Ok(triplet_loss(tape, e, TripletMeasure::Symile, scale)?.0)
}

pub fn gram_loss(tape: &mut Tape, e: &EmbeddingSet, scale: Var) -> Result<Var> {
    Ok(triplet_loss(tape, e, TripletMeasure::Gram, scale)?.0)
}

pub fn triangle_loss(tape: &mut Tape, e: &EmbeddingSet, scale: Var) -> Result<Var> {
    Ok(triplet_loss(tape, e, TripletMeasure::Triangle, scale)?.0)
}

/// Loss of any objective plus handles to its component terms.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveOutput {
    pub total: Var,
    pub confu: Option<ConfuTerms>,
    /// Per-anchor terms of the triplet baselines.
    pub anchors: Option<[Var; 3]>,
}

/// `lambda` is only read by ConFu.
pub fn objective_loss(
    tape: &mut Tape,
    e: &EmbeddingSet,
    kind: ObjectiveKind,
    lambda: f64,
    scale: Var,
    dir: Direction,
) -> Result<ObjectiveOutput> {
    if let Some(lambda) = kind.confu_lambda(lambda) {
        let (total, terms) = confu_loss(tape, e, scale, lambda, dir)?;
        return Ok(ObjectiveOutput {
            total,
            confu: Some(terms),
            anchors: None,
        });
    }
    let measure = match kind {
        ObjectiveKind::Symile => TripletMeasure::Symile,
        ObjectiveKind::Gram => TripletMeasure::Gram,
        ObjectiveKind::Triangle => TripletMeasure::Triangle,
        ObjectiveKind::Confu | ObjectiveKind::TriClip => unreachable!(),
    };
    let (total, anchors) = triplet_loss(tape, e, measure, scale)?;
    Ok(ObjectiveOutput {
        total,
        confu: None,
        anchors: Some(anchors),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermMode {
    /// Every unordered pair of disjoint non-empty subsets.
    Full,
    /// Ordered pairs whose first subset is a single target modality.
    Retrieval,
}

/// One InfoNCE term between two disjoint modality subsets (1-based).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubsetTerm {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

fn members(mask: u32, m: usize) -> Vec<usize> {
    (0..m)
        .filter(|k| mask & (1 << k) != 0)
        .map(|k| k + 1)
        .collect()
}

/// Enumerates the subset-pair InfoNCE terms for `M` modalities in
/// lexicographic order. In full mode each term lists the smaller subset
/// first (ties broken lexicographically).
pub fn enumerate_subset_terms(m: usize, mode: TermMode) -> Result<Vec<SubsetTerm>> {
    if m < 2 {
        return Err(Error::contract(format!(
            "need at least 2 modalities, got {m}"
        )));
    }
    if m > 16 {
        return Err(Error::contract(format!(
            "{m} modalities is too many to enumerate"
        )));
    }
    let all = 1u32 << m;
    let mut out = Vec::new();
    match mode {
        TermMode::Full => {
            for x in 1..all {
                for y in (x + 1)..all {
                    if x & y != 0 {
                        continue;
                    }
                    let (p, q) = (members(x, m), members(y, m));
                    let (a, b) = if (p.len(), &p) <= (q.len(), &q) {
                        (p, q)
                    } else {
                        (q, p)
                    };
                    out.push(SubsetTerm { a, b });
                }
            }
        }
        TermMode::Retrieval => {
            for t in 0..m {
                let target = 1u32 << t;
                for y in 1..all {
                    if y & target == 0 {
                        out.push(SubsetTerm {
                            a: vec![t + 1],
                            b: members(y, m),
                        });
                    }
                }
            }
        }
    }
    out.sort();
    Ok(out)
}
