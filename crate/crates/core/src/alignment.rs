//! Neighbor graph construction and the contrastive losses: the
//! augmentation loss, the mutual-neighbor in-domain and cross-domain
//! losses, and the two progressive stage compositions.
//!
//! All losses return analytic gradients w.r.t. the query embeddings; key
//! features (momentum/bank entries) are constants.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::encoder::FeatureBank;
use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::types::RecordId;

/// Ordered top-k neighbors of one query: `(key index, cosine score)`,
/// scores non-increasing, ties broken by ascending key index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub neighbors: Vec<(usize, f64)>,
}

impl NeighborList {
    pub fn contains(&self, key: usize) -> bool {
        self.neighbors.iter().any(|(j, _)| *j == key)
    }
}

/// Top-k cosine neighbors of every query row among the key rows. Both
/// tables must hold unit-norm rows, so dot products are cosines. With
/// `exclude_self`, key index `i` is skipped for query `i` (the tables are
/// taken to be the same, index-aligned set).
pub fn cosine_topk(
    queries: &ArrayView2<f64>,
    keys: &ArrayView2<f64>,
    k: usize,
    exclude_self: bool,
) -> Result<Vec<NeighborList>> {
    if k < 1 {
        return Err(Error::validation("k must be ≥ 1"));
    }
    if queries.ncols() != keys.ncols() {
        return Err(Error::validation(format!(
            "query dimension {} does not match key dimension {}",
            queries.ncols(),
            keys.ncols()
        )));
    }
    let mut out = Vec::with_capacity(queries.nrows());
    for (qi, q) in queries.rows().into_iter().enumerate() {
        let mut scored: Vec<(usize, f64)> = keys
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(ki, _)| !(exclude_self && *ki == qi))
            .map(|(ki, key)| (ki, q.dot(&key)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("cosine scores are finite")
                .then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(k);
        out.push(NeighborList { neighbors: scored });
    }
    Ok(out)
}

/// Whether a mutual adjacency relates one domain to itself or two
/// different domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyMode {
    InDomain,
    CrossDomain,
}

/// Sparse set of mutually-top-k pairs. In-domain adjacencies are square
/// and symmetric by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MutualAdjacency {
    rows: usize,
    cols: usize,
    mode: AdjacencyMode,
    pairs: BTreeSet<(usize, usize)>,
}

impl MutualAdjacency {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mode(&self) -> AdjacencyMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.pairs.contains(&(i, j))
    }

    /// Column indices paired with row `i`, ascending.
    pub fn row(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.pairs.range((i, 0)..(i + 1, 0)).map(|(_, j)| *j)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    /// Sorted coordinate-list text: one `i j` pair per line.
    pub fn to_coo_string(&self) -> String {
        let mut out = String::new();
        for (i, j) in &self.pairs {
            out.push_str(&format!("{i} {j}\n"));
        }
        out
    }

    /// Parse the coordinate-list text form.
    pub fn from_coo_string(rows: usize, cols: usize, mode: AdjacencyMode, text: &str) -> Result<Self> {
        let mut pairs = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<usize> {
                tok.and_then(|t| t.parse().ok()).ok_or_else(|| {
                    Error::validation(format!("line {}: expected `i j`", lineno + 1))
                })
            };
            let i = parse(it.next())?;
            let j = parse(it.next())?;
            if i >= rows || j >= cols {
                return Err(Error::range(format!("pair ({i},{j}) outside {rows}x{cols}")));
            }
            pairs.insert((i, j));
        }
        if mode == AdjacencyMode::InDomain && rows != cols {
            return Err(Error::validation("in-domain adjacency must be square"));
        }
        Ok(MutualAdjacency { rows, cols, mode, pairs })
    }
}

/// Keep `(i, j)` iff `j` is in `forward(i)` and `i` is in `backward(j)`.
/// `forward` maps rows to columns, `backward` maps columns to rows.
pub fn mutual_adjacency(
    forward: &[NeighborList],
    backward: &[NeighborList],
    mode: AdjacencyMode,
) -> Result<MutualAdjacency> {
    let rows = forward.len();
    let cols = backward.len();
    if mode == AdjacencyMode::InDomain && rows != cols {
        return Err(Error::validation("in-domain adjacency must be square"));
    }
    for (i, nl) in forward.iter().enumerate() {
        if let Some((j, _)) = nl.neighbors.iter().find(|(j, _)| *j >= cols) {
            return Err(Error::range(format!(
                "forward list {i} references key {j} outside 0..{cols}"
            )));
        }
    }
    for (j, nl) in backward.iter().enumerate() {
        if let Some((i, _)) = nl.neighbors.iter().find(|(i, _)| *i >= rows) {
            return Err(Error::range(format!(
                "backward list {j} references key {i} outside 0..{rows}"
            )));
        }
    }
    let backward_sets: Vec<BTreeSet<usize>> = backward
        .iter()
        .map(|nl| nl.neighbors.iter().map(|(i, _)| *i).collect())
        .collect();
    let mut pairs = BTreeSet::new();
    for (i, nl) in forward.iter().enumerate() {
        for (j, _) in &nl.neighbors {
            if backward_sets[*j].contains(&i) {
                pairs.insert((i, *j));
            }
        }
    }
    Ok(MutualAdjacency { rows, cols, mode, pairs })
}

/// A loss value with its gradient w.r.t. the query embeddings and the
/// number of positive pairs that actually contributed.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub value: f64,
    /// One row per query embedding.
    pub grad: Array2<f64>,
    pub active_positives: usize,
}

/// Instance-level InfoNCE between a batch and its augmented views:
/// mean over rows of `-log( exp(z_i . zhat_i / tau) / sum_a exp(z_i . zhat_a / tau) )`,
/// denominator over the batch index set. Gradients flow to `z` only.
pub fn loss_aug(z: &ArrayView2<f64>, z_hat: &ArrayView2<f64>, tau: f64) -> Result<LossTerm> {
    if tau <= 0.0 {
        return Err(Error::validation("tau must be > 0"));
    }
    let n = z.nrows();
    if n == 0 || z_hat.nrows() != n || z_hat.ncols() != z.ncols() {
        return Err(Error::validation(
            "batch and augmented batch must be non-empty with matching shapes",
        ));
    }
    let mut value = 0.0;
    let mut grad = Array2::zeros((n, z.ncols()));
    for i in 0..n {
        let zi = z.row(i);
        let logits: Vec<f64> = (0..n).map(|a| zi.dot(&z_hat.row(a)) / tau).collect();
        let lse = log_sum_exp(&logits);
        value += (lse - logits[i]) / n as f64;
        // softmax over keys
        let mut soft = Array1::zeros(z.ncols());
        for a in 0..n {
            let p = (logits[a] - lse).exp();
            soft.scaled_add(p, &z_hat.row(a));
        }
        let g = (&soft - &z_hat.row(i)) / (n as f64 * tau);
        grad.row_mut(i).assign(&g);
    }
    Ok(LossTerm { value, grad, active_positives: n })
}

/// Core of both neighbor losses: for each query row, positives are the
/// listed key slots, the partition function runs over every key. Rows
/// with no positives contribute `0 / (0 + eps_div)`.
fn masked_bank_infonce(
    z: &ArrayView2<f64>,
    positive_slots: &[Vec<usize>],
    keys: &ArrayView2<f64>,
    tau: f64,
    eps_div: f64,
) -> Result<LossTerm> {
    if tau <= 0.0 {
        return Err(Error::validation("tau must be > 0"));
    }
    if keys.nrows() == 0 {
        return Err(Error::validation("feature bank must be non-empty"));
    }
    if z.ncols() != keys.ncols() {
        return Err(Error::validation(format!(
            "embedding dimension {} does not match bank dimension {}",
            z.ncols(),
            keys.ncols()
        )));
    }
    let n = z.nrows();
    if positive_slots.len() != n {
        return Err(Error::validation("one positive list required per batch row"));
    }
    let q = keys.nrows();
    let mut value = 0.0;
    let mut grad = Array2::zeros((n, z.ncols()));
    let mut active = 0usize;
    for i in 0..n {
        let zi = z.row(i);
        let logits: Vec<f64> = (0..q).map(|s| zi.dot(&keys.row(s)) / tau).collect();
        let lse = log_sum_exp(&logits);
        let slots = &positive_slots[i];
        for &s in slots {
            if s >= q {
                return Err(Error::range(format!("positive slot {s} outside bank of {q}")));
            }
        }
        let count = slots.len() as f64;
        active += slots.len();
        let pair_sum: f64 = slots.iter().map(|&s| logits[s] - lse).sum();
        value -= pair_sum / (count + eps_div) / n as f64;
        if slots.is_empty() {
            continue;
        }
        // grad_i = -1/(n (count+eps)) * ( sum_pos keys_s - count * sum_q p_q keys_q ) / tau
        let mut pos_sum = Array1::zeros(z.ncols());
        for &s in slots {
            pos_sum += &keys.row(s);
        }
        let mut soft = Array1::zeros(z.ncols());
        for s in 0..q {
            let p = (logits[s] - lse).exp();
            soft.scaled_add(p, &keys.row(s));
        }
        let g = (&(&soft * count) - &pos_sum) / (n as f64 * (count + eps_div) * tau);
        grad.row_mut(i).assign(&g);
    }
    Ok(LossTerm { value, grad, active_positives: active })
}

/// Resolve each batch row's mutual neighbors to bank slots. A neighbor
/// contributes only while resident in the bank (latest copy wins), so
/// both the pair sum and the pair count range over resolvable positives.
fn resolve_positive_slots(
    batch_record_ids: &[RecordId],
    bank: &FeatureBank,
    adjacency: &MutualAdjacency,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(batch_record_ids.len());
    for &rec in batch_record_ids {
        if rec >= adjacency.rows() {
            return Err(Error::range(format!(
                "batch record {rec} outside adjacency rows {}",
                adjacency.rows()
            )));
        }
        let slots: Vec<usize> =
            adjacency.row(rec).filter_map(|j| bank.latest_slot_of(j)).collect();
        out.push(slots);
    }
    Ok(out)
}

/// In-domain mutual-neighbor InfoNCE against the domain's own bank.
/// `adjacency` is the dataset-level in-domain graph; `batch_record_ids`
/// selects its rows for this batch.
pub fn loss_in_domain(
    z: &ArrayView2<f64>,
    batch_record_ids: &[RecordId],
    bank: &FeatureBank,
    adjacency: &MutualAdjacency,
    tau: f64,
    eps_div: f64,
) -> Result<LossTerm> {
    if z.nrows() != batch_record_ids.len() {
        return Err(Error::validation("one record id required per batch row"));
    }
    if bank.is_empty() {
        return Err(Error::validation("feature bank must be non-empty"));
    }
    let keys = bank.features_matrix(z.ncols());
    let slots = resolve_positive_slots(batch_record_ids, bank, adjacency)?;
    masked_bank_infonce(z, &slots, &keys.view(), tau, eps_div)
}

/// Cross-domain mutual-neighbor InfoNCE: source-domain queries against
/// the destination domain's bank, positives taken from the cross-domain
/// adjacency (rows = source records, cols = destination records).
pub fn loss_cross_domain(
    z_src: &ArrayView2<f64>,
    batch_record_ids: &[RecordId],
    bank_dst: &FeatureBank,
    adjacency: &MutualAdjacency,
    tau: f64,
    eps_div: f64,
) -> Result<LossTerm> {
    if z_src.nrows() != batch_record_ids.len() {
        return Err(Error::validation("one record id required per batch row"));
    }
    if bank_dst.is_empty() {
        return Err(Error::validation("feature bank must be non-empty"));
    }
    let keys = bank_dst.features_matrix(z_src.ncols());
    let slots = resolve_positive_slots(batch_record_ids, bank_dst, adjacency)?;
    masked_bank_infonce(z_src, &slots, &keys.view(), tau, eps_div)
}

/// First-stage composition: `l_aug + beta * (l_in_a + l_in_b)`.
pub fn compose_pa1(l_aug: f64, l_in_a: f64, l_in_b: f64, beta: f64) -> f64 {
    l_aug + beta * (l_in_a + l_in_b)
}

/// Second-stage composition:
/// `(l_in_a + l_in_b) + lambda * (l_cross_ab + l_cross_ba)`.
pub fn compose_pa2(l_in_a: f64, l_in_b: f64, l_cross_ab: f64, l_cross_ba: f64, lambda: f64) -> f64 {
    (l_in_a + l_in_b) + lambda * (l_cross_ab + l_cross_ba)
}

/// All loss parts of one training step plus the composed total and the
/// number of active positive pairs per term.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_od: f64,
    pub l_aug: f64,
    pub l_in_a: f64,
    pub l_in_b: f64,
    pub l_cross_ab: f64,
    pub l_cross_ba: f64,
    pub total: f64,
    pub pairs_aug: usize,
    pub pairs_in_a: usize,
    pub pairs_in_b: usize,
    pub pairs_cross_ab: usize,
    pub pairs_cross_ba: usize,
}
