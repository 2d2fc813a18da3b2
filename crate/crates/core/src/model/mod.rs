//! The recovery network.
//!
//! Pipeline for one instance:
//!
//! 1. aggregate the history days slot-wise and embed both the aggregate and
//!    the current day;
//! 2. self-attention stack over the history (`history_stack`);
//! 3. self-attention stack over the current day (`current_stack`);
//! 4. cross-attention with current queries and history keys/values
//!    (`inter_block`), residual on the current side;
//! 5. cross-attention with the raw current embedding as queries and the
//!    fused sequence as keys/values (`gen_block`);
//! 6. softmax over `<e_hat_t, e_l>` for every real location `l`, using the
//!    same embedding table as the input side.
//!
//! A removed stage (empty stack or `None` block) passes its query sequence
//! through unchanged.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::attn::{check_chain, softmax_rows, AttentionBlock, AttentionWeights, BlockCache};
use crate::data::{MaskedInstance, Trajectory};
use crate::embed::{embed_backward, embed_trajectory, EmbeddingTable, TimeEncoder};
use crate::error::{Error, Result};
use crate::grid::{LocationId, Slot};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// |L|; filled in from the grid when loading experiment configs.
    pub n_locations: usize,
    pub t_slots: usize,
    pub d: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_locations: 0,
            t_slots: 48,
            d: 128,
            n_heads: 8,
            head_dim: 16,
            n_layers: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_locations == 0 || self.t_slots == 0 {
            return Err(Error::InvalidConfig("model needs at least one location and one slot".into()));
        }
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("d must be positive and even, got {}", self.d)));
        }
        if self.n_heads == 0 || self.head_dim == 0 {
            return Err(Error::InvalidConfig("n_heads and head_dim must be positive".into()));
        }
        // scores are inner products between e_hat (d'H) and e_l (d)
        if self.n_heads * self.head_dim != self.d {
            return Err(Error::InvalidConfig(format!(
                "n_heads * head_dim must equal d ({} * {} != {})",
                self.n_heads, self.head_dim, self.d
            )));
        }
        Ok(())
    }
}

/// One of the four attention stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    HistoricalIntra,
    CurrentIntra,
    Inter,
    Generation,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::HistoricalIntra, Stage::CurrentIntra, Stage::Inter, Stage::Generation];

    pub fn name(self) -> &'static str {
        match self {
            Stage::HistoricalIntra => "historical_intra",
            Stage::CurrentIntra => "current_intra",
            Stage::Inter => "inter",
            Stage::Generation => "generation",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::UnknownStage(s.to_string()))
    }
}

/// All trainable parameters. Also used to hold gradients and optimizer
/// moments, which share the shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    time: TimeEncoder,
    pub embedding: EmbeddingTable,
    pub history_stack: Vec<AttentionBlock>,
    pub current_stack: Vec<AttentionBlock>,
    pub inter_block: Option<AttentionBlock>,
    pub gen_block: Option<AttentionBlock>,
}

impl ModelParams {
    /// Randomly initialised parameters with every stage present.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, h, dh) = (config.d, config.n_heads, config.head_dim);
        let embedding = EmbeddingTable::random(config.n_locations, d, rng);
        let layers = |rng: &mut _| -> Result<Vec<AttentionBlock>> {
            (0..config.n_layers).map(|_| AttentionBlock::random(h, dh, d, d, rng)).collect()
        };
        let history_stack = layers(rng)?;
        let current_stack = layers(rng)?;
        let inter_block = Some(AttentionBlock::random(h, dh, d, d, rng)?);
        let gen_block = Some(AttentionBlock::random(h, dh, d, d, rng)?);
        Ok(ModelParams {
            time: TimeEncoder::new(config.t_slots, d)?,
            config,
            embedding,
            history_stack,
            current_stack,
            inter_block,
            gen_block,
        })
    }

    /// All-zero parameters with every stage present.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, h, dh) = (config.d, config.n_heads, config.head_dim);
        let block = AttentionBlock::zeros(h, dh, d, d)?;
        Ok(ModelParams {
            time: TimeEncoder::new(config.t_slots, d)?,
            config,
            embedding: EmbeddingTable::zeros(config.n_locations, d),
            history_stack: vec![block.clone(); config.n_layers],
            current_stack: vec![block.clone(); config.n_layers],
            inter_block: Some(block.clone()),
            gen_block: Some(block),
        })
    }

    /// Assembles parameters from parts, validating every shape.
    pub fn from_parts(
        config: ModelConfig,
        embedding: EmbeddingTable,
        history_stack: Vec<AttentionBlock>,
        current_stack: Vec<AttentionBlock>,
        inter_block: Option<AttentionBlock>,
        gen_block: Option<AttentionBlock>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        if embedding.n_locations() != config.n_locations || embedding.dim() != d {
            return Err(Error::DimensionMismatch {
                context: "embedding table",
                expected: (config.n_locations + 1) * d,
                actual: embedding.table.len(),
            });
        }
        check_chain(&history_stack, d)?;
        check_chain(&current_stack, d)?;
        let out_of = |stack: &[AttentionBlock]| stack.last().map_or(d, |b| b.out_dim());
        if let Some(b) = &inter_block {
            let (q, kv) = (out_of(&current_stack), out_of(&history_stack));
            if b.query_dim() != q || b.kv_dim() != kv {
                return Err(Error::DimensionMismatch {
                    context: "inter-trajectory block",
                    expected: q,
                    actual: b.query_dim(),
                });
            }
        }
        let fused = inter_block.as_ref().map_or(out_of(&current_stack), |b| b.out_dim());
        let final_dim = match &gen_block {
            Some(b) => {
                if b.query_dim() != d || b.kv_dim() != fused {
                    return Err(Error::DimensionMismatch {
                        context: "generation block",
                        expected: fused,
                        actual: b.kv_dim(),
                    });
                }
                b.out_dim()
            }
            None => d,
        };
        if final_dim != d {
            return Err(Error::DimensionMismatch {
                context: "final representation",
                expected: d,
                actual: final_dim,
            });
        }
        Ok(ModelParams {
            time: TimeEncoder::new(config.t_slots, d)?,
            config,
            embedding,
            history_stack,
            current_stack,
            inter_block,
            gen_block,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn time_encoder(&self) -> &TimeEncoder {
        &self.time
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        match stage {
            Stage::HistoricalIntra => !self.history_stack.is_empty(),
            Stage::CurrentIntra => !self.current_stack.is_empty(),
            Stage::Inter => self.inter_block.is_some(),
            Stage::Generation => self.gen_block.is_some(),
        }
    }

    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config,
            time: self.time.clone(),
            embedding: EmbeddingTable {
                table: Array2::zeros(self.embedding.table.raw_dim()),
            },
            history_stack: self.history_stack.iter().map(AttentionBlock::zeros_like).collect(),
            current_stack: self.current_stack.iter().map(AttentionBlock::zeros_like).collect(),
            inter_block: self.inter_block.as_ref().map(AttentionBlock::zeros_like),
            gen_block: self.gen_block.as_ref().map(AttentionBlock::zeros_like),
        }
    }

    /// Every trainable matrix with a stable name, in a fixed order.
    pub fn matrices(&self) -> Vec<(String, &Array2<f64>)> {
        fn push_block<'a>(prefix: String, b: &'a AttentionBlock, out: &mut Vec<(String, &'a Array2<f64>)>) {
            for (name, m) in b.matrices() {
                out.push((format!("{prefix}.{name}"), m));
            }
        }
        let mut out = vec![("embedding".to_string(), &self.embedding.table)];
        for (i, b) in self.history_stack.iter().enumerate() {
            push_block(format!("history.{i}"), b, &mut out);
        }
        for (i, b) in self.current_stack.iter().enumerate() {
            push_block(format!("current.{i}"), b, &mut out);
        }
        if let Some(b) = &self.inter_block {
            push_block("inter".into(), b, &mut out);
        }
        if let Some(b) = &self.gen_block {
            push_block("generation".into(), b, &mut out);
        }
        out
    }

    /// Mutable access in the same order as [`ModelParams::matrices`].
    pub fn matrices_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.embedding.table];
        for b in self
            .history_stack
            .iter_mut()
            .chain(self.current_stack.iter_mut())
            .chain(self.inter_block.iter_mut())
            .chain(self.gen_block.iter_mut())
        {
            out.extend(b.matrices_mut());
        }
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.matrices().iter().map(|(_, m)| m.len()).sum()
    }

    /// Squared Frobenius norm over every matrix.
    pub fn squared_norm(&self) -> f64 {
        self.matrices().iter().map(|(_, m)| m.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    /// `self += scale * other`, matrix by matrix.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let others: Vec<&Array2<f64>> = other.matrices().into_iter().map(|(_, m)| m).collect();
        for (m, o) in self.matrices_mut().into_iter().zip(others) {
            m.scaled_add(scale, o);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }
}

/// Removes one stage, replacing it by the identity on its query sequence.
pub fn ablate(params: &ModelParams, stage: Stage) -> ModelParams {
    let mut p = params.clone();
    match stage {
        Stage::HistoricalIntra => p.history_stack.clear(),
        Stage::CurrentIntra => p.current_stack.clear(),
        Stage::Inter => p.inter_block = None,
        Stage::Generation => p.gen_block = None,
    }
    p
}

/// Like [`ablate`] with the stage given by name.
pub fn ablate_by_name(params: &ModelParams, stage: &str) -> Result<ModelParams> {
    Ok(ablate(params, stage.parse()?))
}

/// Slot-wise most frequent observed location across the history days. Ties
/// go to the tied location seen on the most recent day; a slot missing on
/// every day stays MISSING.
pub fn aggregate_history(history: &[Trajectory]) -> Result<Vec<Slot>> {
    let first = history.first().ok_or(Error::EmptyHistory)?;
    let t_slots = first.len();
    if let Some(bad) = history.iter().find(|h| h.len() != t_slots) {
        return Err(Error::DimensionMismatch {
            context: "history trajectory length",
            expected: t_slots,
            actual: bad.len(),
        });
    }
    let mut recent_first: Vec<&Trajectory> = history.iter().collect();
    recent_first.sort_by_key(|h| std::cmp::Reverse(h.day_index));

    let mut out = Vec::with_capacity(t_slots);
    let mut counts: BTreeMap<LocationId, usize> = BTreeMap::new();
    for t in 0..t_slots {
        counts.clear();
        for h in &recent_first {
            if let Some(l) = h.slots[t] {
                *counts.entry(l).or_default() += 1;
            }
        }
        let best = counts.values().copied().max().unwrap_or(0);
        let pick = recent_first
            .iter()
            .filter_map(|h| h.slots[t])
            .find(|l| counts[l] == best);
        out.push(pick);
    }
    Ok(out)
}

/// Probabilities and ranking for one masked slot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotRecovery {
    pub slot: usize,
    /// Over the |L| real locations.
    pub probs: Vec<f64>,
    /// Location ids by descending probability, ties by smaller id.
    pub ranking: Vec<LocationId>,
}

impl SlotRecovery {
    fn new(slot: usize, probs: Vec<f64>) -> Self {
        let mut ranking: Vec<LocationId> = (0..probs.len() as u32).map(LocationId).collect();
        ranking.sort_by(|a, b| probs[b.index()].total_cmp(&probs[a.index()]).then(a.cmp(b)));
        SlotRecovery { slot, probs, ranking }
    }

    pub fn top(&self) -> LocationId {
        self.ranking[0]
    }

    /// 1-based rank of `loc`.
    pub fn rank_of(&self, loc: LocationId) -> Option<usize> {
        self.ranking.iter().position(|&l| l == loc).map(|p| p + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedRecovery {
    pub slots: Vec<SlotRecovery>,
}

impl RankedRecovery {
    pub fn predictions(&self) -> BTreeMap<usize, LocationId> {
        self.slots.iter().map(|s| (s.slot, s.top())).collect()
    }
}

/// Attention coefficients of every stage for one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub history: Vec<AttentionWeights>,
    pub current: Vec<AttentionWeights>,
    pub inter: Option<AttentionWeights>,
    pub generation: Option<AttentionWeights>,
}

impl Diagnostics {
    pub fn all(&self) -> impl Iterator<Item = &AttentionWeights> {
        self.history
            .iter()
            .chain(&self.current)
            .chain(&self.inter)
            .chain(&self.generation)
    }
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct ForwardPass {
    aggregated: Vec<Slot>,
    current_slots: Vec<Slot>,
    history_caches: Vec<BlockCache>,
    current_caches: Vec<BlockCache>,
    inter_cache: Option<BlockCache>,
    gen_cache: Option<BlockCache>,
    /// Final representation `e_hat`, `T x d`.
    final_repr: Array2<f64>,
}

impl ForwardPass {
    fn diagnostics(&self) -> Diagnostics {
        Diagnostics {
            history: self.history_caches.iter().map(BlockCache::weights).collect(),
            current: self.current_caches.iter().map(BlockCache::weights).collect(),
            inter: self.inter_cache.as_ref().map(BlockCache::weights),
            generation: self.gen_cache.as_ref().map(BlockCache::weights),
        }
    }

    #[cfg(test)]
    pub(crate) fn final_repr(&self) -> &Array2<f64> {
        &self.final_repr
    }
}

fn run_stack(layers: &[AttentionBlock], input: Array2<f64>) -> Result<(Array2<f64>, Vec<BlockCache>)> {
    let mut x = input;
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, cache) = layer.forward(x.view(), x.view())?;
        caches.push(cache);
        x = y;
    }
    Ok((x, caches))
}

/// Runs stages 1-5 and keeps the caches.
pub(crate) fn forward_pass(params: &ModelParams, current: &[Slot], history: &[Trajectory]) -> Result<ForwardPass> {
    let aggregated = aggregate_history(history)?;
    let e_hist = embed_trajectory(&aggregated, &params.embedding, &params.time)?;
    let e_cur = embed_trajectory(current, &params.embedding, &params.time)?;

    let (p_bar, history_caches) = run_stack(&params.history_stack, e_hist)?;
    let (n_bar, current_caches) = run_stack(&params.current_stack, e_cur.clone())?;

    let (fused, inter_cache) = match &params.inter_block {
        Some(b) => {
            let (y, c) = b.forward(n_bar.view(), p_bar.view())?;
            (y, Some(c))
        }
        None => (n_bar, None),
    };
    let (final_repr, gen_cache) = match &params.gen_block {
        Some(b) => {
            let (y, c) = b.forward(e_cur.view(), fused.view())?;
            (y, Some(c))
        }
        None => (e_cur, None),
    };
    Ok(ForwardPass {
        aggregated,
        current_slots: current.to_vec(),
        history_caches,
        current_caches,
        inter_cache,
        gen_cache,
        final_repr,
    })
}

/// Location logits `<e_hat_t, e_l>` for the given slots, one row per slot.
pub(crate) fn slot_logits(params: &ModelParams, final_repr: &Array2<f64>, slots: &[usize]) -> Array2<f64> {
    let rows = final_repr.select(Axis(0), slots);
    let locations = params.embedding.table.slice(ndarray::s![..params.config.n_locations, ..]);
    rows.dot(&locations.t())
}

fn check_instance(params: &ModelParams, inst: &MaskedInstance) -> Result<()> {
    let t = params.config.t_slots;
    if inst.current.len() != t {
        return Err(Error::DimensionMismatch {
            context: "current trajectory length",
            expected: t,
            actual: inst.current.len(),
        });
    }
    if let Some(&(s, _)) = inst.masked.iter().find(|&&(s, _)| s >= t) {
        return Err(Error::DimensionMismatch {
            context: "masked slot index",
            expected: t,
            actual: s,
        });
    }
    Ok(())
}

/// Probabilities for every masked slot plus the attention coefficients of
/// every stage.
pub fn forward(inst: &MaskedInstance, params: &ModelParams) -> Result<(RankedRecovery, Diagnostics)> {
    check_instance(params, inst)?;
    let pass = forward_pass(params, &inst.current.slots, &inst.history)?;
    let slots: Vec<usize> = inst.masked_slots().collect();
    let mut probs = slot_logits(params, &pass.final_repr, &slots);
    softmax_rows(&mut probs);
    let recovery = RankedRecovery {
        slots: slots
            .iter()
            .zip(probs.rows())
            .map(|(&s, p)| SlotRecovery::new(s, p.to_vec()))
            .collect(),
    };
    Ok((recovery, pass.diagnostics()))
}

/// Ranked recovery without diagnostics.
pub fn predict(inst: &MaskedInstance, params: &ModelParams) -> Result<RankedRecovery> {
    forward(inst, params).map(|(r, _)| r)
}

/// Most probable location per masked slot (ties to the smaller id).
pub fn recover(inst: &MaskedInstance, params: &ModelParams) -> Result<BTreeMap<usize, LocationId>> {
    predict(inst, params).map(|r| r.predictions())
}

/// Cross-entropy over one instance's masked slots and its gradient.
#[derive(Debug, Clone)]
pub struct InstanceGradient {
    pub cross_entropy: f64,
    pub n_slots: usize,
    /// Slots whose truth probability fell below [`PROB_FLOOR`].
    pub n_clamped: usize,
    pub grads: ModelParams,
}

/// `-sum_t log P_t(truth_t)` over the masked slots (no regulariser).
pub fn instance_cross_entropy(params: &ModelParams, inst: &MaskedInstance) -> Result<(f64, usize)> {
    check_instance(params, inst)?;
    let pass = forward_pass(params, &inst.current.slots, &inst.history)?;
    let slots: Vec<usize> = inst.masked_slots().collect();
    let mut probs = slot_logits(params, &pass.final_repr, &slots);
    softmax_rows(&mut probs);
    let mut ce = 0.0;
    let mut clamped = 0;
    for (row, &(_, truth)) in probs.rows().into_iter().zip(&inst.masked) {
        let p = row[truth.index()];
        if p < PROB_FLOOR {
            clamped += 1;
        }
        ce -= p.max(PROB_FLOOR).ln();
    }
    Ok((ce, clamped))
}

/// Forward and backward pass for one instance. The regulariser is not
/// included.
pub fn instance_gradient(params: &ModelParams, inst: &MaskedInstance) -> Result<InstanceGradient> {
    check_instance(params, inst)?;
    let pass = forward_pass(params, &inst.current.slots, &inst.history)?;
    let mut grads = params.zeros_like();
    let slots: Vec<usize> = inst.masked_slots().collect();
    let d = params.config.d;
    let n_loc = params.config.n_locations;

    let mut probs = slot_logits(params, &pass.final_repr, &slots);
    softmax_rows(&mut probs);
    let mut ce = 0.0;
    let mut clamped = 0;
    // d(-log p_truth)/d logits = p - onehot(truth); zero where the floor is active
    let mut d_logits = probs;
    for (mut row, &(_, truth)) in d_logits.rows_mut().into_iter().zip(&inst.masked) {
        let p = row[truth.index()];
        ce -= p.max(PROB_FLOOR).ln();
        if p < PROB_FLOOR {
            clamped += 1;
            row.fill(0.0);
        } else {
            row[truth.index()] -= 1.0;
        }
    }

    let rows = pass.final_repr.select(Axis(0), &slots);
    let locations = params.embedding.table.slice(ndarray::s![..n_loc, ..]);
    let d_rows = d_logits.dot(&locations);
    {
        let mut g_loc = grads.embedding.table.slice_mut(ndarray::s![..n_loc, ..]);
        g_loc += &d_logits.t().dot(&rows);
    }
    let mut d_final = Array2::zeros((params.config.t_slots, d));
    for (i, &s) in slots.iter().enumerate() {
        let mut r = d_final.row_mut(s);
        r += &d_rows.row(i);
    }

    // generation stage: queries are the raw current embedding
    let (mut d_e_cur, d_fused) = match (&params.gen_block, &pass.gen_cache) {
        (Some(b), Some(c)) => {
            let (dq, dkv) = b.backward(c, &d_final, grads.gen_block.as_mut().expect("same shape"));
            (dq, Some(dkv))
        }
        _ => (d_final, None),
    };

    let d_fused = match d_fused {
        Some(g) => g,
        None => Array2::zeros((params.config.t_slots, d)),
    };
    let (d_n_bar, d_p_bar) = match (&params.inter_block, &pass.inter_cache) {
        (Some(b), Some(c)) => {
            let (dq, dkv) = b.backward(c, &d_fused, grads.inter_block.as_mut().expect("same shape"));
            (dq, Some(dkv))
        }
        _ => (d_fused, None),
    };

    d_e_cur += &stack_backward(&params.current_stack, &pass.current_caches, d_n_bar, &mut grads.current_stack);
    embed_backward(&pass.current_slots, &d_e_cur, &params.embedding, &mut grads.embedding.table);

    if let Some(d_p_bar) = d_p_bar {
        let d_e_hist = stack_backward(&params.history_stack, &pass.history_caches, d_p_bar, &mut grads.history_stack);
        embed_backward(&pass.aggregated, &d_e_hist, &params.embedding, &mut grads.embedding.table);
    }

    Ok(InstanceGradient {
        cross_entropy: ce,
        n_slots: slots.len(),
        n_clamped: clamped,
        grads,
    })
}

fn stack_backward(layers: &[AttentionBlock], caches: &[BlockCache], d_out: Array2<f64>, grads: &mut [AttentionBlock]) -> Array2<f64> {
    let mut d = d_out;
    for ((layer, cache), g) in layers.iter().zip(caches).zip(grads.iter_mut()).rev() {
        let (dq, dkv) = layer.backward(cache, &d, g);
        d = dq + dkv;
    }
    d
}
