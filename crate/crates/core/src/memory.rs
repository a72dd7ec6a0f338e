//! Long/short-term memory banks, consolidation, similarity merging,
//! retrieval and gate fusion.
//!
//! Bank tokens are values. While training, a long-term token produced by
//! consolidation inside the current batch also carries the [`Var`] it was
//! computed as, so the batch loss reaches the consolidation parameters; the
//! short-term tokens themselves are always detached copies of `F_O`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::TOKEN_DIM;
use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{attention, LayerNorm, Linear, TransformerLayer};
use crate::params::{ParamId, Params};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_SHORT_CAPACITY: usize = 6;
pub const DEFAULT_LONG_CAPACITY: usize = 8;
pub const DEFAULT_CONSOLIDATE_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Short,
    Long,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryToken<T> {
    pub vector: Vec<T>,
    /// Earliest source step.
    pub birth_step: u64,
    pub latest_step: u64,
    /// Number of original summaries fused into this entry.
    pub merge_count: u32,
    pub tier: Tier,
    node: Option<Var>,
}

impl<T: Scalar> MemoryToken<T> {
    pub fn short(vector: Vec<T>, step: u64) -> Self {
        Self {
            vector,
            birth_step: step,
            latest_step: step,
            merge_count: 1,
            tier: Tier::Short,
            node: None,
        }
    }

    pub fn long(vector: Vec<T>, birth_step: u64, latest_step: u64, merge_count: u32) -> Self {
        Self {
            vector,
            birth_step,
            latest_step,
            merge_count,
            tier: Tier::Long,
            node: None,
        }
    }

    /// Graph node this token was computed as, if bound to the live graph.
    pub fn node(&self) -> Option<Var> {
        self.node
    }
}

/// How the bank evolves when tokens arrive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankMode {
    /// Short-term queue consolidated into a merged long-term bank.
    Hierarchical,
    /// Single sliding window; the oldest token is evicted.
    Fifo { capacity: usize },
    /// Single bank; overflow merges the most similar adjacent pair.
    SimMerge { capacity: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankConfig {
    pub short_capacity: usize,
    pub long_capacity: usize,
    pub consolidate_count: usize,
    pub mode: BankMode,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            short_capacity: DEFAULT_SHORT_CAPACITY,
            long_capacity: DEFAULT_LONG_CAPACITY,
            consolidate_count: DEFAULT_CONSOLIDATE_COUNT,
            mode: BankMode::Hierarchical,
        }
    }
}

impl BankConfig {
    /// Largest number of tokens retrieval can ever see.
    pub fn max_tokens(&self) -> usize {
        match self.mode {
            BankMode::Hierarchical => self.short_capacity + self.long_capacity,
            BankMode::Fifo { capacity } | BankMode::SimMerge { capacity } => capacity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            BankMode::Hierarchical if self.consolidate_count == 0 => {
                Err(Error::Config("consolidate_count must be at least 1".into()))
            }
            BankMode::Fifo { capacity } | BankMode::SimMerge { capacity } if capacity == 0 => {
                Err(Error::Config("single-bank capacity must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Result of combining tokens: value plus its graph node when tracked.
#[derive(Debug, Clone)]
pub struct Combined<T> {
    pub vector: Vec<T>,
    pub node: Option<Var>,
}

/// The learnable side of bank maintenance.
pub trait TokenOps<T: Scalar> {
    /// Compresses `sources` (oldest first) into one long-term vector.
    fn summarize(&mut self, sources: &[MemoryToken<T>]) -> Result<Combined<T>>;

    /// Merge-count weighted mean of two tokens.
    fn merge(&mut self, a: &MemoryToken<T>, b: &MemoryToken<T>) -> Result<Combined<T>> {
        Ok(Combined {
            vector: weighted_mean(a, b),
            node: None,
        })
    }
}

/// Value-only summariser: mean of the sources. Used when no learned module is
/// available (tests, single-bank modes).
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanSummary;

impl<T: Scalar> TokenOps<T> for MeanSummary {
    fn summarize(&mut self, sources: &[MemoryToken<T>]) -> Result<Combined<T>> {
        let n: T = c(sources.len() as f64);
        let mut v = vec![T::zero(); sources[0].vector.len()];
        for s in sources {
            v.iter_mut().zip(&s.vector).for_each(|(a, &b)| *a = *a + b);
        }
        v.iter_mut().for_each(|a| *a = *a / n);
        Ok(Combined { vector: v, node: None })
    }
}

pub fn weighted_mean<T: Scalar>(a: &MemoryToken<T>, b: &MemoryToken<T>) -> Vec<T> {
    let wa: T = c(a.merge_count as f64);
    let wb: T = c(b.merge_count as f64);
    let total = wa + wb;
    a.vector
        .iter()
        .zip(&b.vector)
        .map(|(&x, &y)| (wa * x + wb * y) / total)
        .collect()
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        T::zero()
    } else {
        dot / (na * nb)
    }
}

/// Index `i` of the adjacent pair `(i, i+1)` with maximal cosine similarity,
/// ties resolved to the smallest `i`.
pub fn most_similar_adjacent<T: Scalar>(tokens: &[MemoryToken<T>]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for i in 0..tokens.len().saturating_sub(1) {
        let s = cosine(&tokens[i].vector, &tokens[i + 1].vector);
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Restorable copy of a bank.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSnapshot<T> {
    pub config: BankConfig,
    pub stmb: Vec<MemoryToken<T>>,
    pub ltmb: Vec<MemoryToken<T>>,
    pub total_appends: u64,
    pub consolidations: u64,
    pub last_step: Option<u64>,
}

/// Short- and long-term banks, both oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    config: BankConfig,
    stmb: Vec<MemoryToken<T>>,
    ltmb: Vec<MemoryToken<T>>,
    total_appends: u64,
    consolidations: u64,
    consolidation_enabled: bool,
    last_step: Option<u64>,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(config: BankConfig) -> Self {
        Self {
            config,
            stmb: Vec::new(),
            ltmb: Vec::new(),
            total_appends: 0,
            consolidations: 0,
            consolidation_enabled: true,
            last_step: None,
        }
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn stmb(&self) -> &[MemoryToken<T>] {
        &self.stmb
    }

    pub fn ltmb(&self) -> &[MemoryToken<T>] {
        &self.ltmb
    }

    pub fn len(&self) -> usize {
        self.stmb.len() + self.ltmb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_appends(&self) -> u64 {
        self.total_appends
    }

    /// Number of consolidations performed since the last clear.
    pub fn consolidations(&self) -> u64 {
        self.consolidations
    }

    /// Test hook: with consolidation disabled an overflowing hierarchical
    /// bank drops its oldest short-term token, i.e. `T_s` becomes a sliding window.
    pub fn set_consolidation_enabled(&mut self, enabled: bool) {
        self.consolidation_enabled = enabled;
    }

    /// Retrieval order: long-term then short-term, each oldest first.
    pub fn tokens(&self) -> impl Iterator<Item = &MemoryToken<T>> {
        self.ltmb.iter().chain(self.stmb.iter())
    }

    pub fn clear(&mut self) {
        self.stmb.clear();
        self.ltmb.clear();
        self.total_appends = 0;
        self.consolidations = 0;
        self.last_step = None;
    }

    /// Forgets every graph binding (the graph they point into is gone).
    pub fn unbind(&mut self) {
        for t in self.stmb.iter_mut().chain(self.ltmb.iter_mut()) {
            t.node = None;
        }
    }

    pub fn snapshot(&self) -> BankSnapshot<T> {
        let strip = |v: &Vec<MemoryToken<T>>| {
            v.iter()
                .map(|t| MemoryToken {
                    node: None,
                    ..t.clone()
                })
                .collect()
        };
        BankSnapshot {
            config: self.config,
            stmb: strip(&self.stmb),
            ltmb: strip(&self.ltmb),
            total_appends: self.total_appends,
            consolidations: self.consolidations,
            last_step: self.last_step,
        }
    }

    pub fn restore(snapshot: BankSnapshot<T>) -> Self {
        Self {
            last_step: snapshot.last_step,
            config: snapshot.config,
            stmb: snapshot.stmb,
            ltmb: snapshot.ltmb,
            total_appends: snapshot.total_appends,
            consolidations: snapshot.consolidations,
            consolidation_enabled: true,
        }
    }

    /// Appends a detached sensory token recorded on `g`; a token that still
    /// carries gradient is rejected.
    pub fn append_from_graph(&mut self, g: &Graph<T>, token: Var, step: u64, ops: &mut dyn TokenOps<T>) -> Result<()> {
        if g.requires_grad(token) {
            return Err(contract("sensory token must be detached before it is stored"));
        }
        self.append_sensory(g.value(token).data().to_vec(), step, ops)
    }

    /// Stores a new sensory token and restores the capacity invariants.
    pub fn append_sensory(&mut self, vector: Vec<T>, step: u64, ops: &mut dyn TokenOps<T>) -> Result<()> {
        if vector.is_empty() {
            return Err(contract("empty memory token"));
        }
        if let Some(t) = self.tokens().next() {
            if t.vector.len() != vector.len() {
                return Err(contract(format!(
                    "memory token width {} != {}",
                    vector.len(),
                    t.vector.len()
                )));
            }
        }
        if let Some(last) = self.last_step {
            if step <= last {
                return Err(contract(format!("memory steps must increase: {step} after {last}")));
            }
        }
        self.last_step = Some(step);
        self.total_appends += 1;
        match self.config.mode {
            BankMode::Fifo { capacity } => {
                self.stmb.push(MemoryToken::short(vector, step));
                if self.stmb.len() > capacity {
                    self.stmb.remove(0);
                }
            }
            BankMode::SimMerge { capacity } => {
                self.ltmb.push(MemoryToken::long(vector, step, step, 1));
                if self.ltmb.len() > capacity {
                    self.merge_pair(ops)?;
                }
            }
            BankMode::Hierarchical => {
                self.stmb.push(MemoryToken::short(vector, step));
                if self.stmb.len() > self.config.short_capacity {
                    if self.consolidation_enabled {
                        self.consolidate(ops)?;
                    } else {
                        self.stmb.remove(0);
                    }
                }
            }
        }
        Ok(())
    }

    /// Compresses the oldest short-term tokens into one long-term token.
    pub fn consolidate(&mut self, ops: &mut dyn TokenOps<T>) -> Result<()> {
        if self.stmb.len() <= self.config.short_capacity {
            return Err(contract(format!(
                "consolidate requires |stmb| > {}, found {}",
                self.config.short_capacity,
                self.stmb.len()
            )));
        }
        let n = self.config.consolidate_count.min(self.stmb.len());
        let sources: Vec<MemoryToken<T>> = self.stmb.drain(..n).collect();
        self.consolidations += 1;
        if self.config.long_capacity == 0 {
            // No long-term storage: the summary has nowhere to go.
            return Ok(());
        }
        let summary = ops.summarize(&sources)?;
        let mut token = MemoryToken::long(summary.vector, sources[0].birth_step, sources[n - 1].latest_step, 1);
        token.node = summary.node;
        self.ltmb.push(token);
        if self.ltmb.len() > self.config.long_capacity {
            self.merge_ltmb(ops)?;
        }
        Ok(())
    }

    /// Merges the most similar adjacent long-term pair.
    pub fn merge_ltmb(&mut self, ops: &mut dyn TokenOps<T>) -> Result<()> {
        let cap = match self.config.mode {
            BankMode::SimMerge { capacity } => capacity,
            _ => self.config.long_capacity,
        };
        if self.ltmb.len() <= cap {
            return Err(contract(format!(
                "merge_ltmb requires |ltmb| > {cap}, found {}",
                self.ltmb.len()
            )));
        }
        self.merge_pair(ops)
    }

    fn merge_pair(&mut self, ops: &mut dyn TokenOps<T>) -> Result<()> {
        let Some(i) = most_similar_adjacent(&self.ltmb) else {
            return Err(contract("merge needs at least two long-term tokens"));
        };
        let merged = ops.merge(&self.ltmb[i], &self.ltmb[i + 1])?;
        let b = self.ltmb.remove(i + 1);
        let a = &mut self.ltmb[i];
        a.vector = merged.vector;
        a.node = merged.node;
        a.birth_step = a.birth_step.min(b.birth_step);
        a.latest_step = a.latest_step.max(b.latest_step);
        a.merge_count += b.merge_count;
        Ok(())
    }

    /// Test-only direct insertion into the long-term bank.
    #[doc(hidden)]
    pub fn push_long_unchecked(&mut self, token: MemoryToken<T>) {
        self.ltmb.push(token);
    }
}

/// How the consolidation module compresses its sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryMode {
    /// Causal transformer layer over `[sources + TPE; summary + TPE]`.
    Encoder,
    /// Mean of the sources plus the summary token.
    Additive,
    /// Test hook: the layer is replaced by identity, output = summary + its TPE row.
    Identity,
}

/// Learnable consolidation parameters.
#[derive(Debug, Clone)]
pub struct Consolidation {
    pub tpe: ParamId,
    pub summary: ParamId,
    pub layer: TransformerLayer,
    pub count: usize,
    pub use_tpe: bool,
    pub mode: SummaryMode,
}

impl Consolidation {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut Params<T>,
        count: usize,
        use_tpe: bool,
        mode: SummaryMode,
        rng: &mut R,
    ) -> Self {
        Self {
            tpe: params.add(
                "memory.consolidation.tpe",
                Tensor::randn(&[count + 1, TOKEN_DIM], 0.5, rng),
                true,
            ),
            summary: params.add(
                "memory.consolidation.summary",
                Tensor::randn(&[1, TOKEN_DIM], 0.5, rng),
                true,
            ),
            layer: TransformerLayer::new(params, "memory.consolidation.layer", TOKEN_DIM, 2 * TOKEN_DIM, rng),
            count,
            use_tpe,
            mode,
        }
    }

    /// Records the summary computation on `g` and returns the summary-position output.
    pub fn summarize<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, sources: &[MemoryToken<T>]) -> Result<Var> {
        let n = sources.len();
        if n == 0 || n > self.count {
            return Err(contract(format!("consolidating {n} tokens with N_sc={}", self.count)));
        }
        let src: Vec<Var> = sources
            .iter()
            .map(|t| g.constant(Tensor::row(t.vector.clone())))
            .collect();
        let x = g.concat_rows(&src)?;
        let summary = g.param(p, self.summary);
        let tpe = g.param(p, self.tpe);
        match self.mode {
            SummaryMode::Additive => {
                let ones = g.constant(Tensor::full(&[1, n], T::one() / c(n as f64)));
                let mean = g.matmul(ones, x)?;
                g.add(mean, summary)
            }
            SummaryMode::Identity => {
                if self.use_tpe {
                    let row = g.slice_rows(tpe, self.count, 1)?;
                    g.add(summary, row)
                } else {
                    Ok(summary)
                }
            }
            SummaryMode::Encoder => {
                let (x, s) = if self.use_tpe {
                    let rows = g.slice_rows(tpe, 0, n)?;
                    let x = g.add(x, rows)?;
                    let srow = g.slice_rows(tpe, self.count, 1)?;
                    (x, g.add(summary, srow)?)
                } else {
                    (x, summary)
                };
                let seq = g.concat_rows(&[x, s])?;
                self.layer.forward_rows(g, p, seq, n, 1, true)
            }
        }
    }
}

/// [`TokenOps`] backed by the learnable consolidation module on a live graph.
pub struct GraphTokenOps<'a, T: Scalar> {
    pub module: &'a Consolidation,
    pub params: &'a Params<T>,
    pub graph: &'a mut Graph<T>,
}

impl<T: Scalar> TokenOps<T> for GraphTokenOps<'_, T> {
    fn summarize(&mut self, sources: &[MemoryToken<T>]) -> Result<Combined<T>> {
        let v = self.module.summarize(self.graph, self.params, sources)?;
        let vector = self.graph.value(v).data().to_vec();
        let node = self.graph.requires_grad(v).then_some(v);
        Ok(Combined { vector, node })
    }

    fn merge(&mut self, a: &MemoryToken<T>, b: &MemoryToken<T>) -> Result<Combined<T>> {
        let vector = weighted_mean(a, b);
        if a.node.is_none() && b.node.is_none() {
            return Ok(Combined { vector, node: None });
        }
        let total = (a.merge_count + b.merge_count) as f64;
        let g = &mut *self.graph;
        let mut side = |t: &MemoryToken<T>| -> Var {
            let v = match t.node {
                Some(v) => v,
                None => g.constant(Tensor::row(t.vector.clone())),
            };
            g.scale(v, c(t.merge_count as f64 / total))
        };
        let va = side(a);
        let vb = side(b);
        let node = self.graph.add(va, vb)?;
        // Keep the stored value bitwise equal to the value-only merge.
        Ok(Combined {
            vector,
            node: Some(node),
        })
    }
}

/// Temporal encoder over the bank plus cross-attention from `F_O`.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub ln_out: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub slots: usize,
}

/// Depth of the retrieval temporal encoder.
pub const RETRIEVAL_LAYERS: usize = 2;

impl Retrieval {
    pub fn new<T: Scalar, R: Rng + ?Sized>(params: &mut Params<T>, slots: usize, rng: &mut R) -> Self {
        let layers = (0..RETRIEVAL_LAYERS)
            .map(|i| {
                TransformerLayer::new(
                    params,
                    &format!("memory.retrieval.layer{i}"),
                    TOKEN_DIM,
                    2 * TOKEN_DIM,
                    rng,
                )
            })
            .collect();
        Self {
            pos: params.add(
                "memory.retrieval.pos",
                Tensor::randn(&[slots.max(1), TOKEN_DIM], 0.5, rng),
                true,
            ),
            layers,
            ln_out: LayerNorm::new(params, "memory.retrieval.ln_out", TOKEN_DIM),
            wq: Linear::new(params, "memory.retrieval.cross.q", TOKEN_DIM, TOKEN_DIM, false, rng),
            wk: Linear::new(params, "memory.retrieval.cross.k", TOKEN_DIM, TOKEN_DIM, false, rng),
            wv: Linear::new(params, "memory.retrieval.cross.v", TOKEN_DIM, TOKEN_DIM, false, rng),
            slots,
        }
    }

    /// Encodes the bank (long-term then short-term, oldest first) with slot
    /// positional embeddings and the causal encoder.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, bank: &MemoryBank<T>) -> Result<Option<Var>> {
        let n = bank.len();
        if n == 0 {
            return Ok(None);
        }
        if n > self.slots {
            return Err(contract(format!("{n} memory tokens exceed {} slots", self.slots)));
        }
        let rows: Vec<Var> = bank
            .tokens()
            .map(|t| match t.node {
                Some(v) => v,
                None => g.constant(Tensor::row(t.vector.clone())),
            })
            .collect();
        let x = g.concat_rows(&rows)?;
        let pos = g.param(p, self.pos);
        let pos = g.slice_rows(pos, 0, n)?;
        let mut h = g.add(x, pos)?;
        for layer in &self.layers {
            h = layer.forward(g, p, h, true)?;
        }
        Ok(Some(self.ln_out.forward(g, p, h)?))
    }

    /// `F_OR`: cross-attention of `F_O` over the encoded bank; zero when the bank is empty.
    pub fn retrieve<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, bank: &MemoryBank<T>, f_o: Var) -> Result<Var> {
        match self.encode(g, p, bank)? {
            None => Ok(g.constant(Tensor::zeros(&[1, TOKEN_DIM]))),
            Some(mem) => self.cross_attend(g, p, mem, f_o),
        }
    }

    pub fn cross_attend<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, mem: Var, f_o: Var) -> Result<Var> {
        let q = self.wq.forward(g, p, f_o)?;
        let k = self.wk.forward(g, p, mem)?;
        let v = self.wv.forward(g, p, mem)?;
        attention(g, q, k, v, false)
    }
}

/// Sigmoid gate over `[F_O ; F_OR]`.
#[derive(Debug, Clone)]
pub struct Gate {
    pub lin: Linear,
}

impl Gate {
    pub fn new<T: Scalar, R: Rng + ?Sized>(params: &mut Params<T>, rng: &mut R) -> Self {
        Self {
            lin: Linear::new(params, "memory.gate", 2 * TOKEN_DIM, TOKEN_DIM, true, rng),
        }
    }

    pub fn gate_values<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, f_o: Var, f_or: Var) -> Result<Var> {
        let x = g.concat_cols(&[f_o, f_or])?;
        let z = self.lin.forward(g, p, x)?;
        Ok(g.sigmoid(z))
    }

    /// `F_C = g ⊙ F_O + (1 − g) ⊙ F_OR`, evaluated as `F_OR + g ⊙ (F_O − F_OR)`.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, f_o: Var, f_or: Var) -> Result<Var> {
        let gate = self.gate_values(g, p, f_o, f_or)?;
        let diff = g.sub(f_o, f_or)?;
        let gd = g.mul(gate, diff)?;
        g.add(f_or, gd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::VecDeque;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..TOKEN_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn filled(n: u64, rng: &mut ChaCha8Rng) -> MemoryBank<f64> {
        let mut bank = MemoryBank::new(BankConfig::default());
        for t in 0..n {
            bank.append_sensory(rand_vec(rng), t, &mut MeanSummary).unwrap();
        }
        bank
    }

    fn basis(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; TOKEN_DIM];
        v[i] = 1.0;
        v
    }

    #[test]
    fn first_append_goes_to_short_term() {
        let bank = filled(1, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((bank.stmb().len(), bank.ltmb().len()), (1, 0));
        assert_eq!(bank.stmb()[0].tier, Tier::Short);
    }

    #[test]
    fn seventh_append_consolidates_oldest_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = filled(6, &mut rng);
        assert_eq!((bank.stmb().len(), bank.ltmb().len()), (6, 0));
        let bank = filled(7, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!((bank.stmb().len(), bank.ltmb().len()), (4, 1));
        let long = &bank.ltmb()[0];
        assert_eq!((long.birth_step, long.latest_step, long.merge_count), (0, 2, 1));
        assert_eq!(long.tier, Tier::Long);
        let kept: Vec<u64> = bank.stmb().iter().map(|t| t.birth_step).collect();
        assert_eq!(kept, vec![3, 4, 5, 6]);
    }

    #[test]
    fn streaming_keeps_capacity_order_and_provenance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = Params::<f64>::new();
        let module = Consolidation::new(&mut params, 3, true, SummaryMode::Encoder, &mut rng);
        let mut bank = MemoryBank::new(BankConfig::default());
        let mut g = Graph::inference();
        for t in 0..100 {
            g.reset();
            let mut ops = GraphTokenOps {
                module: &module,
                params: &params,
                graph: &mut g,
            };
            bank.append_sensory(rand_vec(&mut rng), t, &mut ops).unwrap();
            assert!(bank.stmb().len() <= 6 && bank.ltmb().len() <= 8, "step {t}");
            for tier in [bank.stmb(), bank.ltmb()] {
                assert!(tier.windows(2).all(|w| w[0].birth_step < w[1].birth_step));
                assert!(tier.iter().all(|x| x.birth_step <= x.latest_step));
            }
            assert!(bank.stmb().iter().all(|x| x.merge_count == 1));
            let merged: u64 = bank.ltmb().iter().map(|x| x.merge_count as u64).sum();
            assert_eq!(merged, bank.consolidations());
        }
        assert_eq!(bank.total_appends(), 100);
    }

    #[test]
    fn identity_summary_is_token_plus_its_position_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::<f64>::new();
        let module = Consolidation::new(&mut params, 3, true, SummaryMode::Identity, &mut rng);
        let sources: Vec<_> = (0..3).map(|t| MemoryToken::short(rand_vec(&mut rng), t)).collect();
        let mut g = Graph::inference();
        let out = module.summarize(&mut g, &params, &sources).unwrap();
        let summary = params.value(module.summary).data();
        let tpe = params.value(module.tpe).row_slice(3);
        for (j, v) in g.value(out).data().iter().enumerate() {
            assert_eq!(*v, summary[j] + tpe[j]);
        }
    }

    #[test]
    fn causal_summary_sees_every_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = Params::<f64>::new();
        let module = Consolidation::new(&mut params, 3, true, SummaryMode::Encoder, &mut rng);
        let sources: Vec<_> = (0..3).map(|t| MemoryToken::short(rand_vec(&mut rng), t)).collect();
        let run = |s: &[MemoryToken<f64>]| {
            let mut g = Graph::inference();
            let out = module.summarize(&mut g, &params, s).unwrap();
            g.value(out).data().to_vec()
        };
        let base = run(&sources);
        for i in 0..3 {
            let mut changed = sources.clone();
            changed[i].vector[0] += 1.0;
            assert_ne!(run(&changed), base, "source {i} invisible to the summary");
        }
    }

    #[test]
    fn identical_neighbours_merge_first() {
        let (v, u) = (basis(0), basis(1));
        let mut bank = MemoryBank::new(BankConfig {
            long_capacity: 2,
            ..BankConfig::default()
        });
        for (i, x) in [v.clone(), v.clone(), u.clone()].into_iter().enumerate() {
            bank.push_long_unchecked(MemoryToken::long(x, i as u64, i as u64, 1));
        }
        bank.merge_ltmb(&mut MeanSummary).unwrap();
        let l = bank.ltmb();
        assert_eq!(l.len(), 2);
        assert_eq!((l[0].vector.clone(), l[1].vector.clone()), (v, u));
        assert_eq!((l[0].merge_count, l[1].merge_count), (2, 1));
        assert_eq!((l[0].birth_step, l[0].latest_step), (0, 1));
    }

    #[test]
    fn similarity_ties_merge_the_earliest_pair() {
        let (v, u) = (basis(0), basis(1));
        let mut bank = MemoryBank::new(BankConfig {
            long_capacity: 3,
            ..BankConfig::default()
        });
        for (i, x) in [v.clone(), v, u.clone(), u].into_iter().enumerate() {
            bank.push_long_unchecked(MemoryToken::long(x, i as u64, i as u64, 1));
        }
        bank.merge_ltmb(&mut MeanSummary).unwrap();
        let counts: Vec<u32> = bank.ltmb().iter().map(|t| t.merge_count).collect();
        assert_eq!(counts, vec![2, 1, 1]);
    }

    #[test]
    fn merge_picks_brute_force_argmax_on_random_banks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let tokens: Vec<_> = (0..9)
                .map(|i| MemoryToken::long(rand_vec(&mut rng), i, i, rng.random_range(1..5)))
                .collect();
            let sims: Vec<f64> = (0..8)
                .map(|i| {
                    let (a, b) = (&tokens[i].vector, &tokens[i + 1].vector);
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let n = |x: &Vec<f64>| x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    dot / (n(a) * n(b))
                })
                .collect();
            let best = (0..8).fold(0, |b, i| if sims[i] > sims[b] { i } else { b });
            let mut bank = MemoryBank::new(BankConfig::default());
            tokens.iter().cloned().for_each(|t| bank.push_long_unchecked(t));
            bank.merge_ltmb(&mut MeanSummary).unwrap();
            assert_eq!(bank.ltmb().len(), 8);
            let m = &bank.ltmb()[best];
            assert_eq!(m.merge_count, tokens[best].merge_count + tokens[best + 1].merge_count);
            assert_eq!(m.vector, weighted_mean(&tokens[best], &tokens[best + 1]));
        }
    }

    #[test]
    fn repeated_merges_average_all_absorbed_summaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = rand_vec(&mut rng);
        let tokens: Vec<_> = (0..4)
            .map(|i| {
                let x: Vec<f64> = v.iter().map(|a| a + 1e-3 * rng.random_range(-1.0..1.0)).collect();
                MemoryToken::long(x, i, i, 1)
            })
            .collect();
        let mut bank = MemoryBank::new(BankConfig {
            long_capacity: 1,
            ..BankConfig::default()
        });
        tokens.iter().cloned().for_each(|t| bank.push_long_unchecked(t));
        while bank.ltmb().len() > 1 {
            bank.merge_pair(&mut MeanSummary).unwrap();
        }
        let m = &bank.ltmb()[0];
        assert_eq!(m.merge_count, 4);
        for j in 0..TOKEN_DIM {
            let mean = tokens.iter().map(|t| t.vector[j]).sum::<f64>() / 4.0;
            assert!((m.vector[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn preconditions_are_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bank = filled(3, &mut rng);
        assert!(bank.consolidate(&mut MeanSummary).is_err());
        assert!(bank.merge_ltmb(&mut MeanSummary).is_err());
        assert!(bank.append_sensory(rand_vec(&mut rng), 2, &mut MeanSummary).is_err());
        assert!(bank.append_sensory(vec![0.0; 3], 10, &mut MeanSummary).is_err());

        let mut g = Graph::new();
        let live = g.input(Tensor::row(rand_vec(&mut rng)), true);
        assert!(bank.append_from_graph(&g, live, 20, &mut MeanSummary).is_err());
        let frozen = g.detach(live);
        bank.append_from_graph(&g, frozen, 20, &mut MeanSummary).unwrap();
    }

    #[test]
    fn sliding_window_hook_matches_reference_queue() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bank = MemoryBank::new(BankConfig::default());
        bank.set_consolidation_enabled(false);
        let mut queue = VecDeque::new();
        for t in 0..500 {
            let v = rand_vec(&mut rng);
            bank.append_sensory(v.clone(), t, &mut MeanSummary).unwrap();
            queue.push_back(v);
            if queue.len() > 6 {
                queue.pop_front();
            }
            assert!(bank.tokens().map(|x| &x.vector).eq(queue.iter()));
        }
        assert!(bank.ltmb().is_empty());
    }

    #[test]
    fn clear_and_snapshot_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bank = filled(40, &mut rng);
        let restored = MemoryBank::restore(bank.snapshot());
        assert_eq!(restored, bank);
        bank.clear();
        assert!(bank.is_empty());
        assert_eq!((bank.total_appends(), bank.consolidations()), (0, 0));
        // Steps restart after a clear.
        bank.append_sensory(rand_vec(&mut rng), 0, &mut MeanSummary).unwrap();
    }

    fn retrieval_setup(seed: u64) -> (Params<f64>, Retrieval, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let r = Retrieval::new(&mut params, 14, &mut rng);
        (params, r, rng)
    }

    #[test]
    fn empty_bank_retrieves_zero() {
        let (params, r, mut rng) = retrieval_setup(10);
        let mut g = Graph::inference();
        let f_o = g.constant(Tensor::row(rand_vec(&mut rng)));
        let out = r
            .retrieve(&mut g, &params, &MemoryBank::new(BankConfig::default()), f_o)
            .unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(out).shape(), &[1, TOKEN_DIM]);
    }

    #[test]
    fn single_token_retrieves_its_value_projection() {
        let (params, r, mut rng) = retrieval_setup(11);
        let bank = filled(1, &mut rng);
        let mut g = Graph::inference();
        let f_o = g.constant(Tensor::row(rand_vec(&mut rng)));
        let out = r.retrieve(&mut g, &params, &bank, f_o).unwrap();
        let mem = r.encode(&mut g, &params, &bank).unwrap().unwrap();
        let v = r.wv.forward(&mut g, &params, mem).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(v).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn token_order_matters_to_retrieval() {
        let (params, r, mut rng) = retrieval_setup(12);
        let a = rand_vec(&mut rng);
        let b = rand_vec(&mut rng);
        let q = rand_vec(&mut rng);
        let run = |first: &Vec<f64>, second: &Vec<f64>| {
            let mut bank = MemoryBank::new(BankConfig::default());
            bank.append_sensory(first.clone(), 0, &mut MeanSummary).unwrap();
            bank.append_sensory(second.clone(), 1, &mut MeanSummary).unwrap();
            let mut g = Graph::inference();
            let f_o = g.constant(Tensor::row(q.clone()));
            let out = r.retrieve(&mut g, &params, &bank, f_o).unwrap();
            g.value(out).data().to_vec()
        };
        assert_ne!(run(&a, &b), run(&b, &a));
    }

    fn gate_out(params: &Params<f64>, gate: &Gate, f_o: &[f64], f_or: &[f64]) -> Vec<f64> {
        let mut g = Graph::inference();
        let a = g.constant(Tensor::row(f_o.to_vec()));
        let b = g.constant(Tensor::row(f_or.to_vec()));
        let y = gate.fuse(&mut g, params, a, b).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn gate_of_equal_inputs_is_that_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = Params::new();
        let gate = Gate::new(&mut params, &mut rng);
        let v = rand_vec(&mut rng);
        assert_eq!(gate_out(&params, &gate, &v, &v), v);
    }

    #[test]
    fn saturated_gate_passes_the_observation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut params = Params::new();
        let gate = Gate::new(&mut params, &mut rng);
        params.value_mut(gate.lin.weight).data_mut().fill(0.0);
        params.value_mut(gate.lin.bias.unwrap()).data_mut().fill(30.0);
        let (f_o, f_or) = (rand_vec(&mut rng), rand_vec(&mut rng));
        for (y, x) in gate_out(&params, &gate, &f_o, &f_or).iter().zip(&f_o) {
            assert!((y - x).abs() < 1e-6);
        }
    }

    #[test]
    fn gate_output_lies_between_its_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut params = Params::new();
        let gate = Gate::new(&mut params, &mut rng);
        for _ in 0..100 {
            let f_o: Vec<f64> = rand_vec(&mut rng).iter().map(|v| v * 5.0).collect();
            let f_or = rand_vec(&mut rng);
            for ((y, a), b) in gate_out(&params, &gate, &f_o, &f_or).iter().zip(&f_o).zip(&f_or) {
                assert!(*y >= a.min(*b) - 1e-12 && *y <= a.max(*b) + 1e-12);
            }
        }
    }

    #[test]
    fn single_bank_modes_respect_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for mode in [BankMode::Fifo { capacity: 14 }, BankMode::SimMerge { capacity: 14 }] {
            let mut bank = MemoryBank::new(BankConfig {
                mode,
                ..BankConfig::default()
            });
            for t in 0..200 {
                bank.append_sensory(rand_vec(&mut rng), t, &mut MeanSummary).unwrap();
                assert!(bank.len() <= 14);
            }
            assert_eq!(bank.len(), 14);
        }
    }
}
