//! Policy assembly: encoder → memory path → denoiser, for every variant.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{Denoiser, DiffusionSchedule, ACTION_DIM, DIFFUSION_STEPS};
use crate::encoder::{ObservationFrame, PatchEncoder, SensoryEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::memory::{
    BankConfig, BankMode, Consolidation, Gate, GraphTokenOps, MeanSummary, MemoryBank, Retrieval, SummaryMode,
    DEFAULT_CONSOLIDATE_COUNT, DEFAULT_LONG_CAPACITY, DEFAULT_SHORT_CAPACITY,
};
use crate::params::Params;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryMode {
    /// No memory: condition on the current observation only.
    None,
    /// One sliding window, oldest evicted.
    Fifo,
    /// One bank, overflow merged by adjacent similarity.
    SimMerge,
    /// Short/long-term banks with learned consolidation.
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantSpec {
    pub id: String,
    pub mode: MemoryMode,
    /// Temporal position embeddings in consolidation.
    pub tpe: bool,
    /// Learned consolidation encoder (false: mean of sources plus summary token).
    pub consolidation_encoder: bool,
    /// Learned gate (false: elementwise mean of `F_O` and `F_OR`).
    pub gate: bool,
}

impl VariantSpec {
    /// Every accepted variant id, canonical spelling.
    pub const IDS: [&'static str; 7] = [
        "markovian",
        "samp",
        "mvmp",
        "memoact",
        "no-tpe",
        "consol-add",
        "gate-add",
    ];

    pub fn parse(id: &str) -> Result<Self> {
        let (canon, mode, tpe, enc, gate) = match id {
            "markovian" | "none" | "dp" => ("markovian", MemoryMode::None, false, false, false),
            "samp" | "fifo" => ("samp", MemoryMode::Fifo, false, false, false),
            "mvmp" | "simmerge" => ("mvmp", MemoryMode::SimMerge, false, false, true),
            "memoact" | "full" => ("memoact", MemoryMode::Full, true, true, true),
            "no-tpe" => ("no-tpe", MemoryMode::Full, false, true, true),
            "consol-add" => ("consol-add", MemoryMode::Full, true, false, true),
            "gate-add" => ("gate-add", MemoryMode::Full, true, true, false),
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?}; expected one of {}",
                    Self::IDS.join(", ")
                )))
            }
        };
        Ok(Self {
            id: canon.into(),
            mode,
            tpe,
            consolidation_encoder: enc,
            gate,
        })
    }
}

/// Bank capacities; single-bank variants use `short + long`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capacity {
    pub short: usize,
    pub long: usize,
    pub consolidate: usize,
}

impl Default for Capacity {
    fn default() -> Self {
        Self {
            short: DEFAULT_SHORT_CAPACITY,
            long: DEFAULT_LONG_CAPACITY,
            consolidate: DEFAULT_CONSOLIDATE_COUNT,
        }
    }
}

impl Capacity {
    pub fn bank_config(&self, mode: MemoryMode) -> BankConfig {
        let single = self.short + self.long;
        BankConfig {
            short_capacity: self.short,
            long_capacity: self.long,
            consolidate_count: self.consolidate,
            mode: match mode {
                MemoryMode::Fifo => BankMode::Fifo { capacity: single },
                MemoryMode::SimMerge => BankMode::SimMerge { capacity: single },
                _ => BankMode::Hierarchical,
            },
        }
    }
}

// Stream tags: each module draws its initial weights from its own stream so
// that shared modules start identical across variants.
const STREAM_ENCODER: u64 = 0x656e_636f;
const STREAM_DECODER: u64 = 0x6465_636f;
const STREAM_CONSOLIDATION: u64 = 0x636f_6e73;
const STREAM_RETRIEVAL: u64 = 0x7265_7472;
const STREAM_GATE: u64 = 0x6761_7465;
const STREAM_PATCH: u64 = 0x7061_7463;

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag)
}

/// A complete policy of one variant.
#[derive(Debug, Clone)]
pub struct Policy<T> {
    pub spec: VariantSpec,
    pub capacity: Capacity,
    pub bank_config: BankConfig,
    pub params: Params<T>,
    pub patch: PatchEncoder,
    pub encoder: SensoryEncoder,
    pub consolidation: Option<Consolidation>,
    pub retrieval: Option<Retrieval>,
    pub gate: Option<Gate>,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
}

impl<T: Scalar> Policy<T> {
    pub fn new(spec: VariantSpec, capacity: Capacity, seed: u64) -> Result<Self> {
        let bank_config = capacity.bank_config(spec.mode);
        bank_config.validate()?;
        let mut params = Params::new();
        let encoder = SensoryEncoder::new(&mut params, &mut stream(seed, STREAM_ENCODER));
        let denoiser = Denoiser::new(&mut params, &mut stream(seed, STREAM_DECODER));
        let consolidation = (spec.mode == MemoryMode::Full).then(|| {
            let mode = if spec.consolidation_encoder {
                SummaryMode::Encoder
            } else {
                SummaryMode::Additive
            };
            Consolidation::new(
                &mut params,
                capacity.consolidate,
                spec.tpe,
                mode,
                &mut stream(seed, STREAM_CONSOLIDATION),
            )
        });
        let retrieval = (spec.mode != MemoryMode::None).then(|| {
            Retrieval::new(
                &mut params,
                bank_config.max_tokens(),
                &mut stream(seed, STREAM_RETRIEVAL),
            )
        });
        let gate = (spec.gate && spec.mode != MemoryMode::None)
            .then(|| Gate::new(&mut params, &mut stream(seed, STREAM_GATE)));
        let patch_seed = {
            use rand::Rng;
            stream(seed, STREAM_PATCH).random::<u64>()
        };
        Ok(Self {
            spec,
            capacity,
            bank_config,
            params,
            patch: PatchEncoder::new(patch_seed),
            encoder,
            consolidation,
            retrieval,
            gate,
            denoiser,
            schedule: DiffusionSchedule::for_steps(DIFFUSION_STEPS),
        })
    }

    pub fn new_bank(&self) -> MemoryBank<T> {
        MemoryBank::new(self.bank_config)
    }

    pub fn uses_memory(&self) -> bool {
        self.spec.mode != MemoryMode::None
    }

    /// Frozen patch features of a frame.
    pub fn patches(&self, frame: &ObservationFrame) -> Result<Tensor<T>> {
        Ok(self.patch.encode(frame)?.cast())
    }

    /// Sensory token `F_O`.
    pub fn sense(&self, g: &mut Graph<T>, patches: &Tensor<T>, proprio: &[f32]) -> Result<Var> {
        self.encoder.forward(g, &self.params, patches, proprio)
    }

    /// Decoder condition `F_C` given `F_O` and the bank as it stands before `F_O` is stored.
    pub fn condition(&self, g: &mut Graph<T>, f_o: Var, bank: &MemoryBank<T>) -> Result<Var> {
        let Some(retrieval) = &self.retrieval else {
            return Ok(f_o);
        };
        let f_or = retrieval.retrieve(g, &self.params, bank, f_o)?;
        match (&self.gate, self.spec.mode) {
            (Some(gate), _) => gate.fuse(g, &self.params, f_o, f_or),
            // Residual: with an empty bank the retrieved token is zero and the
            // decoder must still see the current observation.
            (None, MemoryMode::Fifo) => g.add(f_o, f_or),
            (None, _) => {
                let s = g.add(f_o, f_or)?;
                Ok(g.scale(s, c(0.5)))
            }
        }
    }

    /// Stores a detached copy of `F_O`; consolidation is recorded on `g`.
    pub fn remember(&self, g: &mut Graph<T>, f_o: Var, step: u64, bank: &mut MemoryBank<T>) -> Result<()> {
        if !self.uses_memory() {
            return Ok(());
        }
        let token = g.detach(f_o);
        let vector = g.value(token).data().to_vec();
        match &self.consolidation {
            Some(module) => {
                let mut ops = GraphTokenOps {
                    module,
                    params: &self.params,
                    graph: g,
                };
                bank.append_sensory(vector, step, &mut ops)
            }
            None => bank.append_sensory(vector, step, &mut MeanSummary),
        }
    }

    /// Samples an action chunk of `len` rows for a condition value.
    pub fn act<R: rand::Rng + ?Sized>(
        &self,
        f_c: &Tensor<T>,
        len: usize,
        rng: &mut R,
    ) -> Result<Vec<[f32; ACTION_DIM]>> {
        let a = self.denoiser.sample(&self.params, &self.schedule, f_c, len, rng)?;
        Ok((0..len)
            .map(|r| {
                let row = a.row_slice(r);
                [row[0].to_f64() as f32, row[1].to_f64() as f32, row[2].to_f64() as f32]
            })
            .collect())
    }

    /// Trainable parameter count under a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params.count_with_prefix(prefix)
    }
}
