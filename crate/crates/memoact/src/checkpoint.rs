//! `MEMO` named-array files: checkpoints, bank snapshots and injected patch features.
//!
//! Layout (all integers little-endian `u32` unless noted): magic `MEMO`,
//! version, array count; then per array the name length, name bytes, rank,
//! dims, dtype tag and raw data. Tags: 0 = `f32`, 1 = `u8`, 2 = `u64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use memoact_core::encoder::{PatchEncoder, NUM_PATCHES, TOKEN_DIM};
use memoact_core::memory::{BankConfig, BankMode, BankSnapshot, MemoryToken, Tier};
use memoact_core::policy::Policy;
use memoact_core::tensor::Tensor;
use memoact_core::trainer::TrainConfig;

use crate::config::TrainSection;
use crate::FormatError;

pub const MAGIC: &[u8; 4] = b"MEMO";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn tag(&self) -> u32 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::U8(_) => 1,
            ArrayData::U64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims: dims.to_vec(),
            data: ArrayData::F32(data),
        }
    }

    pub fn bytes(name: impl Into<String>, data: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            dims: vec![data.len()],
            data: ArrayData::U8(data),
        }
    }

    pub fn u64(name: impl Into<String>, data: Vec<u64>) -> Self {
        Self {
            name: name.into(),
            dims: vec![data.len()],
            data: ArrayData::U64(data),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32], FormatError> {
        match &self.data {
            ArrayData::F32(v) => Ok(v),
            _ => Err(FormatError::Invalid(format!("{} is not f32", self.name))),
        }
    }

    pub fn as_u64(&self) -> Result<&[u64], FormatError> {
        match &self.data {
            ArrayData::U64(v) => Ok(v),
            _ => Err(FormatError::Invalid(format!("{} is not u64", self.name))),
        }
    }

    pub fn as_bytes(&self) -> Result<&[u8], FormatError> {
        match &self.data {
            ArrayData::U8(v) => Ok(v),
            _ => Err(FormatError::Invalid(format!("{} is not u8", self.name))),
        }
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<(), FormatError> {
    let v = u32::try_from(v).map_err(|_| FormatError::Invalid(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_arrays(w: &mut impl Write, arrays: &[NamedArray]) -> Result<(), FormatError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_u32(w, arrays.len())?;
    for a in arrays {
        let count: usize = a.dims.iter().product();
        if count != a.data.len() {
            return Err(FormatError::Invalid(format!(
                "{}: dims {:?} hold {count} values, data has {}",
                a.name,
                a.dims,
                a.data.len()
            )));
        }
        put_u32(w, a.name.len())?;
        w.write_all(a.name.as_bytes())?;
        put_u32(w, a.dims.len())?;
        for &d in &a.dims {
            put_u32(w, d)?;
        }
        w.write_all(&a.data.tag().to_le_bytes())?;
        match &a.data {
            ArrayData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArrayData::U8(v) => w.write_all(v)?,
            ArrayData::U64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        }
    }
    Ok(())
}

/// Upper bound on a single array, guarding allocations against corrupt headers.
const MAX_VALUES: usize = 1 << 30;

pub fn read_arrays(r: &mut impl Read) -> Result<Vec<NamedArray>, FormatError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: "MEMO",
            found: magic,
        });
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let count = get_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = get_u32(r)? as usize;
        if name_len > 4096 {
            return Err(FormatError::Invalid(format!("array name of {name_len} bytes")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| FormatError::Invalid("array name is not UTF-8".into()))?;
        let rank = get_u32(r)? as usize;
        if rank > 8 {
            return Err(FormatError::Invalid(format!("{name}: rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| get_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_VALUES)
            .ok_or_else(|| FormatError::Invalid(format!("{name}: dims {dims:?} too large")))?;
        let data = match get_u32(r)? {
            0 => {
                let mut raw = vec![0u8; n * 4];
                r.read_exact(&mut raw)?;
                ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => {
                let mut raw = vec![0u8; n];
                r.read_exact(&mut raw)?;
                ArrayData::U8(raw)
            }
            2 => {
                let mut raw = vec![0u8; n * 8];
                r.read_exact(&mut raw)?;
                ArrayData::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            tag => return Err(FormatError::Invalid(format!("{name}: unknown dtype tag {tag}"))),
        };
        out.push(NamedArray { name, dims, data });
    }
    Ok(out)
}

pub fn save_arrays(path: &Path, arrays: &[NamedArray]) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_arrays(&mut w, arrays)?;
    w.flush()?;
    Ok(())
}

pub fn load_arrays(path: &Path) -> Result<Vec<NamedArray>, FormatError> {
    read_arrays(&mut BufReader::new(File::open(path)?))
}

fn find<'a>(arrays: &'a [NamedArray], name: &str) -> Result<&'a NamedArray, FormatError> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| FormatError::Invalid(format!("missing array {name}")))
}

pub const CONFIG_ARRAY: &str = "meta.config";
pub const PATCH_ARRAY: &str = "encoder.patch.weight";

/// Every parameter, the frozen patch projection and the training config.
pub fn policy_arrays(policy: &Policy<f32>, config: &TrainConfig) -> Result<Vec<NamedArray>, FormatError> {
    let json = serde_json::to_vec(&TrainSection::from_core(config))?;
    let mut out = vec![NamedArray::bytes(CONFIG_ARRAY, json)];
    out.push(NamedArray::f32(
        PATCH_ARRAY,
        policy.patch.weight.shape(),
        policy.patch.weight.data().to_vec(),
    ));
    for (_, p) in policy.params.iter() {
        out.push(NamedArray::f32(
            p.name.clone(),
            p.value.shape(),
            p.value.data().to_vec(),
        ));
    }
    Ok(out)
}

pub fn save_policy(path: &Path, policy: &Policy<f32>, config: &TrainConfig) -> Result<(), FormatError> {
    save_arrays(path, &policy_arrays(policy, config)?)
}

/// Rebuilds the variant from the stored config and overwrites every parameter.
pub fn policy_from_arrays(arrays: &[NamedArray]) -> Result<(Policy<f32>, TrainConfig), FormatError> {
    let section: TrainSection = serde_json::from_slice(find(arrays, CONFIG_ARRAY)?.as_bytes()?)?;
    let config = section.to_core();
    let mut policy: Policy<f32> = config.build_policy()?;
    let patch = find(arrays, PATCH_ARRAY)?;
    let weight = Tensor::new(&patch.dims, patch.as_f32()?.to_vec())?;
    policy.patch = PatchEncoder::from_weight(policy.patch.seed, weight)?;
    let ids: Vec<_> = policy.params.ids().collect();
    for id in ids {
        let name = policy.params.get(id).name.clone();
        let a = find(arrays, &name)?;
        if a.dims != policy.params.value(id).shape() {
            return Err(FormatError::Invalid(format!(
                "{name}: stored {:?}, expected {:?}",
                a.dims,
                policy.params.value(id).shape()
            )));
        }
        policy.params.value_mut(id).data_mut().copy_from_slice(a.as_f32()?);
    }
    let known = policy.params.len() + 2;
    let extra = arrays.iter().filter(|a| !a.name.starts_with("bank.")).count();
    if extra != known {
        return Err(FormatError::Invalid(format!(
            "checkpoint has {extra} parameter arrays, variant {} expects {known}",
            config.variant
        )));
    }
    Ok((policy, config))
}

pub fn load_policy(path: &Path) -> Result<(Policy<f32>, TrainConfig), FormatError> {
    policy_from_arrays(&load_arrays(path)?)
}

fn tier_arrays(prefix: &str, tokens: &[MemoryToken<f32>], out: &mut Vec<NamedArray>) {
    let dim = tokens.first().map_or(TOKEN_DIM, |t| t.vector.len());
    out.push(NamedArray::f32(
        format!("{prefix}.vectors"),
        &[tokens.len(), dim],
        tokens.iter().flat_map(|t| t.vector.iter().copied()).collect(),
    ));
    out.push(NamedArray::u64(
        format!("{prefix}.birth_step"),
        tokens.iter().map(|t| t.birth_step).collect(),
    ));
    out.push(NamedArray::u64(
        format!("{prefix}.latest_step"),
        tokens.iter().map(|t| t.latest_step).collect(),
    ));
    out.push(NamedArray::u64(
        format!("{prefix}.merge_count"),
        tokens.iter().map(|t| t.merge_count as u64).collect(),
    ));
}

/// `bank.stmb.*`, `bank.ltmb.*` and `bank.state` arrays for a snapshot.
pub fn bank_arrays(s: &BankSnapshot<f32>) -> Vec<NamedArray> {
    let mut out = Vec::new();
    tier_arrays("bank.stmb", &s.stmb, &mut out);
    tier_arrays("bank.ltmb", &s.ltmb, &mut out);
    let (mode, capacity) = match s.config.mode {
        BankMode::Hierarchical => (0, 0),
        BankMode::Fifo { capacity } => (1, capacity as u64),
        BankMode::SimMerge { capacity } => (2, capacity as u64),
    };
    out.push(NamedArray::u64(
        "bank.state",
        vec![
            s.config.short_capacity as u64,
            s.config.long_capacity as u64,
            s.config.consolidate_count as u64,
            mode,
            capacity,
            s.total_appends,
            s.consolidations,
            s.last_step.map_or(0, |v| v + 1),
        ],
    ));
    out
}

fn tier_from(arrays: &[NamedArray], prefix: &str, tier: Tier) -> Result<Vec<MemoryToken<f32>>, FormatError> {
    let v = find(arrays, &format!("{prefix}.vectors"))?;
    let birth = find(arrays, &format!("{prefix}.birth_step"))?.as_u64()?;
    let latest = find(arrays, &format!("{prefix}.latest_step"))?.as_u64()?;
    let merges = find(arrays, &format!("{prefix}.merge_count"))?.as_u64()?;
    let (n, dim) = match v.dims[..] {
        [n, d] => (n, d),
        _ => return Err(FormatError::Invalid(format!("{prefix}.vectors must be rank 2"))),
    };
    if birth.len() != n || latest.len() != n || merges.len() != n {
        return Err(FormatError::Invalid(format!(
            "{prefix}: side arrays disagree with {n} tokens"
        )));
    }
    let data = v.as_f32()?;
    Ok((0..n)
        .map(|i| {
            let vector = data[i * dim..(i + 1) * dim].to_vec();
            match tier {
                Tier::Short => {
                    let mut t = MemoryToken::short(vector, birth[i]);
                    t.latest_step = latest[i];
                    t.merge_count = merges[i] as u32;
                    t
                }
                Tier::Long => MemoryToken::long(vector, birth[i], latest[i], merges[i] as u32),
            }
        })
        .collect())
}

pub fn bank_from_arrays(arrays: &[NamedArray]) -> Result<BankSnapshot<f32>, FormatError> {
    let state = find(arrays, "bank.state")?.as_u64()?;
    let [short, long, consolidate, mode, capacity, appends, consolidations, last] = state[..] else {
        return Err(FormatError::Invalid("bank.state must hold 8 values".into()));
    };
    let mode = match mode {
        0 => BankMode::Hierarchical,
        1 => BankMode::Fifo {
            capacity: capacity as usize,
        },
        2 => BankMode::SimMerge {
            capacity: capacity as usize,
        },
        m => return Err(FormatError::Invalid(format!("unknown bank mode {m}"))),
    };
    Ok(BankSnapshot {
        config: BankConfig {
            short_capacity: short as usize,
            long_capacity: long as usize,
            consolidate_count: consolidate as usize,
            mode,
        },
        stmb: tier_from(arrays, "bank.stmb", Tier::Short)?,
        ltmb: tier_from(arrays, "bank.ltmb", Tier::Long)?,
        total_appends: appends,
        consolidations,
        last_step: last.checked_sub(1),
    })
}

/// Externally supplied patch features: one `patches.<i>` array of shape
/// `[frames, NUM_PATCHES, TOKEN_DIM]` per episode.
pub fn load_features(path: &Path) -> Result<Vec<Vec<Tensor<f32>>>, FormatError> {
    let arrays = load_arrays(path)?;
    let mut eps = Vec::new();
    for i in 0.. {
        let Some(a) = arrays.iter().find(|a| a.name == format!("patches.{i}")) else {
            break;
        };
        let [frames, p, c] = a.dims[..] else {
            return Err(FormatError::Invalid(format!("{} must be rank 3", a.name)));
        };
        if p != NUM_PATCHES || c != TOKEN_DIM {
            return Err(FormatError::Invalid(format!(
                "{}: expected [_, {NUM_PATCHES}, {TOKEN_DIM}], found {:?}",
                a.name, a.dims
            )));
        }
        let data = a.as_f32()?;
        eps.push(
            (0..frames)
                .map(|f| Tensor::matrix(p, c, data[f * p * c..(f + 1) * p * c].to_vec()))
                .collect(),
        );
    }
    Ok(eps)
}

pub fn save_features(path: &Path, episodes: &[Vec<Tensor<f32>>]) -> Result<(), FormatError> {
    let arrays: Vec<NamedArray> = episodes
        .iter()
        .enumerate()
        .map(|(i, frames)| {
            NamedArray::f32(
                format!("patches.{i}"),
                &[frames.len(), NUM_PATCHES, TOKEN_DIM],
                frames.iter().flat_map(|t| t.data().iter().copied()).collect(),
            )
        })
        .collect();
    save_arrays(path, &arrays)
}
