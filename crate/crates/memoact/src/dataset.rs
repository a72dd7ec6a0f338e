//! `MRTB` episode files plus a JSONL manifest.
//!
//! Header: magic `MRTB`, `u32` version, `u32` task id, `u64` seed, `u32`
//! length. Then per step: 3072 image bytes, 6 `f32` proprio, 3 `f32` action,
//! all little-endian.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use memoact_core::encoder::{ObservationFrame, IMAGE_SIZE, PROPRIO_DIM};
use memoact_core::envs::{self, EpisodeRecord, TaskId, MAX_EPISODE_LEN};
use serde::{Deserialize, Serialize};

use crate::FormatError;

pub const MAGIC: &[u8; 4] = b"MRTB";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.jsonl";
const IMAGE_BYTES: usize = IMAGE_SIZE * IMAGE_SIZE * 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub task: String,
    pub seed: u64,
    pub length: usize,
    pub success: bool,
}

pub fn write_episode(w: &mut impl Write, rec: &EpisodeRecord) -> Result<(), FormatError> {
    if rec.frames.len() != rec.actions.len() {
        return Err(FormatError::Invalid(format!(
            "{} frames but {} actions",
            rec.frames.len(),
            rec.actions.len()
        )));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&rec.task.code().to_le_bytes())?;
    w.write_all(&rec.seed.to_le_bytes())?;
    w.write_all(&(rec.len() as u32).to_le_bytes())?;
    for (f, a) in rec.frames.iter().zip(&rec.actions) {
        if f.image.len() != IMAGE_BYTES {
            return Err(FormatError::Invalid(format!("frame image has {} bytes", f.image.len())));
        }
        w.write_all(&f.image)?;
        for v in f.proprio.iter().chain(a.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], FormatError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Reads an episode. The success flag is recomputed by replaying the
/// recorded actions from the seeded initial state.
pub fn read_episode(r: &mut impl Read) -> Result<EpisodeRecord, FormatError> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: "MRTB",
            found: magic,
        });
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let code = u32::from_le_bytes(read_array(r)?);
    let task = TaskId::from_code(code).ok_or_else(|| FormatError::Invalid(format!("unknown task id {code}")))?;
    let seed = u64::from_le_bytes(read_array(r)?);
    let len = u32::from_le_bytes(read_array(r)?) as usize;
    if len > MAX_EPISODE_LEN {
        return Err(FormatError::Invalid(format!(
            "episode length {len} exceeds {MAX_EPISODE_LEN}"
        )));
    }
    let mut frames = Vec::with_capacity(len);
    let mut actions = Vec::with_capacity(len);
    for t in 0..len {
        let mut image = vec![0u8; IMAGE_BYTES];
        r.read_exact(&mut image)?;
        let mut floats = [0f32; PROPRIO_DIM + 3];
        for v in floats.iter_mut() {
            *v = f32::from_le_bytes(read_array(r)?);
        }
        let mut proprio = [0f32; PROPRIO_DIM];
        proprio.copy_from_slice(&floats[..PROPRIO_DIM]);
        frames.push(ObservationFrame {
            image,
            proprio,
            step_index: t,
        });
        actions.push([floats[PROPRIO_DIM], floats[PROPRIO_DIM + 1], floats[PROPRIO_DIM + 2]]);
    }
    let mut s = envs::reset(task, seed);
    for &a in &actions {
        s = envs::step(&s, a);
    }
    Ok(EpisodeRecord {
        task,
        seed,
        frames,
        actions,
        success: envs::check_success(&s.trace, task).success,
    })
}

pub fn episode_file(index: usize) -> String {
    format!("ep_{index:05}.mrtb")
}

/// Writes one file per episode plus the manifest into `dir`.
pub fn write_dataset(dir: &Path, episodes: &[EpisodeRecord]) -> Result<(), FormatError> {
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST))?);
    for (i, rec) in episodes.iter().enumerate() {
        let file = episode_file(i);
        let mut w = BufWriter::new(File::create(dir.join(&file))?);
        write_episode(&mut w, rec)?;
        w.flush()?;
        let entry = ManifestEntry {
            file,
            task: rec.task.name().into(),
            seed: rec.seed,
            length: rec.len(),
            success: rec.success,
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, FormatError> {
    let f = BufReader::new(File::open(dir.join(MANIFEST))?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Loads every episode named in the manifest, checking it against the header.
pub fn read_dataset(dir: &Path) -> Result<Vec<EpisodeRecord>, FormatError> {
    read_manifest(dir)?
        .into_iter()
        .map(|entry| {
            let rec = read_episode(&mut BufReader::new(File::open(dir.join(&entry.file))?))?;
            if rec.seed != entry.seed || rec.len() != entry.length || rec.task.name() != entry.task {
                return Err(FormatError::Invalid(format!(
                    "{} disagrees with the manifest",
                    entry.file
                )));
            }
            Ok(rec)
        })
        .collect()
}
