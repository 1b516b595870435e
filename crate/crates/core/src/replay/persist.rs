//! One file per episode: magic, version, a JSON header describing shapes,
//! dtypes and the step alignment, then raw little-endian payload.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Episode;
use crate::env::{Action, Observation, ACTION_DIM};
use crate::error::{Error, Result};

pub const EPISODE_MAGIC: &[u8; 4] = b"TIAE";
const VERSION: u32 = 1;
const ALIGNMENT: &str = "a[t] produces o[t+1] and r[t+1]";
const ALIGNMENT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    steps: usize,
    obs_shape: [usize; 3],
    obs_dtype: String,
    action_dim: usize,
    scalar_dtype: String,
    alignment: String,
    alignment_version: u32,
}

pub fn save_episode(path: &Path, episode: &Episode) -> Result<()> {
    episode.validate()?;
    let shape = episode
        .obs_shape()
        .ok_or_else(|| Error::MalformedEpisode("no observations".into()))?;
    let header = serde_json::to_vec(&Header {
        steps: episode.len(),
        obs_shape: shape,
        obs_dtype: "u8".into(),
        action_dim: ACTION_DIM,
        scalar_dtype: "f64le".into(),
        alignment: ALIGNMENT.into(),
        alignment_version: ALIGNMENT_VERSION,
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(EPISODE_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for o in &episode.observations {
        buf.extend_from_slice(o.pixels());
    }
    for a in &episode.actions {
        for v in a.0 {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in episode.rewards.iter().chain(&episode.discounts) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::EpisodeFile("truncated payload".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_f64s(bytes: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    let raw = take(bytes, n * 8)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn load_episode(path: &Path) -> Result<Episode> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut bytes = data.as_slice();
    if take(&mut bytes, 4)? != EPISODE_MAGIC {
        return Err(Error::EpisodeFile(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::EpisodeFile(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, header_len)?)?;
    if header.alignment_version != ALIGNMENT_VERSION
        || header.obs_dtype != "u8"
        || header.scalar_dtype != "f64le"
        || header.action_dim != ACTION_DIM
        || header.obs_shape[0] != header.obs_shape[1]
        || header.obs_shape[2] != 3
    {
        return Err(Error::EpisodeFile(format!(
            "{}: unsupported layout {header:?}",
            path.display()
        )));
    }
    let t = header.steps;
    let frame = header.obs_shape.iter().product::<usize>();
    let mut observations = Vec::with_capacity(t + 1);
    for _ in 0..=t {
        observations.push(Observation::from_pixels(
            header.obs_shape[0],
            take(&mut bytes, frame)?.to_vec(),
        )?);
    }
    let actions = read_f64s(&mut bytes, t * ACTION_DIM)?
        .chunks_exact(ACTION_DIM)
        .map(|c| Action([c[0], c[1]]))
        .collect();
    let rewards = read_f64s(&mut bytes, t)?;
    let discounts = read_f64s(&mut bytes, t)?;
    if !bytes.is_empty() {
        return Err(Error::EpisodeFile("trailing bytes".into()));
    }
    let episode = Episode {
        observations,
        actions,
        rewards,
        discounts,
    };
    episode.validate()?;
    Ok(episode)
}

/// Loads every `*.tiae` file in `dir`, in lexicographic order.
pub fn load_episode_dir(dir: &Path) -> Result<Vec<Episode>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tiae"))
        .collect();
    files.sort();
    files.iter().map(|p| load_episode(p)).collect()
}
