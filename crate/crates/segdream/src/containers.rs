//! Chunked binary containers with versioned headers.
//!
//! Episode container (`SDEP`): header JSON describing the environment and
//! mask provider, then one chunk per episode holding quantized observations,
//! ground-truth and provider masks, actions, rewards, and flags.
//!
//! Mask container (`SDMK`): header JSON describing the provider, then one
//! chunk of masks per episode, frame-aligned with a source episode container.

use crate::config::{EnvConfig, MaskProviderConfig};
use crate::error::{Result, SdError};
use crate::replay::{Episode, Frame};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const EPISODE_MAGIC: &[u8; 4] = b"SDEP";
const MASK_MAGIC: &[u8; 4] = b"SDMK";
const VERSION: u32 = 1;
const CHUNK_TAG: u8 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub image_size: usize,
    pub action_dim: usize,
    pub env: EnvConfig,
    pub masks: MaskProviderConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskHeader {
    pub image_size: usize,
    pub provider: MaskProviderConfig,
    /// Path or label of the episode container the masks align with.
    pub source: String,
}

pub struct EpisodeWriter {
    out: std::io::BufWriter<std::fs::File>,
    image_size: usize,
    action_dim: usize,
}

impl EpisodeWriter {
    pub fn create(path: &Path, header: &EpisodeHeader) -> Result<EpisodeWriter> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(EPISODE_MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        let json = serde_json::to_vec(header)
            .map_err(|e| SdError::Format(format!("episode header: {e}")))?;
        out.write_u32::<LittleEndian>(json.len() as u32)?;
        out.write_all(&json)?;
        Ok(EpisodeWriter {
            out,
            image_size: header.image_size,
            action_dim: header.action_dim,
        })
    }

    pub fn append(&mut self, episode: &Episode) -> Result<()> {
        let hw = self.image_size;
        self.out.write_u8(CHUNK_TAG)?;
        self.out.write_u32::<LittleEndian>(episode.len() as u32)?;
        for f in &episode.frames {
            if f.obs.dim() != (hw, hw, 3) || f.prev_action.len() != self.action_dim {
                return Err(SdError::Shape(
                    "episode frame does not match container header".into(),
                ));
            }
            self.out.write_all(f.obs.as_slice().unwrap())?;
        }
        for f in &episode.frames {
            for &m in f.mask_gt.iter() {
                self.out.write_u8(m as u8)?;
            }
        }
        for f in &episode.frames {
            for &m in f.mask_fm.iter() {
                self.out.write_u8(m as u8)?;
            }
        }
        for f in &episode.frames {
            for &a in &f.prev_action {
                self.out.write_f32::<LittleEndian>(a)?;
            }
        }
        for f in &episode.frames {
            self.out.write_f32::<LittleEndian>(f.reward)?;
        }
        for f in &episode.frames {
            self.out.write_u8(f.cont as u8)?;
        }
        for f in &episode.frames {
            self.out.write_u8(f.is_first as u8)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Read a whole episode container.
pub fn read_episodes(path: &Path) -> Result<(EpisodeHeader, Vec<Episode>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EPISODE_MAGIC {
        return Err(SdError::Format("not an episode container (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(SdError::Format(format!(
            "unsupported episode container version {version}"
        )));
    }
    let hlen = r.read_u32::<LittleEndian>()? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: EpisodeHeader =
        serde_json::from_slice(&hbuf).map_err(|e| SdError::Format(format!("header: {e}")))?;
    let hw = header.image_size;
    let adim = header.action_dim;

    let mut episodes = Vec::new();
    loop {
        let tag = match r.read_u8() {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        if tag != CHUNK_TAG {
            return Err(SdError::Format(format!("unexpected chunk tag {tag}")));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut obs_all = vec![0u8; n * hw * hw * 3];
        r.read_exact(&mut obs_all)?;
        let mut gt_all = vec![0u8; n * hw * hw];
        r.read_exact(&mut gt_all)?;
        let mut fm_all = vec![0u8; n * hw * hw];
        r.read_exact(&mut fm_all)?;
        let mut actions = Vec::with_capacity(n * adim);
        for _ in 0..n * adim {
            actions.push(r.read_f32::<LittleEndian>()?);
        }
        let mut rewards = Vec::with_capacity(n);
        for _ in 0..n {
            rewards.push(r.read_f32::<LittleEndian>()?);
        }
        let mut conts = vec![0u8; n];
        r.read_exact(&mut conts)?;
        let mut firsts = vec![0u8; n];
        r.read_exact(&mut firsts)?;

        let mut frames = Vec::with_capacity(n);
        for i in 0..n {
            let obs = Array3::from_shape_vec(
                (hw, hw, 3),
                obs_all[i * hw * hw * 3..(i + 1) * hw * hw * 3].to_vec(),
            )
            .unwrap();
            let gt = Array2::from_shape_vec(
                (hw, hw),
                gt_all[i * hw * hw..(i + 1) * hw * hw]
                    .iter()
                    .map(|&b| b != 0)
                    .collect(),
            )
            .unwrap();
            let fm = Array2::from_shape_vec(
                (hw, hw),
                fm_all[i * hw * hw..(i + 1) * hw * hw]
                    .iter()
                    .map(|&b| b != 0)
                    .collect(),
            )
            .unwrap();
            frames.push(Frame {
                obs,
                prev_action: actions[i * adim..(i + 1) * adim].to_vec(),
                reward: rewards[i],
                cont: conts[i] != 0,
                is_first: firsts[i] != 0,
                mask_fm: fm,
                mask_gt: gt,
            });
        }
        episodes.push(Episode { frames });
    }
    Ok((header, episodes))
}

/// Write a parallel mask container aligned with an episode container.
pub fn write_masks(
    path: &Path,
    header: &MaskHeader,
    masks: &[Vec<Array2<bool>>],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MASK_MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    let json =
        serde_json::to_vec(header).map_err(|e| SdError::Format(format!("mask header: {e}")))?;
    out.write_u32::<LittleEndian>(json.len() as u32)?;
    out.write_all(&json)?;
    for episode in masks {
        out.write_u8(CHUNK_TAG)?;
        out.write_u32::<LittleEndian>(episode.len() as u32)?;
        for mask in episode {
            if mask.dim() != (header.image_size, header.image_size) {
                return Err(SdError::Shape("mask does not match container header".into()));
            }
            for &m in mask.iter() {
                out.write_u8(m as u8)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a mask container.
pub fn read_masks(path: &Path) -> Result<(MaskHeader, Vec<Vec<Array2<bool>>>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MASK_MAGIC {
        return Err(SdError::Format("not a mask container (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(SdError::Format(format!(
            "unsupported mask container version {version}"
        )));
    }
    let hlen = r.read_u32::<LittleEndian>()? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: MaskHeader =
        serde_json::from_slice(&hbuf).map_err(|e| SdError::Format(format!("header: {e}")))?;
    let hw = header.image_size;
    let mut all = Vec::new();
    loop {
        let tag = match r.read_u8() {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        if tag != CHUNK_TAG {
            return Err(SdError::Format(format!("unexpected chunk tag {tag}")));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut episode = Vec::with_capacity(n);
        for _ in 0..n {
            let mut buf = vec![0u8; hw * hw];
            r.read_exact(&mut buf)?;
            episode.push(
                Array2::from_shape_vec((hw, hw), buf.iter().map(|&b| b != 0).collect()).unwrap(),
            );
        }
        all.push(episode);
    }
    Ok((header, all))
}
