//! Versioned checkpoint container: every parameter array by name, the full
//! run configuration, and the training step counter. Loading validates the
//! version and every array shape against a freshly built model.

use crate::agent::{Agent, RunningScale};
use crate::config::RunConfig;
use crate::error::{Result, SdError};
use crate::math::params::ParamSet;
use crate::worldmodel::WorldModel;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SDCP";
const VERSION: u32 = 1;

/// Everything needed to resume evaluation from disk.
pub struct TrainedBundle {
    pub config: RunConfig,
    pub step: u64,
    pub wm: WorldModel<f32>,
    pub agent: Agent<f32>,
}

fn write_array<W: Write>(w: &mut W, name: &str, arr: &ArrayD<f32>) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_u16::<LittleEndian>(bytes.len() as u16)?;
    w.write_all(bytes)?;
    w.write_u8(arr.ndim() as u8)?;
    for &d in arr.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in arr.iter() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_array<R: Read>(r: &mut R) -> Result<(String, ArrayD<f32>)> {
    let name_len = r.read_u16::<LittleEndian>()? as usize;
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| SdError::Format("checkpoint array name is not utf8".into()))?;
    let ndim = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.read_f32::<LittleEndian>()?);
    }
    let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| SdError::Format(format!("checkpoint array {name}: {e}")))?;
    Ok((name, arr))
}

/// Write a checkpoint with all world-model and agent parameters.
pub fn save(
    path: &Path,
    config: &RunConfig,
    step: u64,
    wm: &WorldModel<f32>,
    agent: &Agent<f32>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let config_json = serde_json::to_vec(config)
        .map_err(|e| SdError::Format(format!("config serialization: {e}")))?;
    w.write_u32::<LittleEndian>(config_json.len() as u32)?;
    w.write_all(&config_json)?;
    w.write_u64::<LittleEndian>(step)?;

    let groups: [(&str, &ParamSet<f32>); 4] = [
        ("wm", &wm.params),
        ("actor", &agent.actor_params),
        ("critic", &agent.critic_params),
        ("critic_ema", &agent.critic_ema),
    ];
    let n_arrays: usize = groups.iter().map(|(_, p)| p.len()).sum::<usize>() + 1;
    w.write_u32::<LittleEndian>(n_arrays as u32)?;
    for (prefix, params) in groups {
        for (name, arr) in params.iter() {
            write_array(&mut w, &format!("{prefix}/{name}"), arr)?;
        }
    }
    let scale = ndarray::arr1(&[
        agent.scale.raw() as f32,
        if agent.scale.is_initialized() { 1.0 } else { 0.0 },
    ])
    .into_dyn();
    write_array(&mut w, "agent/return_scale", &scale)?;
    w.flush()?;
    Ok(())
}

/// Load and validate a checkpoint, rebuilding the model and agent.
pub fn load(path: &Path) -> Result<TrainedBundle> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SdError::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(SdError::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let config_len = r.read_u32::<LittleEndian>()? as usize;
    let mut config_buf = vec![0u8; config_len];
    r.read_exact(&mut config_buf)?;
    let config: RunConfig = serde_json::from_slice(&config_buf)
        .map_err(|e| SdError::Format(format!("checkpoint config: {e}")))?;
    config.validate()?;
    let step = r.read_u64::<LittleEndian>()?;
    let n_arrays = r.read_u32::<LittleEndian>()? as usize;

    let mut arrays = std::collections::HashMap::new();
    for _ in 0..n_arrays {
        let (name, arr) = read_array(&mut r)?;
        arrays.insert(name, arr);
    }

    let mut wm = WorldModel::<f32>::build(
        &config.model,
        config.env.image_size,
        config.env.action_dim(),
        0,
    )?;
    let mut agent = Agent::<f32>::build(
        &config.agent,
        config.model.state_dim(),
        config.env.action_dim(),
        config.model.det_dim,
        config.model.learn_rate,
        0,
    )?;

    restore(&mut wm.params, "wm", &arrays)?;
    restore(&mut agent.actor_params, "actor", &arrays)?;
    restore(&mut agent.critic_params, "critic", &arrays)?;
    restore(&mut agent.critic_ema, "critic_ema", &arrays)?;
    if let Some(scale) = arrays.get("agent/return_scale") {
        agent.scale = RunningScale::load(scale[[0]] as f64, scale[[1]] > 0.5);
    }

    Ok(TrainedBundle {
        config,
        step,
        wm,
        agent,
    })
}

fn restore(
    params: &mut ParamSet<f32>,
    prefix: &str,
    arrays: &std::collections::HashMap<String, ArrayD<f32>>,
) -> Result<()> {
    let names: Vec<String> = params.names().to_vec();
    for name in names {
        let key = format!("{prefix}/{name}");
        let stored = arrays
            .get(&key)
            .ok_or_else(|| SdError::Format(format!("checkpoint missing array {key}")))?;
        let dst = params.get_mut(&name);
        if dst.shape() != stored.shape() {
            return Err(SdError::Format(format!(
                "checkpoint array {key} has shape {:?}, model expects {:?}",
                stored.shape(),
                dst.shape()
            )));
        }
        dst.assign(stored);
    }
    Ok(())
}
