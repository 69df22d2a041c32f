//! Checkpoint files: every named parameter array, both optimizer states,
//! and the consolidation state, as length-prefixed little-endian f32
//! arrays behind a JSON name index. Round-trips are bit-exact.
//!
//! Layout: u32 index length | index JSON | per indexed array: u32 element
//! count | elements as f32 LE. Array order is the index order.

use crate::adam::AdamState;
use crate::array::{ParamStore, RealArray};
use crate::error::{CsrlError, Result};
use crate::learner::Agent;
use crate::nets::Nets;
use crate::si::SIState;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    version: u32,
    arrays: Vec<IndexEntry>,
    actor_adam: AdamMeta,
    critic_adam: AdamMeta,
    si_xi: f32,
    si_task_index: usize,
}

fn adam_meta(state: &AdamState) -> AdamMeta {
    AdamMeta {
        lr: state.lr,
        beta1: state.beta1,
        beta2: state.beta2,
        eps: state.eps,
        t: state.t,
    }
}

fn restore_adam(meta: &AdamMeta) -> AdamState {
    let mut st = AdamState::new(meta.lr);
    st.beta1 = meta.beta1;
    st.beta2 = meta.beta2;
    st.eps = meta.eps;
    st.t = meta.t;
    st
}

/// Saves agent parameters, optimizer moments, and SI arrays.
/// Namespaces: `param/`, `adam_actor/{m,v}/`, `adam_critic/{m,v}/`,
/// `si/{omega,importance,ref}/`.
pub fn save(path: &Path, agent: &Agent, si: &SIState) -> Result<()> {
    let mut arrays: Vec<(String, &RealArray)> = Vec::new();
    for (k, v) in &agent.params {
        arrays.push((format!("param/{k}"), v));
    }
    for (prefix, opt) in [("adam_actor", &agent.actor_opt), ("adam_critic", &agent.critic_opt)] {
        for (k, v) in &opt.m {
            arrays.push((format!("{prefix}/m/{k}"), v));
        }
        for (k, v) in &opt.v {
            arrays.push((format!("{prefix}/v/{k}"), v));
        }
    }
    for (k, v) in &si.omega {
        arrays.push((format!("si/omega/{k}"), v));
    }
    for (k, v) in &si.importance {
        arrays.push((format!("si/importance/{k}"), v));
    }
    for (k, v) in &si.ref_weights {
        arrays.push((format!("si/ref/{k}"), v));
    }

    let index = Index {
        version: 1,
        arrays: arrays
            .iter()
            .map(|(name, arr)| IndexEntry {
                name: name.clone(),
                shape: arr.shape().to_vec(),
            })
            .collect(),
        actor_adam: adam_meta(&agent.actor_opt),
        critic_adam: adam_meta(&agent.critic_opt),
        si_xi: si.xi,
        si_task_index: si.task_index,
    };
    let index_bytes = serde_json::to_vec(&index)?;

    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_u32::<LittleEndian>(index_bytes.len() as u32)?;
    w.write_all(&index_bytes)?;
    for (_, arr) in &arrays {
        w.write_u32::<LittleEndian>(arr.len() as u32)?;
        for v in arr.data() {
            w.write_f32::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint back into an agent and SI state. `nets` supplies
/// the topology (it is not serialized).
pub fn load(path: &Path, nets: Nets) -> Result<(Agent, SIState)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let index_len = r.read_u32::<LittleEndian>()? as usize;
    let mut index_bytes = vec![0u8; index_len];
    r.read_exact(&mut index_bytes).map_err(|_| CsrlError::Format {
        offset: 4,
        message: "truncated checkpoint index".into(),
    })?;
    let index: Index = serde_json::from_slice(&index_bytes)?;
    if index.version != 1 {
        return Err(CsrlError::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {}", index.version),
        });
    }

    let mut offset = 4 + index_len as u64;
    let mut params = ParamStore::new();
    let mut actor_opt = restore_adam(&index.actor_adam);
    let mut critic_opt = restore_adam(&index.critic_adam);
    let mut si = SIState {
        omega: ParamStore::new(),
        importance: ParamStore::new(),
        ref_weights: ParamStore::new(),
        xi: index.si_xi,
        task_index: index.si_task_index,
    };

    for entry in &index.arrays {
        let count = r.read_u32::<LittleEndian>()? as usize;
        let expected: usize = entry.shape.iter().product();
        if count != expected {
            return Err(CsrlError::Format {
                offset,
                message: format!(
                    "array `{}`: length prefix {count} does not match shape {:?}",
                    entry.name, entry.shape
                ),
            });
        }
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf).map_err(|_| CsrlError::Format {
            offset,
            message: format!("truncated data for `{}`", entry.name),
        })?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = RealArray::from_vec(&entry.shape, data);
        offset += 4 + (count as u64) * 4;

        let name = entry.name.as_str();
        if let Some(k) = name.strip_prefix("param/") {
            params.insert(k.to_string(), arr);
        } else if let Some(k) = name.strip_prefix("adam_actor/m/") {
            actor_opt.m.insert(k.to_string(), arr);
        } else if let Some(k) = name.strip_prefix("adam_actor/v/") {
            actor_opt.v.insert(k.to_string(), arr);
        } else if let Some(k) = name.strip_prefix("adam_critic/m/") {
            critic_opt.m.insert(k.to_string(), arr);
        } else if let Some(k) = name.strip_prefix("adam_critic/v/") {
            critic_opt.v.insert(k.to_string(), arr);
        } else if let Some(k) = name.strip_prefix("si/omega/") {
            si.omega.insert(k.to_string(), arr);
        } else if let Some(k) = name.strip_prefix("si/importance/") {
            si.importance.insert(k.to_string(), arr);
        } else if let Some(k) = name.strip_prefix("si/ref/") {
            si.ref_weights.insert(k.to_string(), arr);
        } else {
            return Err(CsrlError::Format {
                offset,
                message: format!("unknown namespace in `{name}`"),
            });
        }
    }

    let agent = Agent {
        nets,
        params,
        actor_opt,
        critic_opt,
    };
    Ok((agent, si))
}
