//! Offline dataset container: binary episode files, scripted-policy
//! generation, and uniform minibatch sampling.
//!
//! File layout (all little-endian):
//!   magic "CSRL" | version u8 = 1 | obs_mode u8 (0 vector, 1 image)
//!   | obs dims 3 x u32 | action_dim u32 = 7 | episode_len u32 = 20
//!   | episode_count u32
//! then per episode: 20 transitions of
//!   obs f32[obs_len] | action f32[7] | reward f32 | next_obs f32[obs_len]
//!   | done u8
//! followed by the episode's object config (x, y) as 2 x f32.
//!
//! A JSON sidecar `<file>.meta.json` records task, area, density, seed,
//! sigma, the measured collection accuracy, and the creation time.

use crate::error::{CsrlError, Result};
use crate::learner::Batch;
use crate::nets::{ObsMode, ACTION_DIM};
use crate::rng::{derive, Stream};
use crate::tabletop::{run_scripted_episode, sample_object_space, TaskSpec, EPISODE_LEN};
use crate::RealArray;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub const MAGIC: &[u8; 4] = b"CSRL";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub obs_mode: ObsMode,
    /// Three dims: vector datasets use [10, 1, 1], image [48, 48, 3].
    pub obs_dims: [u32; 3],
    pub action_dim: u32,
    pub episode_len: u32,
    pub episode_count: u32,
}

impl DatasetHeader {
    pub fn obs_len(&self) -> usize {
        self.obs_dims.iter().product::<u32>() as usize
    }

    fn transition_bytes(&self) -> u64 {
        // obs + next_obs + action + reward + done
        (self.obs_len() as u64) * 8 + (ACTION_DIM as u64) * 4 + 4 + 1
    }

    pub fn expected_file_len(&self) -> u64 {
        let per_episode = self.transition_bytes() * self.episode_len as u64 + 8;
        30 + per_episode * self.episode_count as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub action: [f32; ACTION_DIM],
    pub reward: f32,
    pub next_obs: Vec<f32>,
    pub done: bool,
}

/// A fixed 20-step episode plus the object placement it was collected on.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub transitions: Vec<Transition>,
    pub object_x: f32,
    pub object_y: f32,
}

impl EpisodeRecord {
    pub fn episode_return(&self) -> f32 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// Sidecar metadata, one JSON document next to the binary file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub task: TaskSpec,
    pub seed: u64,
    pub sigma: f32,
    pub measured_accuracy: f64,
    pub created_unix: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<EpisodeRecord>,
    pub meta: Option<DatasetMeta>,
}

impl Dataset {
    pub fn transition_count(&self) -> usize {
        self.episodes.len() * EPISODE_LEN as usize
    }
}

/// Summary returned by [`generate`].
#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub episode_count: usize,
    pub transition_count: usize,
    pub mean_return: f64,
    pub measured_accuracy: f64,
    /// Set when the measured accuracy fell below the configured floor.
    pub low_accuracy_warning: bool,
}

pub const ACCURACY_FLOOR: f64 = 0.8;

/// Collects one episode per sampled object config with the scripted
/// policy and writes the dataset plus its sidecar. Episode `i` draws its
/// noise from a substream derived from (seed, i), so files are bitwise
/// reproducible.
pub fn generate(spec: &TaskSpec, sigma: f32, seed: u64, path: &Path) -> Result<GenerateSummary> {
    spec.validate()?;
    let configs = sample_object_space(spec, seed)?;
    let mut episodes = Vec::with_capacity(configs.len());
    let mut successes = 0usize;
    let mut total_return = 0.0f64;
    for (i, cfg) in configs.iter().enumerate() {
        let mut rng = derive(seed, Stream::Collect, i as u64);
        let (transitions, ep_return) = run_scripted_episode(spec, *cfg, &mut rng, sigma)?;
        if ep_return > 0.0 {
            successes += 1;
        }
        total_return += ep_return as f64;
        episodes.push(EpisodeRecord {
            transitions: transitions
                .into_iter()
                .map(|t| Transition {
                    obs: t.obs,
                    action: t.action,
                    reward: t.reward,
                    next_obs: t.next_obs,
                    done: t.done,
                })
                .collect(),
            object_x: cfg.x,
            object_y: cfg.y,
        });
    }

    let measured_accuracy = successes as f64 / configs.len() as f64;
    let header = header_for(spec, episodes.len() as u32);
    let dataset = Dataset {
        header,
        episodes,
        meta: None,
    };
    write_dataset(&dataset, path)?;

    let meta = DatasetMeta {
        task: spec.clone(),
        seed,
        sigma,
        measured_accuracy,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    std::fs::write(meta_path(path), serde_json::to_vec_pretty(&meta)?)?;

    Ok(GenerateSummary {
        episode_count: dataset.episodes.len(),
        transition_count: dataset.transition_count(),
        mean_return: total_return / dataset.episodes.len() as f64,
        measured_accuracy,
        low_accuracy_warning: measured_accuracy < ACCURACY_FLOOR,
    })
}

pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

fn header_for(spec: &TaskSpec, episode_count: u32) -> DatasetHeader {
    let obs_dims = match spec.obs_mode {
        ObsMode::Vector => [10, 1, 1],
        ObsMode::Image => [48, 48, 3],
    };
    DatasetHeader {
        obs_mode: spec.obs_mode,
        obs_dims,
        action_dim: ACTION_DIM as u32,
        episode_len: EPISODE_LEN,
        episode_count,
    }
}

// ── binary io ───────────────────────────────────────────────────────

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let h = &dataset.header;
    w.write_all(MAGIC)?;
    w.write_u8(FORMAT_VERSION)?;
    w.write_u8(match h.obs_mode {
        ObsMode::Vector => 0,
        ObsMode::Image => 1,
    })?;
    for d in h.obs_dims {
        w.write_u32::<LittleEndian>(d)?;
    }
    w.write_u32::<LittleEndian>(h.action_dim)?;
    w.write_u32::<LittleEndian>(h.episode_len)?;
    w.write_u32::<LittleEndian>(h.episode_count)?;

    let obs_len = h.obs_len();
    for ep in &dataset.episodes {
        debug_assert_eq!(ep.transitions.len(), h.episode_len as usize);
        for t in &ep.transitions {
            debug_assert_eq!(t.obs.len(), obs_len);
            for v in &t.obs {
                w.write_f32::<LittleEndian>(*v)?;
            }
            for v in &t.action {
                w.write_f32::<LittleEndian>(*v)?;
            }
            w.write_f32::<LittleEndian>(t.reward)?;
            for v in &t.next_obs {
                w.write_f32::<LittleEndian>(*v)?;
            }
            w.write_u8(t.done as u8)?;
        }
        w.write_f32::<LittleEndian>(ep.object_x)?;
        w.write_f32::<LittleEndian>(ep.object_y)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| CsrlError::Format {
        offset: 0,
        message: "file too short for magic".into(),
    })?;
    if &magic != MAGIC {
        return Err(CsrlError::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected {:?}", magic, MAGIC),
        });
    }
    let version = r.read_u8()?;
    if version != FORMAT_VERSION {
        return Err(CsrlError::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let obs_mode = match r.read_u8()? {
        0 => ObsMode::Vector,
        1 => ObsMode::Image,
        other => {
            return Err(CsrlError::Format {
                offset: 5,
                message: format!("unknown obs mode {other}"),
            })
        }
    };
    let mut obs_dims = [0u32; 3];
    for d in obs_dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>()?;
    }
    let action_dim = r.read_u32::<LittleEndian>()?;
    let episode_len = r.read_u32::<LittleEndian>()?;
    let episode_count = r.read_u32::<LittleEndian>()?;
    let header = DatasetHeader {
        obs_mode,
        obs_dims,
        action_dim,
        episode_len,
        episode_count,
    };
    if action_dim != ACTION_DIM as u32 || episode_len != EPISODE_LEN {
        return Err(CsrlError::Format {
            offset: 18,
            message: format!(
                "dims mismatch: action_dim {action_dim}, episode_len {episode_len}"
            ),
        });
    }
    if file_len != header.expected_file_len() {
        return Err(CsrlError::Format {
            offset: file_len.min(header.expected_file_len()),
            message: format!(
                "truncated or oversized file: expected {} bytes, found {}",
                header.expected_file_len(),
                file_len
            ),
        });
    }

    let obs_len = header.obs_len();
    let mut episodes = Vec::with_capacity(episode_count as usize);
    let read_f32s = |r: &mut BufReader<std::fs::File>, n: usize| -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };
    for _ in 0..episode_count {
        let mut transitions = Vec::with_capacity(episode_len as usize);
        for _ in 0..episode_len {
            let obs = read_f32s(&mut r, obs_len)?;
            let action_v = read_f32s(&mut r, ACTION_DIM)?;
            let mut action = [0f32; ACTION_DIM];
            action.copy_from_slice(&action_v);
            let reward = r.read_f32::<LittleEndian>()?;
            let next_obs = read_f32s(&mut r, obs_len)?;
            let done = r.read_u8()? != 0;
            transitions.push(Transition {
                obs,
                action,
                reward,
                next_obs,
                done,
            });
        }
        let object_x = r.read_f32::<LittleEndian>()?;
        let object_y = r.read_f32::<LittleEndian>()?;
        episodes.push(EpisodeRecord {
            transitions,
            object_x,
            object_y,
        });
    }

    let meta = match std::fs::read(meta_path(path)) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
        Err(_) => None,
    };
    Ok(Dataset {
        header,
        episodes,
        meta,
    })
}

// ── sampling ────────────────────────────────────────────────────────

/// The index stream behind [`sample_batch`]: uniform with replacement
/// over all transitions.
pub fn draw_transition_indices(total: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..count).map(|_| rng.gen_range(0..total)).collect()
}

/// Uniform-with-replacement minibatch over all transitions. The stored
/// binary gripper command {0, 1} is re-encoded to {-1, +1} for the
/// learner. Observations are flattened row-major; image observations are
/// converted HWC -> CHW for the conv trunk.
pub fn sample_batch(
    dataset: &Dataset,
    task: &TaskSpec,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let total = dataset.transition_count();
    if total == 0 {
        return Err(CsrlError::DatasetMismatch("empty dataset".into()));
    }
    let obs_len = dataset.header.obs_len();
    let ep_len = dataset.header.episode_len as usize;

    let mut obs = Vec::with_capacity(batch_size * obs_len);
    let mut next_obs = Vec::with_capacity(batch_size * obs_len);
    let mut actions = Vec::with_capacity(batch_size * ACTION_DIM);
    let mut rewards = Vec::with_capacity(batch_size);
    let mut dones = Vec::with_capacity(batch_size);
    for idx in draw_transition_indices(total, batch_size, rng) {
        let t = &dataset.episodes[idx / ep_len].transitions[idx % ep_len];
        push_obs(&mut obs, &t.obs, dataset.header.obs_mode);
        push_obs(&mut next_obs, &t.next_obs, dataset.header.obs_mode);
        let mut a = t.action;
        a[6] = if a[6] > 0.5 { 1.0 } else { -1.0 };
        actions.extend_from_slice(&a);
        rewards.push(t.reward);
        dones.push(t.done as u8 as f32);
    }

    let obs_shape: Vec<usize> = match dataset.header.obs_mode {
        ObsMode::Vector => vec![batch_size, obs_len],
        ObsMode::Image => vec![batch_size, 3, 48, 48],
    };
    Ok(Batch {
        task: task.task,
        obs: RealArray::from_vec(&obs_shape, obs),
        actions: RealArray::from_vec(&[batch_size, ACTION_DIM], actions),
        rewards,
        next_obs: RealArray::from_vec(&obs_shape, next_obs),
        dones,
    })
}

fn push_obs(dst: &mut Vec<f32>, obs: &[f32], mode: ObsMode) {
    match mode {
        ObsMode::Vector => dst.extend_from_slice(obs),
        ObsMode::Image => {
            // HWC (48, 48, 3) -> CHW (3, 48, 48)
            for c in 0..3 {
                for p in 0..48 * 48 {
                    dst.push(obs[p * 3 + c]);
                }
            }
        }
    }
}

/// Checks a loaded dataset against the task spec it claims to serve.
pub fn validate_against(dataset: &Dataset, spec: &TaskSpec) -> Result<()> {
    if dataset.header.obs_mode != spec.obs_mode {
        return Err(CsrlError::DatasetMismatch(format!(
            "obs mode {:?} in file, {:?} in spec",
            dataset.header.obs_mode, spec.obs_mode
        )));
    }
    if let Some(meta) = &dataset.meta {
        if meta.task.task != spec.task {
            return Err(CsrlError::DatasetMismatch(format!(
                "dataset was collected for {}, experiment wants {}",
                meta.task.task, spec.task
            )));
        }
        if meta.task.area != spec.area || meta.task.density != spec.density {
            return Err(CsrlError::DatasetMismatch(format!(
                "object space mismatch: file area/density {}/{}, spec {}/{}",
                meta.task.area, meta.task.density, spec.area, spec.density
            )));
        }
    }
    Ok(())
}
