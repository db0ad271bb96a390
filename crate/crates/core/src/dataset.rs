//! Success-filtered trajectory datasets on disk.
//!
//! Layout: `meta/info.json` plus `data/shard-%05d.jsonl`. Each shard holds, per
//! episode, one header line followed by its frame lines.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::config::EnvConfig;
use crate::env::Action7;
use crate::error::{Error, Result};
use crate::imitation::Demo;
use crate::placement::Regime;
use crate::rollout::EpisodeRun;
use crate::task::TaskConfig;

pub const STATE_DIM: usize = 15;
pub const ACTION_DIM: usize = 7;
pub const EPISODES_PER_SHARD: u64 = 1000;
pub const ROBOT_TYPE: &str = "panda";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub episode_index: u64,
    pub frame_index: u32,
    #[serde(rename = "observation.state")]
    pub state: Vec<f32>,
    pub action: Vec<f32>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_index: u64,
    /// Instruction text.
    pub task: String,
    pub regime: Regime,
    pub placement_seed: u64,
    pub success: bool,
    pub frame_count: u32,
    /// Generation counter the seed was derived from; drives resume.
    pub source_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub episodes: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub fps: u32,
    pub robot_type: String,
    pub env_config_hash: String,
    pub objects: Vec<String>,
    pub regime: Regime,
    pub task_config: TaskConfig,
    pub total_episodes: u64,
    pub total_frames: u64,
    /// Next generation counter to try after a restart.
    pub next_source_index: u64,
    pub shards: Vec<ShardInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Episode(EpisodeRecord),
    Frame(FrameRecord),
}

fn meta_path(dir: &Path) -> PathBuf {
    dir.join("meta").join("info.json")
}

fn shard_name(i: usize) -> String {
    format!("shard-{i:05}.jsonl")
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = meta_path(dir);
    let bytes = fs::read(&path).map_err(|e| Error::Schema(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_meta_atomic(dir: &Path, meta: &DatasetMeta) -> Result<()> {
    let path = meta_path(dir);
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(meta)?)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &path)?;
    Ok(())
}

/// Builds frame records for an episode from its recorded steps.
pub fn frames_from_run(run: &EpisodeRun, episode_index: u64, fps: u32) -> Vec<FrameRecord> {
    run.frames
        .iter()
        .enumerate()
        .map(|(t, f)| FrameRecord {
            episode_index,
            frame_index: t as u32,
            state: f.state15.to_vec(),
            action: f.action.to_array().to_vec(),
            timestamp: t as f64 / f64::from(fps),
        })
        .collect()
}

pub fn validate_episode(meta: &DatasetMeta, horizon: u32, ep: &EpisodeRecord, frames: &[FrameRecord]) -> Result<()> {
    if !ep.success {
        return Err(Error::RejectedByFilter(ep.episode_index));
    }
    if frames.len() != ep.frame_count as usize || ep.frame_count > horizon {
        return Err(Error::Schema(format!(
            "episode {} declares {} frames, has {} (horizon {horizon})",
            ep.episode_index,
            ep.frame_count,
            frames.len()
        )));
    }
    let mut last_ts = f64::NEG_INFINITY;
    for (t, f) in frames.iter().enumerate() {
        if f.state.len() != STATE_DIM || f.action.len() != ACTION_DIM {
            return Err(Error::Schema(format!(
                "frame {t}: state dim {} / action dim {} (expected {STATE_DIM} / {ACTION_DIM})",
                f.state.len(),
                f.action.len()
            )));
        }
        if f.frame_index as usize != t || f.episode_index != ep.episode_index {
            return Err(Error::Schema(format!("frame {t} is out of sequence")));
        }
        if !(f.timestamp > last_ts) {
            return Err(Error::Schema(format!("frame {t}: timestamps not increasing")));
        }
        let expected = t as f64 / f64::from(meta.fps);
        if (f.timestamp - expected).abs() > 1e-9 {
            return Err(Error::Schema(format!("frame {t}: timestamp {} != {expected}", f.timestamp)));
        }
        last_ts = f.timestamp;
    }
    Ok(())
}

/// Single writer for a dataset directory.
#[derive(Debug)]
pub struct DatasetWriter {
    dir: PathBuf,
    meta: DatasetMeta,
    horizon: u32,
}

impl DatasetWriter {
    /// Opens an existing dataset for appending, or creates an empty one.
    /// Bytes written after the last committed episode are discarded.
    pub fn open(dir: &Path, env: &EnvConfig, task: &TaskConfig) -> Result<Self> {
        let hash = env.hash();
        let meta = if meta_path(dir).exists() {
            let meta = read_meta(dir)?;
            if meta.env_config_hash != hash {
                return Err(Error::HashMismatch { expected: hash, found: meta.env_config_hash });
            }
            if &meta.task_config != task {
                return Err(Error::InvalidConfig(format!(
                    "dataset at {} was recorded for a different task configuration",
                    dir.display()
                )));
            }
            for shard in &meta.shards {
                let path = dir.join("data").join(&shard.file);
                let len = fs::metadata(&path)?.len();
                if len > shard.bytes {
                    log::warn!("truncating {} uncommitted bytes from {}", len - shard.bytes, shard.file);
                    OpenOptions::new().write(true).open(&path)?.set_len(shard.bytes)?;
                } else if len < shard.bytes {
                    return Err(Error::Schema(format!("{} is shorter than its committed length", shard.file)));
                }
            }
            meta
        } else {
            fs::create_dir_all(dir.join("meta"))?;
            fs::create_dir_all(dir.join("data"))?;
            let meta = DatasetMeta {
                fps: env.workspace.control_hz,
                robot_type: ROBOT_TYPE.into(),
                env_config_hash: hash,
                objects: env.objects.iter().map(|o| o.name.name().to_string()).collect(),
                regime: task.regime,
                task_config: task.clone(),
                total_episodes: 0,
                total_frames: 0,
                next_source_index: 0,
                shards: Vec::new(),
            };
            write_meta_atomic(dir, &meta)?;
            meta
        };
        Ok(Self { dir: dir.to_path_buf(), meta, horizon: env.workspace.horizon })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> u64 {
        self.meta.total_episodes
    }

    pub fn is_empty(&self) -> bool {
        self.meta.total_episodes == 0
    }

    pub fn next_source_index(&self) -> u64 {
        self.meta.next_source_index
    }

    /// Appends one episode; `ep.episode_index` and the frame indices must equal
    /// the next stored index. Returns that index.
    pub fn write_episode(&mut self, ep: &EpisodeRecord, frames: &[FrameRecord]) -> Result<u64> {
        let index = self.meta.total_episodes;
        if ep.episode_index != index {
            return Err(Error::Schema(format!("episode index {} but next stored index is {index}", ep.episode_index)));
        }
        validate_episode(&self.meta, self.horizon, ep, frames)?;

        let shard = (index / EPISODES_PER_SHARD) as usize;
        if shard == self.meta.shards.len() {
            self.meta.shards.push(ShardInfo { file: shard_name(shard), episodes: 0, bytes: 0 });
        }
        let mut buf = Vec::new();
        serde_json::to_writer(&mut buf, &Line::Episode(ep.clone()))?;
        buf.push(b'\n');
        for f in frames {
            serde_json::to_writer(&mut buf, &Line::Frame(f.clone()))?;
            buf.push(b'\n');
        }
        let info = &mut self.meta.shards[shard];
        let mut file = OpenOptions::new().create(true).append(true).open(self.dir.join("data").join(&info.file))?;
        file.write_all(&buf)?;
        file.sync_data()?;
        info.episodes += 1;
        info.bytes += buf.len() as u64;
        self.meta.total_episodes += 1;
        self.meta.total_frames += frames.len() as u64;
        self.meta.next_source_index = self.meta.next_source_index.max(ep.source_index + 1);
        write_meta_atomic(&self.dir, &self.meta)?;
        Ok(index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredEpisode {
    pub record: EpisodeRecord,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub episodes: Vec<StoredEpisode>,
}

fn read_shard(path: &Path, limit: u64) -> Result<Vec<StoredEpisode>> {
    let mut out: Vec<StoredEpisode> = Vec::new();
    let mut reader = BufReader::new(File::open(path)?).take(limit);
    let mut line = String::new();
    let mut n = 0usize;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        n += 1;
        let parsed: Line = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{n}: {e}", path.display())))?;
        match parsed {
            Line::Episode(record) => out.push(StoredEpisode { record, frames: Vec::new() }),
            Line::Frame(f) => match out.last_mut() {
                Some(ep) if ep.record.episode_index == f.episode_index => ep.frames.push(f),
                _ => return Err(Error::Schema(format!("{}:{n}: frame without its episode header", path.display()))),
            },
        }
    }
    Ok(out)
}

/// Reads a dataset in episode-index order. With `expected_hash`, refuses a
/// dataset recorded under a different environment config; with `subset`,
/// returns exactly the first `k` episodes.
pub fn read_dataset(dir: &Path, expected_hash: Option<&str>, subset: Option<u64>) -> Result<Dataset> {
    let meta = read_meta(dir)?;
    if let Some(h) = expected_hash {
        if meta.env_config_hash != h {
            return Err(Error::HashMismatch { expected: h.into(), found: meta.env_config_hash });
        }
    }
    let want = subset.unwrap_or(meta.total_episodes);
    if want > meta.total_episodes {
        return Err(Error::InvalidConfig(format!("subset of {want} requested from {} episodes", meta.total_episodes)));
    }
    let mut by_index: BTreeMap<u64, StoredEpisode> = BTreeMap::new();
    for shard in &meta.shards {
        for ep in read_shard(&dir.join("data").join(&shard.file), shard.bytes)? {
            if ep.frames.len() != ep.record.frame_count as usize {
                return Err(Error::Schema(format!("episode {} is truncated", ep.record.episode_index)));
            }
            if by_index.insert(ep.record.episode_index, ep).is_some() {
                return Err(Error::Schema("duplicate episode index".into()));
            }
        }
    }
    if by_index.len() as u64 != meta.total_episodes {
        return Err(Error::Schema(format!("meta lists {} episodes, shards hold {}", meta.total_episodes, by_index.len())));
    }
    let episodes = by_index.into_values().take(want as usize).collect();
    Ok(Dataset { meta, episodes })
}

impl Dataset {
    /// Demonstrations for behavior cloning.
    pub fn demos(&self) -> Result<Vec<Demo>> {
        self.episodes
            .iter()
            .map(|ep| {
                let actions = ep.frames.iter().map(|f| Action7::from_slice(&f.action)).collect::<Result<Vec<_>>>()?;
                Ok(Demo { task: self.meta.task_config.clone(), seed: ep.record.placement_seed, actions })
            })
            .collect()
    }

    pub fn stats(&self) -> DatasetStats {
        let mut per_instruction = BTreeMap::new();
        for ep in &self.episodes {
            *per_instruction.entry(ep.record.task.clone()).or_insert(0u64) += 1;
        }
        DatasetStats {
            episodes: self.episodes.len() as u64,
            frames: self.episodes.iter().map(|e| e.frames.len() as u64).sum(),
            regime: self.meta.regime,
            shards: self.meta.shards.len(),
            successes: self.episodes.iter().filter(|e| e.record.success).count() as u64,
            per_instruction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub episodes: u64,
    pub frames: u64,
    pub regime: Regime,
    pub shards: usize,
    pub successes: u64,
    pub per_instruction: BTreeMap<String, u64>,
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "episodes  {}", self.episodes)?;
        writeln!(f, "frames    {}", self.frames)?;
        writeln!(f, "shards    {}", self.shards)?;
        writeln!(f, "successes {}", self.successes)?;
        writeln!(f, "regime    {}", self.regime)?;
        for (task, n) in &self.per_instruction {
            writeln!(f, "  {task:<28} {n}")?;
        }
        Ok(())
    }
}
