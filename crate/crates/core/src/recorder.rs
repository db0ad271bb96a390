//! Recording demonstrations, either in process or streamed from a server.

use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::time::Duration;

use crate::config::EnvConfig;
use crate::dataset::{self, DatasetWriter, EpisodeRecord, FrameRecord};
use crate::error::{Error, Result};
use crate::policies::Policy;
use crate::protocol::{self, ControlValidator, Message, StreamValidator, PROTOCOL_VERSION};
use crate::rng;
use crate::rollout::{self, EpisodeRun};
use crate::task::{EpisodeSetup, TaskConfig};

/// Which episodes to generate: source index `i` uses seed `episode_seed(base_seed, i)`.
#[derive(Debug, Clone)]
pub struct RecordingPlan {
    pub env: EnvConfig,
    pub task: TaskConfig,
    pub base_seed: u64,
}

impl RecordingPlan {
    pub fn run(&self, source_index: u64, policy: &mut dyn Policy) -> Result<EpisodeRun> {
        let seed = rng::episode_seed(self.base_seed, source_index);
        let setup = EpisodeSetup::generate(&self.env, &self.task, seed)?;
        rollout::run_episode(&self.env, &setup, source_index, policy)
    }
}

fn record_from_run(run: &EpisodeRun, stored_index: u64, task: &TaskConfig) -> EpisodeRecord {
    EpisodeRecord {
        episode_index: stored_index,
        task: run.setup.instruction.text.clone(),
        regime: task.regime,
        placement_seed: run.setup.seed,
        success: run.flags.success,
        frame_count: run.frames.len() as u32,
        source_index: run.index,
    }
}

/// Upper bound on attempts when chasing `target` successes.
fn attempt_limit(target: u64) -> u64 {
    target.saturating_mul(50).saturating_add(1000)
}

/// Runs the expert in process and stores successful episodes until the
/// dataset holds `target` episodes. Resumes from the dataset's cursor.
pub fn record_in_process(plan: &RecordingPlan, dir: &Path, target: u64, policy: &mut dyn Policy) -> Result<u64> {
    let mut writer = DatasetWriter::open(dir, &plan.env, &plan.task)?;
    let fps = writer.meta().fps;
    let mut source = writer.next_source_index();
    let limit = source + attempt_limit(target);
    while writer.len() < target {
        if source >= limit {
            return Err(Error::InvalidConfig(format!(
                "expert stored {} of {target} episodes after {source} attempts",
                writer.len()
            )));
        }
        let run = plan.run(source, policy)?;
        if run.flags.success {
            let index = writer.len();
            writer.write_episode(&record_from_run(&run, index, &plan.task), &dataset::frames_from_run(&run, index, fps))?;
        }
        source += 1;
    }
    Ok(writer.len())
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub plan: RecordingPlan,
    /// Total episodes to serve across sessions; `None` serves forever.
    pub budget: Option<u64>,
}

/// Accepts clients one at a time and streams episodes to each. Returns the
/// number of episodes whose END was delivered.
pub fn serve<F>(listener: TcpListener, cfg: &ServeConfig, make_policy: F) -> Result<u64>
where
    F: Fn() -> Box<dyn Policy>,
{
    let mut served = 0u64;
    let mut policy = make_policy();
    while cfg.budget.map_or(true, |b| served < b) {
        let (stream, peer) = listener.accept()?;
        log::info!("client connected from {peer}");
        match serve_session(stream, cfg, policy.as_mut(), &mut served) {
            Ok(()) => log::info!("session with {peer} closed; {served} episodes served"),
            Err(e) => log::warn!("session with {peer} ended: {e}; partial episode discarded"),
        }
    }
    Ok(served)
}

fn serve_session(stream: TcpStream, cfg: &ServeConfig, policy: &mut dyn Policy, served: &mut u64) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut control = ControlValidator::new();
    let hash = cfg.plan.env.hash();

    let hello = protocol::read_message(&mut reader)?.ok_or_else(|| Error::Protocol("client left before HELLO".into()))?;
    control.accept(&hello)?;
    let Message::Hello { env_config_hash, resume_from, .. } = hello else { unreachable!("validator accepted HELLO") };
    if env_config_hash != hash {
        let reason = format!("environment config hash mismatch: server {hash}, client {env_config_hash}");
        protocol::write_message(&mut writer, &Message::Bye { reason: Some(reason.clone()) })?;
        return Err(Error::HashMismatch { expected: hash, found: env_config_hash });
    }
    protocol::write_message(
        &mut writer,
        &Message::Hello { protocol_version: PROTOCOL_VERSION, env_config_hash: hash, resume_from: None },
    )?;

    let mut source = resume_from.unwrap_or(0);
    loop {
        if cfg.budget.is_some_and(|b| *served >= b) {
            protocol::write_message(&mut writer, &Message::Bye { reason: Some("budget exhausted".into()) })?;
            return Ok(());
        }
        let run = cfg.plan.run(source, policy)?;
        protocol::write_message(
            &mut writer,
            &Message::EpisodeBegin {
                episode_id: source,
                task: run.setup.instruction.text.clone(),
                regime: cfg.plan.task.regime,
                placement_seed: run.setup.seed,
            },
        )?;
        for (t, f) in run.frames.iter().enumerate() {
            let frame = Message::Frame { t: t as u32, state15: f.state15.to_vec(), action7: f.action.to_array().to_vec() };
            writer.write_all(&protocol::encode(&frame)?)?;
        }
        protocol::write_message(&mut writer, &Message::EpisodeEnd { episode_id: source, success: run.flags.success })?;
        *served += 1;
        control.expect_ack(source);
        let reply = protocol::read_message(&mut reader)?
            .ok_or_else(|| Error::Protocol("client disconnected before ACK".into()))?;
        control.accept(&reply)?;
        if let Message::Bye { .. } = reply {
            return Ok(());
        }
        if let Some(msg) = pending_message(&mut reader)? {
            control.accept(&msg)?;
            return Ok(());
        }
        source += 1;
    }
}

/// A message the client sent without being asked (only BYE is legal here).
fn pending_message(reader: &mut BufReader<TcpStream>) -> Result<Option<Message>> {
    if reader.buffer().is_empty() {
        let stream = reader.get_ref();
        stream.set_nonblocking(true)?;
        let mut probe = [0u8; 1];
        let ready = match stream.peek(&mut probe) {
            Ok(n) => n > 0,
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => false,
            Err(e) => return Err(e.into()),
        };
        stream.set_nonblocking(false)?;
        if !ready {
            return Ok(None);
        }
    }
    protocol::read_message(reader)
}

#[derive(Debug, Clone)]
pub struct Backoff {
    pub initial: Duration,
    pub cap: Duration,
    /// Consecutive failed attempts before giving up; `None` retries forever.
    pub max_attempts: Option<u32>,
}

impl Default for Backoff {
    fn default() -> Self {
        Self { initial: Duration::from_millis(100), cap: Duration::from_secs(30), max_attempts: Some(20) }
    }
}

impl Backoff {
    /// Delay before retry number `attempt` (0-based): doubling, capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.min(31));
        self.initial.saturating_mul(factor).min(self.cap)
    }
}

enum SessionEnd {
    /// Target reached or server finished.
    Done,
    /// Connection lost; retry.
    Lost(Error),
}

/// Connects to a server and stores its successful episodes until the dataset
/// holds `target` episodes or the server runs out. Reconnects with
/// exponential backoff and resumes from the dataset on disk.
pub fn client_record<A: ToSocketAddrs + Clone>(
    addr: A,
    dir: &Path,
    env: &EnvConfig,
    task: &TaskConfig,
    target: u64,
    backoff: &Backoff,
) -> Result<u64> {
    let mut failures = 0u32;
    loop {
        let mut writer = DatasetWriter::open(dir, env, task)?;
        if writer.len() >= target {
            return Ok(writer.len());
        }
        let end = match TcpStream::connect(addr.clone()) {
            Ok(stream) => client_session(stream, &mut writer, env, target)?,
            Err(e) => SessionEnd::Lost(e.into()),
        };
        match end {
            SessionEnd::Done => return Ok(writer.len()),
            SessionEnd::Lost(e) => {
                if backoff.max_attempts.is_some_and(|m| failures >= m) {
                    return Err(e);
                }
                let wait = backoff.delay(failures);
                log::warn!("connection lost ({e}); retrying in {wait:?}");
                std::thread::sleep(wait);
                failures += 1;
            }
        }
    }
}

fn client_session(stream: TcpStream, writer: &mut DatasetWriter, env: &EnvConfig, target: u64) -> Result<SessionEnd> {
    macro_rules! io {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e @ Error::Io(_)) => return Ok(SessionEnd::Lost(e)),
                Err(e) => return Err(e),
            }
        };
    }
    io!(stream.set_nodelay(true).map_err(Error::from));
    let mut reader = BufReader::new(io!(stream.try_clone().map_err(Error::from)));
    let mut out = BufWriter::new(stream);
    let hash = env.hash();
    let fps = writer.meta().fps;
    io!(protocol::write_message(
        &mut out,
        &Message::Hello {
            protocol_version: PROTOCOL_VERSION,
            env_config_hash: hash.clone(),
            resume_from: Some(writer.next_source_index()),
        },
    ));

    let mut validator = StreamValidator::new();
    let mut current: Option<(EpisodeRecord, Vec<FrameRecord>)> = None;
    let mut greeted = false;
    loop {
        let Some(msg) = io!(protocol::read_message(&mut reader)) else {
            return Ok(SessionEnd::Lost(Error::Protocol("server closed the connection".into())));
        };
        if let Message::Bye { reason } = &msg {
            if validator.in_episode() {
                return Ok(SessionEnd::Lost(Error::Protocol("server left mid-episode".into())));
            }
            if !greeted {
                let why = reason.clone().unwrap_or_else(|| "no reason given".into());
                return Err(Error::Protocol(format!("server refused the session: {why}")));
            }
            return Ok(SessionEnd::Done);
        }
        validator.accept(&msg)?;
        match msg {
            Message::Hello { env_config_hash, .. } => {
                greeted = true;
                if env_config_hash != hash {
                    return Err(Error::HashMismatch { expected: hash, found: env_config_hash });
                }
            }
            Message::EpisodeBegin { episode_id, task, regime, placement_seed } => {
                let index = writer.len();
                let record = EpisodeRecord {
                    episode_index: index,
                    task,
                    regime,
                    placement_seed,
                    success: false,
                    frame_count: 0,
                    source_index: episode_id,
                };
                current = Some((record, Vec::new()));
            }
            Message::Frame { t, state15, action7 } => {
                let (record, frames) = current.as_mut().expect("validator guarantees an open episode");
                frames.push(FrameRecord {
                    episode_index: record.episode_index,
                    frame_index: t,
                    state: state15,
                    action: action7,
                    timestamp: f64::from(t) / f64::from(fps),
                });
            }
            Message::EpisodeEnd { episode_id, success } => {
                let (mut record, frames) = current.take().expect("validator guarantees an open episode");
                record.success = success;
                record.frame_count = frames.len() as u32;
                let stored = success && writer.write_episode(&record, &frames).is_ok();
                let done = writer.len() >= target;
                io!(protocol::write_message(&mut out, &Message::Ack { episode_id, stored }));
                if done {
                    io!(protocol::write_message(&mut out, &Message::bye()));
                    return Ok(SessionEnd::Done);
                }
            }
            Message::Ack { .. } | Message::Bye { .. } => unreachable!("rejected by the validator"),
        }
    }
}
