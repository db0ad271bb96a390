use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::thread;

use graspladder::dataset::read_dataset;
use graspladder::env::Action7;
use graspladder::placement::Regime;
use graspladder::policies::{ObsKind, Observation, OraclePolicy, Policy};
use graspladder::protocol::{self, Message, PROTOCOL_VERSION};
use graspladder::recorder::{client_record, record_in_process, serve, Backoff, RecordingPlan, ServeConfig};
use graspladder::{EnvConfig, TaskConfig};

fn plan() -> RecordingPlan {
    RecordingPlan { env: EnvConfig::default(), task: TaskConfig::new(Regime::MediumJitter), base_seed: 21 }
}

fn spawn_server(budget: u64, flaky: bool) -> (String, thread::JoinHandle<u64>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let cfg = ServeConfig { plan: plan(), budget: Some(budget) };
    let handle = thread::spawn(move || {
        serve(listener, &cfg, || {
            let ws = EnvConfig::default().workspace;
            if flaky {
                Box::new(Alternating { oracle: OraclePolicy::new(&ws), episode: 0 }) as Box<dyn Policy>
            } else {
                Box::new(OraclePolicy::new(&ws))
            }
        })
        .unwrap()
    });
    (addr, handle)
}

/// Oracle on odd episodes, motionless on even ones.
struct Alternating {
    oracle: OraclePolicy,
    episode: u64,
}

impl Policy for Alternating {
    fn name(&self) -> String {
        "alternating".into()
    }
    fn observation_kind(&self) -> ObsKind {
        ObsKind::Privileged
    }
    fn reset(&mut self, seed: u64) {
        self.episode += 1;
        self.oracle.reset(seed);
    }
    fn act(&mut self, obs: &Observation) -> Action7 {
        if self.episode % 2 == 0 {
            Action7::new([0.0; 3], 1.0)
        } else {
            self.oracle.act(obs)
        }
    }
}

fn quick_backoff() -> Backoff {
    Backoff { initial: std::time::Duration::from_millis(10), max_attempts: Some(3), ..Backoff::default() }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["meta", "data"] {
        let mut entries: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn network_recording_matches_in_process() {
    let p = plan();
    let local = tempfile::tempdir().unwrap();
    record_in_process(&p, local.path(), 6, &mut OraclePolicy::new(&p.env.workspace)).unwrap();

    let (addr, _server) = spawn_server(1000, false);
    let remote = tempfile::tempdir().unwrap();
    let stored = client_record(addr.as_str(), remote.path(), &p.env, &p.task, 6, &quick_backoff()).unwrap();
    assert_eq!(stored, 6);
    assert_eq!(dir_bytes(local.path()), dir_bytes(remote.path()));
}

#[test]
fn budget_limits_served_episodes() {
    let p = plan();
    let (addr, server) = spawn_server(5, false);
    let dir = tempfile::tempdir().unwrap();
    let stored = client_record(addr.as_str(), dir.path(), &p.env, &p.task, 100, &quick_backoff()).unwrap();
    assert_eq!(stored, 5);
    assert_eq!(server.join().unwrap(), 5);
}

#[test]
fn failures_are_filtered() {
    let p = plan();
    let (addr, server) = spawn_server(10, true);
    let dir = tempfile::tempdir().unwrap();
    let stored = client_record(addr.as_str(), dir.path(), &p.env, &p.task, 5, &quick_backoff()).unwrap();
    assert_eq!(stored, 5);
    assert_eq!(server.join().unwrap(), 10);
    let ds = read_dataset(dir.path(), None, None).unwrap();
    assert!(ds.episodes.iter().all(|e| e.record.success));
    let sources: Vec<u64> = ds.episodes.iter().map(|e| e.record.source_index).collect();
    assert_eq!(sources, vec![0, 2, 4, 6, 8]);
}

#[test]
fn client_resume_has_no_duplicates() {
    let p = plan();
    let (addr, _server) = spawn_server(1000, false);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(client_record(addr.as_str(), dir.path(), &p.env, &p.task, 3, &quick_backoff()).unwrap(), 3);
    assert_eq!(client_record(addr.as_str(), dir.path(), &p.env, &p.task, 5, &quick_backoff()).unwrap(), 5);
    let ds = read_dataset(dir.path(), None, None).unwrap();
    let mut seeds: Vec<u64> = ds.episodes.iter().map(|e| e.record.placement_seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), 5);

    let local = tempfile::tempdir().unwrap();
    record_in_process(&p, local.path(), 5, &mut OraclePolicy::new(&p.env.workspace)).unwrap();
    assert_eq!(dir_bytes(local.path()), dir_bytes(dir.path()));
}

#[test]
fn stale_config_is_refused() {
    let p = plan();
    let (addr, _server) = spawn_server(1000, false);
    let mut env = p.env.clone();
    env.workspace.translation_clamp = 0.03;
    let dir = tempfile::tempdir().unwrap();
    assert!(client_record(addr.as_str(), dir.path(), &env, &p.task, 2, &quick_backoff()).is_err());
}

#[test]
fn mid_episode_disconnect_keeps_server_alive() {
    let p = plan();
    let (addr, _server) = spawn_server(1000, false);
    {
        let mut s = TcpStream::connect(addr.as_str()).unwrap();
        let hello = Message::Hello { protocol_version: PROTOCOL_VERSION, env_config_hash: p.env.hash(), resume_from: None };
        protocol::write_message(&mut s, &hello).unwrap();
        for _ in 0..5 {
            protocol::read_message(&mut s).unwrap().unwrap();
        }
    }
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(client_record(addr.as_str(), dir.path(), &p.env, &p.task, 2, &quick_backoff()).unwrap(), 2);
    let ds = read_dataset(dir.path(), None, None).unwrap();
    assert!(ds.episodes.iter().all(|e| e.frames.len() == e.record.frame_count as usize));
}

#[test]
fn unreachable_server_gives_up_after_retries() {
    let addr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().to_string()
    };
    let p = plan();
    let dir = tempfile::tempdir().unwrap();
    assert!(client_record(addr.as_str(), dir.path(), &p.env, &p.task, 1, &quick_backoff()).is_err());
}
