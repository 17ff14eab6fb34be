#![allow(dead_code)]

use proptest::collection::vec;
use proptest::prelude::*;

use sensefs::client::{split_path, Client};
use sensefs::shell::{Shell, DISCOVERY_LIMIT};
use sensefs::wire::{Body, Message, OpenMode, Qid, QidKind, Stat, DMDIR, MAX_WALK_ELEMS, NOTAG};
use sensefs::world::World;

pub fn repo_file(rel: &str) -> String {
    let path = format!("{}/../../{rel}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn zoo_text() -> String {
    repo_file("scenarios/zoo.scn")
}

pub fn factory_text() -> String {
    repo_file("scenarios/factory.scn")
}

pub fn golden(name: &str) -> String {
    let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn world(text: &str, seed: Option<u64>) -> World {
    let mut w = World::load(text, seed).expect("scenario parses");
    w.discover(DISCOVERY_LIMIT).expect("discovery runs");
    w
}

pub fn shell(text: &str, seed: Option<u64>) -> Shell {
    Shell::from_scenario(text, seed).expect("scenario loads")
}

pub fn p(path: &str) -> Vec<String> {
    split_path(path)
}

pub fn read_text(w: &mut World, c: &mut Client, cluster: &str, path: &str) -> Result<String, String> {
    let ep = w.cluster_ep(cluster).expect("cluster");
    c.read_file(&mut w.sim, ep, &p(path))
        .map(|b| String::from_utf8(b).expect("utf-8"))
        .map_err(|e| e.to_string())
}

pub fn write_text(w: &mut World, c: &mut Client, cluster: &str, path: &str, text: &str) -> Result<u32, String> {
    let ep = w.cluster_ep(cluster).expect("cluster");
    c.write_file(&mut w.sim, ep, &p(path), 0, text.as_bytes())
        .map_err(|e| e.to_string())
}

pub fn parse_floats(line: &str) -> Vec<f64> {
    line.split_whitespace().map(|v| v.parse().expect("number")).collect()
}

// Strategies for every message variant.

pub fn arb_name() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9._-]{0,20}|\\PC{0,8}"
}

pub fn arb_qid() -> impl Strategy<Value = Qid> {
    (any::<bool>(), any::<u32>(), any::<u64>()).prop_map(|(dir, version, path)| Qid {
        kind: if dir { QidKind::Dir } else { QidKind::File },
        version,
        path,
    })
}

pub fn arb_stat() -> impl Strategy<Value = Stat> {
    (arb_name(), arb_qid(), 0u32..0o1000, any::<u64>(), arb_name(), arb_name(), any::<u64>()).prop_map(
        |(name, qid, perm, length, owner, group, mtime)| Stat {
            mode: if qid.is_dir() { perm | DMDIR } else { perm },
            name,
            qid,
            length,
            owner,
            group,
            mtime,
        },
    )
}

pub fn arb_mode() -> impl Strategy<Value = OpenMode> {
    prop_oneof![Just(OpenMode::Read), Just(OpenMode::Write), Just(OpenMode::ReadWrite)]
}

pub fn arb_data() -> impl Strategy<Value = Vec<u8>> {
    vec(any::<u8>(), 0..600)
}

pub fn arb_body() -> impl Strategy<Value = Body> {
    prop_oneof![
        (any::<u32>(), arb_name(), arb_name()).prop_map(|(fid, uname, aname)| Body::Tattach { fid, uname, aname }),
        arb_qid().prop_map(|qid| Body::Rattach { qid }),
        (any::<u32>(), any::<u32>(), vec(arb_name(), 0..=MAX_WALK_ELEMS))
            .prop_map(|(fid, newfid, names)| Body::Twalk { fid, newfid, names }),
        vec(arb_qid(), 0..=MAX_WALK_ELEMS).prop_map(|qids| Body::Rwalk { qids }),
        (any::<u32>(), arb_mode()).prop_map(|(fid, mode)| Body::Topen { fid, mode }),
        (arb_qid(), any::<u32>()).prop_map(|(qid, iounit)| Body::Ropen { qid, iounit }),
        (any::<u32>(), any::<u64>(), any::<u32>()).prop_map(|(fid, offset, count)| Body::Tread { fid, offset, count }),
        arb_data().prop_map(|data| Body::Rread { data }),
        (any::<u32>(), any::<u64>(), arb_data()).prop_map(|(fid, offset, data)| Body::Twrite { fid, offset, data }),
        any::<u32>().prop_map(|count| Body::Rwrite { count }),
        any::<u32>().prop_map(|fid| Body::Tclunk { fid }),
        Just(Body::Rclunk),
        any::<u32>().prop_map(|fid| Body::Tstat { fid }),
        arb_stat().prop_map(|stat| Body::Rstat { stat }),
        arb_name().prop_map(|ename| Body::Rerror { ename }),
    ]
}

pub fn arb_message() -> impl Strategy<Value = Message> {
    // NOTAG is reserved and never carried by a request.
    (any::<u16>(), arb_body()).prop_map(|(tag, body)| {
        let tag = if body.is_request() && tag == NOTAG { 0 } else { tag };
        Message::new(tag, body)
    })
}

/// Messages plus cut points for splitting their concatenated encoding.
pub fn arb_stream() -> impl Strategy<Value = (Vec<Message>, Vec<usize>)> {
    (vec(arb_message(), 1..6), vec(any::<usize>(), 0..12))
}

/// Chunks `bytes` at the given positions (taken modulo the length).
pub fn split_at_points(bytes: &[u8], cuts: &[usize]) -> Vec<Vec<u8>> {
    let mut points: Vec<usize> = cuts.iter().map(|c| c % (bytes.len() + 1)).collect();
    points.push(0);
    points.push(bytes.len());
    points.sort_unstable();
    points.dedup();
    points.windows(2).map(|w| bytes[w[0]..w[1]].to_vec()).collect()
}

/// Awake ticks in `[0, end)` counted one tick at a time.
pub fn awake_ticks_oracle(duty: Option<(u64, u64, u64)>, end: u64) -> u64 {
    match duty {
        None => end,
        Some((on, off, phase)) => (0..end).filter(|t| (t + phase) % (on + off) < on).count() as u64,
    }
}

/// Frames a sensor sent and received, counted from the event log.
pub fn frame_counts(log: &[String], name: &str) -> (u64, u64) {
    let mut sent = 0;
    let mut recv = 0;
    for line in log {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 4 {
            continue;
        }
        match f[1] {
            "send" if f[2] == name => sent += 1,
            "recv" if f[3] == name => recv += 1,
            _ => {}
        }
    }
    (sent, recv)
}

/// Peak resident set of this process in KiB, where the platform exposes it.
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}
