//! Cluster-head multiplexer.
//!
//! Clients see `sensors/`, `aggrData/` and `groups/`. Device directories
//! are served from the static trees learned at discovery; only reads and
//! writes of device files travel to the device, each as a chain of tagged
//! calls whose continuations run when the reply (or a timeout) arrives.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::devicefs::{format_values, Control};
use crate::fscore::{dir_chunk, encode_dir, permitted, slice_at, FidTable, FsError, NodeId, Tree, UserDb, ROOT};
use crate::simnet::scenario::SensorKind;
use crate::simnet::{Ctx, DutyCycle, EndpointId, HandlerResult, Power, Process};
use crate::wire::{self, Body, Message, OpenMode, Qid, Stat, IOUNIT, NOTAG};

pub const MAX_PENDING: usize = 32;
pub const MUX_MAX_FIDS: usize = 256;
pub const MUX_MAX_SESSIONS: usize = 64;
pub const MUX_UNAME: &str = "mux";

/// Aggregation function over member values.
pub type AggFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct Registry {
    fns: BTreeMap<String, AggFn>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.fns.keys()).finish()
    }
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Registry { fns: BTreeMap::new() };
        r.register("avg", |v| vec![v.iter().sum::<f64>() / v.len() as f64]);
        r.register("min", |v| vec![v.iter().copied().fold(f64::INFINITY, f64::min)]);
        r.register("max", |v| vec![v.iter().copied().fold(f64::NEG_INFINITY, f64::max)]);
        r
    }
}

impl Registry {
    /// Adds or replaces `name`.
    pub fn register(&mut self, name: &str, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) {
        assert!(!name.is_empty(), "aggregation name must be nonempty");
        self.fns.insert(name.to_string(), Arc::new(f));
    }

    pub fn get(&self, name: &str) -> Option<AggFn> {
        self.fns.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fns.keys().map(String::as_str)
    }
}

/// Applies `f` per component across members; members whose component
/// count differs from the first are ignored.
pub fn apply_aggregate(f: &AggFn, members: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = members.first() else {
        return Vec::new();
    };
    let n = first.len();
    let rows: Vec<&Vec<f64>> = members.iter().filter(|m| m.len() == n).collect();
    (0..n)
        .flat_map(|c| {
            let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            f(&col)
        })
        .collect()
}

pub fn parse_values(bytes: &[u8]) -> Option<Vec<f64>> {
    let text = std::str::from_utf8(bytes).ok()?;
    let line = text.lines().next()?;
    line.split_whitespace().map(|t| t.parse().ok()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub name: String,
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSpec {
    pub name: String,
    pub kind: Option<SensorKind>,
    pub tag: Option<(String, String)>,
    /// Fixed membership instead of a predicate.
    pub members: Option<Vec<String>>,
    pub source: String,
    pub func: String,
}

#[derive(Debug, Clone)]
pub struct Member {
    pub id: String,
    pub endpoint: EndpointId,
    pub duty: Option<DutyCycle>,
    /// Base one-way latency to the device.
    pub latency: u64,
    pub timeout: u64,
}

impl Member {
    /// Five times the mean link latency, at least five ticks.
    pub fn timeout_for(mean_latency: f64) -> u64 {
        ((5.0 * mean_latency).ceil() as u64).max(5)
    }
}

#[derive(Clone)]
pub struct MuxConfig {
    pub cluster: String,
    pub qid_base: u64,
    pub users: UserDb,
    pub ttl: u64,
    pub reprobe: u64,
    pub members: Vec<Member>,
    pub groups: Vec<GroupSpec>,
    pub aggregates: Vec<AggregateSpec>,
    pub registry: Registry,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CallError {
    Remote(String),
    Timeout,
    Asleep,
    Busy,
}

impl CallError {
    pub fn ename(&self) -> String {
        match self {
            CallError::Remote(e) => e.clone(),
            CallError::Timeout | CallError::Asleep => "device unreachable".into(),
            CallError::Busy => "busy".into(),
        }
    }

    /// Whether a cached value may stand in for the device.
    fn unreachable(&self) -> bool {
        matches!(self, CallError::Timeout | CallError::Asleep)
    }
}

type CallResult = Result<Body, CallError>;
type Cont = Box<dyn for<'c> FnOnce(&mut Mux, &mut Ctx<'c>, CallResult) -> HandlerResult + Send>;
type FidCont = Box<dyn for<'c> FnOnce(&mut Mux, &mut Ctx<'c>, Result<u32, CallError>) -> HandlerResult + Send>;

fn unexpected() -> CallError {
    CallError::Remote("unexpected reply".into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub value: Vec<u8>,
    pub stamp: u64,
}

struct Device {
    id: String,
    ep: EndpointId,
    duty: Option<DutyCycle>,
    latency: u64,
    timeout: u64,
    discovered: bool,
    probing: bool,
    root: Option<Stat>,
    files: Vec<Stat>,
    kind: Option<SensorKind>,
    tags: Vec<(String, String)>,
    attach: BTreeMap<String, u32>,
    internal: BTreeMap<String, u32>,
    next_fid: u32,
    next_tag: u16,
    pending: BTreeMap<u16, u64>,
    forced: Option<Power>,
    deferred_clunks: Vec<u32>,
    poll_period: u64,
    poll_gen: u64,
}

impl Device {
    fn alloc_fid(&mut self) -> u32 {
        let f = self.next_fid;
        self.next_fid = self.next_fid.wrapping_add(1);
        f
    }

    fn alloc_tag(&mut self) -> u16 {
        loop {
            let t = self.next_tag;
            self.next_tag = self.next_tag.wrapping_add(1);
            if t != NOTAG && !self.pending.contains_key(&t) {
                return t;
            }
        }
    }

    fn file_index(&self, name: &str) -> Option<usize> {
        self.files.iter().position(|s| s.name == name)
    }

    fn matches(&self, key: &str, value: &str) -> bool {
        self.tags.iter().any(|(k, v)| k == key && v == value)
    }

    /// Root stat renamed to the device id.
    fn dir_stat(&self) -> Stat {
        let mut s = self.root.clone().expect("discovered device has a root stat");
        s.name = self.id.clone();
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LocalFile {
    Aggregate(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MNode {
    Local(NodeId),
    Dev(usize, Option<usize>),
}

#[derive(Debug, Clone)]
struct MFid {
    serial: u64,
    uname: String,
    path: Vec<MNode>,
    open: Option<OpenMode>,
    dir_next: u64,
    dfid: Option<u32>,
    content: Option<Vec<u8>>,
}

impl MFid {
    fn node(&self) -> MNode {
        *self.path.last().expect("path always holds the root")
    }
}

struct AggJob {
    client: EndpointId,
    tag: u16,
    fid: u32,
    serial: u64,
    func: AggFn,
    selected: usize,
    values: BTreeMap<usize, Vec<f64>>,
    outstanding: usize,
}

struct Task {
    name: String,
    members: Vec<usize>,
    func: String,
    period: u64,
    gen: u64,
}

const K_CALL: u64 = 1;
const K_PROBE: u64 = 2;
const K_POLL: u64 = 3;
const K_TASK: u64 = 4;

fn token(kind: u64, a: u64, b: u64) -> u64 {
    (kind << 60) | ((a & 0xFFFF) << 40) | (b & 0xFF_FFFF_FFFF)
}

fn untoken(t: u64) -> (u64, u64, u64) {
    (t >> 60, (t >> 40) & 0xFFFF, t & 0xFF_FFFF_FFFF)
}

pub struct Mux {
    cluster: String,
    users: UserDb,
    ttl: u64,
    reprobe: u64,
    tree: Tree<LocalFile>,
    sensors_dir: NodeId,
    aggr_dir: NodeId,
    group_dirs: BTreeMap<NodeId, usize>,
    groups: Vec<GroupSpec>,
    aggregates: Vec<AggregateSpec>,
    registry: Registry,
    devices: Vec<Device>,
    by_ep: BTreeMap<EndpointId, usize>,
    sessions: BTreeMap<EndpointId, FidTable<MFid>>,
    calls: BTreeMap<u64, (usize, u16, Cont)>,
    next_call: u64,
    next_serial: u64,
    cache: BTreeMap<(usize, String), CacheEntry>,
    aggs: BTreeMap<u64, AggJob>,
    next_agg: u64,
    tasks: Vec<Task>,
    reprobe_scheduled: bool,
}

impl Mux {
    pub fn new(cfg: MuxConfig) -> Self {
        let mut tree = Tree::new(cfg.qid_base, MUX_UNAME, MUX_UNAME, 0o555);
        let sensors_dir = tree.add_dir(ROOT, "sensors", 0o555, MUX_UNAME, MUX_UNAME).expect("fixed name");
        let aggr_dir = tree.add_dir(ROOT, "aggrData", 0o555, MUX_UNAME, MUX_UNAME).expect("fixed name");
        let groups_dir = tree.add_dir(ROOT, "groups", 0o555, MUX_UNAME, MUX_UNAME).expect("fixed name");
        let mut group_dirs = BTreeMap::new();
        for (i, g) in cfg.groups.iter().enumerate() {
            if let Ok(n) = tree.add_dir(groups_dir, &g.name, 0o555, MUX_UNAME, MUX_UNAME) {
                group_dirs.insert(n, i);
            }
        }
        for (i, a) in cfg.aggregates.iter().enumerate() {
            let _ = tree.add_file(aggr_dir, &a.name, 0o444, MUX_UNAME, MUX_UNAME, LocalFile::Aggregate(i));
        }
        let devices: Vec<Device> = cfg
            .members
            .iter()
            .map(|m| Device {
                id: m.id.clone(),
                ep: m.endpoint,
                duty: m.duty,
                latency: m.latency,
                timeout: m.timeout,
                discovered: false,
                probing: false,
                root: None,
                files: Vec::new(),
                kind: None,
                tags: Vec::new(),
                attach: BTreeMap::new(),
                internal: BTreeMap::new(),
                next_fid: 1,
                next_tag: 1,
                pending: BTreeMap::new(),
                forced: None,
                deferred_clunks: Vec::new(),
                poll_period: 0,
                poll_gen: 0,
            })
            .collect();
        let by_ep = devices.iter().enumerate().map(|(i, d)| (d.ep, i)).collect();
        Mux {
            cluster: cfg.cluster,
            users: cfg.users,
            ttl: cfg.ttl,
            reprobe: cfg.reprobe,
            tree,
            sensors_dir,
            aggr_dir,
            group_dirs,
            groups: cfg.groups,
            aggregates: cfg.aggregates,
            registry: cfg.registry,
            devices,
            by_ep,
            sessions: BTreeMap::new(),
            calls: BTreeMap::new(),
            next_call: 1,
            next_serial: 1,
            cache: BTreeMap::new(),
            aggs: BTreeMap::new(),
            next_agg: 1,
            tasks: Vec::new(),
            reprobe_scheduled: false,
        }
    }

    pub fn cluster(&self) -> &str {
        &self.cluster
    }

    pub fn ttl(&self) -> u64 {
        self.ttl
    }

    /// Timer `(delay, token)` that starts discovery.
    pub fn startup_timer(&mut self) -> (u64, u64) {
        self.reprobe_scheduled = true;
        (0, token(K_PROBE, 0, 0))
    }

    pub fn discovered(&self) -> Vec<&str> {
        self.devices
            .iter()
            .filter(|d| d.discovered)
            .map(|d| d.id.as_str())
            .collect()
    }

    pub fn is_probing(&self) -> bool {
        self.devices.iter().any(|d| d.probing)
    }

    pub fn members(&self) -> Vec<&str> {
        self.devices.iter().map(|d| d.id.as_str()).collect()
    }

    pub fn pending_calls(&self) -> usize {
        self.calls.len()
    }

    pub fn cache_entry(&self, device: &str, file: &str) -> Option<&CacheEntry> {
        let d = self.device_index(device)?;
        self.cache.get(&(d, file.to_string()))
    }

    pub fn device_tags(&self, device: &str) -> Option<&[(String, String)]> {
        self.device_index(device).map(|d| self.devices[d].tags.as_slice())
    }

    pub fn registry_mut(&mut self) -> &mut Registry {
        &mut self.registry
    }

    pub fn register_aggregation(&mut self, name: &str, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) {
        self.registry.register(name, f);
    }

    pub fn add_aggregate(&mut self, spec: AggregateSpec) -> Result<(), FsError> {
        let idx = self.aggregates.len();
        self.tree
            .add_file(self.aggr_dir, &spec.name, 0o444, MUX_UNAME, MUX_UNAME, LocalFile::Aggregate(idx))?;
        self.aggregates.push(spec);
        Ok(())
    }

    /// Updates the expected latency to a device (and its call timeout).
    pub fn set_device_latency(&mut self, device: &str, latency: u64, mean: f64) -> Result<(), String> {
        let d = self
            .device_index(device)
            .ok_or_else(|| format!("unknown device {device}"))?;
        self.devices[d].latency = latency;
        self.devices[d].timeout = Member::timeout_for(mean);
        Ok(())
    }

    fn device_index(&self, id: &str) -> Option<usize> {
        self.devices.iter().position(|d| d.id == id)
    }

    /// Polls each device's reading every `period` ticks; 0 stops polling.
    /// Returns timers to schedule on this endpoint.
    pub fn set_report_rate(&mut self, ids: &[&str], period: u64) -> Result<Vec<(u64, u64)>, String> {
        let idx: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.device_index(id)
                    .filter(|&d| self.devices[d].discovered)
                    .ok_or_else(|| format!("unknown device {id}"))
            })
            .collect::<Result<_, _>>()?;
        let mut timers = Vec::new();
        for d in idx {
            let dev = &mut self.devices[d];
            dev.poll_period = period;
            dev.poll_gen += 1;
            if period > 0 {
                timers.push((period, token(K_POLL, d as u64, dev.poll_gen)));
            }
        }
        Ok(timers)
    }

    /// Adds a fixed-membership aggregate and reports it from cache every
    /// `period` ticks. Returns timers to schedule.
    pub fn install_task(&mut self, name: &str, ids: &[&str], func: &str, period: u64) -> Result<Vec<(u64, u64)>, String> {
        if self.registry.get(func).is_none() {
            return Err("no such aggregation".into());
        }
        let mut timers = self.set_report_rate(ids, period)?;
        let members: Vec<usize> = ids.iter().filter_map(|id| self.device_index(id)).collect();
        self.add_aggregate(AggregateSpec {
            name: name.to_string(),
            kind: None,
            tag: None,
            members: Some(ids.iter().map(|s| s.to_string()).collect()),
            source: "reading".into(),
            func: func.to_string(),
        })
        .map_err(|e| e.to_string())?;
        let t = self.tasks.len();
        self.tasks.push(Task {
            name: name.to_string(),
            members,
            func: func.to_string(),
            period,
            gen: 1,
        });
        if period > 0 {
            timers.push((period + 1, token(K_TASK, t as u64, 1)));
        }
        Ok(timers)
    }

    fn believed_asleep(&self, d: usize, now: u64) -> bool {
        let dev = &self.devices[d];
        match dev.forced {
            Some(p) => p == Power::Asleep,
            None => dev.duty.is_some_and(|duty| !duty.is_on(now + dev.latency)),
        }
    }

    fn fresh_cache(&self, d: usize, file: &str, now: u64) -> Option<&CacheEntry> {
        self.cache
            .get(&(d, file.to_string()))
            .filter(|e| now.saturating_sub(e.stamp) <= self.ttl)
    }

    // ---- device calls ----

    fn device_call(&mut self, ctx: &mut Ctx<'_>, d: usize, body: Body, k: Cont) -> HandlerResult {
        if self.believed_asleep(d, ctx.now()) {
            return k(self, ctx, Err(CallError::Asleep));
        }
        if !self.devices[d].deferred_clunks.is_empty() {
            let fids = std::mem::take(&mut self.devices[d].deferred_clunks);
            for fid in fids {
                self.device_call(ctx, d, Body::Tclunk { fid }, Box::new(|_, _, _| Ok(())))?;
            }
        }
        if self.devices[d].pending.len() >= MAX_PENDING {
            return k(self, ctx, Err(CallError::Busy));
        }
        let id = self.next_call;
        self.next_call += 1;
        let dev = &mut self.devices[d];
        let tag = dev.alloc_tag();
        dev.pending.insert(tag, id);
        let (ep, timeout) = (dev.ep, dev.timeout);
        self.calls.insert(id, (d, tag, k));
        ctx.send_message(ep, &Message::new(tag, body))?;
        ctx.set_timer(timeout, token(K_CALL, 0, id));
        Ok(())
    }

    fn clunk_device_fid(&mut self, ctx: &mut Ctx<'_>, d: usize, fid: u32) -> HandlerResult {
        if self.believed_asleep(d, ctx.now()) {
            self.devices[d].deferred_clunks.push(fid);
            return Ok(());
        }
        self.device_call(ctx, d, Body::Tclunk { fid }, Box::new(|_, _, _| Ok(())))
    }

    fn on_device_reply(&mut self, ctx: &mut Ctx<'_>, d: usize, msg: Message) -> HandlerResult {
        let Some(id) = self.devices[d].pending.remove(&msg.tag) else {
            ctx.log("late", Some(self.devices[d].ep), msg.to_string());
            return Ok(());
        };
        let Some((_, _, k)) = self.calls.remove(&id) else {
            return Ok(());
        };
        let r = match msg.body {
            Body::Rerror { ename } => Err(CallError::Remote(ename)),
            b => Ok(b),
        };
        k(self, ctx, r)
    }

    fn on_call_timeout(&mut self, ctx: &mut Ctx<'_>, id: u64) -> HandlerResult {
        let Some((d, tag, k)) = self.calls.remove(&id) else {
            return Ok(());
        };
        self.devices[d].pending.remove(&tag);
        ctx.log("timeout", Some(self.devices[d].ep), format!("dtag={tag}"));
        k(self, ctx, Err(CallError::Timeout))
    }

    /// Attach (once per user) then walk to `file` and open it.
    fn open_device_file(&mut self, ctx: &mut Ctx<'_>, d: usize, uname: String, file: String, mode: OpenMode, k: FidCont) -> HandlerResult {
        if let Some(&afid) = self.devices[d].attach.get(&uname) {
            return self.walk_open(ctx, d, afid, file, mode, k);
        }
        let afid = self.devices[d].alloc_fid();
        let body = Body::Tattach {
            fid: afid,
            uname: uname.clone(),
            aname: String::new(),
        };
        self.device_call(
            ctx,
            d,
            body,
            Box::new(move |m, ctx, r| match r {
                Ok(Body::Rattach { .. }) => {
                    let afid = *m.devices[d].attach.entry(uname).or_insert(afid);
                    m.walk_open(ctx, d, afid, file, mode, k)
                }
                Ok(_) => k(m, ctx, Err(unexpected())),
                Err(e) => k(m, ctx, Err(e)),
            }),
        )
    }

    fn walk_open(&mut self, ctx: &mut Ctx<'_>, d: usize, afid: u32, file: String, mode: OpenMode, k: FidCont) -> HandlerResult {
        let dfid = self.devices[d].alloc_fid();
        let body = Body::Twalk {
            fid: afid,
            newfid: dfid,
            names: vec![file],
        };
        self.device_call(
            ctx,
            d,
            body,
            Box::new(move |m, ctx, r| match r {
                Ok(Body::Rwalk { qids }) if qids.len() == 1 => m.device_call(
                    ctx,
                    d,
                    Body::Topen { fid: dfid, mode },
                    Box::new(move |m, ctx, r| match r {
                        Ok(Body::Ropen { .. }) => k(m, ctx, Ok(dfid)),
                        other => {
                            m.clunk_device_fid(ctx, d, dfid)?;
                            k(m, ctx, Err(other.err().unwrap_or_else(unexpected)))
                        }
                    }),
                ),
                Ok(Body::Rwalk { .. }) => k(m, ctx, Err(CallError::Remote("no such file".into()))),
                Ok(_) => k(m, ctx, Err(unexpected())),
                Err(e) => k(m, ctx, Err(e)),
            }),
        )
    }

    /// Read-only fid owned by the multiplexer itself.
    fn internal_fid(&mut self, ctx: &mut Ctx<'_>, d: usize, file: &str, k: FidCont) -> HandlerResult {
        if let Some(&f) = self.devices[d].internal.get(file) {
            return k(self, ctx, Ok(f));
        }
        let name = file.to_string();
        self.open_device_file(
            ctx,
            d,
            MUX_UNAME.into(),
            file.to_string(),
            OpenMode::Read,
            Box::new(move |m, ctx, r| match r {
                Ok(f) => {
                    let keep = *m.devices[d].internal.entry(name).or_insert(f);
                    if keep != f {
                        m.clunk_device_fid(ctx, d, f)?;
                    }
                    k(m, ctx, Ok(keep))
                }
                Err(e) => k(m, ctx, Err(e)),
            }),
        )
    }

    /// Reads a whole small file at offset 0 through an internal fid and
    /// refreshes the cache.
    fn fetch(&mut self, ctx: &mut Ctx<'_>, d: usize, file: &str, k: Cont) -> HandlerResult {
        let name = file.to_string();
        self.internal_fid(
            ctx,
            d,
            file,
            Box::new(move |m, ctx, r| match r {
                Ok(fid) => m.device_call(
                    ctx,
                    d,
                    Body::Tread {
                        fid,
                        offset: 0,
                        count: IOUNIT,
                    },
                    Box::new(move |m, ctx, r| {
                        if let Ok(Body::Rread { data }) = &r {
                            m.store_cache(d, &name, data.clone(), ctx.now());
                        }
                        k(m, ctx, r)
                    }),
                ),
                Err(e) => k(m, ctx, Err(e)),
            }),
        )
    }

    fn store_cache(&mut self, d: usize, file: &str, value: Vec<u8>, now: u64) {
        self.cache.insert((d, file.to_string()), CacheEntry { value, stamp: now });
    }

    // ---- discovery ----

    fn probe(&mut self, ctx: &mut Ctx<'_>, d: usize) -> HandlerResult {
        let dev = &mut self.devices[d];
        dev.probing = true;
        // A fresh probe starts from a clean slate on our side.
        dev.attach.clear();
        dev.internal.clear();
        let afid = dev.alloc_fid();
        let body = Body::Tattach {
            fid: afid,
            uname: MUX_UNAME.into(),
            aname: String::new(),
        };
        self.device_call(
            ctx,
            d,
            body,
            Box::new(move |m, ctx, r| match r {
                Ok(Body::Rattach { .. }) => {
                    m.devices[d].attach.insert(MUX_UNAME.into(), afid);
                    m.device_call(
                        ctx,
                        d,
                        Body::Tstat { fid: afid },
                        Box::new(move |m, ctx, r| match r {
                            Ok(Body::Rstat { stat }) => {
                                m.devices[d].root = Some(stat);
                                m.probe_listing(ctx, d, afid)
                            }
                            other => m.exclude(ctx, d, other.err().unwrap_or_else(unexpected)),
                        }),
                    )
                }
                other => m.exclude(ctx, d, other.err().unwrap_or_else(unexpected)),
            }),
        )
    }

    fn probe_listing(&mut self, ctx: &mut Ctx<'_>, d: usize, afid: u32) -> HandlerResult {
        let dfid = self.devices[d].alloc_fid();
        let body = Body::Twalk {
            fid: afid,
            newfid: dfid,
            names: vec![],
        };
        self.device_call(
            ctx,
            d,
            body,
            Box::new(move |m, ctx, r| {
                if let Err(e) = r {
                    return m.exclude(ctx, d, e);
                }
                m.device_call(
                    ctx,
                    d,
                    Body::Topen {
                        fid: dfid,
                        mode: OpenMode::Read,
                    },
                    Box::new(move |m, ctx, r| {
                        if let Err(e) = r {
                            return m.exclude(ctx, d, e);
                        }
                        m.device_call(
                            ctx,
                            d,
                            Body::Tread {
                                fid: dfid,
                                offset: 0,
                                count: IOUNIT,
                            },
                            Box::new(move |m, ctx, r| {
                                m.clunk_device_fid(ctx, d, dfid)?;
                                let stats = match r {
                                    Ok(Body::Rread { data }) => crate::fscore::decode_dir(&data).map_err(|e| CallError::Remote(e.to_string())),
                                    Ok(_) => Err(unexpected()),
                                    Err(e) => Err(e),
                                };
                                match stats {
                                    Ok(stats) => {
                                        m.devices[d].files = stats;
                                        m.probe_info(ctx, d)
                                    }
                                    Err(e) => m.exclude(ctx, d, e),
                                }
                            }),
                        )
                    }),
                )
            }),
        )
    }

    fn probe_info(&mut self, ctx: &mut Ctx<'_>, d: usize) -> HandlerResult {
        self.fetch(
            ctx,
            d,
            "info",
            Box::new(move |m, ctx, r| match r {
                Ok(Body::Rread { data }) => {
                    let text = String::from_utf8_lossy(&data);
                    let dev = &mut m.devices[d];
                    dev.tags.clear();
                    for line in text.lines() {
                        let (k, v) = line.split_once(' ').unwrap_or((line, ""));
                        match k {
                            "id" | "position" => {}
                            "kind" => dev.kind = SensorKind::parse(v),
                            _ => dev.tags.push((k.to_string(), v.to_string())),
                        }
                    }
                    dev.discovered = true;
                    dev.probing = false;
                    let ep = dev.ep;
                    let detail = format!("{} files={}", dev.id, dev.files.len());
                    ctx.log("discover", Some(ep), detail);
                    Ok(())
                }
                other => m.exclude(ctx, d, other.err().unwrap_or_else(unexpected)),
            }),
        )
    }

    fn exclude(&mut self, ctx: &mut Ctx<'_>, d: usize, e: CallError) -> HandlerResult {
        let dev = &mut self.devices[d];
        dev.probing = false;
        dev.discovered = false;
        let ep = dev.ep;
        let detail = format!("{} {}", dev.id, e.ename());
        ctx.log("exclude", Some(ep), detail);
        Ok(())
    }

    fn on_probe_timer(&mut self, ctx: &mut Ctx<'_>) -> HandlerResult {
        self.reprobe_scheduled = false;
        for d in 0..self.devices.len() {
            if !self.devices[d].discovered && !self.devices[d].probing {
                self.probe(ctx, d)?;
            }
        }
        if self.reprobe > 0 && self.devices.iter().any(|d| !d.discovered) {
            self.reprobe_scheduled = true;
            ctx.set_timer(self.reprobe, token(K_PROBE, 0, 0));
        }
        Ok(())
    }

    // ---- polling and tasks ----

    fn on_poll_timer(&mut self, ctx: &mut Ctx<'_>, d: usize, gen: u64) -> HandlerResult {
        let dev = &self.devices[d];
        if dev.poll_gen != gen || dev.poll_period == 0 {
            return Ok(());
        }
        ctx.set_timer(dev.poll_period, token(K_POLL, d as u64, gen));
        let detail = dev.id.clone();
        ctx.log("poll", Some(dev.ep), detail);
        self.fetch(ctx, d, "reading", Box::new(|_, _, _| Ok(())))
    }

    fn on_task_timer(&mut self, ctx: &mut Ctx<'_>, t: usize, gen: u64) -> HandlerResult {
        let Some(task) = self.tasks.get(t) else {
            return Ok(());
        };
        if task.gen != gen || task.period == 0 {
            return Ok(());
        }
        ctx.set_timer(task.period, token(K_TASK, t as u64, gen));
        let now = ctx.now();
        let values: Vec<Vec<f64>> = task
            .members
            .iter()
            .filter_map(|&d| self.fresh_cache(d, "reading", now))
            .filter_map(|e| parse_values(&e.value))
            .collect();
        let detail = match self.registry.get(&task.func) {
            Some(f) if !values.is_empty() => {
                let out = format_values(&apply_aggregate(&f, &values));
                format!("{} {} n={}/{}", task.name, out.trim_end(), values.len(), task.members.len())
            }
            _ => format!("{} none n=0/{}", task.name, task.members.len()),
        };
        ctx.log("report", None, detail);
        Ok(())
    }

    // ---- client side ----

    fn qid_of(&self, n: MNode) -> Qid {
        match n {
            MNode::Local(id) => self.tree.node(id).qid,
            MNode::Dev(d, None) => self.devices[d].dir_stat().qid,
            MNode::Dev(d, Some(i)) => self.devices[d].files[i].qid,
        }
    }

    fn stat_of(&self, n: MNode) -> Stat {
        match n {
            MNode::Local(id) => self.tree.stat(id, 0),
            MNode::Dev(d, None) => self.devices[d].dir_stat(),
            MNode::Dev(d, Some(i)) => self.devices[d].files[i].clone(),
        }
    }

    fn is_dir(&self, n: MNode) -> bool {
        match n {
            MNode::Local(id) => self.tree.node(id).is_dir(),
            MNode::Dev(_, f) => f.is_none(),
        }
    }

    fn group_members(&self, g: usize) -> impl Iterator<Item = usize> + '_ {
        let spec = &self.groups[g];
        self.devices
            .iter()
            .enumerate()
            .filter(move |(_, d)| d.discovered && d.matches(&spec.key, &spec.value))
            .map(|(i, _)| i)
    }

    fn listing(&self, n: MNode) -> Vec<Stat> {
        match n {
            MNode::Local(id) if id == self.sensors_dir => self
                .devices
                .iter()
                .filter(|d| d.discovered)
                .map(Device::dir_stat)
                .collect(),
            MNode::Local(id) => match self.group_dirs.get(&id) {
                Some(&g) => self.group_members(g).map(|d| self.devices[d].dir_stat()).collect(),
                None => self.tree.children(id).iter().map(|&c| self.tree.stat(c, 0)).collect(),
            },
            MNode::Dev(d, None) => self.devices[d].files.clone(),
            MNode::Dev(_, Some(_)) => Vec::new(),
        }
    }

    fn step(&self, n: MNode, name: &str) -> Option<MNode> {
        match n {
            MNode::Local(id) if id == self.sensors_dir => self
                .devices
                .iter()
                .position(|d| d.discovered && d.id == name)
                .map(|d| MNode::Dev(d, None)),
            MNode::Local(id) => match self.group_dirs.get(&id) {
                Some(&g) => self
                    .group_members(g)
                    .find(|&d| self.devices[d].id == name)
                    .map(|d| MNode::Dev(d, None)),
                None => {
                    if !self.tree.node(id).is_dir() {
                        return None;
                    }
                    self.tree
                        .children(id)
                        .iter()
                        .find(|&&c| self.tree.node(c).name == name)
                        .map(|&c| MNode::Local(c))
                }
            },
            MNode::Dev(d, None) => self.devices[d].file_index(name).map(|i| MNode::Dev(d, Some(i))),
            MNode::Dev(_, Some(_)) => None,
        }
    }

    fn path_string(&self, path: &[MNode]) -> String {
        let mut parts = Vec::new();
        for &n in &path[1..] {
            parts.push(match n {
                MNode::Local(id) => self.tree.node(id).name.clone(),
                MNode::Dev(d, None) => self.devices[d].id.clone(),
                MNode::Dev(d, Some(i)) => self.devices[d].files[i].name.clone(),
            });
        }
        parts.join("/")
    }

    fn fid_mut(&mut self, client: EndpointId, fid: u32, serial: u64) -> Option<&mut MFid> {
        self.sessions
            .get_mut(&client)?
            .get_mut(fid)
            .ok()
            .filter(|f| f.serial == serial)
    }

    fn reply(ctx: &mut Ctx<'_>, client: EndpointId, tag: u16, body: Body) -> HandlerResult {
        ctx.send_message(client, &Message::new(tag, body))
    }

    fn reply_err(ctx: &mut Ctx<'_>, client: EndpointId, tag: u16, e: impl fmt::Display) -> HandlerResult {
        ctx.send_message(client, &Message::error(tag, e.to_string()))
    }

    fn on_client(&mut self, ctx: &mut Ctx<'_>, client: EndpointId, msg: Message) -> HandlerResult {
        if !msg.body.is_request() {
            return Self::reply_err(ctx, client, msg.tag, FsError::BadMessage);
        }
        let tag = msg.tag;
        let r = match msg.body {
            Body::Tattach { fid, uname, aname } => self.attach(client, fid, uname, &aname),
            Body::Twalk { fid, newfid, names } => self.walk(client, fid, newfid, &names),
            Body::Topen { fid, mode } => self.open(client, fid, mode),
            Body::Tstat { fid } => self.fids(client).and_then(|t| t.get(fid).map(MFid::node)).map(|n| Body::Rstat { stat: self.stat_of(n) }),
            Body::Tclunk { fid } => return self.clunk(ctx, client, tag, fid),
            Body::Tread { fid, offset, count } => return self.read(ctx, client, tag, fid, offset, count),
            Body::Twrite { fid, offset, data } => return self.write(ctx, client, tag, fid, offset, data),
            _ => Err(FsError::BadMessage),
        };
        match r {
            Ok(b) => Self::reply(ctx, client, tag, b),
            Err(e) => Self::reply_err(ctx, client, tag, e),
        }
    }

    fn fids(&mut self, client: EndpointId) -> Result<&mut FidTable<MFid>, FsError> {
        self.sessions.get_mut(&client).ok_or(FsError::UnknownFid)
    }

    fn attach(&mut self, client: EndpointId, fid: u32, uname: String, aname: &str) -> Result<Body, FsError> {
        if !(aname.is_empty() || aname == "/") {
            return Err(FsError::NoSuchTree);
        }
        if !self.sessions.contains_key(&client) {
            if self.sessions.len() >= MUX_MAX_SESSIONS {
                return Err(FsError::TooManySessions);
            }
            self.sessions.insert(client, FidTable::new(MUX_MAX_FIDS));
        }
        let serial = self.next_serial;
        self.next_serial += 1;
        self.fids(client)?.insert(
            fid,
            MFid {
                serial,
                uname,
                path: vec![MNode::Local(ROOT)],
                open: None,
                dir_next: 0,
                dfid: None,
                content: None,
            },
        )?;
        Ok(Body::Rattach {
            qid: self.tree.node(ROOT).qid,
        })
    }

    fn walk(&mut self, client: EndpointId, fid: u32, newfid: u32, names: &[String]) -> Result<Body, FsError> {
        let table = self.fids(client)?;
        let start = table.get(fid)?.clone();
        if start.open.is_some() {
            return Err(FsError::WalkOpenFid);
        }
        if newfid != fid && table.contains(newfid) {
            return Err(FsError::FidInUse);
        }
        let mut path = start.path.clone();
        let mut qids = Vec::new();
        for name in names {
            let cur = *path.last().expect("nonempty");
            let next = if name == ".." {
                if path.len() > 1 {
                    path.pop();
                }
                Some(*path.last().expect("nonempty"))
            } else if !self.is_dir(cur) {
                None
            } else {
                self.step(cur, name).inspect(|&n| path.push(n))
            };
            match next {
                Some(n) => qids.push(self.qid_of(n)),
                None => break,
            }
        }
        if qids.len() < names.len() {
            if qids.is_empty() {
                return Err(FsError::NoSuchFile);
            }
            return Ok(Body::Rwalk { qids });
        }
        let serial = self.next_serial;
        self.next_serial += 1;
        let state = MFid {
            serial,
            uname: start.uname,
            path,
            open: None,
            dir_next: 0,
            dfid: None,
            content: None,
        };
        let table = self.fids(client)?;
        if newfid == fid {
            table.replace(fid, state)?;
        } else {
            table.insert(newfid, state)?;
        }
        Ok(Body::Rwalk { qids })
    }

    fn open(&mut self, client: EndpointId, fid: u32, mode: OpenMode) -> Result<Body, FsError> {
        let f = self.fids(client)?.get(fid)?.clone();
        if f.open.is_some() {
            return Err(FsError::AlreadyOpen);
        }
        let n = f.node();
        if self.is_dir(n) && mode.writes() {
            return Err(FsError::IsDirectory);
        }
        let st = self.stat_of(n);
        if !permitted(st.mode, &st.owner, &st.group, &self.users, &f.uname, mode) {
            return Err(FsError::PermissionDenied);
        }
        let slot = self.fids(client)?.get_mut(fid)?;
        slot.open = Some(mode);
        slot.dir_next = 0;
        Ok(Body::Ropen { qid: st.qid, iounit: IOUNIT })
    }

    fn clunk(&mut self, ctx: &mut Ctx<'_>, client: EndpointId, tag: u16, fid: u32) -> HandlerResult {
        let f = match self.fids(client).and_then(|t| t.remove(fid)) {
            Ok(f) => f,
            Err(e) => return Self::reply_err(ctx, client, tag, e),
        };
        Self::reply(ctx, client, tag, Body::Rclunk)?;
        if let (MNode::Dev(d, Some(_)), Some(dfid)) = (f.node(), f.dfid) {
            self.clunk_device_fid(ctx, d, dfid)?;
        }
        Ok(())
    }

    fn read(&mut self, ctx: &mut Ctx<'_>, client: EndpointId, tag: u16, fid: u32, offset: u64, count: u32) -> HandlerResult {
        let f = match self.fids(client).and_then(|t| t.get(fid).cloned()) {
            Ok(f) => f,
            Err(e) => return Self::reply_err(ctx, client, tag, e),
        };
        if !f.open.is_some_and(OpenMode::reads) {
            return Self::reply_err(ctx, client, tag, FsError::NotOpen("reading"));
        }
        let count = count.min(IOUNIT);
        let n = f.node();
        let path = self.path_string(&f.path);
        if self.is_dir(n) {
            ctx.log("route", None, format!("Tread tag={tag} fid={fid} path={path} via=local"));
            if offset != 0 && offset != f.dir_next {
                return Self::reply_err(ctx, client, tag, FsError::BadDirOffset);
            }
            let listing = encode_dir(&self.listing(n)).and_then(|l| dir_chunk(&l, offset, count));
            return match listing {
                Ok(chunk) => {
                    if let Ok(slot) = self.fids(client).and_then(|t| t.get_mut(fid)) {
                        slot.dir_next = offset + chunk.len() as u64;
                    }
                    Self::reply(ctx, client, tag, Body::Rread { data: chunk })
                }
                Err(e) => Self::reply_err(ctx, client, tag, e),
            };
        }
        match n {
            MNode::Local(id) => {
                ctx.log("route", None, format!("Tread tag={tag} fid={fid} path={path} via=local"));
                let crate::fscore::NodeKind::File(LocalFile::Aggregate(a)) = self.tree.node(id).kind else {
                    return Self::reply_err(ctx, client, tag, FsError::NoSuchFile);
                };
                if offset > 0 {
                    let data = f.content.as_deref().map(|c| slice_at(c, offset, count)).unwrap_or_default();
                    return Self::reply(ctx, client, tag, Body::Rread { data });
                }
                self.start_aggregate(ctx, client, tag, fid, f.serial, a)
            }
            MNode::Dev(d, Some(i)) => {
                let file = self.devices[d].files[i].name.clone();
                self.remote_read(ctx, client, tag, fid, f, d, file, path, offset, count)
            }
            MNode::Dev(_, None) => unreachable!("directories handled above"),
        }
    }

    fn serve_cached(&mut self, ctx: &mut Ctx<'_>, client: EndpointId, tag: u16, fid: u32, d: usize, file: &str, path: &str, offset: u64, count: u32, err: CallError) -> HandlerResult {
        let now = ctx.now();
        match self.fresh_cache(d, file, now) {
            Some(e) if err.unreachable() => {
                let age = now - e.stamp;
                let data = slice_at(&e.value, offset, count);
                ctx.log("cached", None, format!("Tread tag={tag} fid={fid} path={path} age={age}"));
                Self::reply(ctx, client, tag, Body::Rread { data })
            }
            _ => Self::reply_err(ctx, client, tag, err.ename()),
        }
    }

    /// Makes sure the client fid has its own device fid, opening one if
    /// needed, then continues with it.
    fn ensure_dfid(&mut self, ctx: &mut Ctx<'_>, client: EndpointId, fid: u32, f: &MFid, d: usize, file: String, k: FidCont) -> HandlerResult {
        if let Some(dfid) = f.dfid {
            return k(self, ctx, Ok(dfid));
        }
        let serial = f.serial;
        let mode = f.open.expect("fid is open");
        self.open_device_file(
            ctx,
            d,
            f.uname.clone(),
            file,
            mode,
            Box::new(move |m, ctx, r| {
                let dfid = match r {
                    Ok(x) => x,
                    Err(e) => return k(m, ctx, Err(e)),
                };
                match m.fid_mut(client, fid, serial) {
                    Some(slot) => match slot.dfid {
                        Some(existing) => {
                            m.clunk_device_fid(ctx, d, dfid)?;
                            k(m, ctx, Ok(existing))
                        }
                        None => {
                            slot.dfid = Some(dfid);
                            k(m, ctx, Ok(dfid))
                        }
                    },
                    None => {
                        // Client clunked while we were opening.
                        m.clunk_device_fid(ctx, d, dfid)?;
                        k(m, ctx, Err(CallError::Remote("unknown fid".into())))
                    }
                }
            }),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn remote_read(&mut self, ctx: &mut Ctx<'_>, client: EndpointId, tag: u16, fid: u32, f: MFid, d: usize, file: String, path: String, offset: u64, count: u32) -> HandlerResult {
        if self.believed_asleep(d, ctx.now()) {
            return self.serve_cached(ctx, client, tag, fid, d, &file, &path, offset, count, CallError::Asleep);
        }
        let ep = self.devices[d].ep;
        ctx.log("route", Some(ep), format!("Tread tag={tag} fid={fid} path={path} via={}", self.devices[d].id));
        let file2 = file.clone();
        self.ensure_dfid(
            ctx,
            client,
            fid,
            &f,
            d,
            file.clone(),
            Box::new(move |m, ctx, r| {
                let dfid = match r {
                    Ok(x) => x,
                    Err(e) => return m.serve_cached(ctx, client, tag, fid, d, &file2, &path, offset, count, e),
                };
                ctx.log("forward", Some(ep), format!("Tread tag={tag} fid={fid} path={path} dfid={dfid}"));
                m.device_call(
                    ctx,
                    d,
                    Body::Tread { fid: dfid, offset, count },
                    Box::new(move |m, ctx, r| match r {
                        Ok(Body::Rread { data }) => {
                            if offset == 0 {
                                m.store_cache(d, &file2, data.clone(), ctx.now());
                            }
                            Self::reply(ctx, client, tag, Body::Rread { data })
                        }
                        Ok(_) => Self::reply_err(ctx, client, tag, unexpected().ename()),
                        Err(e) => m.serve_cached(ctx, client, tag, fid, d, &file2, &path, offset, count, e),
                    }),
                )
            }),
        )
    }

    fn write(&mut self, ctx: &mut Ctx<'_>, client: EndpointId, tag: u16, fid: u32, offset: u64, data: Vec<u8>) -> HandlerResult {
        let f = match self.fids(client).and_then(|t| t.get(fid).cloned()) {
            Ok(f) => f,
            Err(e) => return Self::reply_err(ctx, client, tag, e),
        };
        if !f.open.is_some_and(OpenMode::writes) {
            return Self::reply_err(ctx, client, tag, FsError::NotOpen("writing"));
        }
        let MNode::Dev(d, Some(i)) = f.node() else {
            return Self::reply_err(ctx, client, tag, FsError::NotWritable);
        };
        let file = self.devices[d].files[i].name.clone();
        let path = self.path_string(&f.path);
        let ep = self.devices[d].ep;
        let control = if file == "control" {
            std::str::from_utf8(&data).ok().and_then(|t| Control::parse(t).ok())
        } else {
            None
        };
        if self.believed_asleep(d, ctx.now()) {
            if control != Some(Control::Wakeup) {
                return Self::reply_err(ctx, client, tag, CallError::Asleep.ename());
            }
            ctx.wake(ep);
            self.devices[d].forced = Some(Power::Awake);
        }
        ctx.log("route", Some(ep), format!("Twrite tag={tag} fid={fid} path={path} via={}", self.devices[d].id));
        self.ensure_dfid(
            ctx,
            client,
            fid,
            &f,
            d,
            file,
            Box::new(move |m, ctx, r| {
                let dfid = match r {
                    Ok(x) => x,
                    Err(e) => return Self::reply_err(ctx, client, tag, e.ename()),
                };
                ctx.log("forward", Some(ep), format!("Twrite tag={tag} fid={fid} path={path} dfid={dfid}"));
                m.device_call(
                    ctx,
                    d,
                    Body::Twrite { fid: dfid, offset, data },
                    Box::new(move |m, ctx, r| match r {
                        Ok(Body::Rwrite { count }) => {
                            if let Some(c) = control {
                                m.observe_control(d, c);
                            }
                            Self::reply(ctx, client, tag, Body::Rwrite { count })
                        }
                        Ok(_) => Self::reply_err(ctx, client, tag, unexpected().ename()),
                        Err(e) => Self::reply_err(ctx, client, tag, e.ename()),
                    }),
                )
            }),
        )
    }

    /// Mirrors an acknowledged control command in our view of the device.
    fn observe_control(&mut self, d: usize, c: Control) {
        self.cache.remove(&(d, "reading".to_string()));
        let dev = &mut self.devices[d];
        match c {
            Control::Sleep => dev.forced = Some(Power::Asleep),
            Control::Wakeup => dev.forced = Some(Power::Awake),
            Control::Tag(k, v) => match dev.tags.iter_mut().find(|(tk, _)| *tk == k) {
                Some(slot) => slot.1 = v,
                None => dev.tags.push((k, v)),
            },
            Control::Reset | Control::Calibrate(_) => {}
        }
    }

    fn aggregate_members(&self, spec: &AggregateSpec) -> Vec<usize> {
        self.devices
            .iter()
            .enumerate()
            .filter(|(_, d)| d.discovered)
            .filter(|(_, d)| match &spec.members {
                Some(ids) => ids.contains(&d.id),
                None => {
                    spec.kind.is_none_or(|k| d.kind == Some(k))
                        && spec.tag.as_ref().is_none_or(|(k, v)| d.matches(k, v))
                }
            })
            .map(|(i, _)| i)
            .collect()
    }

    fn start_aggregate(&mut self, ctx: &mut Ctx<'_>, client: EndpointId, tag: u16, fid: u32, serial: u64, a: usize) -> HandlerResult {
        let spec = self.aggregates[a].clone();
        let Some(func) = self.registry.get(&spec.func) else {
            return Self::reply_err(ctx, client, tag, "no such aggregation");
        };
        let members = self.aggregate_members(&spec);
        if members.is_empty() {
            return Self::reply_err(ctx, client, tag, "no members");
        }
        let job = self.next_agg;
        self.next_agg += 1;
        self.aggs.insert(
            job,
            AggJob {
                client,
                tag,
                fid,
                serial,
                func,
                selected: members.len(),
                values: BTreeMap::new(),
                outstanding: members.len(),
            },
        );
        for d in members {
            let source = spec.source.clone();
            self.fetch(
                ctx,
                d,
                &spec.source,
                Box::new(move |m, ctx, r| {
                    let now = ctx.now();
                    let bytes = match r {
                        Ok(Body::Rread { data }) => Some(data),
                        Err(e) if e.unreachable() => m.fresh_cache(d, &source, now).map(|c| c.value.clone()),
                        _ => None,
                    };
                    m.agg_result(ctx, job, d, bytes.as_deref().and_then(parse_values))
                }),
            )?;
        }
        Ok(())
    }

    fn agg_result(&mut self, ctx: &mut Ctx<'_>, job: u64, d: usize, v: Option<Vec<f64>>) -> HandlerResult {
        let Some(j) = self.aggs.get_mut(&job) else {
            return Ok(());
        };
        if let Some(v) = v {
            j.values.insert(d, v);
        }
        j.outstanding -= 1;
        if j.outstanding > 0 {
            return Ok(());
        }
        let j = self.aggs.remove(&job).expect("present");
        if j.values.is_empty() {
            return Self::reply_err(ctx, j.client, j.tag, "no members");
        }
        let values: Vec<Vec<f64>> = j.values.into_values().collect();
        let mut text = format_values(&apply_aggregate(&j.func, &values));
        text.push_str(&format!("# n={}/{}\n", values.len(), j.selected));
        let bytes = text.into_bytes();
        let count = IOUNIT as usize;
        let data = bytes[..bytes.len().min(count)].to_vec();
        if let Some(slot) = self.fid_mut(j.client, j.fid, j.serial) {
            slot.content = Some(bytes);
        }
        Self::reply(ctx, j.client, j.tag, Body::Rread { data })
    }
}

impl Process for Mux {
    fn on_frame(&mut self, ctx: &mut Ctx<'_>, from: EndpointId, frame: Vec<u8>) -> HandlerResult {
        let msg = match wire::decode_message(&frame) {
            Ok(m) => m,
            Err(e) => {
                ctx.log("badframe", Some(from), e.to_string());
                return Ok(());
            }
        };
        match self.by_ep.get(&from) {
            Some(&d) if !msg.body.is_request() => self.on_device_reply(ctx, d, msg),
            _ => self.on_client(ctx, from, msg),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, tok: u64) -> HandlerResult {
        let (kind, a, b) = untoken(tok);
        match kind {
            K_CALL => self.on_call_timeout(ctx, b),
            K_PROBE => self.on_probe_timer(ctx),
            K_POLL => self.on_poll_timer(ctx, a as usize, b),
            K_TASK => self.on_task_timer(ctx, a as usize, b),
            _ => Ok(()),
        }
    }
}
