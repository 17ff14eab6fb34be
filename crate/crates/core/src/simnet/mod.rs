//! Deterministic discrete-event simulation of a wireless sensor network.
//!
//! Every server and client in a simulation is a [`Process`] driven by one
//! event queue. Frames travel over [`LinkModel`]s with seeded latency jitter
//! and loss; energy-modeled endpoints carry a [`Radio`] that is charged for
//! every transmitted and received frame and for every awake tick.

pub mod scenario;

use std::any::Any;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::wire;

/// Index of a process inside one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EndpointId(pub u32);

impl EndpointId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("handler at {endpoint} failed at tick {tick}: {message}")]
    Handler {
        tick: u64,
        endpoint: String,
        message: String,
    },
    #[error("cannot run backwards: now={now}, requested {requested}")]
    Backwards { now: u64, requested: u64 },
}

/// Failure raised from inside an event handler. Aborts the run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandlerError(pub String);

impl fmt::Display for HandlerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub type HandlerResult = Result<(), HandlerError>;

/// Anything that lives on the event loop.
pub trait Process: Any + Send {
    fn on_frame(&mut self, ctx: &mut Ctx<'_>, from: EndpointId, frame: Vec<u8>) -> HandlerResult;

    fn on_timer(&mut self, _ctx: &mut Ctx<'_>, _token: u64) -> HandlerResult {
        Ok(())
    }

    /// Energy-modeled endpoints expose their radio here.
    fn radio(&mut self) -> Option<&mut Radio> {
        None
    }
}

enum Action {
    Send { dst: EndpointId, frame: Vec<u8> },
    Timer { delay: u64, token: u64 },
    Log { event: String, dst: Option<EndpointId>, detail: String },
    Wake { dst: EndpointId },
}

/// Handle given to a process while it handles one event.
pub struct Ctx<'a> {
    now: u64,
    me: EndpointId,
    names: &'a [String],
    actions: Vec<Action>,
}

impl Ctx<'_> {
    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn me(&self) -> EndpointId {
        self.me
    }

    pub fn name(&self, id: EndpointId) -> &str {
        &self.names[id.idx()]
    }

    pub fn send(&mut self, dst: EndpointId, frame: Vec<u8>) {
        self.actions.push(Action::Send { dst, frame });
    }

    /// Encodes and sends; an unencodable message is a handler bug.
    pub fn send_message(&mut self, dst: EndpointId, msg: &wire::Message) -> HandlerResult {
        let frame = wire::encode_message(msg).map_err(|e| HandlerError(e.to_string()))?;
        self.send(dst, frame);
        Ok(())
    }

    /// Raises the wake-up line of `dst`; see [`Sim::wake`].
    pub fn wake(&mut self, dst: EndpointId) {
        self.actions.push(Action::Wake { dst });
    }

    pub fn set_timer(&mut self, delay: u64, token: u64) {
        self.actions.push(Action::Timer { delay, token });
    }

    pub fn log(&mut self, event: &str, dst: Option<EndpointId>, detail: String) {
        self.actions.push(Action::Log {
            event: event.to_string(),
            dst,
            detail,
        });
    }
}

/// One-directional channel characteristics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub latency: u64,
    pub jitter: u64,
    pub loss: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            latency: 1,
            jitter: 0,
            loss: 0.0,
        }
    }
}

impl LinkModel {
    pub fn new(latency: u64, jitter: u64, loss: f64) -> Self {
        LinkModel {
            latency: latency.max(1),
            jitter,
            loss: loss.clamp(0.0, 1.0),
        }
    }

    pub fn mean_latency(&self) -> f64 {
        self.latency.max(1) as f64 + self.jitter as f64 / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Power {
    Awake,
    Asleep,
}

/// Periodic radio schedule: awake at tick `t` iff `(t + phase) mod (on + off) < on`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DutyCycle {
    pub on_ticks: u64,
    pub off_ticks: u64,
    pub phase: u64,
}

impl DutyCycle {
    pub fn new(on_ticks: u64, off_ticks: u64, phase: u64) -> Option<Self> {
        (on_ticks + off_ticks > 0).then_some(DutyCycle {
            on_ticks,
            off_ticks,
            phase,
        })
    }

    fn period(&self) -> u64 {
        self.on_ticks + self.off_ticks
    }

    pub fn is_on(&self, t: u64) -> bool {
        (t + self.phase) % self.period() < self.on_ticks
    }

    // on-ticks in [0, x) of the unshifted schedule
    fn prefix(&self, x: u64) -> u64 {
        let p = self.period();
        (x / p) * self.on_ticks + (x % p).min(self.on_ticks)
    }

    /// Number of awake ticks in `[from, to)`.
    pub fn on_ticks_between(&self, from: u64, to: u64) -> u64 {
        if to <= from {
            return 0;
        }
        self.prefix(to + self.phase) - self.prefix(from + self.phase)
    }
}

/// Per-frame and per-tick costs, in nanojoules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EnergyModel {
    pub tx_nj: u64,
    pub rx_nj: u64,
    pub idle_nj_per_tick: u64,
}

pub const NJ_PER_J: f64 = 1e9;

pub fn joules_to_nj(j: f64) -> u64 {
    (j * NJ_PER_J).round().max(0.0) as u64
}

pub fn nj_to_joules(nj: u64) -> f64 {
    nj as f64 / NJ_PER_J
}

impl EnergyModel {
    pub fn from_joules(tx: f64, rx: f64, idle_per_tick: f64) -> Self {
        EnergyModel {
            tx_nj: joules_to_nj(tx),
            rx_nj: joules_to_nj(rx),
            idle_nj_per_tick: joules_to_nj(idle_per_tick),
        }
    }
}

/// Radio and battery of an energy-modeled sensor.
///
/// Energy is kept as integer nanojoules so that the tx/rx/idle accounting is
/// exact. Idle drain is settled lazily whenever the radio is touched.
#[derive(Debug, Clone)]
pub struct Radio {
    energy_nj: u64,
    initial_nj: u64,
    costs: EnergyModel,
    duty: Option<DutyCycle>,
    forced: Option<Power>,
    settled_at: u64,
    frames_sent: u64,
    frames_received: u64,
    awake_ticks: u64,
}

impl Radio {
    pub fn new(energy_nj: u64, costs: EnergyModel, duty: Option<DutyCycle>) -> Self {
        Radio {
            energy_nj,
            initial_nj: energy_nj,
            costs,
            duty,
            forced: None,
            settled_at: 0,
            frames_sent: 0,
            frames_received: 0,
            awake_ticks: 0,
        }
    }

    pub fn power_at(&self, t: u64) -> Power {
        match (self.forced, self.duty) {
            (Some(p), _) => p,
            (None, Some(d)) if !d.is_on(t) => Power::Asleep,
            _ => Power::Awake,
        }
    }

    pub fn duty(&self) -> Option<DutyCycle> {
        self.duty
    }

    pub fn forced(&self) -> Option<Power> {
        self.forced
    }

    /// Charges idle drain for awake ticks in `[settled_at, now)`.
    pub fn settle(&mut self, now: u64) {
        if now <= self.settled_at {
            return;
        }
        let awake = match (self.forced, self.duty) {
            (Some(Power::Awake), _) | (None, None) => now - self.settled_at,
            (Some(Power::Asleep), _) => 0,
            (None, Some(d)) => d.on_ticks_between(self.settled_at, now),
        };
        self.awake_ticks += awake;
        let cost = awake.saturating_mul(self.costs.idle_nj_per_tick);
        self.energy_nj = self.energy_nj.saturating_sub(cost);
        self.settled_at = now;
    }

    /// Overrides the duty schedule (`None` returns to it).
    pub fn force(&mut self, now: u64, power: Option<Power>) {
        self.settle(now);
        self.forced = power;
    }

    fn charge(&mut self, now: u64, cost: u64) -> bool {
        self.settle(now);
        if self.energy_nj < cost {
            self.energy_nj = 0;
            return false;
        }
        self.energy_nj -= cost;
        true
    }

    fn charge_tx(&mut self, now: u64) -> bool {
        let ok = self.charge(now, self.costs.tx_nj);
        if ok {
            self.frames_sent += 1;
        }
        ok
    }

    fn charge_rx(&mut self, now: u64) -> bool {
        let ok = self.charge(now, self.costs.rx_nj);
        if ok {
            self.frames_received += 1;
        }
        ok
    }

    /// Remaining energy after settling to `now`.
    pub fn energy_nj(&mut self, now: u64) -> u64 {
        self.settle(now);
        self.energy_nj
    }

    pub fn energy_j(&mut self, now: u64) -> f64 {
        nj_to_joules(self.energy_nj(now))
    }

    pub fn initial_nj(&self) -> u64 {
        self.initial_nj
    }

    pub fn costs(&self) -> EnergyModel {
        self.costs
    }

    pub fn frames_sent(&self) -> u64 {
        self.frames_sent
    }

    pub fn frames_received(&self) -> u64 {
        self.frames_received
    }

    pub fn awake_ticks(&self) -> u64 {
        self.awake_ticks
    }
}

/// Tab-separated `tick event src dst detail` lines.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    lines: Vec<String>,
}

impl EventLog {
    pub fn push(&mut self, tick: u64, event: &str, src: &str, dst: &str, detail: &str) {
        self.lines
            .push(format!("{tick}\t{event}\t{src}\t{dst}\t{detail}"));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

/// One parsed event-log line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord<'a> {
    pub tick: u64,
    pub event: &'a str,
    pub src: &'a str,
    pub dst: &'a str,
    pub detail: &'a str,
}

pub fn parse_log_line(line: &str) -> Option<LogRecord<'_>> {
    let mut it = line.splitn(5, '\t');
    Some(LogRecord {
        tick: it.next()?.parse().ok()?,
        event: it.next()?,
        src: it.next()?,
        dst: it.next()?,
        detail: it.next().unwrap_or(""),
    })
}

enum EventKind {
    Deliver { src: EndpointId, dst: EndpointId, frame: Vec<u8> },
    Timer { dst: EndpointId, token: u64 },
    Wake { src: EndpointId, dst: EndpointId },
}

struct Scheduled {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // min-heap on (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Frame counters kept by the simulator itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameStats {
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
    pub dropped_asleep: u64,
    pub dropped_energy: u64,
}

pub struct Sim {
    now: u64,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    procs: Vec<Box<dyn Process>>,
    names: Vec<String>,
    links: BTreeMap<(EndpointId, EndpointId), LinkModel>,
    default_link: LinkModel,
    rng: ChaCha8Rng,
    log: EventLog,
    logging: bool,
    stats: FrameStats,
}

impl Sim {
    pub fn new(seed: u64) -> Self {
        Sim {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            procs: Vec::new(),
            names: Vec::new(),
            links: BTreeMap::new(),
            default_link: LinkModel::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: EventLog::default(),
            logging: true,
            stats: FrameStats::default(),
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn set_logging(&mut self, on: bool) {
        self.logging = on;
    }

    pub fn add_process(&mut self, name: &str, p: Box<dyn Process>) -> EndpointId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate endpoint name {name}"
        );
        let id = EndpointId(self.procs.len() as u32);
        self.procs.push(p);
        self.names.push(name.to_string());
        id
    }

    pub fn endpoint(&self, name: &str) -> Option<EndpointId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| EndpointId(i as u32))
    }

    pub fn name(&self, id: EndpointId) -> &str {
        &self.names[id.idx()]
    }

    pub fn endpoints(&self) -> impl Iterator<Item = EndpointId> + '_ {
        (0..self.procs.len() as u32).map(EndpointId)
    }

    /// Sets the model for frames travelling `src -> dst`.
    pub fn set_link(&mut self, src: EndpointId, dst: EndpointId, link: LinkModel) {
        self.links.insert((src, dst), link);
    }

    pub fn set_link_pair(&mut self, a: EndpointId, b: EndpointId, link: LinkModel) {
        self.set_link(a, b, link);
        self.set_link(b, a, link);
    }

    pub fn link(&self, src: EndpointId, dst: EndpointId) -> LinkModel {
        self.links
            .get(&(src, dst))
            .copied()
            .unwrap_or(self.default_link)
    }

    pub fn process<T: Process>(&self, id: EndpointId) -> Option<&T> {
        let p: &dyn Any = self.procs.get(id.idx())?.as_ref();
        p.downcast_ref::<T>()
    }

    pub fn process_mut<T: Process>(&mut self, id: EndpointId) -> Option<&mut T> {
        let p: &mut dyn Any = self.procs.get_mut(id.idx())?.as_mut();
        p.downcast_mut::<T>()
    }

    pub fn radio_mut(&mut self, id: EndpointId) -> Option<&mut Radio> {
        self.procs.get_mut(id.idx())?.radio()
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn stats(&self) -> FrameStats {
        self.stats
    }

    pub fn log_event(&mut self, event: &str, src: EndpointId, dst: Option<EndpointId>, detail: &str) {
        if self.logging {
            let dst = dst.map(|d| self.names[d.idx()].as_str()).unwrap_or("-");
            self.log
                .push(self.now, event, &self.names[src.idx()], dst, detail);
        }
    }

    fn push(&mut self, time: u64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Scheduled {
            time,
            seq: self.seq,
            kind,
        });
    }

    pub fn schedule_timer(&mut self, dst: EndpointId, delay: u64, token: u64) {
        self.push(self.now + delay, EventKind::Timer { dst, token });
    }

    fn frame_summary(frame: &[u8]) -> String {
        match wire::decode_message(frame) {
            Ok(m) => m.to_string(),
            Err(_) => format!("bytes={}", frame.len()),
        }
    }

    /// Transmits `frame` from `src` at the current tick. Wireless
    /// fire-and-forget: losses are never reported to the sender.
    pub fn send(&mut self, src: EndpointId, dst: EndpointId, frame: Vec<u8>) {
        let now = self.now;
        if let Some(radio) = self.procs[src.idx()].radio() {
            if !radio.charge_tx(now) {
                self.stats.dropped_energy += 1;
                let detail = format!("no-energy {}", Self::frame_summary(&frame));
                self.log_event("drop", src, Some(dst), &detail);
                return;
            }
        }
        self.stats.sent += 1;
        if self.logging {
            let detail = Self::frame_summary(&frame);
            self.log_event("send", src, Some(dst), &detail);
        }
        let link = self.link(src, dst);
        let lost = if link.loss >= 1.0 {
            true
        } else if link.loss <= 0.0 {
            false
        } else {
            self.rng.random::<f64>() < link.loss
        };
        if lost {
            self.stats.lost += 1;
            let detail = format!("loss {}", Self::frame_summary(&frame));
            self.log_event("drop", src, Some(dst), &detail);
            return;
        }
        let jitter = if link.jitter > 0 {
            self.rng.random_range(0..=link.jitter)
        } else {
            0
        };
        let latency = (link.latency + jitter).max(1);
        self.push(now + latency, EventKind::Deliver { src, dst, frame });
    }

    /// Out-of-band wake-up signal, modelling a low-power wake-up receiver:
    /// never lost, costs no energy, and forces the target radio awake after
    /// the link's base latency.
    pub fn wake(&mut self, src: EndpointId, dst: EndpointId) {
        let latency = self.link(src, dst).latency.max(1);
        self.push(self.now + latency, EventKind::Wake { src, dst });
    }

    pub fn next_event_time(&self) -> Option<u64> {
        self.queue.peek().map(|e| e.time)
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Processes the earliest event. Returns `false` when the queue is empty.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let Some(ev) = self.queue.pop() else {
            return Ok(false);
        };
        debug_assert!(ev.time >= self.now);
        self.now = ev.time;
        match ev.kind {
            EventKind::Deliver { src, dst, frame } => self.deliver(src, dst, frame)?,
            EventKind::Timer { dst, token } => self.dispatch(dst, |p, ctx| p.on_timer(ctx, token))?,
            EventKind::Wake { src, dst } => {
                let now = self.now;
                if let Some(radio) = self.procs[dst.idx()].radio() {
                    radio.force(now, Some(Power::Awake));
                }
                self.log_event("wake", src, Some(dst), "");
            }
        }
        Ok(true)
    }

    fn deliver(&mut self, src: EndpointId, dst: EndpointId, frame: Vec<u8>) -> Result<(), SimError> {
        let now = self.now;
        if let Some(radio) = self.procs[dst.idx()].radio() {
            radio.settle(now);
            if radio.power_at(now) == Power::Asleep {
                self.stats.dropped_asleep += 1;
                let detail = format!("asleep {}", Self::frame_summary(&frame));
                self.log_event("drop", src, Some(dst), &detail);
                return Ok(());
            }
            if !radio.charge_rx(now) {
                self.stats.dropped_energy += 1;
                let detail = format!("no-energy {}", Self::frame_summary(&frame));
                self.log_event("drop", src, Some(dst), &detail);
                return Ok(());
            }
        }
        self.stats.delivered += 1;
        if self.logging {
            let detail = Self::frame_summary(&frame);
            self.log_event("recv", src, Some(dst), &detail);
        }
        self.dispatch(dst, |p, ctx| p.on_frame(ctx, src, frame))
    }

    fn dispatch(
        &mut self,
        id: EndpointId,
        f: impl FnOnce(&mut dyn Process, &mut Ctx<'_>) -> HandlerResult,
    ) -> Result<(), SimError> {
        let mut ctx = Ctx {
            now: self.now,
            me: id,
            names: &self.names,
            actions: Vec::new(),
        };
        let res = f(self.procs[id.idx()].as_mut(), &mut ctx);
        let actions = ctx.actions;
        if let Err(e) = res {
            return Err(SimError::Handler {
                tick: self.now,
                endpoint: self.names[id.idx()].clone(),
                message: e.0,
            });
        }
        for a in actions {
            match a {
                Action::Send { dst, frame } => self.send(id, dst, frame),
                Action::Timer { delay, token } => self.schedule_timer(id, delay, token),
                Action::Log { event, dst, detail } => self.log_event(&event, id, dst, &detail),
                Action::Wake { dst } => self.wake(id, dst),
            }
        }
        Ok(())
    }

    /// Runs every event with time `<= t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: u64) -> Result<(), SimError> {
        if t < self.now {
            return Err(SimError::Backwards {
                now: self.now,
                requested: t,
            });
        }
        while self.next_event_time().is_some_and(|et| et <= t) {
            self.step()?;
        }
        self.now = t;
        Ok(())
    }

    pub fn run_until_idle(&mut self) -> Result<(), SimError> {
        while self.step()? {}
        Ok(())
    }

    /// Steps until `done` holds or the next event lies beyond `deadline`.
    /// Returns whether `done` became true.
    pub fn run_while(
        &mut self,
        deadline: u64,
        mut done: impl FnMut(&Sim) -> bool,
    ) -> Result<bool, SimError> {
        loop {
            if done(self) {
                return Ok(true);
            }
            match self.next_event_time() {
                Some(t) if t <= deadline => {
                    self.step()?;
                }
                _ => return Ok(false),
            }
        }
    }
}
