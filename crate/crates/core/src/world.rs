//! Builds a running simulation from a scenario: devices, cluster heads,
//! responders and one client endpoint, all wired with their link models.

use crate::client::ClientEndpoint;
use crate::devicefs::{make_device_server, DeviceNode, SensorState};
use crate::fscore::{slice_at, Backend, FsError, Limits, Request, Server, ServerNode, Tree, UserDb, ROOT};
use crate::muxfs::{AggregateSpec, GroupSpec, Member, Mux, MuxConfig, Registry};
use crate::simnet::scenario::{parse_scenario, ScenarioConfig, ScenarioError};
use crate::simnet::{EndpointId, LinkModel, Sim, SimError};

pub const CLIENT: &str = "client";

/// Write-sink used for emergency notification devices.
pub struct Responder {
    pub name: String,
    pub received: Vec<(u64, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponderFile {
    Alert,
    Log,
}

impl Backend for Responder {
    type File = ResponderFile;

    fn read(&mut self, file: &ResponderFile, _req: &Request<'_>, offset: u64, count: u32) -> Result<Vec<u8>, FsError> {
        match file {
            ResponderFile::Alert => Err(FsError::PermissionDenied),
            ResponderFile::Log => {
                let text: String = self
                    .received
                    .iter()
                    .map(|(t, m)| format!("{t} {m}\n"))
                    .collect();
                Ok(slice_at(text.as_bytes(), offset, count))
            }
        }
    }

    fn write(&mut self, file: &ResponderFile, req: &Request<'_>, _offset: u64, data: &[u8]) -> Result<u32, FsError> {
        match file {
            ResponderFile::Alert => {
                let text = String::from_utf8_lossy(data).trim_end().to_string();
                self.received.push((req.now, text));
                Ok(data.len() as u32)
            }
            ResponderFile::Log => Err(FsError::NotWritable),
        }
    }
}

pub type ResponderNode = ServerNode<Responder>;

pub fn make_responder(name: &str, qid_base: u64, users: UserDb) -> Server<Responder> {
    let mut t = Tree::new(qid_base, "admin", "admin", 0o555);
    t.add_file(ROOT, "alert", 0o222, "admin", "admin", ResponderFile::Alert)
        .expect("fixed name");
    t.add_file(ROOT, "log", 0o444, "admin", "admin", ResponderFile::Log)
        .expect("fixed name");
    Server::new(
        t,
        Responder {
            name: name.to_string(),
            received: Vec::new(),
        },
        users,
        Limits::default(),
    )
}

pub struct World {
    pub sim: Sim,
    pub cfg: ScenarioConfig,
    pub users: UserDb,
    pub client: EndpointId,
    pub clusters: Vec<(String, EndpointId)>,
    pub sensors: Vec<(String, EndpointId)>,
    pub responders: Vec<(String, EndpointId)>,
}

impl World {
    pub fn load(text: &str, seed: Option<u64>) -> Result<World, ScenarioError> {
        let cfg = parse_scenario(text)?;
        Ok(World::from_config(cfg, seed))
    }

    /// Wires everything up and schedules discovery at the current tick.
    pub fn from_config(mut cfg: ScenarioConfig, seed: Option<u64>) -> World {
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let mut sim = Sim::new(cfg.seed);
        let mut users = UserDb::new();
        for (u, groups) in &cfg.users {
            users.add_user(u, groups.iter().cloned());
        }
        let client = sim.add_process(CLIENT, Box::new(ClientEndpoint::default()));

        let mut sensors = Vec::new();
        for s in &cfg.sensors {
            let state = SensorState::from_config(s, cfg.energy);
            let node = DeviceNode::new(make_device_server(state, users.clone()));
            sensors.push((s.id.clone(), sim.add_process(&s.id, Box::new(node))));
        }

        let mut clusters = Vec::new();
        for (ci, c) in cfg.clusters.iter().enumerate() {
            let members = cfg
                .sensors
                .iter()
                .zip(&sensors)
                .filter(|(s, _)| s.cluster == c.id)
                .map(|(s, &(_, ep))| Member {
                    id: s.id.clone(),
                    endpoint: ep,
                    duty: s.duty,
                    latency: s.down.latency,
                    timeout: Member::timeout_for(s.down.mean_latency().max(s.up.mean_latency())),
                })
                .collect();
            let groups = cfg
                .groups
                .iter()
                .filter(|g| g.cluster.as_ref().is_none_or(|gc| *gc == c.id))
                .map(|g| GroupSpec {
                    name: g.name.clone(),
                    key: g.key.clone(),
                    value: g.value.clone(),
                })
                .collect();
            let aggregates = cfg
                .aggregates
                .iter()
                .filter(|a| a.cluster.as_ref().is_none_or(|ac| *ac == c.id))
                .map(|a| AggregateSpec {
                    name: a.name.clone(),
                    kind: a.kind,
                    tag: a.tag.clone(),
                    members: None,
                    source: a.source.clone(),
                    func: a.func.clone(),
                })
                .collect();
            let mux = Mux::new(MuxConfig {
                cluster: c.id.clone(),
                qid_base: 0xFFFF_0000_0000_0000 | ((ci as u64) << 32),
                users: users.clone(),
                ttl: cfg.ttl,
                reprobe: cfg.reprobe,
                members,
                groups,
                aggregates,
                registry: Registry::default(),
            });
            let ep = sim.add_process(&c.id, Box::new(mux));
            sim.set_link_pair(client, ep, cfg.client_link);
            clusters.push((c.id.clone(), ep));
        }
        for (s, &(_, ep)) in cfg.sensors.iter().zip(&sensors) {
            let (_, mux) = clusters
                .iter()
                .find(|(id, _)| *id == s.cluster)
                .expect("validated cluster");
            sim.set_link(*mux, ep, s.down);
            sim.set_link(ep, *mux, s.up);
        }

        let mut responders = Vec::new();
        for (ri, r) in cfg.responders.iter().enumerate() {
            let srv = make_responder(&r.name, 0xFFFE_0000_0000_0000 | ((ri as u64) << 32), users.clone());
            let ep = sim.add_process(&r.name, Box::new(ResponderNode::new(srv)));
            sim.set_link_pair(client, ep, r.link);
            responders.push((r.name.clone(), ep));
        }

        let mut w = World {
            sim,
            cfg,
            users,
            client,
            clusters,
            sensors,
            responders,
        };
        for i in 0..w.clusters.len() {
            let ep = w.clusters[i].1;
            let (delay, tok) = w.mux_mut_by_ep(ep).startup_timer();
            w.sim.schedule_timer(ep, delay, tok);
        }
        w
    }

    /// Runs until no cluster head is still probing its devices.
    pub fn discover(&mut self, limit: u64) -> Result<(), SimError> {
        let deadline = self.sim.now() + limit;
        // The startup timers fire at the current tick.
        let now = self.sim.now();
        self.sim.run_until(now)?;
        let eps: Vec<EndpointId> = self.clusters.iter().map(|c| c.1).collect();
        self.sim.run_while(deadline, |s| {
            eps.iter()
                .all(|&ep| s.process::<Mux>(ep).is_some_and(|m| !m.is_probing()))
        })?;
        Ok(())
    }

    pub fn endpoint(&self, name: &str) -> Option<EndpointId> {
        self.sim.endpoint(name)
    }

    pub fn cluster_ep(&self, cluster: &str) -> Option<EndpointId> {
        self.clusters.iter().find(|(c, _)| c == cluster).map(|c| c.1)
    }

    pub fn sensor_ep(&self, id: &str) -> Option<EndpointId> {
        self.sensors.iter().find(|(s, _)| s == id).map(|s| s.1)
    }

    pub fn responder_ep(&self, name: &str) -> Option<EndpointId> {
        self.responders.iter().find(|(r, _)| r == name).map(|r| r.1)
    }

    pub fn mux(&self, cluster: &str) -> Option<&Mux> {
        self.sim.process::<Mux>(self.cluster_ep(cluster)?)
    }

    pub fn mux_mut(&mut self, cluster: &str) -> Option<&mut Mux> {
        let ep = self.cluster_ep(cluster)?;
        self.sim.process_mut::<Mux>(ep)
    }

    fn mux_mut_by_ep(&mut self, ep: EndpointId) -> &mut Mux {
        self.sim.process_mut::<Mux>(ep).expect("cluster endpoint hosts a mux")
    }

    pub fn sensor(&self, id: &str) -> Option<&SensorState> {
        let ep = self.sensor_ep(id)?;
        self.sim
            .process::<DeviceNode>(ep)
            .map(|n| &n.server.backend.state)
    }

    pub fn sensor_mut(&mut self, id: &str) -> Option<&mut SensorState> {
        let ep = self.sensor_ep(id)?;
        self.sim
            .process_mut::<DeviceNode>(ep)
            .map(|n| &mut n.server.backend.state)
    }

    pub fn responder(&self, name: &str) -> Option<&Responder> {
        let ep = self.responder_ep(name)?;
        self.sim.process::<ResponderNode>(ep).map(|n| &n.server.backend)
    }

    pub fn cluster_of(&self, sensor: &str) -> Option<&str> {
        self.cfg.sensor(sensor).map(|s| s.cluster.as_str())
    }

    /// Replaces both directions of a sensor's link and tells its cluster
    /// head the new expected latency.
    pub fn set_sensor_link(&mut self, id: &str, link: LinkModel) -> Result<(), String> {
        let ep = self.sensor_ep(id).ok_or_else(|| format!("unknown sensor {id}"))?;
        let cluster = self.cluster_of(id).expect("configured").to_string();
        let mux = self.cluster_ep(&cluster).expect("configured");
        self.sim.set_link_pair(mux, ep, link);
        self.mux_mut_by_ep(mux)
            .set_device_latency(id, link.latency, link.mean_latency())
    }

    pub fn set_report_rate(&mut self, cluster: &str, ids: &[&str], period: u64) -> Result<(), String> {
        let ep = self.cluster_ep(cluster).ok_or_else(|| format!("unknown cluster {cluster}"))?;
        let timers = self.mux_mut_by_ep(ep).set_report_rate(ids, period)?;
        for (delay, tok) in timers {
            self.sim.schedule_timer(ep, delay, tok);
        }
        Ok(())
    }

    pub fn install_task(&mut self, cluster: &str, name: &str, ids: &[&str], func: &str, period: u64) -> Result<(), String> {
        let ep = self.cluster_ep(cluster).ok_or_else(|| format!("unknown cluster {cluster}"))?;
        let timers = self.mux_mut_by_ep(ep).install_task(name, ids, func, period)?;
        for (delay, tok) in timers {
            self.sim.schedule_timer(ep, delay, tok);
        }
        Ok(())
    }

    /// Registers `f` on every cluster head.
    pub fn register_aggregation(&mut self, name: &str, f: impl Fn(&[f64]) -> Vec<f64> + Clone + Send + Sync + 'static) {
        for i in 0..self.clusters.len() {
            let ep = self.clusters[i].1;
            self.mux_mut_by_ep(ep).register_aggregation(name, f.clone());
        }
    }

    pub fn add_aggregate(&mut self, cluster: &str, spec: AggregateSpec) -> Result<(), String> {
        let ep = self.cluster_ep(cluster).ok_or_else(|| format!("unknown cluster {cluster}"))?;
        self.mux_mut_by_ep(ep).add_aggregate(spec).map_err(|e| e.to_string())
    }
}

/// Checks that every T-message sent between two endpoints is answered by
/// exactly one R-message with the same tag, using the `send` lines of an
/// event log. Requests sent after `cutoff` may still be in flight and are
/// not reported. Returns `(client, server, tag)` for each unanswered
/// request and each reply that answers nothing.
pub fn unmatched_tags(log_lines: &[String], cutoff: u64) -> Vec<(String, String, u16)> {
    use std::collections::{BTreeMap, VecDeque};
    let mut open: BTreeMap<(String, String, u16), VecDeque<u64>> = BTreeMap::new();
    let mut stray = Vec::new();
    for line in log_lines {
        let Some(rec) = crate::simnet::parse_log_line(line) else {
            continue;
        };
        if rec.event != "send" {
            continue;
        }
        let mut words = rec.detail.split_whitespace();
        let Some(name) = words.next() else { continue };
        let Some(tag) = words
            .find_map(|w| w.strip_prefix("tag="))
            .and_then(|t| t.parse::<u16>().ok())
        else {
            continue;
        };
        if name.starts_with('T') {
            open.entry((rec.src.to_string(), rec.dst.to_string(), tag))
                .or_default()
                .push_back(rec.tick);
        } else if name.starts_with('R') {
            let key = (rec.dst.to_string(), rec.src.to_string(), tag);
            if open.get_mut(&key).and_then(|q| q.pop_front()).is_none() {
                stray.push(key);
            }
        }
    }
    let mut out: Vec<_> = open
        .into_iter()
        .flat_map(|(k, q)| q.into_iter().filter(|t| *t <= cutoff).map(move |_| k.clone()))
        .collect();
    out.extend(stray);
    out
}
