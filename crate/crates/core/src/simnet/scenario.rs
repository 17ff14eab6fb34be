//! Scenario files: a TOML document with one table per entity.
//!
//! ```toml
//! [scenario]
//! name = "zoo"
//! seed = 42
//! ttl = 30
//!
//! [cluster.cluster1]
//! latency = 2
//!
//! [sensor.s1]
//! cluster = "cluster1"
//! kind = "temperature"
//! position = [800.0, 700.0]
//! energy = 150.0
//! raw = 20.9
//! tags = { animal = "snake" }
//! ```
//!
//! The full key list is in the README.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use indexmap::IndexMap;
use serde::Deserialize;
use toml::Spanned;

use super::{DutyCycle, EnergyModel, LinkModel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ScenarioError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorKind {
    Temperature,
    Position,
}

impl SensorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SensorKind::Temperature => "temperature",
            SensorKind::Position => "position",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "temperature" => Some(SensorKind::Temperature),
            "position" => Some(SensorKind::Position),
            _ => None,
        }
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Time-indexed physical quantity seen by a sensor.
#[derive(Debug, Clone, PartialEq)]
pub enum RawSource {
    Constant(f64),
    Ramp { start: f64, per_tick: f64 },
    /// Step function over `(tick, value)` points sorted by tick; before the
    /// first point the first value holds.
    Table(Vec<(u64, f64)>),
}

impl RawSource {
    pub fn value_at(&self, t: u64) -> f64 {
        match self {
            RawSource::Constant(v) => *v,
            RawSource::Ramp { start, per_tick } => start + per_tick * t as f64,
            RawSource::Table(points) => {
                let i = points.partition_point(|&(pt, _)| pt <= t);
                points[i.saturating_sub(1)].1
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geo {
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub meters_per_degree: f64,
}

impl Geo {
    /// Maps local metres to (longitude, latitude) in degrees.
    pub fn to_lon_lat(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            self.origin_lon + x / self.meters_per_degree,
            self.origin_lat + y / self.meters_per_degree,
        )
    }
}

impl Default for Geo {
    fn default() -> Self {
        Geo {
            origin_lon: 0.0,
            origin_lat: 0.0,
            meters_per_degree: 111_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub id: String,
    pub link: LinkModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    pub id: String,
    pub cluster: String,
    pub kind: SensorKind,
    pub position: (f64, f64),
    pub energy_j: f64,
    pub raw: RawSource,
    /// Second component for position sensors.
    pub raw_y: RawSource,
    pub tags: Vec<(String, String)>,
    pub duty: Option<DutyCycle>,
    /// Sensor to cluster head.
    pub up: LinkModel,
    /// Cluster head to sensor.
    pub down: LinkModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupConfig {
    pub name: String,
    pub cluster: Option<String>,
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateConfig {
    pub name: String,
    pub cluster: Option<String>,
    pub kind: Option<SensorKind>,
    pub tag: Option<(String, String)>,
    pub source: String,
    pub func: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub name: String,
    pub lon: (f64, f64),
    pub lat: (f64, f64),
}

impl Region {
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        let within = |v: f64, (a, b): (f64, f64)| v >= a.min(b) && v <= a.max(b);
        within(lon, self.lon) && within(lat, self.lat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponderConfig {
    pub name: String,
    pub link: LinkModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub ttl: u64,
    pub reprobe: u64,
    pub client_link: LinkModel,
    pub geo: Geo,
    pub energy: EnergyModel,
    /// Resource-view band thresholds in joules.
    pub low_j: f64,
    pub high_j: f64,
    pub users: Vec<(String, Vec<String>)>,
    pub clusters: Vec<ClusterConfig>,
    pub sensors: Vec<SensorConfig>,
    pub groups: Vec<GroupConfig>,
    pub aggregates: Vec<AggregateConfig>,
    pub regions: Vec<Region>,
    pub responders: Vec<ResponderConfig>,
}

impl ScenarioConfig {
    pub fn sensor(&self, id: &str) -> Option<&SensorConfig> {
        self.sensors.iter().find(|s| s.id == id)
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn sensors_in<'a>(&'a self, cluster: &'a str) -> impl Iterator<Item = &'a SensorConfig> {
        self.sensors.iter().filter(move |s| s.cluster == cluster)
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    ttl: Option<u64>,
    #[serde(default)]
    reprobe: Option<u64>,
    #[serde(default)]
    client_latency: Option<u64>,
    #[serde(default)]
    client_jitter: Option<u64>,
    #[serde(default)]
    client_loss: Option<f64>,
    #[serde(default)]
    low_energy: Option<f64>,
    #[serde(default)]
    high_energy: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeo {
    origin_lon: f64,
    origin_lat: f64,
    meters_per_degree: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnergy {
    #[serde(default)]
    tx: f64,
    #[serde(default)]
    rx: f64,
    #[serde(default)]
    idle: f64,
}

#[derive(Deserialize, Default, Clone, Copy)]
#[serde(deny_unknown_fields)]
struct RawLink {
    latency: Option<u64>,
    jitter: Option<u64>,
    loss: Option<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawSourceDoc {
    Constant(f64),
    Ramp { ramp: [f64; 2] },
    Table { table: Vec<(u64, f64)> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSensor {
    cluster: Spanned<String>,
    kind: SensorKind,
    position: [f64; 2],
    energy: f64,
    raw: Option<RawSourceDoc>,
    raw_y: Option<RawSourceDoc>,
    #[serde(default)]
    tags: IndexMap<String, String>,
    duty: Option<Spanned<[u64; 3]>>,
    latency: Option<u64>,
    jitter: Option<u64>,
    loss: Option<f64>,
    loss_up: Option<f64>,
    loss_down: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroup {
    cluster: Option<Spanned<String>>,
    #[serde(rename = "match")]
    matches: Spanned<IndexMap<String, String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAggregate {
    cluster: Option<Spanned<String>>,
    kind: Option<SensorKind>,
    tag: Option<Spanned<IndexMap<String, String>>>,
    #[serde(default = "default_source")]
    source: String,
    #[serde(rename = "fn")]
    func: String,
}

fn default_source() -> String {
    "reading".to_string()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegion {
    lon: [f64; 2],
    lat: [f64; 2],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    #[serde(default)]
    scenario: RawScenario,
    geo: Option<RawGeo>,
    energy: Option<RawEnergy>,
    #[serde(default)]
    users: IndexMap<String, Vec<String>>,
    #[serde(default)]
    cluster: IndexMap<String, RawLink>,
    #[serde(default)]
    sensor: IndexMap<String, RawSensor>,
    #[serde(default)]
    group: IndexMap<String, RawGroup>,
    #[serde(default)]
    aggregate: IndexMap<String, RawAggregate>,
    #[serde(default)]
    region: IndexMap<String, RawRegion>,
    #[serde(default)]
    responder: IndexMap<String, RawLink>,
}

struct Lines<'a> {
    text: &'a str,
}

impl Lines<'_> {
    fn line_at(&self, offset: usize) -> usize {
        self.text[..offset.min(self.text.len())]
            .bytes()
            .filter(|&b| b == b'\n')
            .count()
            + 1
    }

    fn of_span(&self, span: Range<usize>) -> usize {
        self.line_at(span.start)
    }

    /// Line of the `[section.id]` header, or 1 if it cannot be found.
    fn of_header(&self, section: &str, id: &str) -> usize {
        let plain = if id.is_empty() {
            format!("[{section}]")
        } else {
            format!("[{section}.{id}]")
        };
        let quoted = format!("[{section}.\"{id}\"]");
        self.text
            .lines()
            .position(|l| {
                let l: String = l.chars().filter(|c| !c.is_whitespace()).collect();
                l == plain || l == quoted
            })
            .map_or(1, |i| i + 1)
    }

    fn err(&self, line: usize, message: impl Into<String>) -> ScenarioError {
        ScenarioError {
            line,
            message: message.into(),
        }
    }
}

fn source(doc: Option<RawSourceDoc>, default: f64) -> Result<RawSource, String> {
    Ok(match doc {
        None => RawSource::Constant(default),
        Some(RawSourceDoc::Constant(v)) => RawSource::Constant(v),
        Some(RawSourceDoc::Ramp { ramp }) => RawSource::Ramp {
            start: ramp[0],
            per_tick: ramp[1],
        },
        Some(RawSourceDoc::Table { table }) => {
            if table.is_empty() {
                return Err("empty raw table".into());
            }
            if table.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err("raw table ticks must increase".into());
            }
            RawSource::Table(table)
        }
    })
}

fn check_loss(p: f64) -> Result<f64, String> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(format!("loss {p} outside [0, 1]"))
    }
}

fn link(raw: RawLink, base: LinkModel) -> Result<LinkModel, String> {
    let latency = raw.latency.unwrap_or(base.latency);
    if latency == 0 {
        return Err("latency must be at least 1 tick".into());
    }
    Ok(LinkModel::new(
        latency,
        raw.jitter.unwrap_or(base.jitter),
        check_loss(raw.loss.unwrap_or(base.loss))?,
    ))
}

fn single_pair(map: &IndexMap<String, String>) -> Option<(String, String)> {
    if map.len() != 1 {
        return None;
    }
    map.iter().next().map(|(k, v)| (k.clone(), v.clone()))
}

pub const DEFAULT_TTL: u64 = 30;
pub const DEFAULT_REPROBE: u64 = 100;

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let lines = Lines { text };
    let doc: Document = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(1, |s| lines.of_span(s));
        lines.err(line, e.message().trim().to_string())
    })?;

    let sc = doc.scenario;
    let base = LinkModel::new(1, 0, 0.0);
    let client_link = link(
        RawLink {
            latency: sc.client_latency,
            jitter: sc.client_jitter,
            loss: sc.client_loss,
        },
        base,
    )
    .map_err(|m| lines.err(lines.of_header("scenario", ""), m))?;
    let low_j = sc.low_energy.unwrap_or(10.0);
    let high_j = sc.high_energy.unwrap_or(100.0);
    if !(0.0 < low_j && low_j < high_j) {
        return Err(lines.err(1, "energy thresholds need 0 < low_energy < high_energy"));
    }

    let geo = doc.geo.map_or_else(Geo::default, |g| Geo {
        origin_lon: g.origin_lon,
        origin_lat: g.origin_lat,
        meters_per_degree: g.meters_per_degree,
    });
    if geo.meters_per_degree <= 0.0 {
        return Err(lines.err(1, "meters_per_degree must be positive"));
    }
    let energy = doc
        .energy
        .map_or_else(EnergyModel::default, |e| EnergyModel::from_joules(e.tx, e.rx, e.idle));

    // Endpoint names share one space.
    let mut names: BTreeMap<String, &'static str> = BTreeMap::new();
    names.insert("client".into(), "scenario");
    let mut claim = |section: &'static str, id: &str| -> Result<(), ScenarioError> {
        if id.is_empty() || id.contains('/') || id == "." || id == ".." {
            return Err(lines.err(lines.of_header(section, id), format!("bad id {id:?}")));
        }
        if let Some(prev) = names.insert(id.to_string(), section) {
            return Err(lines.err(
                lines.of_header(section, id),
                format!("duplicate id {id} (already a {prev})"),
            ));
        }
        Ok(())
    };

    let mut clusters = Vec::new();
    for (id, raw) in &doc.cluster {
        claim("cluster", id)?;
        let l = link(*raw, LinkModel::new(2, 0, 0.0)).map_err(|m| lines.err(lines.of_header("cluster", id), m))?;
        clusters.push(ClusterConfig {
            id: id.clone(),
            link: l,
        });
    }
    let cluster_exists = |name: &Spanned<String>| -> Result<String, ScenarioError> {
        let c = name.get_ref();
        if clusters.iter().any(|k| &k.id == c) {
            Ok(c.clone())
        } else {
            Err(lines.err(lines.of_span(name.span()), format!("unknown cluster {c}")))
        }
    };

    let mut sensors = Vec::new();
    for (id, raw) in doc.sensor {
        claim("sensor", &id)?;
        let here = lines.of_header("sensor", &id);
        let cluster = cluster_exists(&raw.cluster)?;
        let clink = clusters
            .iter()
            .find(|c| c.id == cluster)
            .expect("checked above")
            .link;
        if raw.energy < 0.0 || !raw.energy.is_finite() {
            return Err(lines.err(here, "energy must be a non-negative number"));
        }
        let base = link(
            RawLink {
                latency: raw.latency,
                jitter: raw.jitter,
                loss: raw.loss,
            },
            clink,
        )
        .map_err(|m| lines.err(here, m))?;
        let mut up = base;
        let mut down = base;
        if let Some(p) = raw.loss_up {
            up.loss = check_loss(p).map_err(|m| lines.err(here, m))?;
        }
        if let Some(p) = raw.loss_down {
            down.loss = check_loss(p).map_err(|m| lines.err(here, m))?;
        }
        let duty = match raw.duty {
            None => None,
            Some(d) => {
                let [on, off, phase] = *d.get_ref();
                Some(DutyCycle::new(on, off, phase).ok_or_else(|| {
                    lines.err(lines.of_span(d.span()), "duty cycle needs on + off > 0")
                })?)
            }
        };
        let [x, y] = raw.position;
        let (dx, dy) = match raw.kind {
            SensorKind::Temperature => (0.0, 0.0),
            SensorKind::Position => (x, y),
        };
        sensors.push(SensorConfig {
            id,
            cluster,
            kind: raw.kind,
            position: (x, y),
            energy_j: raw.energy,
            raw: source(raw.raw, dx).map_err(|m| lines.err(here, m))?,
            raw_y: source(raw.raw_y, dy).map_err(|m| lines.err(here, m))?,
            tags: raw.tags.into_iter().collect(),
            duty,
            up,
            down,
        });
    }

    let mut groups = Vec::new();
    for (name, raw) in doc.group {
        let cluster = raw.cluster.as_ref().map(&cluster_exists).transpose()?;
        let (key, value) = single_pair(raw.matches.get_ref()).ok_or_else(|| {
            lines.err(lines.of_span(raw.matches.span()), "match needs exactly one key")
        })?;
        groups.push(GroupConfig {
            name,
            cluster,
            key,
            value,
        });
    }

    let mut aggregates = Vec::new();
    for (name, raw) in doc.aggregate {
        let cluster = raw.cluster.as_ref().map(&cluster_exists).transpose()?;
        let tag = match &raw.tag {
            None => None,
            Some(t) => Some(
                single_pair(t.get_ref())
                    .ok_or_else(|| lines.err(lines.of_span(t.span()), "tag needs exactly one key"))?,
            ),
        };
        aggregates.push(AggregateConfig {
            name,
            cluster,
            kind: raw.kind,
            tag,
            source: raw.source,
            func: raw.func,
        });
    }

    let regions = doc
        .region
        .into_iter()
        .map(|(name, r)| Region {
            name,
            lon: (r.lon[0], r.lon[1]),
            lat: (r.lat[0], r.lat[1]),
        })
        .collect();

    let mut responders = Vec::new();
    for (name, raw) in &doc.responder {
        claim("responder", name)?;
        let l = link(*raw, LinkModel::new(2, 0, 0.0)).map_err(|m| lines.err(lines.of_header("responder", name), m))?;
        responders.push(ResponderConfig {
            name: name.clone(),
            link: l,
        });
    }

    Ok(ScenarioConfig {
        name: sc.name.unwrap_or_else(|| "scenario".into()),
        seed: sc.seed.unwrap_or(0),
        ttl: sc.ttl.unwrap_or(DEFAULT_TTL),
        reprobe: sc.reprobe.unwrap_or(DEFAULT_REPROBE),
        client_link,
        geo,
        energy,
        low_j,
        high_j,
        users: doc.users.into_iter().collect(),
        clusters,
        sensors,
        groups,
        aggregates,
        regions,
        responders,
    })
}

/// Generates a flat scenario with `clusters * per_cluster` temperature
/// sensors, used for scale runs.
pub fn generated_scenario(clusters: usize, per_cluster: usize, seed: u64) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "[scenario]\nname = \"generated\"\nseed = {seed}\n");
    let _ = writeln!(s, "[energy]\ntx = 0.001\nrx = 0.0005\nidle = 0.000001\n");
    let _ = writeln!(s, "[users]\nadmin = [\"admin\"]\nguest = [\"users\"]\n");
    for c in 1..=clusters {
        let _ = writeln!(s, "[cluster.cluster{c}]\nlatency = 2\n");
    }
    let mut n = 0;
    for c in 1..=clusters {
        for i in 0..per_cluster {
            n += 1;
            let animal = ["snake", "bird", "lion"][n % 3];
            let _ = writeln!(
                s,
                "[sensor.s{n}]\ncluster = \"cluster{c}\"\nkind = \"temperature\"\n\
                 position = [{}.0, {}.0]\nenergy = 100.0\nraw = {{ ramp = [{}.5, 0.001] }}\n\
                 tags = {{ animal = \"{animal}\" }}\n",
                c * 1000 + i * 10,
                i * 10,
                15 + n % 10,
            );
        }
    }
    let _ = writeln!(s, "[group.snakes]\nmatch = {{ animal = \"snake\" }}\n");
    let _ = writeln!(s, "[aggregate.avgTemp]\nkind = \"temperature\"\nfn = \"avg\"");
    s
}
