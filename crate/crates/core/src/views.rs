//! Client-side namespaces: mount tables over remote trees, plus synthetic
//! location, logical and resource views and the region query planner.

use std::collections::BTreeMap;
use std::fmt;

use crate::client::Client;
use crate::simnet::scenario::{Geo, Region};
use crate::simnet::{EndpointId, Sim};
use crate::wire::{Qid, QidKind, Stat, DMDIR};

pub type Path = Vec<String>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NsError(pub String);

impl fmt::Display for NsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NsError {}

fn not_found() -> NsError {
    NsError("not found".into())
}

pub type NsResult<T> = Result<T, NsError>;

/// Path-level access to remote file servers.
pub trait FileService {
    fn list(&mut self, ep: EndpointId, path: &[String]) -> NsResult<Vec<Stat>>;
    fn read(&mut self, ep: EndpointId, path: &[String]) -> NsResult<Vec<u8>>;
    fn write(&mut self, ep: EndpointId, path: &[String], data: &[u8]) -> NsResult<u32>;
    fn stat(&mut self, ep: EndpointId, path: &[String]) -> NsResult<Stat>;
}

/// A [`FileService`] over a simulated network.
pub struct Remote<'a> {
    pub sim: &'a mut Sim,
    pub client: &'a mut Client,
}

impl FileService for Remote<'_> {
    fn list(&mut self, ep: EndpointId, path: &[String]) -> NsResult<Vec<Stat>> {
        self.client.list(self.sim, ep, path).map_err(|e| NsError(e.to_string()))
    }

    fn read(&mut self, ep: EndpointId, path: &[String]) -> NsResult<Vec<u8>> {
        self.client.read_file(self.sim, ep, path).map_err(|e| NsError(e.to_string()))
    }

    fn write(&mut self, ep: EndpointId, path: &[String], data: &[u8]) -> NsResult<u32> {
        self.client
            .write_file(self.sim, ep, path, 0, data)
            .map_err(|e| NsError(e.to_string()))
    }

    fn stat(&mut self, ep: EndpointId, path: &[String]) -> NsResult<Stat> {
        self.client.stat(self.sim, ep, path).map_err(|e| NsError(e.to_string()))
    }
}

pub fn parse_abs(path: &str) -> NsResult<Path> {
    if !path.starts_with('/') {
        return Err(NsError("path not absolute".into()));
    }
    Ok(normalize(&crate::client::split_path(path)))
}

/// Folds `..` components.
pub fn normalize(parts: &[String]) -> Path {
    let mut out: Path = Vec::new();
    for p in parts {
        if p == ".." {
            out.pop();
        } else if p != "." && !p.is_empty() {
            out.push(p.clone());
        }
    }
    out
}

pub fn join(path: &[String]) -> String {
    format!("/{}", path.join("/"))
}

/// A node of an evaluated view.
#[derive(Debug, Clone, PartialEq)]
pub enum VNode {
    Dir(BTreeMap<String, VNode>),
    /// Stands for another namespace path.
    Link(Path),
    /// A file whose content is the readings of these files, one per line.
    Lines(Vec<Path>),
}

impl VNode {
    fn dir() -> VNode {
        VNode::Dir(BTreeMap::new())
    }

    fn child_dir(&mut self, name: &str) -> &mut VNode {
        let VNode::Dir(m) = self else {
            panic!("not a directory")
        };
        m.entry(name.to_string()).or_insert_with(VNode::dir)
    }

    fn insert(&mut self, name: &str, node: VNode) {
        if let VNode::Dir(m) = self {
            m.insert(name.to_string(), node);
        }
    }
}

/// One sensor found in the structural view.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRef {
    pub id: String,
    pub cluster: String,
    /// Namespace path of the sensor's directory.
    pub path: Path,
}

impl SensorRef {
    pub fn file(&self, name: &str) -> Path {
        let mut p = self.path.clone();
        p.push(name.to_string());
        p
    }
}

/// Parsed `info` file of a device.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceInfo {
    pub kind: String,
    pub position: Option<(f64, f64)>,
    pub tags: Vec<(String, String)>,
}

pub fn parse_info(text: &str) -> DeviceInfo {
    let mut info = DeviceInfo::default();
    for line in text.lines() {
        let Some((k, v)) = line.split_once(' ') else {
            continue;
        };
        match k {
            "id" => {}
            "kind" => info.kind = v.to_string(),
            "position" => {
                let mut it = v.split_whitespace().filter_map(|x| x.parse::<f64>().ok());
                if let (Some(x), Some(y)) = (it.next(), it.next()) {
                    info.position = Some((x, y));
                }
            }
            _ => info.tags.push((k.to_string(), v.to_string())),
        }
    }
    info
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Band {
    Low,
    Medium,
    High,
    Unknown,
}

impl Band {
    pub fn of(energy: Option<f64>, low_j: f64, high_j: f64) -> Band {
        match energy {
            None => Band::Unknown,
            Some(e) if e < low_j => Band::Low,
            Some(e) if e < high_j => Band::Medium,
            Some(_) => Band::High,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Band::Low => "low",
            Band::Medium => "medium",
            Band::High => "high",
            Band::Unknown => "unknown",
        }
    }
}

/// Formats one coordinate as a cell label such as `54W` or `35N`.
pub fn cell_label(deg: f64, cell: f64, pos: char, neg: char) -> String {
    let base = (deg.abs() / cell).floor() * cell;
    let hemi = if deg < 0.0 { neg } else { pos };
    format!("{base}{hemi}")
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViewKind {
    /// Evaluated once when built.
    Static(VNode),
    /// Sensors grouped by kind and the value of one tag.
    Logical {
        sources: Vec<Path>,
        tag_key: String,
        labels: BTreeMap<String, String>,
    },
    /// Sensors banded by remaining energy.
    Resource {
        sources: Vec<Path>,
        low_j: f64,
        high_j: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Entry {
    Mount { point: Path, ep: EndpointId, root: Path },
    Bind { point: Path, source: Path },
    Dir { point: Path },
    View { point: Path, kind: ViewKind },
}

impl Entry {
    fn point(&self) -> &Path {
        match self {
            Entry::Mount { point, .. } | Entry::Bind { point, .. } | Entry::Dir { point } | Entry::View { point, .. } => point,
        }
    }
}

/// What a namespace path names.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Remote { ep: EndpointId, path: Path },
    /// A directory made by mkdir or implied by a deeper entry.
    Dir,
    View(VNode),
}

const MAX_HOPS: usize = 32;

/// Ordered mount/bind table. Later entries shadow earlier ones.
#[derive(Debug, Clone, Default)]
pub struct Namespace {
    entries: Vec<Entry>,
}

impl Namespace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mount(&mut self, point: &str, ep: EndpointId) -> NsResult<()> {
        self.mount_at(point, ep, "/")
    }

    pub fn mount_at(&mut self, point: &str, ep: EndpointId, root: &str) -> NsResult<()> {
        let point = parse_abs(point)?;
        let root = parse_abs(root)?;
        self.entries.push(Entry::Mount { point, ep, root });
        Ok(())
    }

    pub fn bind(&mut self, source: &str, point: &str) -> NsResult<()> {
        let source = parse_abs(source)?;
        let point = parse_abs(point)?;
        if point.starts_with(&source) && point.len() > source.len() {
            return Err(NsError("bind cycle".into()));
        }
        self.entries.push(Entry::Bind { point, source });
        Ok(())
    }

    pub fn mkdir(&mut self, point: &str) -> NsResult<()> {
        let point = parse_abs(point)?;
        self.entries.push(Entry::Dir { point });
        Ok(())
    }

    pub fn add_view(&mut self, point: &str, kind: ViewKind) -> NsResult<()> {
        let point = parse_abs(point)?;
        self.entries.push(Entry::View { point, kind });
        Ok(())
    }

    /// Mount points currently in the table, most recent last.
    pub fn mounts(&self) -> Vec<(String, EndpointId)> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                Entry::Mount { point, ep, .. } => Some((join(point), *ep)),
                _ => None,
            })
            .collect()
    }

    fn implied_dir(&self, path: &[String]) -> bool {
        path.is_empty()
            || self
                .entries
                .iter()
                .any(|e| e.point().len() > path.len() && e.point().starts_with(path))
    }

    /// Names that deeper entries add directly below `path`.
    fn implied_children(&self, path: &[String]) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            let p = e.point();
            if p.len() > path.len() && p.starts_with(path) {
                let name = &p[path.len()];
                if !out.contains(name) {
                    out.push(name.clone());
                }
            }
        }
        out
    }

    /// Maps a namespace path to what it names. Views are evaluated through
    /// `fs`, so a logical or resource view reflects the network right now.
    pub fn resolve(&self, fs: &mut dyn FileService, path: &[String]) -> NsResult<Target> {
        let mut path = normalize(path);
        for _ in 0..MAX_HOPS {
            let hit = self.entries.iter().rev().find(|e| match e {
                Entry::Dir { point } => *point == path,
                e => path.starts_with(e.point()),
            });
            let Some(e) = hit else {
                return if self.implied_dir(&path) { Ok(Target::Dir) } else { Err(not_found()) };
            };
            let rest = &path[e.point().len()..];
            match e {
                Entry::Dir { .. } => return Ok(Target::Dir),
                Entry::Mount { ep, root, .. } => {
                    let mut p = root.clone();
                    p.extend(rest.iter().cloned());
                    return Ok(Target::Remote { ep: *ep, path: p });
                }
                Entry::Bind { source, .. } => {
                    let mut p = source.clone();
                    p.extend(rest.iter().cloned());
                    path = p;
                }
                Entry::View { kind, .. } => {
                    let mut node = self.eval_view(fs, kind)?;
                    let mut i = 0;
                    while i < rest.len() {
                        match node {
                            VNode::Dir(mut m) => {
                                node = m.remove(&rest[i]).ok_or_else(not_found)?;
                                i += 1;
                            }
                            VNode::Link(_) => break,
                            VNode::Lines(_) => return Err(not_found()),
                        }
                    }
                    match node {
                        VNode::Link(mut target) => {
                            target.extend(rest[i..].iter().cloned());
                            path = target;
                        }
                        n => return Ok(Target::View(n)),
                    }
                }
            }
        }
        Err(NsError("too many levels of binding".into()))
    }

    fn eval_view(&self, fs: &mut dyn FileService, kind: &ViewKind) -> NsResult<VNode> {
        match kind {
            ViewKind::Static(n) => Ok(n.clone()),
            ViewKind::Logical { sources, tag_key, labels } => {
                let sensors = self.sensors(fs, sources)?;
                let mut root = VNode::dir();
                for s in sensors {
                    let Ok(info) = self.read_string(fs, &s.file("info")).map(|t| parse_info(&t)) else {
                        continue;
                    };
                    let Some((_, v)) = info.tags.iter().find(|(k, _)| k == tag_key) else {
                        continue;
                    };
                    let label = labels.get(v).cloned().unwrap_or_else(|| v.clone());
                    root.child_dir(&info.kind)
                        .child_dir(&label)
                        .insert(&s.id, VNode::Link(s.path.clone()));
                }
                Ok(root)
            }
            ViewKind::Resource { sources, low_j, high_j } => {
                let sensors = self.sensors(fs, sources)?;
                let mut energy = VNode::dir();
                for band in [Band::Low, Band::Medium, Band::High] {
                    energy.child_dir(band.as_str());
                }
                for s in sensors {
                    let e = self.read_number(fs, &s.file("remaining-energy"));
                    let band = Band::of(e, *low_j, *high_j);
                    energy.child_dir(band.as_str()).insert(&s.id, VNode::Link(s.path.clone()));
                }
                let mut root = VNode::dir();
                root.insert("energy", energy);
                Ok(root)
            }
        }
    }

    pub fn list(&self, fs: &mut dyn FileService, path: &[String]) -> NsResult<Vec<Stat>> {
        let path = normalize(path);
        let mut out = match self.resolve(fs, &path)? {
            Target::Remote { ep, path: p } => fs.list(ep, &p)?,
            Target::Dir => Vec::new(),
            Target::View(VNode::Dir(m)) => m.iter().map(|(k, v)| synthetic_stat(k, v)).collect(),
            Target::View(_) => return Err(NsError("not a directory".into())),
        };
        for name in self.implied_children(&path) {
            if !out.iter().any(|s| s.name == name) {
                out.push(synthetic_stat(&name, &VNode::dir()));
            }
        }
        Ok(out)
    }

    pub fn read(&self, fs: &mut dyn FileService, path: &[String]) -> NsResult<Vec<u8>> {
        match self.resolve(fs, path)? {
            Target::Remote { ep, path } => fs.read(ep, &path),
            Target::View(VNode::Lines(files)) => {
                let mut out = String::new();
                for f in files {
                    if let Ok(t) = self.read_string(fs, &f) {
                        out.push_str(t.trim_end());
                        out.push('\n');
                    }
                }
                Ok(out.into_bytes())
            }
            _ => Err(NsError("is a directory".into())),
        }
    }

    pub fn write(&self, fs: &mut dyn FileService, path: &[String], data: &[u8]) -> NsResult<u32> {
        match self.resolve(fs, path)? {
            Target::Remote { ep, path } => fs.write(ep, &path, data),
            Target::View(VNode::Lines(_)) => Err(NsError("permission denied".into())),
            _ => Err(NsError("is a directory".into())),
        }
    }

    pub fn stat(&self, fs: &mut dyn FileService, path: &[String]) -> NsResult<Stat> {
        let path = normalize(path);
        let name = path.last().cloned().unwrap_or_else(|| "/".into());
        match self.resolve(fs, &path)? {
            Target::Remote { ep, path: p } => {
                let mut st = fs.stat(ep, &p)?;
                st.name = name;
                Ok(st)
            }
            Target::Dir => Ok(synthetic_stat(&name, &VNode::dir())),
            Target::View(n) => Ok(synthetic_stat(&name, &n)),
        }
    }

    pub fn is_dir(&self, fs: &mut dyn FileService, path: &[String]) -> bool {
        self.stat(fs, path).is_ok_and(|s| s.is_dir())
    }

    pub fn read_string(&self, fs: &mut dyn FileService, path: &[String]) -> NsResult<String> {
        self.read(fs, path).map(|b| String::from_utf8_lossy(&b).into_owned())
    }

    fn read_number(&self, fs: &mut dyn FileService, path: &[String]) -> Option<f64> {
        self.read_string(fs, path).ok()?.trim().parse().ok()
    }

    /// Sensors under structural mounts: `<source>/<cluster>/sensors/<id>`.
    pub fn sensors(&self, fs: &mut dyn FileService, sources: &[Path]) -> NsResult<Vec<SensorRef>> {
        let mut out = Vec::new();
        for src in sources {
            for c in self.list(fs, src)? {
                if !c.is_dir() {
                    continue;
                }
                let mut dir = src.clone();
                dir.push(c.name.clone());
                dir.push("sensors".into());
                let Ok(list) = self.list(fs, &dir) else { continue };
                for s in list.into_iter().filter(|s| s.is_dir()) {
                    let mut path = dir.clone();
                    path.push(s.name.clone());
                    out.push(SensorRef {
                        id: s.name,
                        cluster: c.name.clone(),
                        path,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Builds `/<lon>/<lat>/{sensors.., data}` cells plus one directory per
    /// region, from the positions the devices report.
    pub fn build_location(&self, fs: &mut dyn FileService, sources: &[Path], geo: &Geo, cell: f64, regions: &[Region]) -> NsResult<VNode> {
        let sensors = self.sensors(fs, sources)?;
        let mut placed = Vec::new();
        for s in sensors {
            let Some(pos) = self
                .read_string(fs, &s.file("info"))
                .ok()
                .and_then(|t| parse_info(&t).position)
            else {
                continue;
            };
            placed.push((s, geo.to_lon_lat(pos)));
        }
        Ok(location_tree(&placed, cell, regions))
    }
}

/// Pure part of the location view.
pub fn location_tree(placed: &[(SensorRef, (f64, f64))], cell: f64, regions: &[Region]) -> VNode {
    let mut root = VNode::dir();
    let mut cells: BTreeMap<(String, String), Vec<Path>> = BTreeMap::new();
    for (s, (lon, lat)) in placed {
        let lon_l = cell_label(*lon, cell, 'E', 'W');
        let lat_l = cell_label(*lat, cell, 'N', 'S');
        root.child_dir(&lon_l)
            .child_dir(&lat_l)
            .insert(&s.id, VNode::Link(s.path.clone()));
        cells.entry((lon_l, lat_l)).or_default().push(s.file("reading"));
    }
    for ((lon_l, lat_l), files) in cells {
        root.child_dir(&lon_l).child_dir(&lat_l).insert("data", VNode::Lines(files));
    }
    for r in regions {
        let dir = root.child_dir(&r.name);
        for (s, (lon, lat)) in placed {
            if r.contains(*lon, *lat) {
                dir.insert(&s.id, VNode::Link(s.path.clone()));
            }
        }
    }
    root
}

pub fn synthetic_stat(name: &str, node: &VNode) -> Stat {
    let dir = !matches!(node, VNode::Lines(_));
    Stat {
        name: name.to_string(),
        qid: Qid {
            kind: if dir { QidKind::Dir } else { QidKind::File },
            version: 0,
            path: 0,
        },
        mode: if dir { DMDIR | 0o555 } else { 0o444 },
        length: 0,
        owner: "view".into(),
        group: "view".into(),
        mtime: 0,
    }
}

/// Mounts a responder below `/mnt/Emergency`, which must already exist.
pub fn emergency_mount(ns: &mut Namespace, fs: &mut dyn FileService, ep: EndpointId, name: &str) -> NsResult<()> {
    if !ns.is_dir(fs, &parse_abs("/mnt/Emergency")?) {
        return Err(not_found());
    }
    ns.mount(&format!("/mnt/Emergency/{name}"), ep)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlertReport {
    pub delivered: usize,
    pub failures: Vec<(String, String)>,
}

/// Writes `text` to the alert file of every responder under
/// `/mnt/Emergency`.
pub fn raise_alert(ns: &Namespace, fs: &mut dyn FileService, text: &str) -> NsResult<AlertReport> {
    let base = parse_abs("/mnt/Emergency")?;
    let mut report = AlertReport::default();
    for child in ns.list(fs, &base)? {
        let mut p = base.clone();
        p.push(child.name.clone());
        p.push("alert".into());
        match ns.write(fs, &p, text.as_bytes()) {
            Ok(_) => report.delivered += 1,
            Err(e) => report.failures.push((child.name, e.0)),
        }
    }
    Ok(report)
}

/// An in-region sensor offered to the planner.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub cluster: String,
    pub energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rationale {
    pub id: String,
    pub included: bool,
    pub band: Band,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPlan {
    pub region: String,
    pub cluster: String,
    pub selected: Vec<String>,
    pub aggregation: String,
    pub rate: u64,
    pub rationale: Vec<Rationale>,
}

impl TaskPlan {
    pub fn report(&self) -> String {
        let mut out = format!(
            "plan {} cluster={} fn={} rate={}\n",
            self.region, self.cluster, self.aggregation, self.rate
        );
        out.push_str(&rationale_lines(&self.rationale));
        out.push_str(&format!("selected {}\n", self.selected.join(" ")));
        out
    }
}

fn rationale_lines(rs: &[Rationale]) -> String {
    rs.iter()
        .map(|r| {
            let verdict = if r.included { "included" } else { "excluded" };
            format!("{} {} {}\n", r.id, verdict, r.reason)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanError {
    NoSensors,
    CoverageUnmet { have: usize, need: usize, rationale: Vec<Rationale> },
}

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanError::NoSensors => f.write_str("no sensors in region"),
            PlanError::CoverageUnmet { have, need, .. } => write!(f, "coverage unmet ({have}<{need})"),
        }
    }
}

impl std::error::Error for PlanError {}

impl PlanError {
    /// Error line followed by the per-sensor reasons.
    pub fn report(&self) -> String {
        match self {
            PlanError::NoSensors => format!("{self}\n"),
            PlanError::CoverageUnmet { rationale, .. } => format!("{self}\n{}", rationale_lines(rationale)),
        }
    }
}

/// Picks the cluster holding most of the region, then drops sensors whose
/// energy is low or unknown.
pub fn plan_query(region: &str, candidates: &[Candidate], coverage: usize, low_j: f64, high_j: f64, aggregation: &str, rate: u64) -> Result<TaskPlan, PlanError> {
    if candidates.is_empty() {
        return Err(PlanError::NoSensors);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in candidates {
        *counts.entry(c.cluster.as_str()).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let cluster = counts
        .iter()
        .find(|(_, n)| **n == best)
        .map(|(c, _)| c.to_string())
        .unwrap_or_default();

    let mut rationale = Vec::new();
    let mut selected = Vec::new();
    for c in candidates {
        let band = Band::of(c.energy, low_j, high_j);
        let (included, reason) = if c.cluster != cluster {
            (false, format!("other cluster {}", c.cluster))
        } else {
            match band {
                Band::Low => (false, "low energy".to_string()),
                Band::Unknown => (false, "energy unknown".to_string()),
                b => (true, format!("{} energy", b.as_str())),
            }
        };
        if included {
            selected.push(c.id.clone());
        }
        rationale.push(Rationale {
            id: c.id.clone(),
            included,
            band,
            reason,
        });
    }
    if selected.len() < coverage {
        return Err(PlanError::CoverageUnmet {
            have: selected.len(),
            need: coverage,
            rationale,
        });
    }
    Ok(TaskPlan {
        region: region.to_string(),
        cluster,
        selected,
        aggregation: aggregation.to_string(),
        rate,
        rationale,
    })
}
