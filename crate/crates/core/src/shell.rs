//! Command interpreter over a simulated network, plus the script runner
//! used for replays.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::client::Client;
use crate::fscore::mode_string;
use crate::views::{self, join, normalize, parse_abs, raise_alert, Candidate, Namespace, Path, Remote, Target, ViewKind};
use crate::world::World;

pub const DEFAULT_USER: &str = "admin";
pub const DISCOVERY_LIMIT: u64 = 10_000;

const HELP: &str = "\
mount <server> <path>     mount /dev/network, /dev/<cluster> or /dev/<responder>
bind <source> <path>      make <path> show <source>
mkdir <path>              create an empty directory in the namespace
ls [-l] [path]            list a directory
cd <path> | pwd           change or show the working directory
cat <path>                print a file
write <path> <text>       write text to a file
stat <path>               show one directory entry
tree [path]               list a subtree recursively
groups <cluster>          show a cluster's sensor groups
view build location [root] [cell]
view build logical <tag> [root]
view build resource [root] [low high]
plan <region> <coverage> <fn> <rate>
alert <text>              notify every responder under /mnt/Emergency
rate <cluster> <period> <ids..>
tick <n> | time | seed    virtual time and seed
log [n]                   last n event log lines
user [name]               show or switch user
";

pub struct Shell {
    pub world: World,
    pub client: Client,
    pub ns: Namespace,
    pub cwd: Path,
    pub history: Vec<String>,
    pub transcript: String,
    location_root: Option<Path>,
    thresholds: (f64, f64),
}

/// Outcome of one command: text to print, or an error name with optional
/// detail lines.
pub type CmdResult = Result<String, String>;

impl Shell {
    pub fn new(world: World) -> Shell {
        let client = Client::new(world.client, DEFAULT_USER);
        let thresholds = (world.cfg.low_j, world.cfg.high_j);
        Shell {
            world,
            client,
            ns: Namespace::new(),
            cwd: Vec::new(),
            history: Vec::new(),
            transcript: String::new(),
            location_root: None,
            thresholds,
        }
    }

    /// Loads a scenario and runs device discovery.
    pub fn from_scenario(text: &str, seed: Option<u64>) -> Result<Shell, String> {
        let mut world = World::load(text, seed).map_err(|e| e.to_string())?;
        world.discover(DISCOVERY_LIMIT).map_err(|e| e.to_string())?;
        Ok(Shell::new(world))
    }

    fn parts(&mut self) -> (&mut Namespace, Remote<'_>) {
        (
            &mut self.ns,
            Remote {
                sim: &mut self.world.sim,
                client: &mut self.client,
            },
        )
    }

    fn path(&self, arg: &str) -> Path {
        if arg.starts_with('/') {
            normalize(&crate::client::split_path(arg))
        } else {
            let mut p = self.cwd.clone();
            p.extend(crate::client::split_path(arg));
            normalize(&p)
        }
    }

    /// Runs one line and records it in the transcript. Returns the
    /// rendered output and whether the command failed.
    pub fn run_line(&mut self, line: &str) -> (String, bool) {
        let r = self.execute(line);
        let (text, failed) = match r {
            Ok(t) => (t, false),
            Err(e) => (render_error(&e), true),
        };
        let _ = writeln!(self.transcript, "> {line}");
        self.transcript.push_str(&text);
        (text, failed)
    }

    pub fn execute(&mut self, line: &str) -> CmdResult {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return Ok(String::new());
        }
        self.history.push(line.to_string());
        let words: Vec<&str> = line.split_whitespace().collect();
        let args = &words[1..];
        match words[0] {
            "help" => Ok(HELP.to_string()),
            "mount" => self.cmd_mount(args),
            "bind" => match args {
                [src, dst] => {
                    let (s, d) = (join(&self.path(src)), join(&self.path(dst)));
                    self.ns.bind(&s, &d).map(|_| String::new()).map_err(|e| e.0)
                }
                _ => Err(usage("bind <source> <path>")),
            },
            "mkdir" => match args {
                [p] => {
                    let p = join(&self.path(p));
                    self.ns.mkdir(&p).map(|_| String::new()).map_err(|e| e.0)
                }
                _ => Err(usage("mkdir <path>")),
            },
            "ls" => self.cmd_ls(args),
            "cd" => {
                let p = self.path(args.first().copied().unwrap_or("/"));
                let (ns, mut fs) = self.parts();
                if !ns.is_dir(&mut fs, &p) {
                    return Err("not a directory".into());
                }
                self.cwd = p;
                Ok(String::new())
            }
            "pwd" => Ok(format!("{}\n", join(&self.cwd))),
            "cat" => match args {
                [p] => {
                    let p = self.path(p);
                    let (ns, mut fs) = self.parts();
                    let text = ns.read_string(&mut fs, &p).map_err(|e| e.0)?;
                    Ok(with_newline(text))
                }
                _ => Err(usage("cat <path>")),
            },
            "write" => {
                if args.len() < 2 {
                    return Err(usage("write <path> <text>"));
                }
                let p = self.path(args[0]);
                let text = args[1..].join(" ");
                let (ns, mut fs) = self.parts();
                ns.write(&mut fs, &p, text.as_bytes()).map_err(|e| e.0)?;
                Ok(String::new())
            }
            "stat" => match args {
                [p] => {
                    let p = self.path(p);
                    let (ns, mut fs) = self.parts();
                    let st = ns.stat(&mut fs, &p).map_err(|e| e.0)?;
                    Ok(format!(
                        "{} {} {} {} {} version={}\n",
                        st.name,
                        mode_string(st.mode),
                        st.owner,
                        st.group,
                        st.length,
                        st.qid.version
                    ))
                }
                _ => Err(usage("stat <path>")),
            },
            "tree" => {
                let p = self.path(args.first().copied().unwrap_or("."));
                let mut out = String::new();
                let (ns, mut fs) = self.parts();
                tree(ns, &mut fs, &p, "", &mut out).map_err(|e| e.0)?;
                Ok(out)
            }
            "groups" => self.cmd_groups(args),
            "view" => self.cmd_view(args),
            "plan" => self.cmd_plan(args),
            "alert" => self.cmd_alert(&args.join(" ")),
            "rate" => {
                if args.len() < 3 {
                    return Err(usage("rate <cluster> <period> <ids..>"));
                }
                let period = parse_num(args[1])?;
                self.world.set_report_rate(args[0], &args[2..], period)?;
                Ok(String::new())
            }
            "tick" => {
                let n = parse_num(args.first().copied().unwrap_or("1"))?;
                let t = self.world.sim.now() + n;
                self.world.sim.run_until(t).map_err(|e| e.to_string())?;
                Ok(String::new())
            }
            "time" => Ok(format!("{}\n", self.world.sim.now())),
            "seed" => Ok(format!("{}\n", self.world.cfg.seed)),
            "log" => {
                let n = match args.first() {
                    Some(a) => parse_num(a)? as usize,
                    None => 10,
                };
                let lines = self.world.sim.log().lines();
                let from = lines.len().saturating_sub(n);
                Ok(lines[from..].iter().map(|l| format!("{l}\n")).collect())
            }
            "user" => match args {
                [] => Ok(format!("{}\n", self.client.uname())),
                [u] => {
                    self.client.set_uname(u);
                    Ok(String::new())
                }
                _ => Err(usage("user [name]")),
            },
            other => Err(format!("unknown command {other}")),
        }
    }

    fn cmd_mount(&mut self, args: &[&str]) -> CmdResult {
        let [server, point] = args else {
            return Err(usage("mount <server> <path>"));
        };
        let point = self.path(point);
        let Some(name) = server.strip_prefix("/dev/") else {
            return Err("not found".into());
        };
        if name == "network" {
            let clusters = self.world.clusters.clone();
            for (c, ep) in clusters {
                let mut p = point.clone();
                p.push(c);
                self.ns.mount(&join(&p), ep).map_err(|e| e.0)?;
            }
            return Ok(String::new());
        }
        let ep = self
            .world
            .cluster_ep(name)
            .or_else(|| self.world.responder_ep(name))
            .ok_or_else(|| "not found".to_string())?;
        if point.len() == 3 && point[..2] == ["mnt", "Emergency"] {
            let (ns, mut fs) = self.parts();
            return views::emergency_mount(ns, &mut fs, ep, &point[2])
                .map(|_| String::new())
                .map_err(|e| e.0);
        }
        self.ns.mount(&join(&point), ep).map(|_| String::new()).map_err(|e| e.0)
    }

    fn cmd_ls(&mut self, args: &[&str]) -> CmdResult {
        let (long, rest) = match args.first() {
            Some(&"-l") => (true, &args[1..]),
            _ => (false, args),
        };
        let p = self.path(rest.first().copied().unwrap_or("."));
        let (ns, mut fs) = self.parts();
        let list = ns.list(&mut fs, &p).map_err(|e| e.0)?;
        let mut out = String::new();
        for st in list {
            if long {
                let _ = writeln!(
                    out,
                    "{} {} {} {:>6} {}",
                    mode_string(st.mode),
                    st.owner,
                    st.group,
                    st.length,
                    st.name
                );
            } else {
                let _ = writeln!(out, "{}", st.name);
            }
        }
        Ok(out)
    }

    fn cmd_groups(&mut self, args: &[&str]) -> CmdResult {
        let [cluster] = args else {
            return Err(usage("groups <cluster>"));
        };
        let ep = self.world.cluster_ep(cluster).ok_or("not found")?;
        let mut fs = Remote {
            sim: &mut self.world.sim,
            client: &mut self.client,
        };
        use views::FileService;
        let groups = fs.list(ep, &["groups".to_string()]).map_err(|e| e.0)?;
        let mut out = String::new();
        for g in groups {
            let members = fs
                .list(ep, &["groups".to_string(), g.name.clone()])
                .map_err(|e| e.0)?;
            let ids: Vec<String> = members.into_iter().map(|s| s.name).collect();
            let _ = writeln!(out, "{}: {}", g.name, ids.join(" "));
        }
        Ok(out)
    }

    /// Parents of every mounted cluster: the roots of the structural view.
    fn structural_roots(&self) -> Vec<Path> {
        let mut out: Vec<Path> = Vec::new();
        for (point, ep) in self.ns.mounts() {
            if !self.world.clusters.iter().any(|(_, e)| *e == ep) {
                continue;
            }
            let mut p = parse_abs(&point).unwrap_or_default();
            p.pop();
            if !out.contains(&p) {
                out.push(p);
            }
        }
        out
    }

    fn cmd_view(&mut self, args: &[&str]) -> CmdResult {
        let sources = self.structural_roots();
        if sources.is_empty() {
            return Err("no network mounted".into());
        }
        match args {
            ["build", "location", rest @ ..] => {
                let root = self.path(rest.first().copied().unwrap_or("/location"));
                let cell = match rest.get(1) {
                    Some(c) => c.parse::<f64>().ok().filter(|c| *c > 0.0).ok_or("bad cell size")?,
                    None => 1.0,
                };
                let geo = self.world.cfg.geo.clone();
                let regions = self.world.cfg.regions.clone();
                let (ns, mut fs) = self.parts();
                let tree = ns
                    .build_location(&mut fs, &sources, &geo, cell, &regions)
                    .map_err(|e| e.0)?;
                ns.add_view(&join(&root), ViewKind::Static(tree)).map_err(|e| e.0)?;
                self.location_root = Some(root);
                Ok(String::new())
            }
            ["build", "logical", tag, rest @ ..] => {
                let root = self.path(rest.first().copied().unwrap_or("/data"));
                let labels: BTreeMap<String, String> = self
                    .world
                    .cfg
                    .groups
                    .iter()
                    .filter(|g| g.key == *tag)
                    .map(|g| (g.value.clone(), g.name.clone()))
                    .collect();
                let kind = ViewKind::Logical {
                    sources,
                    tag_key: tag.to_string(),
                    labels,
                };
                self.ns.add_view(&join(&root), kind).map(|_| String::new()).map_err(|e| e.0)
            }
            ["build", "resource", rest @ ..] => {
                let root = self.path(rest.first().copied().unwrap_or("/resource"));
                let (mut low_j, mut high_j) = (self.world.cfg.low_j, self.world.cfg.high_j);
                if let [_, l, h] = rest {
                    low_j = l.parse().map_err(|_| "bad threshold")?;
                    high_j = h.parse().map_err(|_| "bad threshold")?;
                }
                if !(0.0 < low_j && low_j < high_j) {
                    return Err("bad threshold".into());
                }
                self.thresholds = (low_j, high_j);
                let kind = ViewKind::Resource { sources, low_j, high_j };
                self.ns.add_view(&join(&root), kind).map(|_| String::new()).map_err(|e| e.0)
            }
            _ => Err(usage("view build location|logical|resource ...")),
        }
    }

    fn cmd_plan(&mut self, args: &[&str]) -> CmdResult {
        let [region, coverage, func, rate] = args else {
            return Err(usage("plan <region> <coverage> <fn> <rate>"));
        };
        let coverage = parse_num(coverage)? as usize;
        let rate = parse_num(rate)?;
        let Some(loc) = self.location_root.clone() else {
            return Err("no location view".into());
        };
        let mut dir = loc;
        dir.push(region.to_string());
        let (low_j, high_j) = self.thresholds;
        let mut candidates = Vec::new();
        {
            let clusters = self.world.clusters.clone();
            let (ns, mut fs) = self.parts();
            let list = ns.list(&mut fs, &dir).map_err(|e| e.0)?;
            for st in list {
                let mut p = dir.clone();
                p.push(st.name.clone());
                let Ok(Target::Remote { ep, .. }) = ns.resolve(&mut fs, &p) else {
                    continue;
                };
                let Some((cluster, _)) = clusters.iter().find(|(_, e)| *e == ep) else {
                    continue;
                };
                p.push("remaining-energy".into());
                let energy = ns
                    .read_string(&mut fs, &p)
                    .ok()
                    .and_then(|t| t.trim().parse::<f64>().ok());
                candidates.push(Candidate {
                    id: st.name,
                    cluster: cluster.clone(),
                    energy,
                });
            }
        }
        let plan = views::plan_query(region, &candidates, coverage, low_j, high_j, func, rate)
            .map_err(|e| e.report().trim_end().to_string())?;
        let ids: Vec<&str> = plan.selected.iter().map(String::as_str).collect();
        self.world.set_report_rate(&plan.cluster, &ids, rate)?;
        self.world
            .install_task(&plan.cluster, &format!("plan-{region}"), &ids, func, rate)?;
        Ok(plan.report())
    }

    fn cmd_alert(&mut self, text: &str) -> CmdResult {
        if text.is_empty() {
            return Err(usage("alert <text>"));
        }
        let (ns, mut fs) = self.parts();
        let report = raise_alert(ns, &mut fs, text).map_err(|e| e.0)?;
        let mut out = format!("delivered {}\n", report.delivered);
        for (name, err) in &report.failures {
            let _ = writeln!(out, "failed {name}: {err}");
            let client = self.world.client;
            let dst = self.world.responder_ep(name);
            self.world
                .sim
                .log_event("alert", client, dst, &format!("failed {err}"));
        }
        Ok(out)
    }
}

fn usage(u: &str) -> String {
    format!("usage: {u}")
}

fn parse_num(s: &str) -> Result<u64, String> {
    s.parse().map_err(|_| format!("bad number {s}"))
}

fn with_newline(mut s: String) -> String {
    if !s.is_empty() && !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

/// `error: <ename>` followed by any detail lines.
pub fn render_error(e: &str) -> String {
    let mut out = format!("error: {e}");
    if !out.ends_with('\n') {
        out.push('\n');
    }
    out
}

fn tree(ns: &Namespace, fs: &mut dyn views::FileService, path: &[String], prefix: &str, out: &mut String) -> views::NsResult<()> {
    for st in ns.list(fs, path)? {
        let rel = format!("{prefix}{}", st.name);
        if st.is_dir() {
            let _ = writeln!(out, "{rel}/");
            let mut p = path.to_vec();
            p.push(st.name.clone());
            tree(ns, fs, &p, &format!("{rel}/"), out)?;
        } else {
            let _ = writeln!(out, "{rel}");
        }
    }
    Ok(())
}

/// One `> command` of a script and the output it is expected to print.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub line: usize,
    pub command: String,
    pub expected: Option<Vec<String>>,
}

/// `#` starts a comment, `> cmd` a command; the lines after a command up
/// to a blank line are its expected output.
pub fn parse_script(text: &str) -> Vec<Step> {
    let mut steps: Vec<Step> = Vec::new();
    let mut in_block = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if let Some(cmd) = line.strip_prefix('>') {
            steps.push(Step {
                line: i + 1,
                command: cmd.trim().to_string(),
                expected: None,
            });
            in_block = true;
        } else if line.is_empty() {
            in_block = false;
        } else if in_block {
            let step = steps.last_mut().expect("block follows a command");
            step.expected.get_or_insert_with(Vec::new).push(line.to_string());
        } else if !line.starts_with('#') {
            // Stray text outside any block is treated as a command.
            steps.push(Step {
                line: i + 1,
                command: line.trim().to_string(),
                expected: None,
            });
        }
    }
    steps
}

pub fn normalized_lines(text: &str) -> Vec<String> {
    let mut v: Vec<String> = text.lines().map(|l| l.trim_end().to_string()).collect();
    while v.last().is_some_and(|l| l.is_empty()) {
        v.pop();
    }
    v
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScriptReport {
    pub steps: usize,
    pub mismatches: Vec<String>,
    pub hard_error: Option<String>,
}

impl ScriptReport {
    pub fn exit_code(&self) -> i32 {
        if self.hard_error.is_some() {
            1
        } else if !self.mismatches.is_empty() {
            2
        } else {
            0
        }
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for m in &self.mismatches {
            out.push_str(m);
        }
        if let Some(e) = &self.hard_error {
            let _ = writeln!(out, "{e}");
        }
        let status = match self.exit_code() {
            0 => "pass",
            1 => "error",
            _ => "mismatch",
        };
        let _ = writeln!(
            out,
            "{status}: {} steps, {} mismatches",
            self.steps,
            self.mismatches.len()
        );
        out
    }
}

impl Shell {
    /// Runs every step in order. A failing command without an expected
    /// block stops the run.
    pub fn run_script(&mut self, text: &str) -> ScriptReport {
        let mut report = ScriptReport::default();
        for step in parse_script(text) {
            report.steps += 1;
            let (out, failed) = self.run_line(&step.command);
            match &step.expected {
                None if failed => {
                    report.hard_error = Some(format!(
                        "line {}: `{}` failed: {}",
                        step.line,
                        step.command,
                        out.trim_end()
                    ));
                    break;
                }
                None => {}
                Some(want) => {
                    let got = normalized_lines(&out);
                    if &got != want {
                        let mut m = format!("line {}: output of `{}` differs\n", step.line, step.command);
                        for l in want {
                            let _ = writeln!(m, "  - {l}");
                        }
                        for l in &got {
                            let _ = writeln!(m, "  + {l}");
                        }
                        report.mismatches.push(m);
                    }
                }
            }
        }
        report
    }
}
