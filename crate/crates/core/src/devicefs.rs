//! Leaf-sensor file server with a fixed six-file tree.

use std::fmt::Write as _;

use crate::fscore::{slice_at, Backend, FsError, Limits, Request, Server, ServerNode, Tree, UserDb, ROOT};
use crate::simnet::scenario::{RawSource, SensorConfig, SensorKind};
use crate::simnet::{joules_to_nj, EnergyModel, Power, Radio};

pub const NUM_REGISTERS: usize = 16;
pub const MEM_SIZE: usize = 256;

/// File names in directory order.
pub const DEVICE_FILES: [&str; 6] = ["reading", "control", "remaining-energy", "registers", "mem", "info"];

#[derive(Debug, Clone)]
pub struct SensorState {
    pub id: String,
    pub kind: SensorKind,
    pub raw: RawSource,
    pub raw_y: RawSource,
    pub cal_offset: f64,
    pub position: (f64, f64),
    pub radio: Radio,
    pub registers: [u16; NUM_REGISTERS],
    pub mem: [u8; MEM_SIZE],
    pub tags: Vec<(String, String)>,
}

impl SensorState {
    pub fn from_config(cfg: &SensorConfig, costs: EnergyModel) -> Self {
        SensorState {
            id: cfg.id.clone(),
            kind: cfg.kind,
            raw: cfg.raw.clone(),
            raw_y: cfg.raw_y.clone(),
            cal_offset: 0.0,
            position: cfg.position,
            radio: Radio::new(joules_to_nj(cfg.energy_j), costs, cfg.duty),
            registers: [0; NUM_REGISTERS],
            mem: [0; MEM_SIZE],
            tags: cfg.tags.clone(),
        }
    }

    /// Calibrated values at tick `t`: one for temperature, two for position.
    pub fn values_at(&self, t: u64) -> Vec<f64> {
        match self.kind {
            SensorKind::Temperature => vec![self.raw.value_at(t) + self.cal_offset],
            SensorKind::Position => vec![
                self.raw.value_at(t) + self.cal_offset,
                self.raw_y.value_at(t) + self.cal_offset,
            ],
        }
    }

    pub fn reading_at(&self, t: u64) -> String {
        format_values(&self.values_at(t))
    }

    pub fn tag(&self, key: &str) -> Option<&str> {
        self.tags
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_tag(&mut self, key: &str, value: &str) {
        match self.tags.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value.to_string(),
            None => self.tags.push((key.to_string(), value.to_string())),
        }
    }

    pub fn info_text(&self) -> String {
        let mut s = format!(
            "id {}\nkind {}\nposition {:.6} {:.6}\n",
            self.id, self.kind, self.position.0, self.position.1
        );
        for (k, v) in &self.tags {
            let _ = writeln!(s, "{k} {v}");
        }
        s
    }

    pub fn registers_text(&self) -> String {
        let mut s = String::with_capacity(NUM_REGISTERS * 8);
        for (i, r) in self.registers.iter().enumerate() {
            let _ = writeln!(s, "r{i} {r:04x}");
        }
        s
    }
}
/// Shortest round-trip decimal form, space-separated, newline-terminated.
/// Six fractional digits, space-separated, newline-terminated.
pub fn format_values(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s.push('\n');
    s
}

/// A command accepted by the control file.
#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    Reset,
    Sleep,
    Wakeup,
    Calibrate(f64),
    Tag(String, String),
}

impl Control {
    pub fn parse(text: &str) -> Result<Control, FsError> {
        let line = text.trim();
        let bad = || FsError::other("bad control command");
        if line.contains('\n') {
            return Err(bad());
        }
        match line {
            "reset" => return Ok(Control::Reset),
            "sleep" => return Ok(Control::Sleep),
            "wakeup" => return Ok(Control::Wakeup),
            _ => {}
        }
        if let Some(rest) = line.strip_prefix("tag ") {
            let (k, v) = rest.trim().split_once('=').ok_or_else(bad)?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() || k.contains(char::is_whitespace) || v.contains(char::is_whitespace) {
                return Err(bad());
            }
            return Ok(Control::Tag(k.to_string(), v.to_string()));
        }
        match line.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Control::Calibrate(v)),
            _ => Err(bad()),
        }
    }
}

/// Parses `r<i> <hex4>` lines.
pub fn parse_register_writes(text: &str) -> Result<Vec<(usize, u16)>, FsError> {
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let bad = || FsError::other("bad register write");
        let (name, value) = line.split_once(char::is_whitespace).ok_or_else(bad)?;
        let idx: usize = name.strip_prefix('r').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let value = u16::from_str_radix(value.trim().trim_start_matches("0x"), 16).map_err(|_| bad())?;
        if idx >= NUM_REGISTERS {
            return Err(FsError::other("address out of range"));
        }
        out.push((idx, value));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DevFile {
    Reading,
    Control,
    Energy,
    Registers,
    Mem,
    Info,
}

pub struct DeviceBackend {
    pub state: SensorState,
}

impl DeviceBackend {
    fn mem_range(offset: u64, len: usize) -> Result<std::ops::Range<usize>, FsError> {
        let start = usize::try_from(offset).map_err(|_| FsError::other("address out of range"))?;
        let end = start.checked_add(len).filter(|&e| e <= MEM_SIZE);
        match end {
            Some(end) => Ok(start..end),
            None => Err(FsError::other("address out of range")),
        }
    }
}

impl Backend for DeviceBackend {
    type File = DevFile;

    fn read(&mut self, file: &DevFile, req: &Request<'_>, offset: u64, count: u32) -> Result<Vec<u8>, FsError> {
        let s = &mut self.state;
        let text = match file {
            DevFile::Reading => s.reading_at(req.now),
            DevFile::Control => {
                let power = match s.radio.power_at(req.now) {
                    Power::Awake => "awake",
                    Power::Asleep => "asleep",
                };
                format!("calibration {}\npower {power}\n", s.cal_offset)
            }
            DevFile::Energy => format!("{:.6}\n", s.radio.energy_j(req.now)),
            DevFile::Registers => s.registers_text(),
            DevFile::Info => s.info_text(),
            DevFile::Mem => {
                let r = Self::mem_range(offset, count as usize)?;
                return Ok(s.mem[r].to_vec());
            }
        };
        Ok(slice_at(text.as_bytes(), offset, count))
    }

    fn write(&mut self, file: &DevFile, req: &Request<'_>, offset: u64, data: &[u8]) -> Result<u32, FsError> {
        let s = &mut self.state;
        let text = || std::str::from_utf8(data).map_err(|_| FsError::other("bad control command"));
        match file {
            DevFile::Control => match Control::parse(text()?)? {
                Control::Reset => {
                    s.cal_offset = 0.0;
                    s.registers = [0; NUM_REGISTERS];
                }
                // The reply goes out before the radio state matters: sends
                // are never blocked by the sender's own power state.
                Control::Sleep => s.radio.force(req.now, Some(Power::Asleep)),
                Control::Wakeup => s.radio.force(req.now, Some(Power::Awake)),
                Control::Calibrate(v) => s.cal_offset = v,
                Control::Tag(k, v) => s.set_tag(&k, &v),
            },
            DevFile::Registers => {
                for (i, v) in parse_register_writes(text()?)? {
                    s.registers[i] = v;
                }
            }
            DevFile::Mem => {
                let r = Self::mem_range(offset, data.len())?;
                s.mem[r].copy_from_slice(data);
            }
            DevFile::Reading | DevFile::Energy | DevFile::Info => return Err(FsError::NotWritable),
        }
        Ok(data.len() as u32)
    }

    fn length(&self, file: &DevFile) -> u64 {
        match file {
            DevFile::Mem => MEM_SIZE as u64,
            DevFile::Registers => self.state.registers_text().len() as u64,
            _ => 0,
        }
    }

    fn snapshot(&self, file: &DevFile) -> bool {
        *file != DevFile::Mem
    }

    fn radio(&mut self) -> Option<&mut Radio> {
        Some(&mut self.state.radio)
    }
}

/// FNV-1a; spreads device qid spaces apart.
fn fnv1a32(s: &str) -> u32 {
    s.bytes()
        .fold(0x811c_9dc5u32, |h, b| (h ^ b as u32).wrapping_mul(0x0100_0193))
}

pub fn device_qid_base(id: &str) -> u64 {
    (fnv1a32(id) as u64) << 32
}

pub type DeviceServer = Server<DeviceBackend>;
pub type DeviceNode = ServerNode<DeviceBackend>;

pub fn make_device_server(state: SensorState, users: UserDb) -> DeviceServer {
    let mut t = Tree::new(device_qid_base(&state.id), "admin", "admin", 0o555);
    let files = [
        ("reading", 0o444, DevFile::Reading),
        ("control", 0o644, DevFile::Control),
        ("remaining-energy", 0o444, DevFile::Energy),
        ("registers", 0o644, DevFile::Registers),
        ("mem", 0o644, DevFile::Mem),
        ("info", 0o444, DevFile::Info),
    ];
    for (name, mode, f) in files {
        t.add_file(ROOT, name, mode, "admin", "admin", f)
            .expect("fixed names are valid");
    }
    Server::new(t, DeviceBackend { state }, users, Limits::default())
}
