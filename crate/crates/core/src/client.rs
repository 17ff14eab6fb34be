//! Client library: hides tags, fids and frames behind path-level calls.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::fscore::decode_dir;
use crate::simnet::{Ctx, EndpointId, HandlerResult, Process, Sim, SimError};
use crate::wire::{self, Body, Message, OpenMode, Qid, Stat, IOUNIT, MAX_WALK_ELEMS, NOTAG};

pub const DEFAULT_TIMEOUT: u64 = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    /// The server answered with Rerror.
    #[error("{0}")]
    Remote(String),
    #[error("timeout")]
    Timeout,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("simulation: {0}")]
    Sim(String),
}

impl From<SimError> for ClientError {
    fn from(e: SimError) -> Self {
        ClientError::Sim(e.to_string())
    }
}

pub type ClientResult<T> = Result<T, ClientError>;

/// The client's presence on the network: collects R-messages.
#[derive(Default)]
pub struct ClientEndpoint {
    inbox: BTreeMap<(EndpointId, u16), (Message, u64)>,
}

impl Process for ClientEndpoint {
    fn on_frame(&mut self, ctx: &mut Ctx<'_>, from: EndpointId, frame: Vec<u8>) -> HandlerResult {
        match wire::decode_message(&frame) {
            Ok(m) if !m.body.is_request() => {
                self.inbox.insert((from, m.tag), (m, ctx.now()));
            }
            Ok(m) => ctx.log("unexpected", Some(from), m.to_string()),
            Err(e) => ctx.log("badframe", Some(from), e.to_string()),
        }
        Ok(())
    }
}

pub struct Client {
    ep: EndpointId,
    uname: String,
    next_tag: u16,
    next_fid: u32,
    roots: BTreeMap<(EndpointId, String), u32>,
    abandoned: BTreeSet<(EndpointId, u16)>,
    timeout: u64,
}

impl Client {
    pub fn new(ep: EndpointId, uname: &str) -> Self {
        Client {
            ep,
            uname: uname.to_string(),
            next_tag: 1,
            next_fid: 1,
            roots: BTreeMap::new(),
            abandoned: BTreeSet::new(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn endpoint(&self) -> EndpointId {
        self.ep
    }

    pub fn uname(&self) -> &str {
        &self.uname
    }

    /// Later operations attach afresh as `uname`.
    pub fn set_uname(&mut self, uname: &str) {
        self.uname = uname.to_string();
    }

    pub fn set_timeout(&mut self, ticks: u64) {
        self.timeout = ticks;
    }

    fn alloc_tag(&mut self) -> u16 {
        loop {
            let t = self.next_tag;
            self.next_tag = self.next_tag.wrapping_add(1);
            if t != NOTAG && !self.abandoned.iter().any(|&(_, a)| a == t) {
                return t;
            }
        }
    }

    fn alloc_fid(&mut self) -> u32 {
        let f = self.next_fid;
        self.next_fid = self.next_fid.wrapping_add(1);
        f
    }

    fn inbox(sim: &mut Sim, ep: EndpointId) -> &mut BTreeMap<(EndpointId, u16), (Message, u64)> {
        &mut sim
            .process_mut::<ClientEndpoint>(ep)
            .expect("client endpoint is a ClientEndpoint")
            .inbox
    }

    /// Sends a T-message without waiting; returns its tag.
    pub fn send(&mut self, sim: &mut Sim, dst: EndpointId, body: Body) -> ClientResult<u16> {
        let tag = self.alloc_tag();
        let frame = wire::encode_message(&Message::new(tag, body)).map_err(|e| ClientError::Protocol(e.to_string()))?;
        sim.send(self.ep, dst, frame);
        Ok(tag)
    }

    /// Takes an already-arrived response.
    pub fn take(&mut self, sim: &mut Sim, dst: EndpointId, tag: u16) -> Option<(Message, u64)> {
        Self::inbox(sim, self.ep).remove(&(dst, tag))
    }

    /// Runs the simulation until the response for `tag` arrives. Returns
    /// the response body and the tick it arrived.
    pub fn wait(&mut self, sim: &mut Sim, dst: EndpointId, tag: u16) -> ClientResult<(Body, u64)> {
        let ep = self.ep;
        let deadline = sim.now() + self.timeout;
        let arrived = sim.run_while(deadline, |s| {
            s.process::<ClientEndpoint>(ep)
                .is_some_and(|c| c.inbox.contains_key(&(dst, tag)))
        })?;
        self.purge(sim);
        if !arrived {
            sim.run_until(deadline)?;
            self.abandoned.insert((dst, tag));
            return Err(ClientError::Timeout);
        }
        let (m, t) = self.take(sim, dst, tag).expect("arrived");
        Ok((m.body, t))
    }

    fn purge(&mut self, sim: &mut Sim) {
        if self.abandoned.is_empty() {
            return;
        }
        let inbox = Self::inbox(sim, self.ep);
        self.abandoned.retain(|k| inbox.remove(k).is_none());
    }

    /// One request/response exchange. Rerror becomes `Remote`.
    pub fn rpc(&mut self, sim: &mut Sim, dst: EndpointId, body: Body) -> ClientResult<Body> {
        let tag = self.send(sim, dst, body)?;
        match self.wait(sim, dst, tag)?.0 {
            Body::Rerror { ename } => Err(ClientError::Remote(ename)),
            b => Ok(b),
        }
    }

    /// Root fid for the current user on `dst`, attaching on first use.
    pub fn root(&mut self, sim: &mut Sim, dst: EndpointId) -> ClientResult<u32> {
        let key = (dst, self.uname.clone());
        if let Some(&f) = self.roots.get(&key) {
            return Ok(f);
        }
        let fid = self.alloc_fid();
        let body = Body::Tattach {
            fid,
            uname: self.uname.clone(),
            aname: String::new(),
        };
        match self.rpc(sim, dst, body)? {
            Body::Rattach { .. } => {
                self.roots.insert(key, fid);
                Ok(fid)
            }
            b => Err(ClientError::Protocol(format!("unexpected {}", b.name()))),
        }
    }

    /// Walks from the root to `path`, binding a new fid.
    pub fn walk(&mut self, sim: &mut Sim, dst: EndpointId, path: &[String]) -> ClientResult<(u32, Option<Qid>)> {
        let root = self.root(sim, dst)?;
        let fid = self.alloc_fid();
        let mut from = root;
        let mut last = None;
        let mut chunks: Vec<&[String]> = path.chunks(MAX_WALK_ELEMS).collect();
        if chunks.is_empty() {
            chunks.push(&[]);
        }
        for chunk in chunks {
            let body = Body::Twalk {
                fid: from,
                newfid: fid,
                names: chunk.to_vec(),
            };
            let r = self.rpc(sim, dst, body);
            match r {
                Ok(Body::Rwalk { qids }) if qids.len() == chunk.len() => {
                    last = qids.last().copied().or(last);
                    from = fid;
                }
                Ok(Body::Rwalk { .. }) => {
                    if from == fid {
                        self.clunk(sim, dst, fid)?;
                    }
                    return Err(ClientError::Remote("no such file".into()));
                }
                Ok(b) => return Err(ClientError::Protocol(format!("unexpected {}", b.name()))),
                Err(e) => {
                    if from == fid {
                        let _ = self.clunk(sim, dst, fid);
                    }
                    return Err(e);
                }
            }
        }
        Ok((fid, last))
    }

    pub fn open(&mut self, sim: &mut Sim, dst: EndpointId, fid: u32, mode: OpenMode) -> ClientResult<(Qid, u32)> {
        match self.rpc(sim, dst, Body::Topen { fid, mode })? {
            Body::Ropen { qid, iounit } => Ok((qid, iounit)),
            b => Err(ClientError::Protocol(format!("unexpected {}", b.name()))),
        }
    }

    pub fn read(&mut self, sim: &mut Sim, dst: EndpointId, fid: u32, offset: u64, count: u32) -> ClientResult<Vec<u8>> {
        match self.rpc(sim, dst, Body::Tread { fid, offset, count })? {
            Body::Rread { data } => Ok(data),
            b => Err(ClientError::Protocol(format!("unexpected {}", b.name()))),
        }
    }

    pub fn write(&mut self, sim: &mut Sim, dst: EndpointId, fid: u32, offset: u64, data: &[u8]) -> ClientResult<u32> {
        match self.rpc(
            sim,
            dst,
            Body::Twrite {
                fid,
                offset,
                data: data.to_vec(),
            },
        )? {
            Body::Rwrite { count } => Ok(count),
            b => Err(ClientError::Protocol(format!("unexpected {}", b.name()))),
        }
    }

    pub fn clunk(&mut self, sim: &mut Sim, dst: EndpointId, fid: u32) -> ClientResult<()> {
        match self.rpc(sim, dst, Body::Tclunk { fid })? {
            Body::Rclunk => Ok(()),
            b => Err(ClientError::Protocol(format!("unexpected {}", b.name()))),
        }
    }

    pub fn stat_fid(&mut self, sim: &mut Sim, dst: EndpointId, fid: u32) -> ClientResult<Stat> {
        match self.rpc(sim, dst, Body::Tstat { fid })? {
            Body::Rstat { stat } => Ok(stat),
            b => Err(ClientError::Protocol(format!("unexpected {}", b.name()))),
        }
    }

    /// Runs `f` on a freshly walked fid and always clunks it afterwards.
    fn with_fid<T>(&mut self, sim: &mut Sim, dst: EndpointId, path: &[String], f: impl FnOnce(&mut Self, &mut Sim, u32) -> ClientResult<T>) -> ClientResult<T> {
        let (fid, _) = self.walk(sim, dst, path)?;
        let r = f(self, sim, fid);
        let c = self.clunk(sim, dst, fid);
        let v = r?;
        c?;
        Ok(v)
    }

    pub fn stat(&mut self, sim: &mut Sim, dst: EndpointId, path: &[String]) -> ClientResult<Stat> {
        self.with_fid(sim, dst, path, |c, sim, fid| c.stat_fid(sim, dst, fid))
    }

    /// Reads until an empty reply, or up to the file's nonzero length.
    fn read_to_end(&mut self, sim: &mut Sim, dst: EndpointId, fid: u32, length: u64) -> ClientResult<Vec<u8>> {
        let mut out = Vec::new();
        loop {
            let offset = out.len() as u64;
            let mut count = IOUNIT;
            if length > 0 {
                if offset >= length {
                    break;
                }
                count = count.min((length - offset) as u32);
            }
            let chunk = self.read(sim, dst, fid, offset, count)?;
            if chunk.is_empty() {
                break;
            }
            out.extend(chunk);
        }
        Ok(out)
    }

    pub fn read_file(&mut self, sim: &mut Sim, dst: EndpointId, path: &[String]) -> ClientResult<Vec<u8>> {
        self.with_fid(sim, dst, path, |c, sim, fid| {
            let st = c.stat_fid(sim, dst, fid)?;
            c.open(sim, dst, fid, OpenMode::Read)?;
            let len = if st.is_dir() { 0 } else { st.length };
            c.read_to_end(sim, dst, fid, len)
        })
    }

    pub fn list(&mut self, sim: &mut Sim, dst: EndpointId, path: &[String]) -> ClientResult<Vec<Stat>> {
        self.with_fid(sim, dst, path, |c, sim, fid| {
            c.open(sim, dst, fid, OpenMode::Read)?;
            let data = c.read_to_end(sim, dst, fid, 0)?;
            decode_dir(&data).map_err(|e| ClientError::Protocol(e.to_string()))
        })
    }

    pub fn write_file(&mut self, sim: &mut Sim, dst: EndpointId, path: &[String], offset: u64, data: &[u8]) -> ClientResult<u32> {
        self.with_fid(sim, dst, path, |c, sim, fid| {
            c.open(sim, dst, fid, OpenMode::Write)?;
            c.write(sim, dst, fid, offset, data)
        })
    }

    pub fn read_at(&mut self, sim: &mut Sim, dst: EndpointId, path: &[String], offset: u64, count: u32) -> ClientResult<Vec<u8>> {
        self.with_fid(sim, dst, path, |c, sim, fid| {
            c.open(sim, dst, fid, OpenMode::Read)?;
            c.read(sim, dst, fid, offset, count)
        })
    }
}

/// Splits an absolute or relative slash path into components.
pub fn split_path(path: &str) -> Vec<String> {
    path.split('/')
        .filter(|s| !s.is_empty() && *s != ".")
        .map(str::to_string)
        .collect()
}
