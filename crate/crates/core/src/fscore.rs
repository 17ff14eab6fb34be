//! Server-side file-system framework shared by device servers, responders,
//! and (in parts) the cluster-head multiplexer.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::simnet::{Ctx, EndpointId, HandlerResult, Process, Radio};
use crate::wire::{self, Body, Message, OpenMode, Qid, QidKind, Stat, DMDIR, IOUNIT};

pub const DEFAULT_MAX_FIDS: usize = 64;
pub const DEFAULT_MAX_SESSIONS: usize = 4;

/// Errors that become `Rerror` replies. The display string is the ename.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FsError {
    #[error("fid in use")]
    FidInUse,
    #[error("unknown fid")]
    UnknownFid,
    #[error("too many fids")]
    TooManyFids,
    #[error("too many sessions")]
    TooManySessions,
    #[error("no such tree")]
    NoSuchTree,
    #[error("no such file")]
    NoSuchFile,
    #[error("permission denied")]
    PermissionDenied,
    #[error("is a directory")]
    IsDirectory,
    #[error("bad directory offset")]
    BadDirOffset,
    #[error("not writable")]
    NotWritable,
    #[error("fid already open")]
    AlreadyOpen,
    #[error("fid not open for {0}")]
    NotOpen(&'static str),
    #[error("walk on open fid")]
    WalkOpenFid,
    #[error("bad message type")]
    BadMessage,
    #[error("{0}")]
    Other(String),
}

impl FsError {
    pub fn other(s: impl Into<String>) -> Self {
        FsError::Other(s.into())
    }
}

/// Group membership. Every user is implicitly in its own-name group.
#[derive(Debug, Clone, Default)]
pub struct UserDb {
    users: BTreeMap<String, BTreeSet<String>>,
}

impl UserDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_user<I, S>(&mut self, uname: &str, groups: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set = self.users.entry(uname.to_string()).or_default();
        set.insert(uname.to_string());
        set.extend(groups.into_iter().map(Into::into));
    }

    pub fn in_group(&self, uname: &str, group: &str) -> bool {
        uname == group || self.users.get(uname).is_some_and(|g| g.contains(group))
    }

    pub fn groups(&self, uname: &str) -> BTreeSet<String> {
        self.users
            .get(uname)
            .cloned()
            .unwrap_or_else(|| BTreeSet::from([uname.to_string()]))
    }
}

/// Owner bits if the user owns the file, else group bits if a member,
/// else other bits.
pub fn permitted(mode: u32, owner: &str, group: &str, users: &UserDb, uname: &str, want: OpenMode) -> bool {
    let bits = if uname == owner {
        (mode >> 6) & 7
    } else if users.in_group(uname, group) {
        (mode >> 3) & 7
    } else {
        mode & 7
    };
    let need = match want {
        OpenMode::Read => 4,
        OpenMode::Write => 2,
        OpenMode::ReadWrite => 6,
    };
    bits & need == need
}

/// Renders the low nine permission bits (plus `d`) like `ls -l`.
pub fn mode_string(mode: u32) -> String {
    let mut s = String::with_capacity(10);
    s.push(if mode & DMDIR != 0 { 'd' } else { '-' });
    for shift in [6, 3, 0] {
        let b = (mode >> shift) & 7;
        s.push(if b & 4 != 0 { 'r' } else { '-' });
        s.push(if b & 2 != 0 { 'w' } else { '-' });
        s.push(if b & 1 != 0 { 'x' } else { '-' });
    }
    s
}

pub fn check_child_name(name: &str) -> Result<(), FsError> {
    if name.is_empty() || name == "." || name == ".." || name.contains('/') {
        return Err(FsError::other(format!("bad file name {name:?}")));
    }
    Ok(())
}

/// Index of a node in a [`Tree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

pub const ROOT: NodeId = NodeId(0);

#[derive(Debug, Clone)]
pub enum NodeKind<F> {
    Dir(Vec<NodeId>),
    File(F),
}

#[derive(Debug, Clone)]
pub struct Node<F> {
    pub name: String,
    pub qid: Qid,
    pub mode: u32,
    pub owner: String,
    pub group: String,
    pub mtime: u64,
    pub parent: NodeId,
    pub kind: NodeKind<F>,
}

impl<F> Node<F> {
    pub fn is_dir(&self) -> bool {
        matches!(self.kind, NodeKind::Dir(_))
    }
}

/// Arena-backed node tree. Qid paths are `qid_base + index`.
#[derive(Debug, Clone)]
pub struct Tree<F> {
    nodes: Vec<Node<F>>,
    qid_base: u64,
}

impl<F> Tree<F> {
    pub fn new(qid_base: u64, owner: &str, group: &str, mode: u32) -> Self {
        let root = Node {
            name: "/".to_string(),
            qid: Qid {
                kind: QidKind::Dir,
                version: 0,
                path: qid_base,
            },
            mode: mode | DMDIR,
            owner: owner.to_string(),
            group: group.to_string(),
            mtime: 0,
            parent: ROOT,
            kind: NodeKind::Dir(Vec::new()),
        };
        Tree {
            nodes: vec![root],
            qid_base,
        }
    }

    fn add(&mut self, parent: NodeId, name: &str, mode: u32, owner: &str, group: &str, kind: NodeKind<F>) -> Result<NodeId, FsError> {
        check_child_name(name)?;
        if self.lookup(parent, name).is_some() {
            return Err(FsError::other(format!("duplicate name {name}")));
        }
        let id = NodeId(self.nodes.len() as u32);
        let (qkind, mode) = match kind {
            NodeKind::Dir(_) => (QidKind::Dir, mode | DMDIR),
            NodeKind::File(_) => (QidKind::File, mode & !DMDIR),
        };
        match &mut self.nodes[parent.0 as usize].kind {
            NodeKind::Dir(children) => children.push(id),
            NodeKind::File(_) => return Err(FsError::other("parent is not a directory")),
        }
        self.nodes.push(Node {
            name: name.to_string(),
            qid: Qid {
                kind: qkind,
                version: 0,
                path: self.qid_base + id.0 as u64,
            },
            mode,
            owner: owner.to_string(),
            group: group.to_string(),
            mtime: 0,
            parent,
            kind,
        });
        Ok(id)
    }

    pub fn add_dir(&mut self, parent: NodeId, name: &str, mode: u32, owner: &str, group: &str) -> Result<NodeId, FsError> {
        self.add(parent, name, mode, owner, group, NodeKind::Dir(Vec::new()))
    }

    pub fn add_file(&mut self, parent: NodeId, name: &str, mode: u32, owner: &str, group: &str, file: F) -> Result<NodeId, FsError> {
        self.add(parent, name, mode, owner, group, NodeKind::File(file))
    }

    pub fn node(&self, id: NodeId) -> &Node<F> {
        &self.nodes[id.0 as usize]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node<F> {
        &mut self.nodes[id.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        match &self.node(id).kind {
            NodeKind::Dir(c) => c,
            NodeKind::File(_) => &[],
        }
    }

    pub fn lookup(&self, dir: NodeId, name: &str) -> Option<NodeId> {
        if name == ".." {
            return Some(self.node(dir).parent);
        }
        self.children(dir)
            .iter()
            .copied()
            .find(|&c| self.node(c).name == name)
    }

    /// Resolves a slash-free path from the root.
    pub fn resolve(&self, names: &[&str]) -> Option<NodeId> {
        names.iter().try_fold(ROOT, |n, name| self.lookup(n, name))
    }

    pub fn stat(&self, id: NodeId, length: u64) -> Stat {
        let n = self.node(id);
        Stat {
            name: n.name.clone(),
            qid: n.qid,
            mode: n.mode,
            length,
            owner: n.owner.clone(),
            group: n.group.clone(),
            mtime: n.mtime,
        }
    }
}

/// Concatenated stat records, the body of a directory read.
pub fn encode_dir(stats: &[Stat]) -> Result<Vec<u8>, FsError> {
    let mut out = Vec::new();
    for s in stats {
        out.extend(wire::encode_stat(s).map_err(|e| FsError::other(e.to_string()))?);
    }
    Ok(out)
}

/// Parses the body of a directory read back into stat records.
pub fn decode_dir(mut bytes: &[u8]) -> Result<Vec<Stat>, wire::WireError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 2 {
            return Err(wire::WireError::Truncated { offset: 0 });
        }
        let len = u16::from_le_bytes([bytes[0], bytes[1]]) as usize + 2;
        if bytes.len() < len {
            return Err(wire::WireError::Truncated { offset: bytes.len() });
        }
        // Wrap the record in a synthetic Rstat frame to reuse the decoder.
        let mut frame = Vec::with_capacity(len + 7);
        frame.extend_from_slice(&((len + 7) as u32).to_le_bytes());
        frame.push(wire::RSTAT);
        frame.extend_from_slice(&0u16.to_le_bytes());
        frame.extend_from_slice(&bytes[..len]);
        match wire::decode_message(&frame)?.body {
            Body::Rstat { stat } => out.push(stat),
            _ => unreachable!(),
        }
        bytes = &bytes[len..];
    }
    Ok(out)
}

/// Slices a directory listing for a read at `offset`, returning whole
/// records only. `offset` must be a record boundary.
pub fn dir_chunk(listing: &[u8], offset: u64, count: u32) -> Result<Vec<u8>, FsError> {
    let offset = offset as usize;
    if offset > listing.len() {
        return Err(FsError::BadDirOffset);
    }
    let mut end = offset;
    let limit = offset + count as usize;
    while end < listing.len() {
        let len = u16::from_le_bytes([listing[end], listing[end + 1]]) as usize + 2;
        if end + len > limit {
            break;
        }
        end += len;
    }
    Ok(listing[offset..end].to_vec())
}

/// Byte-range read of in-memory content; past the end yields nothing.
pub fn slice_at(content: &[u8], offset: u64, count: u32) -> Vec<u8> {
    let start = (offset as usize).min(content.len());
    let end = start.saturating_add(count as usize).min(content.len());
    content[start..end].to_vec()
}

/// Bounded fid table.
#[derive(Debug, Clone)]
pub struct FidTable<T> {
    fids: BTreeMap<u32, T>,
    max: usize,
}

impl<T> FidTable<T> {
    pub fn new(max: usize) -> Self {
        FidTable {
            fids: BTreeMap::new(),
            max,
        }
    }

    pub fn get(&self, fid: u32) -> Result<&T, FsError> {
        self.fids.get(&fid).ok_or(FsError::UnknownFid)
    }

    pub fn get_mut(&mut self, fid: u32) -> Result<&mut T, FsError> {
        self.fids.get_mut(&fid).ok_or(FsError::UnknownFid)
    }

    pub fn contains(&self, fid: u32) -> bool {
        self.fids.contains_key(&fid)
    }

    /// Binds a fresh fid.
    pub fn insert(&mut self, fid: u32, v: T) -> Result<(), FsError> {
        if self.fids.contains_key(&fid) {
            return Err(FsError::FidInUse);
        }
        if self.fids.len() >= self.max {
            return Err(FsError::TooManyFids);
        }
        self.fids.insert(fid, v);
        Ok(())
    }

    /// Rebinds an existing fid or binds a fresh one.
    pub fn replace(&mut self, fid: u32, v: T) -> Result<(), FsError> {
        if let Some(slot) = self.fids.get_mut(&fid) {
            *slot = v;
            return Ok(());
        }
        self.insert(fid, v)
    }

    pub fn remove(&mut self, fid: u32) -> Result<T, FsError> {
        self.fids.remove(&fid).ok_or(FsError::UnknownFid)
    }

    pub fn len(&self) -> usize {
        self.fids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fids.is_empty()
    }

    pub fn max(&self) -> usize {
        self.max
    }
}

#[derive(Debug, Clone)]
pub struct FidState {
    pub node: NodeId,
    pub uname: String,
    pub open: Option<OpenMode>,
    /// Expected offset of the next directory read.
    pub dir_next: u64,
    /// File content as of the last read at offset 0. Later offsets are
    /// served from it so a multi-part read sees one consistent value.
    pub snapshot: Option<Vec<u8>>,
}

/// Per-connection state. Each fid remembers the user of the attach it
/// descends from; `uname` is the most recent attach.
#[derive(Debug, Clone)]
pub struct Session {
    pub uname: String,
    pub fids: FidTable<FidState>,
}

/// Caller context handed to file handlers.
#[derive(Debug, Clone, Copy)]
pub struct Request<'a> {
    pub now: u64,
    pub uname: &'a str,
}

/// File behaviour behind a static tree.
pub trait Backend {
    type File;

    fn read(&mut self, file: &Self::File, req: &Request<'_>, offset: u64, count: u32) -> Result<Vec<u8>, FsError>;

    fn write(&mut self, _file: &Self::File, _req: &Request<'_>, _offset: u64, _data: &[u8]) -> Result<u32, FsError> {
        Err(FsError::NotWritable)
    }

    fn length(&self, _file: &Self::File) -> u64 {
        0
    }

    /// Whether a read at offset 0 may fetch the whole file and serve the
    /// following offsets from that copy. Files addressed by offset and
    /// count, like raw memory, opt out.
    fn snapshot(&self, _file: &Self::File) -> bool {
        true
    }

    fn radio(&mut self) -> Option<&mut Radio> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_fids: usize,
    pub max_sessions: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_fids: DEFAULT_MAX_FIDS,
            max_sessions: DEFAULT_MAX_SESSIONS,
        }
    }
}

/// Identifies a client connection (in simulation: the peer endpoint).
pub type SessionId = u64;

/// A single-tree file server.
pub struct Server<B: Backend> {
    pub tree: Tree<B::File>,
    pub backend: B,
    pub users: UserDb,
    sessions: BTreeMap<SessionId, Session>,
    limits: Limits,
}

impl<B: Backend> Server<B> {
    pub fn new(tree: Tree<B::File>, backend: B, users: UserDb, limits: Limits) -> Self {
        Server {
            tree,
            backend,
            users,
            sessions: BTreeMap::new(),
            limits,
        }
    }

    pub fn session(&self, id: SessionId) -> Option<&Session> {
        self.sessions.get(&id)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn node_stat(&self, id: NodeId) -> Stat {
        let len = match &self.tree.node(id).kind {
            NodeKind::File(f) => self.backend.length(f),
            NodeKind::Dir(_) => 0,
        };
        self.tree.stat(id, len)
    }

    /// Turns one T-message into exactly one R-message with the same tag.
    pub fn dispatch(&mut self, session: SessionId, now: u64, msg: &Message) -> Message {
        match self.handle(session, now, &msg.body) {
            Ok(body) => Message::new(msg.tag, body),
            Err(e) => Message::error(msg.tag, e.to_string()),
        }
    }

    fn fids(&mut self, session: SessionId) -> Result<&mut FidTable<FidState>, FsError> {
        self.sessions
            .get_mut(&session)
            .map(|s| &mut s.fids)
            .ok_or(FsError::UnknownFid)
    }

    fn handle(&mut self, sid: SessionId, now: u64, body: &Body) -> Result<Body, FsError> {
        match body {
            Body::Tattach { fid, uname, aname } => {
                let qid = self.attach(sid, *fid, uname, aname)?;
                Ok(Body::Rattach { qid })
            }
            Body::Twalk { fid, newfid, names } => Ok(Body::Rwalk {
                qids: self.walk(sid, *fid, *newfid, names)?,
            }),
            Body::Topen { fid, mode } => {
                let qid = self.open(sid, *fid, *mode)?;
                Ok(Body::Ropen { qid, iounit: IOUNIT })
            }
            Body::Tread { fid, offset, count } => Ok(Body::Rread {
                data: self.read(sid, now, *fid, *offset, *count)?,
            }),
            Body::Twrite { fid, offset, data } => Ok(Body::Rwrite {
                count: self.write(sid, now, *fid, *offset, data)?,
            }),
            Body::Tclunk { fid } => {
                self.fids(sid)?.remove(*fid)?;
                Ok(Body::Rclunk)
            }
            Body::Tstat { fid } => {
                let node = self.fids(sid)?.get(*fid)?.node;
                Ok(Body::Rstat {
                    stat: self.node_stat(node),
                })
            }
            _ => Err(FsError::BadMessage),
        }
    }

    pub fn attach(&mut self, sid: SessionId, fid: u32, uname: &str, aname: &str) -> Result<Qid, FsError> {
        if !(aname.is_empty() || aname == "/") {
            return Err(FsError::NoSuchTree);
        }
        if !self.sessions.contains_key(&sid) {
            if self.sessions.len() >= self.limits.max_sessions {
                return Err(FsError::TooManySessions);
            }
            self.sessions.insert(
                sid,
                Session {
                    uname: uname.to_string(),
                    fids: FidTable::new(self.limits.max_fids),
                },
            );
        }
        let session = self.sessions.get_mut(&sid).expect("session exists");
        session.fids.insert(
            fid,
            FidState {
                node: ROOT,
                uname: uname.to_string(),
                open: None,
                dir_next: 0,
                snapshot: None,
            },
        )?;
        session.uname = uname.to_string();
        Ok(self.tree.node(ROOT).qid)
    }

    pub fn walk(&mut self, sid: SessionId, fid: u32, newfid: u32, names: &[String]) -> Result<Vec<Qid>, FsError> {
        let fids = self.fids(sid)?;
        let start = fids.get(fid)?.clone();
        if start.open.is_some() {
            return Err(FsError::WalkOpenFid);
        }
        if newfid != fid && fids.contains(newfid) {
            return Err(FsError::FidInUse);
        }
        let mut cur = start.node;
        let mut qids = Vec::with_capacity(names.len());
        for name in names {
            if !self.tree.node(cur).is_dir() {
                break;
            }
            match self.tree.lookup(cur, name) {
                Some(next) => {
                    cur = next;
                    qids.push(self.tree.node(cur).qid);
                }
                None => break,
            }
        }
        if qids.len() < names.len() {
            if qids.is_empty() {
                return Err(FsError::NoSuchFile);
            }
            return Ok(qids);
        }
        let state = FidState {
            node: cur,
            uname: start.uname,
            open: None,
            dir_next: 0,
            snapshot: None,
        };
        let fids = self.fids(sid)?;
        if newfid == fid {
            fids.replace(newfid, state)?;
        } else {
            fids.insert(newfid, state)?;
        }
        Ok(qids)
    }

    pub fn open(&mut self, sid: SessionId, fid: u32, mode: OpenMode) -> Result<Qid, FsError> {
        let state = self.fids(sid)?.get(fid)?.clone();
        if state.open.is_some() {
            return Err(FsError::AlreadyOpen);
        }
        let node = self.tree.node(state.node);
        if node.is_dir() && mode.writes() {
            return Err(FsError::IsDirectory);
        }
        if !permitted(node.mode, &node.owner, &node.group, &self.users, &state.uname, mode) {
            return Err(FsError::PermissionDenied);
        }
        let qid = node.qid;
        let st = self.fids(sid)?.get_mut(fid)?;
        st.open = Some(mode);
        st.dir_next = 0;
        Ok(qid)
    }

    pub fn dir_listing(&self, dir: NodeId) -> Result<Vec<u8>, FsError> {
        let stats: Vec<Stat> = self
            .tree
            .children(dir)
            .iter()
            .map(|&c| self.node_stat(c))
            .collect();
        encode_dir(&stats)
    }

    pub fn read(&mut self, sid: SessionId, now: u64, fid: u32, offset: u64, count: u32) -> Result<Vec<u8>, FsError> {
        let state = self.fids(sid)?.get(fid)?.clone();
        if !state.open.is_some_and(OpenMode::reads) {
            return Err(FsError::NotOpen("reading"));
        }
        let count = count.min(IOUNIT);
        match &self.tree.node(state.node).kind {
            NodeKind::Dir(_) => {
                if offset != 0 && offset != state.dir_next {
                    return Err(FsError::BadDirOffset);
                }
                let listing = self.dir_listing(state.node)?;
                let chunk = dir_chunk(&listing, offset, count)?;
                self.fids(sid)?.get_mut(fid)?.dir_next = offset + chunk.len() as u64;
                Ok(chunk)
            }
            NodeKind::File(f) => {
                let req = Request {
                    now,
                    uname: &state.uname,
                };
                if !self.backend.snapshot(f) {
                    return self.backend.read(f, &req, offset, count);
                }
                if offset == 0 {
                    let content = self.backend.read(f, &req, 0, u32::MAX)?;
                    let chunk = slice_at(&content, 0, count);
                    self.fids(sid)?.get_mut(fid)?.snapshot = Some(content);
                    return Ok(chunk);
                }
                match &state.snapshot {
                    Some(content) => Ok(slice_at(content, offset, count)),
                    None => self.backend.read(f, &req, offset, count),
                }
            }
        }
    }

    pub fn write(&mut self, sid: SessionId, now: u64, fid: u32, offset: u64, data: &[u8]) -> Result<u32, FsError> {
        let state = self.fids(sid)?.get(fid)?.clone();
        if !state.open.is_some_and(OpenMode::writes) {
            return Err(FsError::NotOpen("writing"));
        }
        let n = match &self.tree.node(state.node).kind {
            NodeKind::Dir(_) => return Err(FsError::IsDirectory),
            NodeKind::File(f) => {
                let req = Request {
                    now,
                    uname: &state.uname,
                };
                self.backend.write(f, &req, offset, data)?
            }
        };
        self.fids(sid)?.get_mut(fid)?.snapshot = None;
        let node = self.tree.node_mut(state.node);
        node.qid.version = node.qid.version.wrapping_add(1);
        node.mtime = now;
        Ok(n)
    }
}

/// Puts a [`Server`] on the simulated network. Each peer endpoint is one
/// session.
pub struct ServerNode<B: Backend> {
    pub server: Server<B>,
}

impl<B: Backend> ServerNode<B> {
    pub fn new(server: Server<B>) -> Self {
        ServerNode { server }
    }
}

impl<B> Process for ServerNode<B>
where
    B: Backend + Send + 'static,
    B::File: Send + 'static,
{
    fn on_frame(&mut self, ctx: &mut Ctx<'_>, from: EndpointId, frame: Vec<u8>) -> HandlerResult {
        let msg = match wire::decode_message(&frame) {
            Ok(m) => m,
            Err(e) => {
                ctx.log("badframe", Some(from), e.to_string());
                return Ok(());
            }
        };
        if !msg.body.is_request() {
            ctx.log("unexpected", Some(from), msg.to_string());
            return Ok(());
        }
        let reply = self.server.dispatch(from.0 as SessionId, ctx.now(), &msg);
        ctx.send_message(from, &reply)
    }

    fn radio(&mut self) -> Option<&mut Radio> {
        self.server.backend.radio()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Static test tree:
    /// /net/ (0555) /net/value (0444) /ctl (0644 admin:admin) /notes (0666)
    struct Mem {
        value: Vec<u8>,
        ctl: Vec<u8>,
    }

    #[derive(Debug, Clone, Copy)]
    enum F {
        Value,
        Ctl,
        Ro,
    }

    impl Backend for Mem {
        type File = F;
        fn read(&mut self, f: &F, _req: &Request<'_>, offset: u64, count: u32) -> Result<Vec<u8>, FsError> {
            Ok(match f {
                F::Value | F::Ro => slice_at(&self.value, offset, count),
                F::Ctl => slice_at(&self.ctl, offset, count),
            })
        }
        fn write(&mut self, f: &F, _req: &Request<'_>, _o: u64, data: &[u8]) -> Result<u32, FsError> {
            match f {
                F::Ctl => {
                    self.ctl = data.to_vec();
                    Ok(data.len() as u32)
                }
                _ => Err(FsError::NotWritable),
            }
        }
        fn length(&self, f: &F) -> u64 {
            match f {
                F::Ctl => self.ctl.len() as u64,
                _ => self.value.len() as u64,
            }
        }
    }

    fn server() -> Server<Mem> {
        let mut t = Tree::new(1000, "admin", "admin", 0o555);
        let net = t.add_dir(ROOT, "net", 0o555, "admin", "admin").unwrap();
        t.add_file(net, "value", 0o444, "admin", "admin", F::Value).unwrap();
        t.add_file(ROOT, "ctl", 0o644, "admin", "admin", F::Ctl).unwrap();
        t.add_file(ROOT, "ro", 0o666, "admin", "admin", F::Ro).unwrap();
        let mut users = UserDb::new();
        users.add_user("admin", ["admin"]);
        users.add_user("guest", ["users"]);
        Server::new(
            t,
            Mem {
                value: b"23.400000\n".to_vec(),
                ctl: vec![],
            },
            users,
            Limits::default(),
        )
    }

    fn call(s: &mut Server<Mem>, sid: SessionId, tag: u16, body: Body) -> Body {
        let r = s.dispatch(sid, 0, &Message::new(tag, body));
        assert_eq!(r.tag, tag);
        r.body
    }

    fn ename(b: Body) -> String {
        match b {
            Body::Rerror { ename } => ename,
            other => panic!("expected Rerror, got {other:?}"),
        }
    }

    fn attach(s: &mut Server<Mem>, sid: SessionId, uname: &str) {
        let b = call(
            s,
            sid,
            1,
            Body::Tattach {
                fid: 0,
                uname: uname.into(),
                aname: "".into(),
            },
        );
        match b {
            Body::Rattach { qid } => {
                assert!(qid.is_dir());
                assert_eq!(qid.path, 1000);
            }
            other => panic!("{other:?}"),
        }
    }

    fn walk(s: &mut Server<Mem>, sid: SessionId, newfid: u32, path: &[&str]) -> Body {
        call(
            s,
            sid,
            2,
            Body::Twalk {
                fid: 0,
                newfid,
                names: path.iter().map(|p| p.to_string()).collect(),
            },
        )
    }

    #[test]
    fn attach_twice_same_fid() {
        let mut s = server();
        attach(&mut s, 1, "admin");
        let b = call(
            &mut s,
            1,
            1,
            Body::Tattach {
                fid: 0,
                uname: "admin".into(),
                aname: "".into(),
            },
        );
        assert_eq!(ename(b), "fid in use");
        let b = call(
            &mut s,
            1,
            1,
            Body::Tattach {
                fid: 9,
                uname: "admin".into(),
                aname: "other".into(),
            },
        );
        assert_eq!(ename(b), "no such tree");
    }

    #[test]
    fn walk_full_partial_and_missing() {
        let mut s = server();
        attach(&mut s, 1, "admin");
        match walk(&mut s, 1, 1, &["net", "value"]) {
            Body::Rwalk { qids } => {
                assert_eq!(qids.len(), 2);
                assert!(!qids[1].is_dir());
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(ename(walk(&mut s, 1, 2, &["nonexistent"])), "no such file");
        // walking past a file stops there and leaves newfid unbound
        match walk(&mut s, 1, 3, &["net", "value", "deeper"]) {
            Body::Rwalk { qids } => assert_eq!(qids.len(), 2),
            other => panic!("{other:?}"),
        }
        assert!(!s.session(1).unwrap().fids.contains(3));
        // identity walk clones
        match walk(&mut s, 1, 4, &[]) {
            Body::Rwalk { qids } => assert!(qids.is_empty()),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.session(1).unwrap().fids.get(4).unwrap().node, ROOT);
    }

    #[test]
    fn permissions_follow_owner_group_other() {
        let mut s = server();
        attach(&mut s, 1, "guest");
        walk(&mut s, 1, 1, &["net", "value"]);
        assert!(matches!(
            call(&mut s, 1, 3, Body::Topen { fid: 1, mode: OpenMode::Read }),
            Body::Ropen { iounit: 8169, .. }
        ));
        walk(&mut s, 1, 2, &["net", "value"]);
        assert_eq!(
            ename(call(&mut s, 1, 3, Body::Topen { fid: 2, mode: OpenMode::Write })),
            "permission denied"
        );
        walk(&mut s, 1, 5, &["ctl"]);
        assert_eq!(
            ename(call(&mut s, 1, 3, Body::Topen { fid: 5, mode: OpenMode::Write })),
            "permission denied"
        );

        let mut s = server();
        attach(&mut s, 1, "admin");
        walk(&mut s, 1, 5, &["ctl"]);
        assert!(matches!(
            call(&mut s, 1, 3, Body::Topen { fid: 5, mode: OpenMode::Write }),
            Body::Ropen { .. }
        ));
        assert!(matches!(
            call(&mut s, 1, 4, Body::Twrite { fid: 5, offset: 0, data: b"2.5".to_vec() }),
            Body::Rwrite { count: 3 }
        ));
    }

    #[test]
    fn open_directory_for_write() {
        let mut s = server();
        attach(&mut s, 1, "admin");
        walk(&mut s, 1, 1, &["net"]);
        assert_eq!(
            ename(call(&mut s, 1, 3, Body::Topen { fid: 1, mode: OpenMode::Write })),
            "is a directory"
        );
    }

    #[test]
    fn write_without_handler_is_not_writable() {
        let mut s = server();
        attach(&mut s, 1, "admin");
        walk(&mut s, 1, 1, &["ro"]);
        call(&mut s, 1, 3, Body::Topen { fid: 1, mode: OpenMode::Write });
        assert_eq!(
            ename(call(&mut s, 1, 4, Body::Twrite { fid: 1, offset: 0, data: b"x".to_vec() })),
            "not writable"
        );
    }

    #[test]
    fn read_file_and_past_end() {
        let mut s = server();
        attach(&mut s, 1, "admin");
        walk(&mut s, 1, 1, &["net", "value"]);
        call(&mut s, 1, 3, Body::Topen { fid: 1, mode: OpenMode::Read });
        assert_eq!(
            call(&mut s, 1, 7, Body::Tread { fid: 1, offset: 0, count: 100 }),
            Body::Rread { data: b"23.400000\n".to_vec() }
        );
        assert_eq!(
            call(&mut s, 1, 7, Body::Tread { fid: 1, offset: 500, count: 100 }),
            Body::Rread { data: vec![] }
        );
    }

    #[test]
    fn directory_reads_whole_records_in_order() {
        let mut s = server();
        attach(&mut s, 1, "admin");
        walk(&mut s, 1, 1, &[]);
        call(&mut s, 1, 3, Body::Topen { fid: 1, mode: OpenMode::Read });
        let Body::Rread { data } = call(&mut s, 1, 4, Body::Tread { fid: 1, offset: 0, count: 8000 }) else {
            panic!()
        };
        let names: Vec<String> = decode_dir(&data).unwrap().into_iter().map(|s| s.name).collect();
        assert_eq!(names, ["net", "ctl", "ro"]);

        // small count: one record at a time, offsets chained
        walk(&mut s, 1, 2, &[]);
        call(&mut s, 1, 3, Body::Topen { fid: 2, mode: OpenMode::Read });
        let first_len = wire::encode_stat(&s.node_stat(NodeId(1))).unwrap().len() as u32;
        let Body::Rread { data } = call(&mut s, 1, 4, Body::Tread { fid: 2, offset: 0, count: first_len + 1 }) else {
            panic!()
        };
        assert_eq!(data.len() as u32, first_len);
        assert_eq!(
            ename(call(&mut s, 1, 4, Body::Tread { fid: 2, offset: 3, count: 100 })),
            "bad directory offset"
        );
        let Body::Rread { data } = call(&mut s, 1, 4, Body::Tread { fid: 2, offset: first_len as u64, count: 8000 }) else {
            panic!()
        };
        assert_eq!(decode_dir(&data).unwrap().len(), 2);
    }

    #[test]
    fn clunk_then_use_fails() {
        let mut s = server();
        attach(&mut s, 1, "admin");
        walk(&mut s, 1, 1, &["net"]);
        assert_eq!(call(&mut s, 1, 5, Body::Tclunk { fid: 1 }), Body::Rclunk);
        assert_eq!(ename(call(&mut s, 1, 5, Body::Tstat { fid: 1 })), "unknown fid");
        assert_eq!(ename(call(&mut s, 1, 5, Body::Tclunk { fid: 1 })), "unknown fid");
    }

    #[test]
    fn stat_root_has_dir_bit() {
        let mut s = server();
        attach(&mut s, 1, "admin");
        match call(&mut s, 1, 9, Body::Tstat { fid: 0 }) {
            Body::Rstat { stat } => {
                assert!(stat.is_dir());
                assert!(stat.is_consistent());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fid_and_session_limits() {
        let mut s = server();
        attach(&mut s, 1, "admin");
        for f in 1..64 {
            assert!(matches!(walk(&mut s, 1, f, &[]), Body::Rwalk { .. }));
        }
        assert_eq!(ename(walk(&mut s, 1, 64, &[])), "too many fids");
        for sid in 2..=4 {
            attach(&mut s, sid, "guest");
        }
        assert_eq!(
            ename(call(
                &mut s,
                5,
                1,
                Body::Tattach { fid: 0, uname: "guest".into(), aname: "".into() }
            )),
            "too many sessions"
        );
    }

    #[test]
    fn r_message_is_rejected_with_same_tag() {
        let mut s = server();
        let r = s.dispatch(1, 0, &Message::new(33, Body::Rclunk));
        assert_eq!(r, Message::error(33, "bad message type"));
    }

    #[test]
    fn child_names_are_validated() {
        let mut t: Tree<()> = Tree::new(0, "a", "a", 0o555);
        assert!(t.add_dir(ROOT, "..", 0o555, "a", "a").is_err());
        assert!(t.add_dir(ROOT, "a/b", 0o555, "a", "a").is_err());
        t.add_dir(ROOT, "x", 0o555, "a", "a").unwrap();
        assert!(t.add_file(ROOT, "x", 0o444, "a", "a", ()).is_err());
    }

    #[test]
    fn mode_strings() {
        assert_eq!(mode_string(DMDIR | 0o555), "dr-xr-xr-x");
        assert_eq!(mode_string(0o644), "-rw-r--r--");
    }
}
