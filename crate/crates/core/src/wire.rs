//! Styx-style message codec and framing.
//!
//! All integers are little-endian. A frame is `size[4] type[1] tag[2] body`
//! where `size` counts the whole frame including itself. Strings carry a
//! two-byte length prefix.

use std::fmt;
use std::io::Read;

use thiserror::Error;

/// Reserved tag; never valid on a T-message.
pub const NOTAG: u16 = 0xFFFF;
/// Largest frame either side will produce or accept.
pub const MAX_FRAME: usize = 8192;
/// size[4] type[1] tag[2]
pub const HEADER_LEN: usize = 7;
/// Largest payload that fits a Twrite (and therefore an Rread) in one frame.
pub const IOUNIT: u32 = (MAX_FRAME - (HEADER_LEN + 4 + 8 + 4)) as u32;
/// Maximum number of path elements in one Twalk.
pub const MAX_WALK_ELEMS: usize = 16;

/// Directory bit in `Stat::mode`.
pub const DMDIR: u32 = 0x8000_0000;

pub const TATTACH: u8 = 100;
pub const RATTACH: u8 = 101;
pub const TWALK: u8 = 102;
pub const RWALK: u8 = 103;
pub const TOPEN: u8 = 104;
pub const ROPEN: u8 = 105;
pub const TREAD: u8 = 106;
pub const RREAD: u8 = 107;
pub const TWRITE: u8 = 108;
pub const RWRITE: u8 = 109;
pub const TCLUNK: u8 = 110;
pub const RCLUNK: u8 = 111;
pub const TSTAT: u8 = 112;
pub const RSTAT: u8 = 113;
pub const RERROR: u8 = 127;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("string too long ({0} bytes)")]
    StringTooLong(usize),
    #[error("too many walk elements ({0})")]
    TooManyWalkElems(usize),
    #[error("message too large ({0} bytes)")]
    TooLarge(usize),
    #[error("T-message may not use NOTAG")]
    NoTag,
    #[error("unknown type {code:#04x} at offset {offset}")]
    UnknownType { code: u8, offset: usize },
    #[error("truncated at offset {offset}")]
    Truncated { offset: usize },
    #[error("size mismatch: header says {declared}, frame has {actual}")]
    SizeMismatch { declared: usize, actual: usize },
    #[error("invalid {what} at offset {offset}")]
    Invalid { what: &'static str, offset: usize },
    #[error("protocol error: frame size {0} below minimum")]
    FrameTooSmall(usize),
    #[error("protocol error: frame size {0} above maximum")]
    FrameTooBig(usize),
    #[error("incomplete frame at end of stream ({0} bytes buffered)")]
    IncompleteFrame(usize),
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, WireError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QidKind {
    Dir,
    File,
}

impl QidKind {
    pub fn code(self) -> u8 {
        match self {
            QidKind::Dir => 0x80,
            QidKind::File => 0x00,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x80 => Some(QidKind::Dir),
            0x00 => Some(QidKind::File),
            _ => None,
        }
    }
}

/// Server-assigned identity of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Qid {
    pub kind: QidKind,
    pub version: u32,
    pub path: u64,
}

impl Qid {
    pub fn is_dir(&self) -> bool {
        self.kind == QidKind::Dir
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stat {
    pub name: String,
    pub qid: Qid,
    pub mode: u32,
    pub length: u64,
    pub owner: String,
    pub group: String,
    pub mtime: u64,
}

impl Stat {
    pub fn is_dir(&self) -> bool {
        self.mode & DMDIR != 0
    }

    /// The directory bit and the qid kind agree.
    pub fn is_consistent(&self) -> bool {
        self.is_dir() == self.qid.is_dir()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpenMode {
    Read,
    Write,
    ReadWrite,
}

impl OpenMode {
    pub fn code(self) -> u8 {
        match self {
            OpenMode::Read => 0,
            OpenMode::Write => 1,
            OpenMode::ReadWrite => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OpenMode::Read),
            1 => Some(OpenMode::Write),
            2 => Some(OpenMode::ReadWrite),
            _ => None,
        }
    }

    pub fn reads(self) -> bool {
        matches!(self, OpenMode::Read | OpenMode::ReadWrite)
    }

    pub fn writes(self) -> bool {
        matches!(self, OpenMode::Write | OpenMode::ReadWrite)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Tattach { fid: u32, uname: String, aname: String },
    Rattach { qid: Qid },
    Twalk { fid: u32, newfid: u32, names: Vec<String> },
    Rwalk { qids: Vec<Qid> },
    Topen { fid: u32, mode: OpenMode },
    Ropen { qid: Qid, iounit: u32 },
    Tread { fid: u32, offset: u64, count: u32 },
    Rread { data: Vec<u8> },
    Twrite { fid: u32, offset: u64, data: Vec<u8> },
    Rwrite { count: u32 },
    Tclunk { fid: u32 },
    Rclunk,
    Tstat { fid: u32 },
    Rstat { stat: Stat },
    Rerror { ename: String },
}

impl Body {
    pub fn type_code(&self) -> u8 {
        match self {
            Body::Tattach { .. } => TATTACH,
            Body::Rattach { .. } => RATTACH,
            Body::Twalk { .. } => TWALK,
            Body::Rwalk { .. } => RWALK,
            Body::Topen { .. } => TOPEN,
            Body::Ropen { .. } => ROPEN,
            Body::Tread { .. } => TREAD,
            Body::Rread { .. } => RREAD,
            Body::Twrite { .. } => TWRITE,
            Body::Rwrite { .. } => RWRITE,
            Body::Tclunk { .. } => TCLUNK,
            Body::Rclunk => RCLUNK,
            Body::Tstat { .. } => TSTAT,
            Body::Rstat { .. } => RSTAT,
            Body::Rerror { .. } => RERROR,
        }
    }

    pub fn is_request(&self) -> bool {
        matches!(
            self,
            Body::Tattach { .. }
                | Body::Twalk { .. }
                | Body::Topen { .. }
                | Body::Tread { .. }
                | Body::Twrite { .. }
                | Body::Tclunk { .. }
                | Body::Tstat { .. }
        )
    }

    /// The fid a T-message operates on.
    pub fn fid(&self) -> Option<u32> {
        match self {
            Body::Tattach { fid, .. }
            | Body::Twalk { fid, .. }
            | Body::Topen { fid, .. }
            | Body::Tread { fid, .. }
            | Body::Twrite { fid, .. }
            | Body::Tclunk { fid }
            | Body::Tstat { fid } => Some(*fid),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Body::Tattach { .. } => "Tattach",
            Body::Rattach { .. } => "Rattach",
            Body::Twalk { .. } => "Twalk",
            Body::Rwalk { .. } => "Rwalk",
            Body::Topen { .. } => "Topen",
            Body::Ropen { .. } => "Ropen",
            Body::Tread { .. } => "Tread",
            Body::Rread { .. } => "Rread",
            Body::Twrite { .. } => "Twrite",
            Body::Rwrite { .. } => "Rwrite",
            Body::Tclunk { .. } => "Tclunk",
            Body::Rclunk => "Rclunk",
            Body::Tstat { .. } => "Tstat",
            Body::Rstat { .. } => "Rstat",
            Body::Rerror { .. } => "Rerror",
        }
    }

    /// Whether `self` is an acceptable reply to the request `req`.
    pub fn answers(&self, req: &Body) -> bool {
        if matches!(self, Body::Rerror { .. }) {
            return true;
        }
        req.is_request() && self.type_code() == req.type_code() + 1
    }
}

/// A tagged protocol message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub tag: u16,
    pub body: Body,
}

impl Message {
    pub fn new(tag: u16, body: Body) -> Self {
        Message { tag, body }
    }

    pub fn error(tag: u16, ename: impl Into<String>) -> Self {
        Message {
            tag,
            body: Body::Rerror {
                ename: ename.into(),
            },
        }
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} tag={}", self.body.name(), self.tag)?;
        match &self.body {
            Body::Tattach { fid, uname, aname } => {
                write!(f, " fid={fid} uname={uname} aname={aname}")
            }
            Body::Rattach { qid } | Body::Ropen { qid, .. } => write!(f, " qid={:x}", qid.path),
            Body::Twalk { fid, newfid, names } => {
                write!(f, " fid={fid} newfid={newfid} names={}", names.join("/"))
            }
            Body::Rwalk { qids } => write!(f, " nqid={}", qids.len()),
            Body::Topen { fid, mode } => write!(f, " fid={fid} mode={}", mode.code()),
            Body::Tread { fid, offset, count } => {
                write!(f, " fid={fid} offset={offset} count={count}")
            }
            Body::Rread { data } => write!(f, " count={}", data.len()),
            Body::Twrite { fid, offset, data } => {
                write!(f, " fid={fid} offset={offset} count={}", data.len())
            }
            Body::Rwrite { count } => write!(f, " count={count}"),
            Body::Tclunk { fid } | Body::Tstat { fid } => write!(f, " fid={fid}"),
            Body::Rclunk => Ok(()),
            Body::Rstat { stat } => write!(f, " name={}", stat.name),
            Body::Rerror { ename } => write!(f, " ename={ename}"),
        }
    }
}

struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| WireError::StringTooLong(s.len()))?;
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn data(&mut self, d: &[u8]) -> Result<()> {
        let len = u32::try_from(d.len()).map_err(|_| WireError::TooLarge(d.len()))?;
        self.u32(len);
        self.buf.extend_from_slice(d);
        Ok(())
    }
    fn qid(&mut self, q: &Qid) {
        self.u8(q.kind.code());
        self.u32(q.version);
        self.u64(q.path);
    }
    fn stat(&mut self, s: &Stat) -> Result<()> {
        let start = self.buf.len();
        self.u16(0);
        self.string(&s.name)?;
        self.qid(&s.qid);
        self.u32(s.mode);
        self.u64(s.length);
        self.string(&s.owner)?;
        self.string(&s.group)?;
        self.u64(s.mtime);
        let len = self.buf.len() - start - 2;
        let len = u16::try_from(len).map_err(|_| WireError::TooLarge(len))?;
        self.buf[start..start + 2].copy_from_slice(&len.to_le_bytes());
        Ok(())
    }
}

/// Encodes a single stat record, as used in directory reads.
pub fn encode_stat(stat: &Stat) -> Result<Vec<u8>> {
    let mut e = Encoder { buf: Vec::new() };
    e.stat(stat)?;
    Ok(e.buf)
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>> {
    if msg.body.is_request() && msg.tag == NOTAG {
        return Err(WireError::NoTag);
    }
    let mut e = Encoder {
        buf: Vec::with_capacity(64),
    };
    e.u32(0);
    e.u8(msg.body.type_code());
    e.u16(msg.tag);
    match &msg.body {
        Body::Tattach { fid, uname, aname } => {
            e.u32(*fid);
            e.string(uname)?;
            e.string(aname)?;
        }
        Body::Rattach { qid } => e.qid(qid),
        Body::Twalk { fid, newfid, names } => {
            if names.len() > MAX_WALK_ELEMS {
                return Err(WireError::TooManyWalkElems(names.len()));
            }
            e.u32(*fid);
            e.u32(*newfid);
            e.u16(names.len() as u16);
            for n in names {
                e.string(n)?;
            }
        }
        Body::Rwalk { qids } => {
            if qids.len() > MAX_WALK_ELEMS {
                return Err(WireError::TooManyWalkElems(qids.len()));
            }
            e.u16(qids.len() as u16);
            for q in qids {
                e.qid(q);
            }
        }
        Body::Topen { fid, mode } => {
            e.u32(*fid);
            e.u8(mode.code());
        }
        Body::Ropen { qid, iounit } => {
            e.qid(qid);
            e.u32(*iounit);
        }
        Body::Tread { fid, offset, count } => {
            e.u32(*fid);
            e.u64(*offset);
            e.u32(*count);
        }
        Body::Rread { data } => e.data(data)?,
        Body::Twrite { fid, offset, data } => {
            e.u32(*fid);
            e.u64(*offset);
            e.data(data)?;
        }
        Body::Rwrite { count } => e.u32(*count),
        Body::Tclunk { fid } | Body::Tstat { fid } => e.u32(*fid),
        Body::Rclunk => {}
        Body::Rstat { stat } => e.stat(stat)?,
        Body::Rerror { ename } => e.string(ename)?,
    }
    let size = e.buf.len();
    if size > MAX_FRAME {
        return Err(WireError::TooLarge(size));
    }
    e.buf[0..4].copy_from_slice(&(size as u32).to_le_bytes());
    Ok(e.buf)
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let at = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::Invalid {
            what: "utf-8 string",
            offset: at,
        })
    }
    fn data(&mut self) -> Result<Vec<u8>> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }
    fn qid(&mut self) -> Result<Qid> {
        let at = self.pos;
        let kind = QidKind::from_code(self.u8()?).ok_or(WireError::Invalid {
            what: "qid kind",
            offset: at,
        })?;
        Ok(Qid {
            kind,
            version: self.u32()?,
            path: self.u64()?,
        })
    }
    fn stat(&mut self) -> Result<Stat> {
        let at = self.pos;
        let len = self.u16()? as usize;
        let start = self.pos;
        let stat = Stat {
            name: self.string()?,
            qid: self.qid()?,
            mode: self.u32()?,
            length: self.u64()?,
            owner: self.string()?,
            group: self.string()?,
            mtime: self.u64()?,
        };
        if self.pos - start != len {
            return Err(WireError::Invalid {
                what: "stat length",
                offset: at,
            });
        }
        Ok(stat)
    }
    fn walk_count(&mut self) -> Result<usize> {
        let at = self.pos;
        let n = self.u16()? as usize;
        if n > MAX_WALK_ELEMS {
            return Err(WireError::Invalid {
                what: "walk element count",
                offset: at,
            });
        }
        Ok(n)
    }
}

/// Decodes exactly one frame.
pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    let mut d = Decoder { buf: bytes, pos: 0 };
    let declared = d.u32()? as usize;
    if declared > bytes.len() {
        return Err(WireError::Truncated {
            offset: bytes.len(),
        });
    }
    if declared != bytes.len() {
        return Err(WireError::SizeMismatch {
            declared,
            actual: bytes.len(),
        });
    }
    let type_at = d.pos;
    let code = d.u8()?;
    let tag = d.u16()?;
    let body = match code {
        TATTACH => Body::Tattach {
            fid: d.u32()?,
            uname: d.string()?,
            aname: d.string()?,
        },
        RATTACH => Body::Rattach { qid: d.qid()? },
        TWALK => {
            let fid = d.u32()?;
            let newfid = d.u32()?;
            let n = d.walk_count()?;
            let names = (0..n).map(|_| d.string()).collect::<Result<_>>()?;
            Body::Twalk { fid, newfid, names }
        }
        RWALK => {
            let n = d.walk_count()?;
            let qids = (0..n).map(|_| d.qid()).collect::<Result<_>>()?;
            Body::Rwalk { qids }
        }
        TOPEN => {
            let fid = d.u32()?;
            let at = d.pos;
            let mode = OpenMode::from_code(d.u8()?).ok_or(WireError::Invalid {
                what: "open mode",
                offset: at,
            })?;
            Body::Topen { fid, mode }
        }
        ROPEN => Body::Ropen {
            qid: d.qid()?,
            iounit: d.u32()?,
        },
        TREAD => Body::Tread {
            fid: d.u32()?,
            offset: d.u64()?,
            count: d.u32()?,
        },
        RREAD => Body::Rread { data: d.data()? },
        TWRITE => Body::Twrite {
            fid: d.u32()?,
            offset: d.u64()?,
            data: d.data()?,
        },
        RWRITE => Body::Rwrite { count: d.u32()? },
        TCLUNK => Body::Tclunk { fid: d.u32()? },
        RCLUNK => Body::Rclunk,
        TSTAT => Body::Tstat { fid: d.u32()? },
        RSTAT => Body::Rstat { stat: d.stat()? },
        RERROR => Body::Rerror { ename: d.string()? },
        code => {
            return Err(WireError::UnknownType {
                code,
                offset: type_at,
            })
        }
    };
    if d.pos != bytes.len() {
        return Err(WireError::SizeMismatch {
            declared,
            actual: d.pos,
        });
    }
    if body.is_request() && tag == NOTAG {
        return Err(WireError::NoTag);
    }
    Ok(Message { tag, body })
}

/// Splits a byte stream, delivered in arbitrary chunks, back into frames.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Returns the next complete frame, if one is buffered.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let size = u32::from_le_bytes(self.buf[0..4].try_into().unwrap()) as usize;
        if size < HEADER_LEN {
            return Err(WireError::FrameTooSmall(size));
        }
        if size > MAX_FRAME {
            return Err(WireError::FrameTooBig(size));
        }
        if self.buf.len() < size {
            return Ok(None);
        }
        let rest = self.buf.split_off(size);
        Ok(Some(std::mem::replace(&mut self.buf, rest)))
    }

    /// Call at end of stream; fails if a partial frame is left over.
    pub fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::IncompleteFrame(self.buf.len()))
        }
    }
}

/// Reads frames from `r` until end of stream.
pub fn read_frames<R: Read>(mut r: R) -> Result<Vec<Vec<u8>>> {
    let mut reader = FrameReader::new();
    let mut frames = Vec::new();
    let mut chunk = [0u8; 512];
    loop {
        let n = r.read(&mut chunk).map_err(|e| WireError::Io(e.to_string()))?;
        if n == 0 {
            reader.finish()?;
            return Ok(frames);
        }
        reader.push(&chunk[..n]);
        while let Some(f) = reader.next_frame()? {
            frames.push(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Frames below are encoded by hand from the layout table, not by the
    // encoder under test.
    const TCLUNK_5_1: [u8; 11] = [0x0B, 0, 0, 0, 0x6E, 0x05, 0x00, 0x01, 0, 0, 0];

    #[test]
    fn tclunk_hand_encoded() {
        let m = Message::new(5, Body::Tclunk { fid: 1 });
        assert_eq!(encode_message(&m).unwrap(), TCLUNK_5_1);
        assert_eq!(decode_message(&TCLUNK_5_1).unwrap(), m);
    }

    #[test]
    fn empty_twalk_frame() {
        let m = Message::new(
            1,
            Body::Twalk {
                fid: 0,
                newfid: 1,
                names: vec![],
            },
        );
        // size[4] type[1] tag[2] fid[4] newfid[4] nwname[2]
        let expected = [17, 0, 0, 0, 102, 1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0];
        let enc = encode_message(&m).unwrap();
        assert_eq!(enc, expected);
        assert_eq!(&enc[15..17], &[0, 0]);
    }

    #[test]
    fn twalk_with_names() {
        let m = Message::new(
            2,
            Body::Twalk {
                fid: 0,
                newfid: 1,
                names: vec!["s1".into()],
            },
        );
        let enc = encode_message(&m).unwrap();
        assert_eq!(
            enc,
            [21, 0, 0, 0, 102, 2, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 2, 0, b's', b'1']
        );
    }

    #[test]
    fn unknown_type() {
        let mut f = TCLUNK_5_1;
        f[4] = 0xFF;
        let err = decode_message(&f).unwrap_err();
        assert!(matches!(err, WireError::UnknownType { code: 0xFF, offset: 4 }));
        assert!(err.to_string().contains("unknown type"));
    }

    #[test]
    fn size_exceeding_bytes_is_truncated() {
        let mut f = TCLUNK_5_1;
        f[0] = 20;
        let err = decode_message(&f).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn truncated_string_names_offset() {
        let m = Message::new(1, Body::Rerror { ename: "abc".into() });
        let mut enc = encode_message(&m).unwrap();
        enc.truncate(enc.len() - 1);
        let n = enc.len() as u32;
        enc[0..4].copy_from_slice(&n.to_le_bytes());
        assert_eq!(
            decode_message(&enc).unwrap_err(),
            WireError::Truncated { offset: 9 }
        );
    }

    #[test]
    fn notag_rejected_on_requests() {
        let m = Message::new(NOTAG, Body::Tclunk { fid: 1 });
        assert_eq!(encode_message(&m).unwrap_err(), WireError::NoTag);
        let r = Message::new(NOTAG, Body::Rclunk);
        assert!(encode_message(&r).is_ok());
    }

    #[test]
    fn oversize_string_rejected() {
        let m = Message::new(1, Body::Rerror { ename: "x".repeat(70_000) });
        assert_eq!(
            encode_message(&m).unwrap_err(),
            WireError::StringTooLong(70_000)
        );
    }

    #[test]
    fn too_many_walk_elems() {
        let m = Message::new(
            1,
            Body::Twalk {
                fid: 0,
                newfid: 1,
                names: vec!["a".into(); 17],
            },
        );
        assert_eq!(
            encode_message(&m).unwrap_err(),
            WireError::TooManyWalkElems(17)
        );
    }

    #[test]
    fn frame_reader_byte_at_a_time() {
        let mut stream = TCLUNK_5_1.to_vec();
        stream.extend_from_slice(&TCLUNK_5_1);
        let mut r = FrameReader::new();
        let mut out = Vec::new();
        for b in &stream {
            r.push(std::slice::from_ref(b));
            while let Some(f) = r.next_frame().unwrap() {
                out.push(f);
            }
        }
        r.finish().unwrap();
        assert_eq!(out, vec![TCLUNK_5_1.to_vec(), TCLUNK_5_1.to_vec()]);
    }

    #[test]
    fn frame_reader_split_at_size_boundary() {
        let mut r = FrameReader::new();
        r.push(&TCLUNK_5_1[..4]);
        assert_eq!(r.next_frame().unwrap(), None);
        r.push(&TCLUNK_5_1[4..]);
        assert_eq!(r.next_frame().unwrap(), Some(TCLUNK_5_1.to_vec()));
    }

    #[test]
    fn frame_reader_empty_and_errors() {
        assert!(read_frames(&[][..]).unwrap().is_empty());
        let mut r = FrameReader::new();
        r.push(&[3, 0, 0, 0]);
        assert_eq!(r.next_frame().unwrap_err(), WireError::FrameTooSmall(3));
        assert_eq!(
            read_frames(&TCLUNK_5_1[..6]).unwrap_err(),
            WireError::IncompleteFrame(6)
        );
    }

    #[test]
    fn answers_pairs_requests() {
        let req = Body::Tread {
            fid: 1,
            offset: 0,
            count: 1,
        };
        assert!(Body::Rread { data: vec![] }.answers(&req));
        assert!(Body::Rerror { ename: "x".into() }.answers(&req));
        assert!(!Body::Rclunk.answers(&req));
    }
}
