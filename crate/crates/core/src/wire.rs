//! Binary framing shared by the KV and broker protocols.
//!
//! A frame is a big-endian u32 length, then one opcode byte, then the
//! payload. The length counts the opcode and the payload. Layouts are in
//! docs/protocol.md.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::units::{Instant, LeaseId, PlacementWeights, ProducerId};

pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;
pub const HEADER_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Get = 0x01,
    Put = 0x02,
    Delete = 0x03,
    Ping = 0x04,
    Register = 0x10,
    Deregister = 0x11,
    Report = 0x12,
    Request = 0x13,
    Assign = 0x14,
    Renew = 0x15,
    EvictNotice = 0x16,
    PriceQuery = 0x17,
    Ok = 0x80,
    Value = 0x81,
    NotFound = 0x82,
    RateLimited = 0x83,
    Evicted = 0x84,
    LeaseExpired = 0x85,
    Err = 0xFF,
}

impl TryFrom<u8> for Opcode {
    type Error = u8;

    fn try_from(b: u8) -> std::result::Result<Self, u8> {
        use Opcode::*;
        std::result::Result::Ok(match b {
            0x01 => Get,
            0x02 => Put,
            0x03 => Delete,
            0x04 => Ping,
            0x10 => Register,
            0x11 => Deregister,
            0x12 => Report,
            0x13 => Request,
            0x14 => Assign,
            0x15 => Renew,
            0x16 => EvictNotice,
            0x17 => PriceQuery,
            0x80 => Ok,
            0x81 => Value,
            0x82 => NotFound,
            0x83 => RateLimited,
            0x84 => Evicted,
            0x85 => LeaseExpired,
            0xFF => Err,
            other => return std::result::Result::Err(other),
        })
    }
}

/// Codes carried in ERR replies.
pub mod err_code {
    pub const UNKNOWN_OPCODE: u16 = 1;
    pub const MALFORMED: u16 = 2;
    pub const UNAUTHORIZED: u16 = 3;
    pub const NOT_FOUND: u16 = 4;
    pub const NO_CAPACITY: u16 = 5;
    pub const INVALID: u16 = 6;
    pub const DUPLICATE: u16 = 7;
    pub const INTERNAL: u16 = 8;
}

/// Raw frame. The opcode is kept as a byte so unknown opcodes survive
/// decoding and can be answered with ERR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(op: Opcode, payload: Vec<u8>) -> Self {
        Frame { opcode: op as u8, payload }
    }

    pub fn op(&self) -> Option<Opcode> {
        Opcode::try_from(self.opcode).ok()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<()> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(Error::Protocol(format!("payload of {} B exceeds {MAX_PAYLOAD}", self.payload.len())));
        }
        out.extend_from_slice(&((self.payload.len() + 1) as u32).to_be_bytes());
        out.push(self.opcode);
        out.extend_from_slice(&self.payload);
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut v = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut v)?;
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    /// A frame and the number of bytes it occupied.
    Frame(Frame, usize),
    /// At least this many more bytes are needed; nothing was consumed.
    NeedMore(usize),
}

/// Decodes one frame from the front of `buf`. Errors are fatal for the
/// connection: a zero length or an oversize length.
pub fn decode(buf: &[u8]) -> Result<Decoded> {
    if buf.len() < 4 {
        return Ok(Decoded::NeedMore(4 - buf.len()));
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len == 0 {
        return Err(Error::Protocol("zero frame length".into()));
    }
    if len - 1 > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("frame length {len} exceeds limit")));
    }
    let total = 4 + len;
    if buf.len() < total {
        return Ok(Decoded::NeedMore(total - buf.len()));
    }
    Ok(Decoded::Frame(Frame { opcode: buf[4], payload: buf[5..total].to_vec() }, total))
}

/// Buffered frame reader over a byte stream.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner, buf: Vec::new() }
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }

    /// Next frame, or None on a clean end of stream between frames.
    pub fn read_frame(&mut self) -> Result<Option<Frame>> {
        loop {
            match decode(&self.buf)? {
                Decoded::Frame(f, used) => {
                    self.buf.drain(..used);
                    return Ok(Some(f));
                }
                Decoded::NeedMore(n) => {
                    let mut chunk = vec![0u8; n.clamp(4096, 1 << 20)];
                    let got = match self.inner.read(&mut chunk) {
                        Ok(g) => g,
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                        Err(e) => return Err(e.into()),
                    };
                    if got == 0 {
                        if self.buf.is_empty() {
                            return Ok(None);
                        }
                        return Err(Error::Protocol("stream ended inside a frame".into()));
                    }
                    self.buf.extend_from_slice(&chunk[..got]);
                }
            }
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, f: &Frame) -> Result<()> {
    w.write_all(&f.encode()?)?;
    Ok(())
}

/// How keys are laid out in KV requests on a connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[repr(u8)]
pub enum KeyMode {
    /// Fixed 8-byte counter keys.
    Counter = 0,
    /// u16 length then the key bytes.
    Prefixed = 1,
}

impl TryFrom<u8> for KeyMode {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        match b {
            0 => Ok(KeyMode::Counter),
            1 => Ok(KeyMode::Prefixed),
            _ => Err(Error::Protocol(format!("unknown key mode {b}"))),
        }
    }
}

/// Cursor over a payload.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Protocol(format!("payload truncated: need {n} B at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.bytes(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| Error::Protocol("string is not utf-8".into()))
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Protocol(format!("{} trailing payload bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Writer(pub Vec<u8>);

impl Writer {
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.extend_from_slice(b);
        self
    }
    pub fn str(&mut self, s: &str) -> Result<&mut Self> {
        let n = u16::try_from(s.len()).map_err(|_| Error::invalid("string longer than 65535 bytes"))?;
        self.u16(n);
        self.0.extend_from_slice(s.as_bytes());
        Ok(self)
    }
}

fn put_key(w: &mut Writer, key: &[u8], mode: KeyMode) -> Result<()> {
    match mode {
        KeyMode::Counter => {
            if key.len() != 8 {
                return Err(Error::invalid(format!("counter keys are 8 bytes, got {}", key.len())));
            }
            w.bytes(key);
        }
        KeyMode::Prefixed => {
            let n = u16::try_from(key.len()).map_err(|_| Error::invalid("key longer than 65535 bytes"))?;
            w.u16(n).bytes(key);
        }
    }
    Ok(())
}

fn get_key(r: &mut Reader, mode: KeyMode) -> Result<Vec<u8>> {
    Ok(match mode {
        KeyMode::Counter => r.bytes(8)?.to_vec(),
        KeyMode::Prefixed => {
            let n = r.u16()? as usize;
            r.bytes(n)?.to_vec()
        }
    })
}

/// Requests a consumer sends to a producer store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvRequest {
    Get { key: Vec<u8> },
    Put { key: Vec<u8>, value: Vec<u8> },
    Delete { key: Vec<u8> },
    Ping,
}

impl KvRequest {
    pub fn encode(&self, mode: KeyMode) -> Result<Frame> {
        let mut w = Writer::default();
        let op = match self {
            KvRequest::Get { key } => {
                put_key(&mut w, key, mode)?;
                Opcode::Get
            }
            KvRequest::Put { key, value } => {
                put_key(&mut w, key, mode)?;
                let n = u32::try_from(value.len()).map_err(|_| Error::invalid("value too large"))?;
                w.u32(n).bytes(value);
                Opcode::Put
            }
            KvRequest::Delete { key } => {
                put_key(&mut w, key, mode)?;
                Opcode::Delete
            }
            KvRequest::Ping => Opcode::Ping,
        };
        Ok(Frame::new(op, w.0))
    }

    pub fn decode(f: &Frame, mode: KeyMode) -> Result<Self> {
        let mut r = Reader::new(&f.payload);
        let req = match f.op() {
            Some(Opcode::Get) => KvRequest::Get { key: get_key(&mut r, mode)? },
            Some(Opcode::Put) => {
                let key = get_key(&mut r, mode)?;
                let n = r.u32()? as usize;
                KvRequest::Put { key, value: r.bytes(n)?.to_vec() }
            }
            Some(Opcode::Delete) => KvRequest::Delete { key: get_key(&mut r, mode)? },
            Some(Opcode::Ping) => KvRequest::Ping,
            _ => return Err(Error::Protocol(format!("opcode {:#04x} is not a KV request", f.opcode))),
        };
        r.finish()?;
        Ok(req)
    }
}

/// Replies on either protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    /// Success; the payload is request specific (empty, an id, a price).
    Ok(Vec<u8>),
    Value(Vec<u8>),
    NotFound,
    RateLimited { retry_after_ms: u32 },
    Evicted,
    LeaseExpired,
    Err { code: u16, message: String },
}

impl Reply {
    pub fn ok_u64(v: u64) -> Reply {
        Reply::Ok(v.to_be_bytes().to_vec())
    }

    pub fn err(code: u16, message: impl Into<String>) -> Reply {
        Reply::Err { code, message: message.into() }
    }

    pub fn from_error(e: &Error) -> Reply {
        let code = match e {
            Error::NotFound(_) => err_code::NOT_FOUND,
            Error::NoCapacity(_) => err_code::NO_CAPACITY,
            Error::InvalidArgument(_) => err_code::INVALID,
            Error::Duplicate(_) => err_code::DUPLICATE,
            Error::Protocol(_) => err_code::MALFORMED,
            _ => err_code::INTERNAL,
        };
        Reply::err(code, e.to_string())
    }

    pub fn encode(&self) -> Frame {
        match self {
            Reply::Ok(p) => Frame::new(Opcode::Ok, p.clone()),
            Reply::Value(v) => Frame::new(Opcode::Value, v.clone()),
            Reply::NotFound => Frame::new(Opcode::NotFound, vec![]),
            Reply::RateLimited { retry_after_ms } => Frame::new(Opcode::RateLimited, retry_after_ms.to_be_bytes().to_vec()),
            Reply::Evicted => Frame::new(Opcode::Evicted, vec![]),
            Reply::LeaseExpired => Frame::new(Opcode::LeaseExpired, vec![]),
            Reply::Err { code, message } => {
                let mut w = Writer::default();
                w.u16(*code);
                let msg = message.as_bytes();
                w.bytes(&msg[..msg.len().min(MAX_PAYLOAD - 2)]);
                Frame::new(Opcode::Err, w.0)
            }
        }
    }

    pub fn decode(f: &Frame) -> Result<Self> {
        let mut r = Reader::new(&f.payload);
        let reply = match f.op() {
            Some(Opcode::Ok) => Reply::Ok(r.rest().to_vec()),
            Some(Opcode::Value) => Reply::Value(r.rest().to_vec()),
            Some(Opcode::NotFound) => Reply::NotFound,
            Some(Opcode::RateLimited) => Reply::RateLimited { retry_after_ms: r.u32()? },
            Some(Opcode::Evicted) => Reply::Evicted,
            Some(Opcode::LeaseExpired) => Reply::LeaseExpired,
            Some(Opcode::Err) => {
                let code = r.u16()?;
                Reply::Err { code, message: String::from_utf8_lossy(r.rest()).into_owned() }
            }
            _ => return Err(Error::Protocol(format!("opcode {:#04x} is not a reply", f.opcode))),
        };
        r.finish()?;
        Ok(reply)
    }

    /// The u64 carried by an OK reply.
    pub fn ok_value(&self) -> Result<u64> {
        match self {
            Reply::Ok(p) if p.len() == 8 => Ok(u64::from_be_bytes(p[..].try_into().expect("8 bytes"))),
            other => Err(Error::Protocol(format!("expected OK with a u64, got {other:?}"))),
        }
    }

    /// Turns failure replies into errors.
    pub fn into_result(self) -> Result<Reply> {
        match self {
            Reply::Err { code, message } => Err(Error::Remote { code, message }),
            Reply::RateLimited { retry_after_ms } => Err(Error::RateLimited { retry_after_ms }),
            Reply::LeaseExpired => Err(Error::LeaseExpired),
            r => Ok(r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    Producer = 0,
    Consumer = 1,
}

impl TryFrom<u8> for Role {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Role::Producer),
            1 => Ok(Role::Consumer),
            _ => Err(Error::Protocol(format!("unknown role {b}"))),
        }
    }
}

/// One producer's part of a lease, as sent to both sides.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Grant {
    pub lease_id: LeaseId,
    pub consumer_id: u64,
    pub producer_id: ProducerId,
    pub endpoint: String,
    pub slabs: Vec<u32>,
    pub start: Instant,
    pub end: Instant,
    pub unit_price: u64,
    pub token: u64,
}

fn put_grant(w: &mut Writer, g: &Grant) -> Result<()> {
    w.u64(g.lease_id).u64(g.consumer_id).u64(g.producer_id);
    w.str(&g.endpoint)?;
    w.u32(g.slabs.len() as u32);
    for s in &g.slabs {
        w.u32(*s);
    }
    w.u64(g.start.0).u64(g.end.0).u64(g.unit_price).u64(g.token);
    Ok(())
}

fn get_grant(r: &mut Reader) -> Result<Grant> {
    let lease_id = r.u64()?;
    let consumer_id = r.u64()?;
    let producer_id = r.u64()?;
    let endpoint = r.str()?;
    let n = r.u32()? as usize;
    if n > MAX_PAYLOAD / 4 {
        return Err(Error::Protocol("slab list too long".into()));
    }
    let mut slabs = Vec::with_capacity(n);
    for _ in 0..n {
        slabs.push(r.u32()?);
    }
    Ok(Grant {
        lease_id,
        consumer_id,
        producer_id,
        endpoint,
        slabs,
        start: Instant(r.u64()?),
        end: Instant(r.u64()?),
        unit_price: r.u64()?,
        token: r.u64()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RequestKind {
    New = 0,
    Poll = 1,
}

/// Control messages to and from the broker, plus the KV session handshake.
#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    Register { role: Role, token: String, endpoint: String },
    Deregister { role: Role, id: u64 },
    Report { producer_id: ProducerId, at: Instant, free_bytes: u64, offered_slabs: u32, bw: u64, cpu: f64 },
    Request {
        consumer_id: u64,
        slabs: u32,
        min_slabs: u32,
        duration_ms: u64,
        max_unit_price: u64,
        weights: PlacementWeights,
    },
    Poll { request_id: u64 },
    Assign { grants: Vec<Grant> },
    /// Lease renewal with the broker, and the session handshake with a
    /// producer.
    Renew { lease_id: LeaseId, token: u64, key_mode: KeyMode },
    EvictNotice { lease_id: LeaseId, producer_id: ProducerId, slabs: u32, at: Instant },
    PriceQuery,
}

impl Control {
    pub fn encode(&self) -> Result<Frame> {
        let mut w = Writer::default();
        let op = match self {
            Control::Register { role, token, endpoint } => {
                w.u8(*role as u8);
                w.str(token)?;
                w.str(endpoint)?;
                Opcode::Register
            }
            Control::Deregister { role, id } => {
                w.u8(*role as u8).u64(*id);
                Opcode::Deregister
            }
            Control::Report { producer_id, at, free_bytes, offered_slabs, bw, cpu } => {
                w.u64(*producer_id).u64(at.0).u64(*free_bytes).u32(*offered_slabs).u64(*bw).f64(*cpu);
                Opcode::Report
            }
            Control::Request { consumer_id, slabs, min_slabs, duration_ms, max_unit_price, weights } => {
                w.u8(RequestKind::New as u8).u64(*consumer_id).u32(*slabs).u32(*min_slabs).u64(*duration_ms).u64(*max_unit_price);
                for x in weights.as_array() {
                    w.f64(x);
                }
                Opcode::Request
            }
            Control::Poll { request_id } => {
                w.u8(RequestKind::Poll as u8).u64(*request_id);
                Opcode::Request
            }
            Control::Assign { grants } => {
                w.u32(grants.len() as u32);
                for g in grants {
                    put_grant(&mut w, g)?;
                }
                Opcode::Assign
            }
            Control::Renew { lease_id, token, key_mode } => {
                w.u64(*lease_id).u64(*token).u8(*key_mode as u8);
                Opcode::Renew
            }
            Control::EvictNotice { lease_id, producer_id, slabs, at } => {
                w.u64(*lease_id).u64(*producer_id).u32(*slabs).u64(at.0);
                Opcode::EvictNotice
            }
            Control::PriceQuery => Opcode::PriceQuery,
        };
        let f = Frame::new(op, w.0);
        if f.payload.len() > MAX_PAYLOAD {
            return Err(Error::Protocol("control message too large".into()));
        }
        Ok(f)
    }

    pub fn decode(f: &Frame) -> Result<Self> {
        let mut r = Reader::new(&f.payload);
        let msg = match f.op() {
            Some(Opcode::Register) => Control::Register { role: Role::try_from(r.u8()?)?, token: r.str()?, endpoint: r.str()? },
            Some(Opcode::Deregister) => Control::Deregister { role: Role::try_from(r.u8()?)?, id: r.u64()? },
            Some(Opcode::Report) => Control::Report {
                producer_id: r.u64()?,
                at: Instant(r.u64()?),
                free_bytes: r.u64()?,
                offered_slabs: r.u32()?,
                bw: r.u64()?,
                cpu: r.f64()?,
            },
            Some(Opcode::Request) => match r.u8()? {
                0 => {
                    let consumer_id = r.u64()?;
                    let slabs = r.u32()?;
                    let min_slabs = r.u32()?;
                    let duration_ms = r.u64()?;
                    let max_unit_price = r.u64()?;
                    let mut a = [0.0; 6];
                    for x in &mut a {
                        *x = r.f64()?;
                    }
                    Control::Request { consumer_id, slabs, min_slabs, duration_ms, max_unit_price, weights: PlacementWeights::from_array(a) }
                }
                1 => Control::Poll { request_id: r.u64()? },
                k => return Err(Error::Protocol(format!("unknown request kind {k}"))),
            },
            Some(Opcode::Assign) => {
                let n = r.u32()? as usize;
                let mut grants = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    grants.push(get_grant(&mut r)?);
                }
                Control::Assign { grants }
            }
            Some(Opcode::Renew) => Control::Renew { lease_id: r.u64()?, token: r.u64()?, key_mode: KeyMode::try_from(r.u8()?)? },
            Some(Opcode::EvictNotice) => Control::EvictNotice {
                lease_id: r.u64()?,
                producer_id: r.u64()?,
                slabs: r.u32()?,
                at: Instant(r.u64()?),
            },
            Some(Opcode::PriceQuery) => Control::PriceQuery,
            _ => return Err(Error::Protocol(format!("opcode {:#04x} is not a control message", f.opcode))),
        };
        r.finish()?;
        Ok(msg)
    }
}

/// Reply for a frame whose opcode is not understood.
pub fn unknown_opcode(f: &Frame) -> Reply {
    Reply::err(err_code::UNKNOWN_OPCODE, format!("unknown opcode {:#04x}", f.opcode))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ping_bytes() {
        assert_eq!(KvRequest::Ping.encode(KeyMode::Counter).unwrap().encode().unwrap(), vec![0, 0, 0, 1, 4]);
    }

    #[test]
    fn put_layout() {
        let f = KvRequest::Put { key: vec![7; 8], value: vec![9; 16] }.encode(KeyMode::Counter).unwrap();
        let bytes = f.encode().unwrap();
        assert_eq!(u32::from_be_bytes(bytes[..4].try_into().unwrap()), 1 + 8 + 4 + 16);
        assert_eq!(bytes[4], 0x02);
        assert_eq!(&bytes[13..17], &[0, 0, 0, 16]);
    }

    #[test]
    fn partial_input_needs_more() {
        let bytes = Frame::new(Opcode::Value, vec![1, 2, 3]).encode().unwrap();
        assert_eq!(decode(&bytes[..2]).unwrap(), Decoded::NeedMore(2));
        assert_eq!(decode(&bytes[..6]).unwrap(), Decoded::NeedMore(2));
        assert!(matches!(decode(&bytes).unwrap(), Decoded::Frame(_, 8)));
    }

    #[test]
    fn bad_lengths_are_fatal() {
        assert!(decode(&[0, 0, 0, 0, 1]).is_err());
        let big = ((MAX_PAYLOAD + 2) as u32).to_be_bytes();
        assert!(decode(&big).is_err());
        let ok = ((MAX_PAYLOAD + 1) as u32).to_be_bytes();
        assert!(matches!(decode(&ok).unwrap(), Decoded::NeedMore(_)));
        assert!(Frame::new(Opcode::Value, vec![0; MAX_PAYLOAD + 1]).encode().is_err());
    }

    #[test]
    fn control_round_trip() {
        let grant = Grant {
            lease_id: 3,
            consumer_id: 4,
            producer_id: 5,
            endpoint: "127.0.0.1:9000".into(),
            slabs: vec![0, 1],
            start: Instant(10),
            end: Instant(20),
            unit_price: 2000,
            token: 0xdead,
        };
        let msgs = vec![
            Control::Register { role: Role::Producer, token: "t".into(), endpoint: "h:1".into() },
            Control::Deregister { role: Role::Consumer, id: 9 },
            Control::Report { producer_id: 1, at: Instant(5), free_bytes: 7, offered_slabs: 2, bw: 100, cpu: 0.5 },
            Control::Request { consumer_id: 1, slabs: 4, min_slabs: 2, duration_ms: 600_000, max_unit_price: u64::MAX, weights: PlacementWeights::default() },
            Control::Poll { request_id: 12 },
            Control::Assign { grants: vec![grant.clone(), grant] },
            Control::Renew { lease_id: 1, token: 2, key_mode: KeyMode::Prefixed },
            Control::EvictNotice { lease_id: 1, producer_id: 2, slabs: 1, at: Instant(3) },
            Control::PriceQuery,
        ];
        for m in msgs {
            let f = Control::decode(&Frame { ..m.encode().unwrap() }).unwrap();
            assert_eq!(f, m);
        }
    }

    #[test]
    fn reply_round_trip() {
        for r in [
            Reply::Ok(vec![]),
            Reply::ok_u64(42),
            Reply::Value(b"abc".to_vec()),
            Reply::NotFound,
            Reply::RateLimited { retry_after_ms: 250 },
            Reply::Evicted,
            Reply::LeaseExpired,
            Reply::err(err_code::UNKNOWN_OPCODE, "nope"),
        ] {
            assert_eq!(Reply::decode(&r.encode()).unwrap(), r);
        }
        assert_eq!(Reply::ok_u64(42).ok_value().unwrap(), 42);
    }

    #[test]
    fn kv_key_modes() {
        let req = KvRequest::Get { key: b"user:10".to_vec() };
        assert!(req.encode(KeyMode::Counter).is_err());
        let f = req.encode(KeyMode::Prefixed).unwrap();
        assert_eq!(KvRequest::decode(&f, KeyMode::Prefixed).unwrap(), req);
        assert!(KvRequest::decode(&f, KeyMode::Counter).is_err());
    }

    #[test]
    fn reader_over_chunks() {
        let mut bytes = Vec::new();
        for i in 0..50u8 {
            Frame::new(Opcode::Value, vec![i; i as usize]).encode_into(&mut bytes).unwrap();
        }
        struct Trickle(Vec<u8>, usize);
        impl Read for Trickle {
            fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
                let n = buf.len().min(3).min(self.0.len() - self.1);
                buf[..n].copy_from_slice(&self.0[self.1..self.1 + n]);
                self.1 += n;
                Ok(n)
            }
        }
        let mut r = FrameReader::new(Trickle(bytes, 0));
        for i in 0..50u8 {
            assert_eq!(r.read_frame().unwrap().unwrap().payload, vec![i; i as usize]);
        }
        assert!(r.read_frame().unwrap().is_none());
    }
}
