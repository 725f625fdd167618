//! Live mode: broker and producer servers over TCP, and a consumer bench.
//! One thread per connection; state sits behind a mutex.

use std::io::{BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};

use crate::error::{Error, Result};
use crate::wire::{write_frame, Control, Frame, FrameReader, Grant, Opcode, Reply, Role};

pub mod bench;
pub mod broker_server;
pub mod producer_server;

pub use bench::{run_bench, BenchConfig, BenchSummary};
pub use broker_server::{BrokerServer, BrokerServerConfig};
pub use producer_server::{ProducerServer, ProducerServerConfig};

/// What the broker sends back for a control message.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Reply(Reply),
    Assign(Vec<Grant>),
}

impl Response {
    pub fn encode(&self) -> Result<Frame> {
        match self {
            Response::Reply(r) => Ok(r.encode()),
            Response::Assign(g) => Control::Assign { grants: g.clone() }.encode(),
        }
    }

    pub fn decode(f: &Frame) -> Result<Self> {
        if f.op() == Some(Opcode::Assign) {
            match Control::decode(f)? {
                Control::Assign { grants } => Ok(Response::Assign(grants)),
                _ => unreachable!("assign opcode decodes to assign"),
            }
        } else {
            Ok(Response::Reply(Reply::decode(f)?))
        }
    }

    pub fn grants(self) -> Result<Vec<Grant>> {
        match self {
            Response::Assign(g) => Ok(g),
            Response::Reply(r) => {
                r.clone().into_result()?;
                Err(Error::Protocol(format!("expected ASSIGN, got {r:?}")))
            }
        }
    }

    pub fn ok_u64(self) -> Result<u64> {
        match self {
            Response::Reply(r) => r.into_result()?.ok_value(),
            Response::Assign(_) => Err(Error::Protocol("expected OK, got ASSIGN".into())),
        }
    }
}

/// Request/response connection to the broker.
pub struct ControlClient {
    reader: FrameReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl ControlClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(ControlClient { reader: FrameReader::new(stream.try_clone()?), writer: BufWriter::new(stream) })
    }

    pub fn call(&mut self, msg: &Control) -> Result<Response> {
        self.call_frame(&msg.encode()?)
    }

    pub fn call_frame(&mut self, f: &Frame) -> Result<Response> {
        write_frame(&mut self.writer, f)?;
        self.writer.flush()?;
        let f = self
            .reader
            .read_frame()?
            .ok_or_else(|| Error::Protocol("broker closed the connection".into()))?;
        Response::decode(&f)
    }

    pub fn register(&mut self, role: Role, token: &str, endpoint: &str) -> Result<u64> {
        self.call(&Control::Register { role, token: token.to_string(), endpoint: endpoint.to_string() })?
            .ok_u64()
    }

    pub fn price(&mut self) -> Result<u64> {
        self.call(&Control::PriceQuery)?.ok_u64()
    }
}
