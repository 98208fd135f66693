//! Length-prefixed TCP protocol for remote oracles.
//!
//! Every message is a frame: a `u32` little-endian payload length followed by
//! the payload. All integers and floats are little-endian; floats are IEEE-754
//! binary64, so values cross the wire bit-exactly.
//!
//! ```text
//! request  := version:u16 kind:u8 body
//!   kind 0 (QUERY): n:u32 x:[f64; n]
//!   kind 1 (DIM):   (empty)
//! response := version:u16 status:u8 body
//!   status 0 (VALUE): y:f64
//!   status 1 (DIM):   dim:u32
//!   status 2 (ERROR): code:u8 [used:u64 budget:u64 if code = 3] len:u32 msg:[u8; len] (UTF-8)
//!     codes: 1 protocol, 2 dimension mismatch, 3 budget exhausted, 4 other
//! ```
//!
//! The server answers frames in order on each connection. A malformed payload
//! gets an ERROR response and the connection stays open; a frame longer than
//! [`MAX_FRAME`] gets an ERROR response and the connection is closed.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use crate::error::{check_dim, Error, Result};
use crate::model::Network;
use crate::oracle::{InProcessOracle, Oracle, QueryLog, QuerySummary};

pub const PROTOCOL_VERSION: u16 = 1;
pub const MAX_FRAME: u32 = 1 << 20;

const KIND_QUERY: u8 = 0;
const KIND_DIM: u8 = 1;

const STATUS_VALUE: u8 = 0;
const STATUS_DIM: u8 = 1;
const STATUS_ERROR: u8 = 2;

/// Queries pipelined per flush in [`TcpOracle::query_batch`]. Small enough
/// that the responses fit in a socket buffer while the requests are written.
const PIPELINE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub enum Request {
    Query(Vec<f64>),
    Dim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCode {
    Protocol = 1,
    Dimension = 2,
    Budget = 3,
    Other = 4,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Response {
    Value(f64),
    Dim(u32),
    Error {
        code: ErrorCode,
        /// `(used, budget)` for budget errors.
        budget: Option<(u64, u64)>,
        message: String,
    },
}

fn header(buf: &mut Vec<u8>, tag: u8) {
    buf.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    buf.push(tag);
}

/// Encode a request payload (without the length prefix).
pub fn encode_request(req: &Request) -> Vec<u8> {
    match req {
        Request::Query(x) => {
            let mut buf = Vec::with_capacity(7 + 8 * x.len());
            header(&mut buf, KIND_QUERY);
            buf.extend_from_slice(&(x.len() as u32).to_le_bytes());
            for v in x {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf
        }
        Request::Dim => {
            let mut buf = Vec::with_capacity(3);
            header(&mut buf, KIND_DIM);
            buf
        }
    }
}

pub fn encode_response(resp: &Response) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16);
    match resp {
        Response::Value(y) => {
            header(&mut buf, STATUS_VALUE);
            buf.extend_from_slice(&y.to_le_bytes());
        }
        Response::Dim(d) => {
            header(&mut buf, STATUS_DIM);
            buf.extend_from_slice(&d.to_le_bytes());
        }
        Response::Error {
            code,
            budget,
            message,
        } => {
            header(&mut buf, STATUS_ERROR);
            buf.push(*code as u8);
            if *code == ErrorCode::Budget {
                let (used, total) = budget.unwrap_or((0, 0));
                buf.extend_from_slice(&used.to_le_bytes());
                buf.extend_from_slice(&total.to_le_bytes());
            }
            buf.extend_from_slice(&(message.len() as u32).to_le_bytes());
            buf.extend_from_slice(message.as_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Protocol("truncated payload".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
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
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Protocol(format!("{} trailing bytes", self.buf.len())))
        }
    }
    fn version(&mut self) -> Result<()> {
        match self.u16()? {
            PROTOCOL_VERSION => Ok(()),
            v => Err(Error::Protocol(format!("unsupported protocol version {v}"))),
        }
    }
}

pub fn decode_request(payload: &[u8]) -> Result<Request> {
    let mut c = Cursor { buf: payload };
    c.version()?;
    let req = match c.u8()? {
        KIND_QUERY => {
            let n = c.u32()? as usize;
            if c.buf.len() != 8 * n {
                return Err(Error::Protocol(format!(
                    "query declares {n} coordinates but carries {} bytes",
                    c.buf.len()
                )));
            }
            Request::Query((0..n).map(|_| c.f64()).collect::<Result<_>>()?)
        }
        KIND_DIM => Request::Dim,
        kind => return Err(Error::Protocol(format!("unknown request kind {kind}"))),
    };
    c.finish()?;
    Ok(req)
}

pub fn decode_response(payload: &[u8]) -> Result<Response> {
    let mut c = Cursor { buf: payload };
    c.version()?;
    let resp = match c.u8()? {
        STATUS_VALUE => Response::Value(c.f64()?),
        STATUS_DIM => Response::Dim(c.u32()?),
        STATUS_ERROR => {
            let code = match c.u8()? {
                1 => ErrorCode::Protocol,
                2 => ErrorCode::Dimension,
                3 => ErrorCode::Budget,
                _ => ErrorCode::Other,
            };
            let budget = if code == ErrorCode::Budget {
                Some((c.u64()?, c.u64()?))
            } else {
                None
            };
            let len = c.u32()? as usize;
            let message = String::from_utf8(c.take(len)?.to_vec())
                .map_err(|_| Error::Protocol("error message is not UTF-8".into()))?;
            Response::Error {
                code,
                budget,
                message,
            }
        }
        status => return Err(Error::Protocol(format!("unknown response status {status}"))),
    };
    c.finish()?;
    Ok(resp)
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)
}

/// Read one frame. `Ok(None)` on clean end-of-stream before a frame starts.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}

fn error_response(e: &Error) -> Response {
    let (code, budget) = match e.root() {
        Error::Protocol(_) => (ErrorCode::Protocol, None),
        Error::Input(_) => (ErrorCode::Dimension, None),
        Error::Budget { used, budget } => (ErrorCode::Budget, Some((*used, *budget))),
        _ => (ErrorCode::Other, None),
    };
    Response::Error {
        code,
        budget,
        message: e.to_string(),
    }
}

fn answer(oracle: &InProcessOracle, payload: &[u8]) -> Response {
    let result = decode_request(payload).and_then(|req| match req {
        Request::Query(x) => oracle.query(&x).map(Response::Value),
        Request::Dim => Ok(Response::Dim(oracle.dim() as u32)),
    });
    result.unwrap_or_else(|e| error_response(&e))
}

fn handle_connection(oracle: &InProcessOracle, stream: TcpStream) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        if reader.buffer().is_empty() {
            writer.flush()?;
        }
        let payload = match read_frame(&mut reader) {
            Ok(Some(p)) => p,
            Ok(None) => break,
            Err(e @ Error::Protocol(_)) => {
                // Oversized frame: answer once, then drop the connection.
                write_frame(&mut writer, &encode_response(&error_response(&e)))?;
                break;
            }
            Err(e) => return Err(e),
        };
        write_frame(&mut writer, &encode_response(&answer(oracle, &payload)))?;
    }
    writer.flush()?;
    Ok(())
}

/// Running oracle server. Dropping the handle shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    oracle: Arc<InProcessOracle>,
    stop: Arc<AtomicBool>,
    streams: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn query_count(&self) -> u64 {
        self.oracle.query_count()
    }

    /// Stop accepting, close open connections and join every thread.
    pub fn shutdown(mut self) {
        self.stop_all();
    }

    /// Block until the accept loop exits (it only exits on shutdown).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    fn stop_all(&mut self) {
        let Some(accept) = self.accept.take() else {
            return;
        };
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        let _ = accept.join();
        for s in self.streams.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        for h in self.workers.lock().unwrap().drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_all();
    }
}

/// Serve `net` on `addr` (use port 0 for an ephemeral port).
pub fn serve(net: Network, addr: impl ToSocketAddrs, budget: Option<u64>) -> Result<ServerHandle> {
    net.validate()?;
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let oracle = Arc::new(InProcessOracle::with_budget(net, budget));
    let stop = Arc::new(AtomicBool::new(false));
    let streams = Arc::new(Mutex::new(Vec::new()));
    let workers = Arc::new(Mutex::new(Vec::new()));

    let accept = {
        let (oracle, stop, streams, workers) = (
            Arc::clone(&oracle),
            Arc::clone(&stop),
            Arc::clone(&streams),
            Arc::clone(&workers),
        );
        thread::spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let _ = stream.set_nodelay(true);
                if let Ok(clone) = stream.try_clone() {
                    streams.lock().unwrap().push(clone);
                }
                let oracle = Arc::clone(&oracle);
                let worker = thread::spawn(move || {
                    let _ = handle_connection(&oracle, stream);
                });
                workers.lock().unwrap().push(worker);
            }
        })
    };

    Ok(ServerHandle {
        addr,
        oracle,
        stop,
        streams,
        accept: Some(accept),
        workers,
    })
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Conn {
    fn send(&mut self, req: &Request) -> Result<()> {
        write_frame(&mut self.writer, &encode_request(req))?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Response> {
        let payload = read_frame(&mut self.reader)?
            .ok_or_else(|| Error::Protocol("server closed the connection".into()))?;
        decode_response(&payload)
    }
}

/// Client side of the protocol; implements [`Oracle`].
pub struct TcpOracle {
    conn: Mutex<Conn>,
    dim: usize,
    log: QueryLog,
}

impl TcpOracle {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut conn = Conn {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        };
        conn.send(&Request::Dim)?;
        conn.writer.flush()?;
        let dim = match conn.recv()? {
            Response::Dim(d) if d > 0 => d as usize,
            other => return Err(Error::Protocol(format!("bad handshake response {other:?}"))),
        };
        Ok(TcpOracle {
            conn: Mutex::new(conn),
            dim,
            log: QueryLog::new(None),
        })
    }

    fn value(resp: Response) -> Result<f64> {
        match resp {
            Response::Value(y) => Ok(y),
            Response::Error {
                code: ErrorCode::Budget,
                budget: Some((used, budget)),
                ..
            } => Err(Error::Budget { used, budget }),
            Response::Error {
                code: ErrorCode::Dimension,
                message,
                ..
            } => Err(Error::Input(message)),
            Response::Error { message, .. } => Err(Error::Protocol(message)),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }
}

impl Oracle for TcpOracle {
    fn dim(&self) -> usize {
        self.dim
    }

    fn query(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let mut conn = self.conn.lock().unwrap();
        conn.send(&Request::Query(x.to_vec()))?;
        conn.writer.flush()?;
        let y = Self::value(conn.recv()?)?;
        self.log.reserve(1)?;
        Ok(y)
    }

    fn query_batch(&self, points: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        if points.len() % d != 0 {
            return Err(Error::input(format!(
                "batch length {} is not a multiple of dimension {d}",
                points.len()
            )));
        }
        let mut conn = self.conn.lock().unwrap();
        let mut out = Vec::with_capacity(points.len() / d);
        for chunk in points.chunks(PIPELINE_CHUNK * d) {
            for x in chunk.chunks_exact(d) {
                conn.send(&Request::Query(x.to_vec()))?;
            }
            conn.writer.flush()?;
            // Drain every response before reporting the first error so the
            // connection stays in sync.
            let mut first_err = None;
            for _ in 0..chunk.len() / d {
                match Self::value(conn.recv()?) {
                    Ok(y) => {
                        self.log.reserve(1)?;
                        out.push(y);
                    }
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
            }
            if let Some(e) = first_err {
                return Err(e);
            }
        }
        Ok(out)
    }

    fn query_count(&self) -> u64 {
        self.log.count()
    }

    fn summary(&self) -> QuerySummary {
        self.log.summary()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Neuron, Sign};

    fn net() -> Network {
        Network::new(
            2,
            vec![
                Neuron::new(Sign::Pos, vec![1.0, 0.0], 0.0),
                Neuron::new(Sign::Neg, vec![0.3, -0.7], 0.1),
            ],
        )
        .unwrap()
    }

    #[test]
    fn request_layout_is_bit_exact() {
        let bytes = encode_request(&Request::Query(vec![1.0, -2.5]));
        let mut expected = vec![1, 0, 0, 2, 0, 0, 0];
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(encode_request(&Request::Dim), vec![1, 0, 1]);
        let mut framed = Vec::new();
        write_frame(&mut framed, &bytes).unwrap();
        assert_eq!(&framed[..4], &[23, 0, 0, 0]);
    }

    #[test]
    fn codec_round_trips() {
        for req in [Request::Dim, Request::Query(vec![0.1, f64::MIN_POSITIVE, -0.0])] {
            assert_eq!(decode_request(&encode_request(&req)).unwrap(), req);
        }
        for resp in [
            Response::Value(1.0 / 3.0),
            Response::Dim(8),
            Response::Error {
                code: ErrorCode::Budget,
                budget: Some((5, 5)),
                message: "out".into(),
            },
            Response::Error {
                code: ErrorCode::Protocol,
                budget: None,
                message: "bad".into(),
            },
        ] {
            assert_eq!(decode_response(&encode_response(&resp)).unwrap(), resp);
        }
    }

    #[test]
    fn malformed_requests_are_rejected() {
        assert!(decode_request(&[]).is_err());
        assert!(decode_request(&[2, 0, 0]).is_err());
        assert!(decode_request(&[1, 0, 9]).is_err());
        assert!(decode_request(&[1, 0, 0, 1, 0, 0, 0, 1, 2]).is_err());
        assert!(decode_request(&[1, 0, 1, 7]).is_err());
    }

    #[test]
    fn tcp_round_trip_matches_evaluation() {
        let target = net();
        let server = serve(target.clone(), "127.0.0.1:0", None).unwrap();
        let client = TcpOracle::connect(server.addr()).unwrap();
        assert_eq!(client.dim(), 2);
        let x = [0.7, -0.2];
        assert_eq!(client.query(&x).unwrap(), target.evaluate(&x).unwrap());
        let ys = client.query_batch(&[1.0, 1.0, -1.0, 2.0, 0.5, 0.5]).unwrap();
        assert_eq!(ys.len(), 3);
        assert_eq!(ys[1], target.evaluate(&[-1.0, 2.0]).unwrap());
        assert_eq!(client.query_count(), 4);
        assert_eq!(server.query_count(), 4);
        server.shutdown();
    }

    #[test]
    fn malformed_frame_gets_error_and_connection_survives() {
        let server = serve(net(), "127.0.0.1:0", None).unwrap();
        let mut stream = TcpStream::connect(server.addr()).unwrap();
        write_frame(&mut stream, &[1, 0, 42]).unwrap();
        let resp = decode_response(&read_frame(&mut stream).unwrap().unwrap()).unwrap();
        assert!(matches!(resp, Response::Error { code: ErrorCode::Protocol, .. }));
        write_frame(&mut stream, &encode_request(&Request::Query(vec![2.0, 0.0]))).unwrap();
        let resp = decode_response(&read_frame(&mut stream).unwrap().unwrap()).unwrap();
        assert_eq!(resp, Response::Value(net().evaluate(&[2.0, 0.0]).unwrap()));
        // Wrong dimension is a dimension error, also non-fatal.
        write_frame(&mut stream, &encode_request(&Request::Query(vec![1.0]))).unwrap();
        let resp = decode_response(&read_frame(&mut stream).unwrap().unwrap()).unwrap();
        assert!(matches!(resp, Response::Error { code: ErrorCode::Dimension, .. }));
        drop(stream);
        server.shutdown();
    }

    #[test]
    fn identical_requests_yield_identical_bytes() {
        let server = serve(net(), "127.0.0.1:0", None).unwrap();
        let mut stream = TcpStream::connect(server.addr()).unwrap();
        let req = encode_request(&Request::Query(vec![0.25, -1.5]));
        let mut replies = Vec::new();
        for _ in 0..2 {
            write_frame(&mut stream, &req).unwrap();
            replies.push(read_frame(&mut stream).unwrap().unwrap());
        }
        assert_eq!(replies[0], replies[1]);
    }

    #[test]
    fn remote_budget_surfaces_as_budget_error() {
        let server = serve(net(), "127.0.0.1:0", Some(1)).unwrap();
        let client = TcpOracle::connect(server.addr()).unwrap();
        client.query(&[1.0, 0.0]).unwrap();
        assert!(matches!(
            client.query(&[1.0, 0.0]),
            Err(Error::Budget { used: 1, budget: 1 })
        ));
        // The connection is still usable for the handshake-free path.
        assert!(client.query_batch(&[1.0, 0.0, 2.0, 0.0]).is_err());
    }

    #[test]
    fn bind_failure_is_transport_error() {
        let server = serve(net(), "127.0.0.1:0", None).unwrap();
        let err = serve(net(), server.addr(), None).err().unwrap();
        assert!(matches!(err, Error::Transport(_)));
    }
}
