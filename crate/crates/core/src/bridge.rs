//! Client side of the external-model bridge.
//!
//! Wire format, both directions: a 4-byte big-endian body length followed by
//! a UTF-8 JSON body
//!
//! ```text
//! { "id": 7, "method": "generate",
//!   "tensors": [ { "name": "z", "shape": [1, 4, 8, 8], "dtype": "f32",
//!                  "data": "<base64 of little-endian f32>" } ],
//!   "scalars": { } }
//! ```
//!
//! A reply carries the request id and method. Failures come back as
//! `"method": "error"` with `scalars.message`. One request is in flight per
//! connection.

use std::io::{self, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde_json::{json, Map, Value};

use crate::error::{BridgeError, Result};
use crate::numerics::Tensor;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
/// Default cap on a single frame body.
pub const DEFAULT_MAX_FRAME_BYTES: usize = 256 << 20;

pub type SharedClient = Arc<Mutex<BridgeClient>>;

#[derive(Clone, Debug, PartialEq)]
pub struct WireTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Values as transported (32-bit).
    pub data: Vec<f32>,
}

impl WireTensor {
    pub fn from_tensor(name: &str, t: &Tensor) -> Self {
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| v as f64).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub method: String,
    pub tensors: Vec<WireTensor>,
    pub scalars: Map<String, Value>,
}

impl Frame {
    pub fn new(id: u64, method: &str) -> Self {
        Self {
            id,
            method: method.to_string(),
            tensors: Vec::new(),
            scalars: Map::new(),
        }
    }

    pub fn error(id: u64, message: &str) -> Self {
        let mut f = Frame::new(id, "error");
        f.scalars.insert("message".into(), json!(message));
        f
    }

    pub fn with_tensor(mut self, name: &str, t: &Tensor) -> Self {
        self.tensors.push(WireTensor::from_tensor(name, t));
        self
    }

    pub fn tensor(&self, name: &str) -> Option<&WireTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_json(&self) -> Value {
        let tensors: Vec<Value> = self
            .tensors
            .iter()
            .map(|t| {
                let mut bytes = Vec::with_capacity(t.data.len() * 4);
                for v in &t.data {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                json!({
                    "name": t.name,
                    "shape": t.shape,
                    "dtype": "f32",
                    "data": B64.encode(bytes),
                })
            })
            .collect();
        json!({
            "id": self.id,
            "method": self.method,
            "tensors": tensors,
            "scalars": Value::Object(self.scalars.clone()),
        })
    }

    /// Length-prefixed encoding.
    pub fn encode(&self) -> Vec<u8> {
        let body = serde_json::to_vec(&self.to_json()).expect("frame serializes");
        let mut out = Vec::with_capacity(body.len() + 4);
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    /// Parse a frame body, naming the first offending field on failure.
    pub fn decode_body(body: &[u8]) -> std::result::Result<Frame, BridgeError> {
        let bad = |id: Option<u64>, field: &str, message: String| BridgeError::Protocol {
            id,
            field: field.to_string(),
            message,
        };
        let text = std::str::from_utf8(body).map_err(|e| bad(None, "body", format!("not UTF-8: {e}")))?;
        let root: Value =
            serde_json::from_str(text).map_err(|e| bad(None, "body", format!("invalid JSON: {e}")))?;
        let obj = root
            .as_object()
            .ok_or_else(|| bad(None, "body", "frame is not a JSON object".into()))?;
        let id = obj
            .get("id")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad(None, "id", "missing or not an unsigned integer".into()))?;
        let method = obj
            .get("method")
            .and_then(Value::as_str)
            .ok_or_else(|| bad(Some(id), "method", "missing or not a string".into()))?
            .to_string();
        let mut tensors = Vec::new();
        match obj.get("tensors") {
            None => {}
            Some(Value::Array(items)) => {
                for (i, item) in items.iter().enumerate() {
                    tensors.push(decode_tensor(id, i, item)?);
                }
            }
            Some(_) => return Err(bad(Some(id), "tensors", "not an array".into())),
        }
        let scalars = match obj.get("scalars") {
            None => Map::new(),
            Some(Value::Object(m)) => m.clone(),
            Some(_) => return Err(bad(Some(id), "scalars", "not an object".into())),
        };
        Ok(Frame {
            id,
            method,
            tensors,
            scalars,
        })
    }
}

fn decode_tensor(id: u64, index: usize, item: &Value) -> std::result::Result<WireTensor, BridgeError> {
    let field = |name: &str| format!("tensors[{index}].{name}");
    let bad = |name: &str, message: String| BridgeError::Protocol {
        id: Some(id),
        field: field(name),
        message,
    };
    let obj = item
        .as_object()
        .ok_or_else(|| bad("", "tensor entry is not an object".into()))?;
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("name", "missing or not a string".into()))?;
    let shape: Vec<usize> = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("shape", "missing or not an array".into()))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| bad("shape", "entries must be unsigned integers".into()))?;
    match obj.get("dtype").and_then(Value::as_str) {
        Some("f32") => {}
        other => return Err(bad("dtype", format!("expected \"f32\", got {other:?}"))),
    }
    let encoded = obj
        .get("data")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("data", "missing or not a string".into()))?;
    let bytes = B64
        .decode(encoded)
        .map_err(|e| bad("data", format!("invalid base64: {e}")))?;
    let count: usize = shape.iter().product();
    if bytes.len() != count * 4 {
        return Err(bad(
            "data",
            format!("{} bytes for shape {:?} (expected {})", bytes.len(), shape, count * 4),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("data", "non-finite value".into()));
    }
    Ok(WireTensor {
        name: name.to_string(),
        shape,
        data,
    })
}

/// Read one length-prefixed body, refusing bodies above `max_bytes`.
pub fn read_frame_body(reader: &mut impl Read, max_bytes: usize) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    reader.read_exact(&mut len)?;
    let n = u32::from_be_bytes(len) as usize;
    if n > max_bytes {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {n} bytes exceeds limit {max_bytes}"),
        ));
    }
    let mut body = vec![0u8; n];
    reader.read_exact(&mut body)?;
    Ok(body)
}

/// Answer frames on `stream` with `handler` until the peer hangs up.
/// Undecodable frames get an error reply with id 0.
pub fn serve<S: Read + Write>(stream: &mut S, mut handler: impl FnMut(Frame) -> Frame) -> io::Result<()> {
    loop {
        let body = match read_frame_body(stream, DEFAULT_MAX_FRAME_BYTES) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let reply = match Frame::decode_body(&body) {
            Ok(frame) => handler(frame),
            Err(e) => Frame::error(e.request_id().unwrap_or(0), &e.to_string()),
        };
        stream.write_all(&reply.encode())?;
        stream.flush()?;
    }
}

enum Transport {
    Tcp(TcpStream),
    Stdio {
        child: Child,
        stdin: ChildStdin,
        frames: Receiver<io::Result<Vec<u8>>>,
    },
}

/// Lock-step request/response connection to one bridge peer.
pub struct BridgeClient {
    transport: Transport,
    next_id: u64,
    timeout: Duration,
    max_frame_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Capabilities {
    pub model_id: String,
    pub dtype: String,
    pub scalars: Map<String, Value>,
}

impl Capabilities {
    pub fn shape(&self, key: &str) -> Option<Vec<usize>> {
        self.scalars
            .get(key)?
            .as_array()?
            .iter()
            .map(|v| v.as_u64().map(|d| d as usize))
            .collect()
    }
}

impl BridgeClient {
    pub fn connect_tcp(addr: impl ToSocketAddrs, timeout: Duration) -> std::result::Result<Self, BridgeError> {
        let conn_err = |e: io::Error| BridgeError::Connection {
            id: None,
            message: e.to_string(),
        };
        let addr = addr
            .to_socket_addrs()
            .map_err(conn_err)?
            .next()
            .ok_or_else(|| BridgeError::Connection {
                id: None,
                message: "address resolved to nothing".into(),
            })?;
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(conn_err)?;
        stream.set_nodelay(true).map_err(conn_err)?;
        Ok(Self {
            transport: Transport::Tcp(stream),
            next_id: 1,
            timeout,
            max_frame_bytes: DEFAULT_MAX_FRAME_BYTES,
        })
    }

    /// Launch a peer speaking the protocol on its stdin/stdout.
    pub fn spawn_stdio(program: &str, args: &[&str], timeout: Duration) -> std::result::Result<Self, BridgeError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BridgeError::Connection {
                id: None,
                message: format!("cannot start {program}: {e}"),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let frame = read_frame_body(&mut reader, DEFAULT_MAX_FRAME_BYTES);
                let stop = frame.is_err();
                if tx.send(frame).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Self {
            transport: Transport::Stdio {
                child,
                stdin,
                frames: rx,
            },
            next_id: 1,
            timeout,
            max_frame_bytes: DEFAULT_MAX_FRAME_BYTES,
        })
    }

    pub fn with_max_frame_bytes(mut self, limit: usize) -> Self {
        self.max_frame_bytes = limit;
        self
    }

    pub fn into_shared(self) -> SharedClient {
        Arc::new(Mutex::new(self))
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn send(&mut self, id: u64, bytes: &[u8]) -> std::result::Result<(), BridgeError> {
        let res = match &mut self.transport {
            Transport::Tcp(s) => s.write_all(bytes).and_then(|_| s.flush()),
            Transport::Stdio { stdin, .. } => stdin.write_all(bytes).and_then(|_| stdin.flush()),
        };
        res.map_err(|e| BridgeError::Connection {
            id: Some(id),
            message: format!("send failed: {e}"),
        })
    }

    fn receive(&mut self, id: u64) -> std::result::Result<Vec<u8>, BridgeError> {
        let timeout = self.timeout;
        let limit = self.max_frame_bytes;
        let classify = |e: io::Error| match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => BridgeError::Timeout { id, after: timeout },
            io::ErrorKind::InvalidData => BridgeError::Protocol {
                id: Some(id),
                field: "length".into(),
                message: e.to_string(),
            },
            _ => BridgeError::Connection {
                id: Some(id),
                message: format!("receive failed: {e}"),
            },
        };
        match &mut self.transport {
            Transport::Tcp(s) => {
                s.set_read_timeout(Some(timeout)).map_err(classify)?;
                read_frame_body(s, limit).map_err(classify)
            }
            Transport::Stdio { frames, .. } => match frames.recv_timeout(timeout) {
                Ok(Ok(body)) if body.len() > limit => Err(BridgeError::Protocol {
                    id: Some(id),
                    field: "length".into(),
                    message: format!("frame of {} bytes exceeds limit {limit}", body.len()),
                }),
                Ok(res) => res.map_err(classify),
                Err(RecvTimeoutError::Timeout) => Err(BridgeError::Timeout { id, after: timeout }),
                Err(RecvTimeoutError::Disconnected) => Err(BridgeError::Connection {
                    id: Some(id),
                    message: "peer closed its output".into(),
                }),
            },
        }
    }

    /// Send one request and wait for its reply.
    pub fn call(&mut self, mut request: Frame) -> std::result::Result<Frame, BridgeError> {
        let id = self.next_id;
        self.next_id += 1;
        request.id = id;
        let bytes = request.encode();
        if bytes.len() - 4 > self.max_frame_bytes {
            return Err(BridgeError::Protocol {
                id: Some(id),
                field: "tensors".into(),
                message: format!("request of {} bytes exceeds limit {}", bytes.len() - 4, self.max_frame_bytes),
            });
        }
        self.send(id, &bytes)?;
        let body = self.receive(id)?;
        let reply = Frame::decode_body(&body).map_err(|e| match e {
            BridgeError::Protocol { id: None, field, message } => BridgeError::Protocol {
                id: Some(id),
                field,
                message,
            },
            other => other,
        })?;
        if reply.id != id {
            return Err(BridgeError::Protocol {
                id: Some(id),
                field: "id".into(),
                message: format!("reply id {} does not match request {id}", reply.id),
            });
        }
        if reply.method == "error" {
            let message = reply
                .scalars
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("unspecified error")
                .to_string();
            return Err(BridgeError::Remote { id, message });
        }
        Ok(reply)
    }

    pub fn capabilities(&mut self) -> std::result::Result<Capabilities, BridgeError> {
        let reply = self.call(Frame::new(0, "capabilities"))?;
        let get = |k: &str| {
            reply
                .scalars
                .get(k)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| BridgeError::Protocol {
                    id: Some(reply.id),
                    field: format!("scalars.{k}"),
                    message: "missing or not a string".into(),
                })
        };
        Ok(Capabilities {
            model_id: get("model_id")?,
            dtype: get("dtype")?,
            scalars: reply.scalars.clone(),
        })
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        if let Transport::Stdio { child, .. } = &mut self.transport {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Call `method` with named tensor inputs and return the named output.
pub fn call_tensor(
    client: &SharedClient,
    method: &str,
    inputs: &[(&str, &Tensor)],
    scalars: &[(&str, Value)],
    output: &str,
) -> Result<Tensor> {
    let mut req = Frame::new(0, method);
    for (name, t) in inputs {
        req = req.with_tensor(name, t);
    }
    for (k, v) in scalars {
        req.scalars.insert((*k).to_string(), v.clone());
    }
    let mut guard = client.lock().unwrap_or_else(|p| p.into_inner());
    let reply = guard.call(req)?;
    let t = reply.tensor(output).ok_or_else(|| BridgeError::Protocol {
        id: Some(reply.id),
        field: format!("tensors.{output}"),
        message: format!("reply to {method} lacks tensor `{output}`"),
    })?;
    t.to_tensor()
}
