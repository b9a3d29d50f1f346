//! Length-prefixed binary messages exchanged between parties, and transports that carry
//! inference requests either in-process or over TCP.
//!
//! Frame layout (little-endian):
//!
//! ```text
//! u32 frame length (bytes after this field)
//! "VTBL" | u8 version (1) | u8 kind | u16 party | u64 sample | u32 count | count x f64
//! u32 class            (PREDICTION only)
//! ```

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread::JoinHandle;

use crate::matrix::Matrix;
use crate::nn::Mlp;
use crate::vfl::{PredictionLabel, VflSystem};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VTBL";
pub const VERSION: u8 = 1;
/// Bytes of a frame body before the payload.
const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 8 + 4;
/// Upper bound on accepted frame bodies, 64 MiB.
const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Embedding = 1,
    Prediction = 2,
    Reject = 3,
    Grad = 4,
    Control = 5,
}

impl MessageKind {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => MessageKind::Embedding,
            2 => MessageKind::Prediction,
            3 => MessageKind::Reject,
            4 => MessageKind::Grad,
            5 => MessageKind::Control,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub party: u16,
    pub sample: u64,
    pub payload: Vec<f64>,
    /// Present iff `kind` is `Prediction`.
    pub class: Option<u32>,
}

impl Message {
    pub fn new(kind: MessageKind, party: u16, sample: u64, payload: Vec<f64>) -> Self {
        Self {
            kind,
            party,
            sample,
            payload,
            class: None,
        }
    }

    pub fn prediction(party: u16, sample: u64, class: u32) -> Self {
        Self {
            kind: MessageKind::Prediction,
            party,
            sample,
            payload: Vec::new(),
            class: Some(class),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("length mismatch: declared {declared} bytes, layout needs {expected}")]
    LengthMismatch { declared: usize, expected: usize },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
}

/// Encodes a message into a complete frame, length field included.
pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let count = u32::try_from(msg.payload.len()).map_err(|_| Error::Transport(format!("payload of {} values exceeds u32", msg.payload.len())))?;
    let is_pred = msg.kind == MessageKind::Prediction;
    if is_pred != msg.class.is_some() {
        return Err(Error::Transport("class index must be present exactly for PREDICTION".into()));
    }
    let body = HEADER_LEN + 8 * msg.payload.len() + if is_pred { 4 } else { 0 };
    let body_u32 = u32::try_from(body).map_err(|_| Error::Transport("frame exceeds u32 length".into()))?;
    let mut out = Vec::with_capacity(4 + body);
    out.extend_from_slice(&body_u32.to_le_bytes());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.party.to_le_bytes());
    out.extend_from_slice(&msg.sample.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for v in &msg.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(c) = msg.class {
        out.extend_from_slice(&c.to_le_bytes());
    }
    Ok(out)
}

/// Decodes one frame from the front of `bytes`, returning the message and the number of
/// bytes consumed. Never reads past the declared frame length.
pub fn decode(bytes: &[u8]) -> std::result::Result<(Message, usize), DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let declared = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if bytes.len() - 4 < declared {
        return Err(DecodeError::Truncated {
            needed: 4 + declared,
            available: bytes.len(),
        });
    }
    let msg = decode_body(&bytes[4..4 + declared])?;
    Ok((msg, 4 + declared))
}

/// Decodes a frame body (everything after the length field).
pub fn decode_body(body: &[u8]) -> std::result::Result<Message, DecodeError> {
    if body.len() < HEADER_LEN {
        // a body shorter than the fixed header cannot be a frame of any kind
        if body.len() >= 4 && &body[..4] != MAGIC {
            return Err(DecodeError::BadMagic(body[..4].try_into().expect("4 bytes")));
        }
        return Err(DecodeError::LengthMismatch {
            declared: body.len(),
            expected: HEADER_LEN,
        });
    }
    let magic: [u8; 4] = body[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    if body[4] != VERSION {
        return Err(DecodeError::UnsupportedVersion(body[4]));
    }
    let kind = MessageKind::from_code(body[5]).ok_or(DecodeError::UnknownKind(body[5]))?;
    let party = u16::from_le_bytes(body[6..8].try_into().expect("2 bytes"));
    let sample = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes"));
    let count = u32::from_le_bytes(body[16..20].try_into().expect("4 bytes")) as usize;
    let trailer = if kind == MessageKind::Prediction { 4 } else { 0 };
    let expected = count.checked_mul(8).and_then(|p| p.checked_add(HEADER_LEN + trailer)).unwrap_or(usize::MAX);
    if body.len() != expected {
        return Err(DecodeError::LengthMismatch {
            declared: body.len(),
            expected,
        });
    }
    let payload = body[HEADER_LEN..HEADER_LEN + 8 * count]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let class = (trailer == 4).then(|| u32::from_le_bytes(body[expected - 4..].try_into().expect("4 bytes")));
    Ok(Message {
        kind,
        party,
        sample,
        payload,
        class,
    })
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream before the length field.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(DecodeError::Truncated { needed: 4, available: got }.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let declared = u32::from_le_bytes(len) as usize;
    if declared > MAX_FRAME {
        return Err(DecodeError::TooLarge(declared).into());
    }
    let mut body = vec![0u8; declared];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Decode(DecodeError::Truncated {
            needed: 4 + declared,
            available: 4,
        }),
        _ => Error::Io(e),
    })?;
    Ok(Some(decode_body(&body)?))
}

/// Answers inference requests for the attacking party's embeddings.
pub trait InferenceOracle {
    fn query(&mut self, sample: u64, embedding: &[f64]) -> Result<PredictionLabel>;
}

/// Calls the system directly; the other parties' embeddings come from their local slices.
pub struct LocalOracle<'a> {
    system: &'a VflSystem,
    parts: &'a [Matrix],
    attacker: usize,
}

impl<'a> LocalOracle<'a> {
    pub fn new(system: &'a VflSystem, parts: &'a [Matrix], attacker: usize) -> Self {
        Self { system, parts, attacker }
    }
}

fn gather_embeddings(system: &VflSystem, parts: &[Matrix], attacker: usize, sample: u64, attacker_emb: &[f64]) -> Result<Vec<Vec<f64>>> {
    let row = usize::try_from(sample).map_err(|_| Error::Transport("sample id overflow".into()))?;
    parts
        .iter()
        .enumerate()
        .map(|(k, p)| {
            if k == attacker {
                Ok(attacker_emb.to_vec())
            } else if row >= p.rows() {
                Err(Error::Transport(format!("sample {sample} outside party {k} data")))
            } else {
                system.model.embed(k, p.row(row))
            }
        })
        .collect()
}

impl InferenceOracle for LocalOracle<'_> {
    fn query(&mut self, sample: u64, embedding: &[f64]) -> Result<PredictionLabel> {
        let emb = gather_embeddings(self.system, self.parts, self.attacker, sample, embedding)?;
        self.system.infer_embeddings(sample, emb)
    }
}

/// Attacker-side client of a TCP inference session.
///
/// The active party (party 0) runs a server thread holding the top model, detector and
/// its own slice. Honest passive parties run as client threads that answer `CONTROL`
/// requests with `EMBEDDING` frames. Each attacker query is an `EMBEDDING` frame answered
/// by `PREDICTION` or `REJECT`. Every client opens with a `CONTROL` hello naming its party.
pub struct TcpOracle {
    party: u16,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    threads: Vec<JoinHandle<Result<()>>>,
}

impl TcpOracle {
    /// Starts a loopback session: binds `addr` (port 0 picks a free port), spawns the
    /// active party and honest parties, and connects the attacker.
    pub fn spawn(addr: &str, system: VflSystem, parts: Vec<Matrix>, attacker: usize) -> Result<Self> {
        let k = parts.len();
        if k != system.model.num_parties() {
            return Err(Error::shape("one feature slice per party is required"));
        }
        if attacker == 0 || attacker >= k {
            return Err(Error::config(format!("attacker must be a passive party in [1, {k})")));
        }
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let mut threads = Vec::new();
        let system_bottoms = system.model.bottoms.clone();
        let server_parts = parts.clone();
        threads.push(std::thread::spawn(move || serve_active(listener, system, server_parts, attacker)));
        for (party, slice) in parts.into_iter().enumerate() {
            if party == 0 || party == attacker {
                continue;
            }
            let bottom = system_bottoms[party].clone();
            threads.push(std::thread::spawn(move || run_honest_client(local, party as u16, bottom, slice)));
        }
        let stream = TcpStream::connect(local)?;
        stream.set_nodelay(true)?;
        let mut writer = BufWriter::new(stream.try_clone()?);
        write_message(&mut writer, &Message::new(MessageKind::Control, attacker as u16, 0, Vec::new()))?;
        Ok(Self {
            party: attacker as u16,
            reader: BufReader::new(stream),
            writer,
            threads,
        })
    }

    /// Closes the attacker connection and waits for the session threads.
    pub fn finish(mut self) -> Result<()> {
        self.shutdown_and_join()
    }

    fn shutdown_and_join(&mut self) -> Result<()> {
        let _ = self.writer.flush();
        let _ = self.writer.get_ref().shutdown(std::net::Shutdown::Both);
        let mut first_err = None;
        for t in self.threads.drain(..) {
            let res = t.join().unwrap_or_else(|_| Err(Error::Transport("session thread panicked".into())));
            if let Err(e) = res {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }
}

impl Drop for TcpOracle {
    fn drop(&mut self) {
        let _ = self.shutdown_and_join();
    }
}

impl InferenceOracle for TcpOracle {
    fn query(&mut self, sample: u64, embedding: &[f64]) -> Result<PredictionLabel> {
        write_message(&mut self.writer, &Message::new(MessageKind::Embedding, self.party, sample, embedding.to_vec()))?;
        let reply = read_message(&mut self.reader)?.ok_or_else(|| Error::Transport("server closed the connection".into()))?;
        if reply.sample != sample {
            return Err(Error::Transport(format!("reply for sample {} while waiting on {sample}", reply.sample)));
        }
        match reply.kind {
            MessageKind::Prediction => Ok(PredictionLabel::Class(reply.class.expect("decoded prediction has a class") as usize)),
            MessageKind::Reject => Ok(PredictionLabel::Reject),
            other => Err(Error::Transport(format!("unexpected {other:?} reply"))),
        }
    }
}

struct Peer {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

fn serve_active(listener: TcpListener, system: VflSystem, parts: Vec<Matrix>, attacker: usize) -> Result<()> {
    let k = parts.len();
    let mut peers: Vec<Option<Peer>> = (0..k).map(|_| None).collect();
    for _ in 1..k {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let hello = read_message(&mut reader)?.ok_or_else(|| Error::Transport("client left before hello".into()))?;
        let party = hello.party as usize;
        if hello.kind != MessageKind::Control || party == 0 || party >= k || peers[party].is_some() {
            return Err(Error::Transport(format!("bad hello from party {party}")));
        }
        peers[party] = Some(Peer {
            reader,
            writer: BufWriter::new(stream),
        });
    }
    let mut attacker_peer = peers[attacker].take().expect("attacker connected");
    while let Some(req) = read_message(&mut attacker_peer.reader)? {
        if req.kind != MessageKind::Embedding {
            return Err(Error::Transport(format!("unexpected {:?} from attacker", req.kind)));
        }
        let row = req.sample as usize;
        let mut embeddings = Vec::with_capacity(k);
        for (party, peer) in peers.iter_mut().enumerate() {
            if party == attacker {
                embeddings.push(req.payload.clone());
            } else if party == 0 {
                if row >= parts[0].rows() {
                    return Err(Error::Transport(format!("sample {row} outside active party data")));
                }
                embeddings.push(system.model.embed(0, parts[0].row(row))?);
            } else {
                let peer = peer.as_mut().expect("honest party connected");
                write_message(&mut peer.writer, &Message::new(MessageKind::Control, party as u16, req.sample, Vec::new()))?;
                let e = read_message(&mut peer.reader)?.ok_or_else(|| Error::Transport(format!("party {party} disconnected")))?;
                if e.kind != MessageKind::Embedding || e.sample != req.sample {
                    return Err(Error::Transport(format!("party {party} answered out of turn")));
                }
                embeddings.push(e.payload);
            }
        }
        let reply = match system.infer_embeddings(req.sample, embeddings)? {
            PredictionLabel::Class(c) => Message::prediction(0, req.sample, c as u32),
            PredictionLabel::Reject => Message::new(MessageKind::Reject, 0, req.sample, Vec::new()),
        };
        write_message(&mut attacker_peer.writer, &reply)?;
    }
    // dropping the honest connections ends their loops
    Ok(())
}

fn run_honest_client(addr: SocketAddr, party: u16, bottom: Mlp, slice: Matrix) -> Result<()> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    write_message(&mut writer, &Message::new(MessageKind::Control, party, 0, Vec::new()))?;
    while let Some(req) = read_message(&mut reader)? {
        if req.kind != MessageKind::Control {
            return Err(Error::Transport(format!("party {party} got unexpected {:?}", req.kind)));
        }
        let row = req.sample as usize;
        if row >= slice.rows() {
            return Err(Error::Transport(format!("sample {row} outside party {party} data")));
        }
        let e = bottom.predict(slice.row(row))?;
        write_message(&mut writer, &Message::new(MessageKind::Embedding, party, req.sample, e))?;
    }
    Ok(())
}
