//! Classical channel for sifting and the error test.
//!
//! Frames are a 4-byte big-endian body length followed by a UTF-8 JSON body
//! of the form `{"type": "<TYPE>", "payload": {...}}`. Bit arrays travel as
//! base-64 strings, packed MSB first; their length is implied by the list
//! they accompany.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::session::{FlatConfig, SessionSummary};

/// Largest accepted frame body.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

const MESSAGE_TYPES: [&str; 7] = [
    "HELLO",
    "DETECTIONS",
    "SIFT_KEEP",
    "SAMPLE_REQUEST",
    "SAMPLE_BITS",
    "SUMMARY",
    "BYE",
];

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer closed the connection")]
    PeerClosed,
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN}-byte limit")]
    FrameTooLarge(usize),
    #[error("truncated frame: {0}")]
    Truncated(String),
    #[error("length prefix announces {announced} bytes but body has {actual}")]
    LengthMismatch { announced: usize, actual: usize },
    #[error("malformed JSON body: {0}")]
    MalformedJson(String),
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("invalid {kind} payload: {reason}")]
    InvalidPayload { kind: &'static str, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Bit array packed eight to a byte, most significant bit first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PackedBits(Vec<u8>);

impl PackedBits {
    pub fn pack(bits: &[u8]) -> Self {
        let mut bytes = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b & 1 == 1 {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        Self(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    /// Unpacks exactly `n` bits. Fails if the byte count does not match or
    /// padding bits are set.
    pub fn unpack(&self, n: usize) -> Result<Vec<u8>, String> {
        if self.0.len() != n.div_ceil(8) {
            return Err(format!(
                "{} packed bytes cannot hold exactly {n} bits",
                self.0.len()
            ));
        }
        if !n.is_multiple_of(8) {
            let mask = 0xffu8 >> (n % 8);
            if self.0[n / 8] & mask != 0 {
                return Err("nonzero padding bits".into());
            }
        }
        Ok((0..n).map(|i| (self.0[i / 8] >> (7 - i % 8)) & 1).collect())
    }
}

impl Serialize for PackedBits {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&BASE64.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for PackedBits {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        BASE64
            .decode(text.as_bytes())
            .map(PackedBits)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelloPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<FlatConfig>,
}

/// Bob's declaration of his coincidence slots and bases. When the quantum
/// link itself is emulated over the wire, Alice's side also uses it to hand
/// Bob his raw measurement record (`bits`, `multi`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsPayload {
    pub slots: Vec<u64>,
    pub bases: PackedBits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<PackedBits>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi: Option<PackedBits>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiftKeepPayload {
    pub keep: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequestPayload {
    pub positions: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleBitsPayload {
    pub bits: PackedBits,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByePayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Hello(HelloPayload),
    Detections(DetectionsPayload),
    SiftKeep(SiftKeepPayload),
    SampleRequest(SampleRequestPayload),
    SampleBits(SampleBitsPayload),
    Summary(SessionSummary),
    Bye(ByePayload),
}

fn strictly_increasing(xs: &[u64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello(_) => "HELLO",
            Message::Detections(_) => "DETECTIONS",
            Message::SiftKeep(_) => "SIFT_KEEP",
            Message::SampleRequest(_) => "SAMPLE_REQUEST",
            Message::SampleBits(_) => "SAMPLE_BITS",
            Message::Summary(_) => "SUMMARY",
            Message::Bye(_) => "BYE",
        }
    }

    /// Checks type-payload consistency.
    pub fn validate(&self) -> Result<(), TransportError> {
        let invalid = |reason: String| TransportError::InvalidPayload {
            kind: self.kind(),
            reason,
        };
        match self {
            Message::Detections(d) => {
                if !strictly_increasing(&d.slots) {
                    return Err(invalid("slot indices not strictly increasing".into()));
                }
                let n = d.slots.len();
                d.bases
                    .unpack(n)
                    .map_err(|e| invalid(format!("bases: {e}")))?;
                if let Some(bits) = &d.bits {
                    bits.unpack(n).map_err(|e| invalid(format!("bits: {e}")))?;
                }
                if let Some(multi) = &d.multi {
                    multi
                        .unpack(n)
                        .map_err(|e| invalid(format!("multi: {e}")))?;
                }
            }
            Message::SiftKeep(k) if !strictly_increasing(&k.keep) => {
                return Err(invalid("kept slots not strictly increasing".into()));
            }
            Message::SampleRequest(r) if !strictly_increasing(&r.positions) => {
                return Err(invalid("positions not strictly increasing".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Serializes a message into one frame.
pub fn encode_frame(m: &Message) -> Result<Vec<u8>, TransportError> {
    let body = serde_json::to_vec(m).map_err(|e| TransportError::MalformedJson(e.to_string()))?;
    if body.len() > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(body.len()));
    }
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Parses a JSON frame body.
pub fn decode_body(body: &[u8]) -> Result<Message, TransportError> {
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| TransportError::MalformedJson(e.to_string()))?;
    let kind = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| TransportError::MalformedJson("missing string field `type`".into()))?;
    let kind = MESSAGE_TYPES
        .iter()
        .copied()
        .find(|k| *k == kind)
        .ok_or_else(|| TransportError::UnknownType(kind.to_string()))?;
    let message: Message =
        serde_json::from_value(value).map_err(|e| TransportError::InvalidPayload {
            kind,
            reason: e.to_string(),
        })?;
    message.validate()?;
    Ok(message)
}

/// Decodes exactly one complete frame.
pub fn decode_frame(bytes: &[u8]) -> Result<Message, TransportError> {
    if bytes.len() < 4 {
        return Err(TransportError::Truncated(format!(
            "{} header bytes",
            bytes.len()
        )));
    }
    let announced = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if announced > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(announced));
    }
    let actual = bytes.len() - 4;
    if actual != announced {
        return Err(TransportError::LengthMismatch { announced, actual });
    }
    decode_body(&bytes[4..])
}

/// Reads one frame from a byte stream. A clean end of stream before the
/// first header byte is reported as [`TransportError::PeerClosed`].
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Message, TransportError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(TransportError::PeerClosed),
            Ok(0) => return Err(TransportError::Truncated(format!("{filled} header bytes"))),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) if is_disconnect(&e) => return Err(TransportError::PeerClosed),
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => {
            TransportError::Truncated(format!("body shorter than {len} bytes"))
        }
        _ => TransportError::Io(e),
    })?;
    decode_body(&body)
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe
    )
}

/// Reliable, ordered, duplex message channel.
pub trait Transport {
    fn send(&mut self, m: &Message) -> Result<(), TransportError>;
    /// Blocks until a message arrives or the peer goes away.
    fn recv(&mut self) -> Result<Message, TransportError>;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send(&mut self, m: &Message) -> Result<(), TransportError> {
        (**self).send(m)
    }

    fn recv(&mut self) -> Result<Message, TransportError> {
        (**self).recv()
    }
}

/// Endpoint of an in-memory channel pair.
#[derive(Debug)]
pub struct InProcessTransport {
    tx: Sender<Message>,
    rx: Receiver<Message>,
}

impl InProcessTransport {
    pub fn pair() -> (Self, Self) {
        let (tx_a, rx_b) = channel();
        let (tx_b, rx_a) = channel();
        (Self { tx: tx_a, rx: rx_a }, Self { tx: tx_b, rx: rx_b })
    }
}

impl Transport for InProcessTransport {
    fn send(&mut self, m: &Message) -> Result<(), TransportError> {
        self.tx
            .send(m.clone())
            .map_err(|_| TransportError::PeerClosed)
    }

    fn recv(&mut self) -> Result<Message, TransportError> {
        self.rx.recv().map_err(|_| TransportError::PeerClosed)
    }
}

/// Framed transport over any byte stream.
#[derive(Debug)]
pub struct FramedTransport<S> {
    stream: S,
}

impl<S: Read + Write> FramedTransport<S> {
    pub fn new(stream: S) -> Self {
        Self { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl<S: Read + Write> Transport for FramedTransport<S> {
    fn send(&mut self, m: &Message) -> Result<(), TransportError> {
        let frame = encode_frame(m)?;
        self.stream.write_all(&frame).map_err(|e| {
            if is_disconnect(&e) {
                TransportError::PeerClosed
            } else {
                TransportError::Io(e)
            }
        })?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, TransportError> {
        read_frame(&mut self.stream)
    }
}

/// Two framed endpoints connected over a loopback TCP socket.
pub fn tcp_loopback_pair() -> io::Result<(FramedTransport<TcpStream>, FramedTransport<TcpStream>)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let client = TcpStream::connect(listener.local_addr()?)?;
    let (server, _) = listener.accept()?;
    server.set_nodelay(true)?;
    client.set_nodelay(true)?;
    Ok((FramedTransport::new(server), FramedTransport::new(client)))
}
