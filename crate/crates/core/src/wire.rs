//! Bit-exact encoding of the three protocol messages plus an error notice,
//! carried over any byte transport.
//!
//! Frame layout:
//!
//! ```text
//! magic "SKP1" (4) | version=1 (1) | suite_id (1) | msg_type (1) | payload
//! ```
//!
//! msg_type 1 = Hello (empty payload), 2 = AuthRequest, 3 = AuthResponse,
//! 4 = Error. Every variable-length payload field is prefixed by a 2-octet
//! big-endian length; fields appear in declaration order. A whole frame
//! never exceeds 65 535 octets. All secrecy lives in the protocol fields;
//! the framing adds none.

use crate::crypto::{CipherSuite, Digest, PkeCiphertext, SkeCiphertext};
use std::io::Read;

pub const MAGIC: [u8; 4] = *b"SKP1";
pub const VERSION: u8 = 1;
pub const MAX_FRAME_LEN: usize = 65_535;

pub const MSG_HELLO: u8 = 1;
pub const MSG_AUTH_REQUEST: u8 = 2;
pub const MSG_AUTH_RESPONSE: u8 = 3;
pub const MSG_ERROR: u8 = 4;

const HEADER_LEN: usize = 7;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("suite mismatch: frame says {got}, expected {want}")]
    SuiteMismatch { got: u8, want: u8 },
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("frame truncated")]
    TruncatedFrame,
    #[error("trailing bytes after frame")]
    TrailingBytes,
    #[error("digest field has {got} bytes, suite requires {want}")]
    BadDigestLength { got: usize, want: usize },
    #[error("empty ciphertext field")]
    EmptyCiphertext,
    #[error("field of {0} bytes exceeds the 2-octet length prefix")]
    FieldTooLong(usize),
    #[error("frame of {0} bytes exceeds the 65535-octet limit")]
    FrameTooLong(usize),
    #[error("transport error: {0}")]
    Io(String),
}

impl WireError {
    /// Stable 1-octet code carried inside Error frames.
    pub fn code(&self) -> u8 {
        match self {
            WireError::BadMagic => 1,
            WireError::UnsupportedVersion(_) => 2,
            WireError::SuiteMismatch { .. } => 3,
            WireError::TruncatedFrame => 4,
            WireError::TrailingBytes => 5,
            WireError::BadDigestLength { .. } => 6,
            WireError::UnknownMessageType(_) => 7,
            WireError::EmptyCiphertext => 8,
            WireError::FieldTooLong(_) => 9,
            WireError::FrameTooLong(_) => 9,
            WireError::Io(_) => 9,
        }
    }
}

/// Step 1's ID query; no payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HelloMessage;

/// Device → server: (a, H(x), C, H(r_D)).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthRequest {
    pub a: PkeCiphertext,
    pub h_x: Digest,
    pub c_ct: SkeCiphertext,
    pub h_rd: Digest,
}

/// Server → device: (b, H(y), H(r_new), g).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthResponse {
    pub b: SkeCiphertext,
    pub h_y: Digest,
    pub h_rnew: Digest,
    pub g: SkeCiphertext,
}

/// Server refusal; the protocol itself has no failure reply, so this frame
/// exists to avoid silent closes. `code` values come from
/// [`WireError::code`] and [`crate::protocol::ProtocolError::code`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorNotice {
    pub code: u8,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello(HelloMessage),
    AuthRequest(AuthRequest),
    AuthResponse(AuthResponse),
    Error(ErrorNotice),
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Hello(_) => MSG_HELLO,
            Message::AuthRequest(_) => MSG_AUTH_REQUEST,
            Message::AuthResponse(_) => MSG_AUTH_RESPONSE,
            Message::Error(_) => MSG_ERROR,
        }
    }
}

fn push_field(out: &mut Vec<u8>, field: &[u8]) -> Result<(), WireError> {
    if field.len() > u16::MAX as usize {
        return Err(WireError::FieldTooLong(field.len()));
    }
    out.extend_from_slice(&(field.len() as u16).to_be_bytes());
    out.extend_from_slice(field);
    Ok(())
}

/// Deterministic byte encoding; `decode(encode(m)) = m`.
pub fn encode(msg: &Message, suite: &CipherSuite) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(suite.suite_id());
    out.push(msg.msg_type());
    match msg {
        Message::Hello(_) => {}
        Message::AuthRequest(req) => {
            push_field(&mut out, req.a.as_bytes())?;
            push_field(&mut out, req.h_x.as_bytes())?;
            push_field(&mut out, req.c_ct.as_bytes())?;
            push_field(&mut out, req.h_rd.as_bytes())?;
        }
        Message::AuthResponse(resp) => {
            push_field(&mut out, resp.b.as_bytes())?;
            push_field(&mut out, resp.h_y.as_bytes())?;
            push_field(&mut out, resp.h_rnew.as_bytes())?;
            push_field(&mut out, resp.g.as_bytes())?;
        }
        Message::Error(notice) => {
            out.push(notice.code);
            push_field(&mut out, notice.text.as_bytes())?;
        }
    }
    if out.len() > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLong(out.len()));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.bytes.len() {
            return Err(WireError::TruncatedFrame);
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take_field(&mut self) -> Result<&'a [u8], WireError> {
        let len = u16::from_be_bytes(self.take(2)?.try_into().unwrap()) as usize;
        self.take(len)
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.pos != self.bytes.len() {
            return Err(WireError::TrailingBytes);
        }
        Ok(())
    }
}

fn digest_field(cur: &mut Cursor<'_>, suite: &CipherSuite) -> Result<Digest, WireError> {
    let raw = cur.take_field()?;
    suite
        .digest_from_bytes(raw)
        .map_err(|_| WireError::BadDigestLength {
            got: raw.len(),
            want: suite.digest_len(),
        })
}

fn ciphertext_field<'a>(cur: &mut Cursor<'a>) -> Result<&'a [u8], WireError> {
    let raw = cur.take_field()?;
    if raw.is_empty() {
        return Err(WireError::EmptyCiphertext);
    }
    Ok(raw)
}

/// Exact inverse of [`encode`] on valid input; total on arbitrary octets:
/// every malformed input maps to a typed error, never a panic.
pub fn decode(bytes: &[u8], suite: &CipherSuite) -> Result<Message, WireError> {
    if bytes.len() > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLong(bytes.len()));
    }
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(WireError::BadMagic);
    }
    let version = cur.take(1)?[0];
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let suite_id = cur.take(1)?[0];
    if suite_id != suite.suite_id() {
        return Err(WireError::SuiteMismatch {
            got: suite_id,
            want: suite.suite_id(),
        });
    }
    let msg_type = cur.take(1)?[0];
    let msg = match msg_type {
        MSG_HELLO => Message::Hello(HelloMessage),
        MSG_AUTH_REQUEST => {
            let a = PkeCiphertext(ciphertext_field(&mut cur)?.to_vec());
            let h_x = digest_field(&mut cur, suite)?;
            let c_ct = SkeCiphertext(ciphertext_field(&mut cur)?.to_vec());
            let h_rd = digest_field(&mut cur, suite)?;
            Message::AuthRequest(AuthRequest { a, h_x, c_ct, h_rd })
        }
        MSG_AUTH_RESPONSE => {
            let b = SkeCiphertext(ciphertext_field(&mut cur)?.to_vec());
            let h_y = digest_field(&mut cur, suite)?;
            let h_rnew = digest_field(&mut cur, suite)?;
            let g = SkeCiphertext(ciphertext_field(&mut cur)?.to_vec());
            Message::AuthResponse(AuthResponse { b, h_y, h_rnew, g })
        }
        MSG_ERROR => {
            let code = cur.take(1)?[0];
            let text = String::from_utf8_lossy(cur.take_field()?).into_owned();
            Message::Error(ErrorNotice { code, text })
        }
        other => return Err(WireError::UnknownMessageType(other)),
    };
    cur.finish()?;
    Ok(msg)
}

/// Reads exactly one frame off a byte stream, using the msg_type schema to
/// find the boundary. The returned bytes are the frame verbatim, so stream
/// and datagram transports carry identical octets.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Vec<u8>, WireError> {
    let mut frame = vec![0u8; HEADER_LEN];
    read_exact(reader, &mut frame)?;
    if frame[..4] != MAGIC {
        return Err(WireError::BadMagic);
    }
    if frame[4] != VERSION {
        return Err(WireError::UnsupportedVersion(frame[4]));
    }
    let msg_type = frame[6];
    let field_count = match msg_type {
        MSG_HELLO => 0,
        MSG_AUTH_REQUEST | MSG_AUTH_RESPONSE => 4,
        MSG_ERROR => {
            let mut code = [0u8; 1];
            read_exact(reader, &mut code)?;
            frame.push(code[0]);
            1
        }
        other => return Err(WireError::UnknownMessageType(other)),
    };
    for _ in 0..field_count {
        let mut len_bytes = [0u8; 2];
        read_exact(reader, &mut len_bytes)?;
        frame.extend_from_slice(&len_bytes);
        let len = u16::from_be_bytes(len_bytes) as usize;
        if frame.len() + len > MAX_FRAME_LEN {
            return Err(WireError::FrameTooLong(frame.len() + len));
        }
        let start = frame.len();
        frame.resize(start + len, 0);
        read_exact(reader, &mut frame[start..])?;
    }
    Ok(frame)
}

fn read_exact<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<(), WireError> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            WireError::TruncatedFrame
        } else {
            WireError::Io(e.to_string())
        }
    })
}
