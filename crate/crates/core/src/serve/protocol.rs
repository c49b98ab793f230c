//! Broker wire format: 4-byte big-endian length, then that many bytes of
//! UTF-8 JSON.
//!
//! ```text
//! {"op":"sub","topic":T}                 client -> broker
//! {"op":"pub","topic":T,"payload":P}     client -> broker
//! {"op":"msg","topic":T,"payload":P}     broker -> subscriber
//! {"op":"error","message":M}             broker -> client, then close
//! ```

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the 16 MiB limit")]
    TooLarge(usize),
    #[error("frame is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Frame {
    Sub { topic: String },
    Pub { topic: String, payload: Value },
    Msg { topic: String, payload: Value },
    Error { message: String },
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    let body = serde_json::to_vec(frame)?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(FrameError::TooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), FrameError> {
    w.write_all(&encode_frame(frame)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a header.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, FrameError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(FrameError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(serde_json::from_slice(&body)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn frame_layout_is_bit_exact() {
        let f = Frame::Sub { topic: "t".into() };
        let bytes = encode_frame(&f).unwrap();
        let body = br#"{"op":"sub","topic":"t"}"#;
        assert_eq!(&bytes[..4], &(body.len() as u32).to_be_bytes());
        assert_eq!(&bytes[4..], body);
        assert_eq!(read_frame(&mut &bytes[..]).unwrap(), Some(f));
    }

    #[test]
    fn publish_round_trip() {
        let f = Frame::Pub { topic: "a".into(), payload: json!({"k": [1, 2.5, "x"]}) };
        let bytes = encode_frame(&f).unwrap();
        assert_eq!(read_frame(&mut &bytes[..]).unwrap(), Some(f));
        assert_eq!(read_frame(&mut &b""[..]).unwrap(), None);
    }

    #[test]
    fn oversized_header_rejected() {
        let mut bytes = ((MAX_FRAME_BYTES + 1) as u32).to_be_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(read_frame(&mut &bytes[..]), Err(FrameError::TooLarge(_))));
    }
}
