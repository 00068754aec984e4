//! Wire frames between client and server, with a bit-exact binary layout.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FPSF" (4) | version u8 | tag u8 | client_id u32 | step_id u64
//! | total_len u64 | ndim u8 | dims u32 each | payload (element_size each)
//! ```
//!
//! The element size (4 or 8 bytes) is a session-level setting; the decoder
//! recovers it from `total_len`. A 4-byte wire carries `f32` casts of the
//! in-memory `f64` values, which is a documented lossy conversion.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FPSF";
pub const VERSION: u8 = 1;
/// Fixed bytes before the dims: magic + version + tag + client + step + total_len + ndim.
pub const FIXED_HEADER: usize = 4 + 1 + 1 + 4 + 8 + 8 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgKind {
    /// z_CL: cut-layer activations, client to server.
    ActUp = 1,
    /// z_SL: served activations, server to client.
    ActDown = 2,
    /// g_PL2: head-side gradient, client to server.
    GradUp = 3,
    /// g_SL, with the weighted alignment gradient folded in when pending.
    GradDown = 4,
    /// z_PL1: alignment probe input, client to server.
    AlignProbe = 5,
    /// Scalar alignment divergence value, server to client.
    AlignAck = 6,
    /// Flattened parameter upload (baseline protocols only).
    ParamUp = 7,
    /// Flattened parameter download (baseline protocols only).
    ParamDown = 8,
}

impl MsgKind {
    pub fn from_u8(v: u8) -> Option<MsgKind> {
        match v {
            1 => Some(MsgKind::ActUp),
            2 => Some(MsgKind::ActDown),
            3 => Some(MsgKind::GradUp),
            4 => Some(MsgKind::GradDown),
            5 => Some(MsgKind::AlignProbe),
            6 => Some(MsgKind::AlignAck),
            7 => Some(MsgKind::ParamUp),
            8 => Some(MsgKind::ParamDown),
            _ => None,
        }
    }

    pub fn is_param(&self) -> bool {
        matches!(self, MsgKind::ParamUp | MsgKind::ParamDown)
    }
}

/// Matches an in-flight forward tape on the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SessionKey {
    pub client_id: u32,
    pub step_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MsgKind,
    pub client_id: u32,
    pub step_id: u64,
    pub payload: Tensor,
}

impl Message {
    pub fn new(kind: MsgKind, client_id: u32, step_id: u64, payload: Tensor) -> Message {
        Message { kind, client_id, step_id, payload }
    }

    pub fn session_key(&self) -> SessionKey {
        SessionKey { client_id: self.client_id, step_id: self.step_id }
    }

    /// Exact encoded length, without encoding.
    pub fn byte_size(&self, element_size: usize) -> usize {
        message_size_for(self.payload.shape(), element_size)
    }
}

pub fn message_size_for(shape: &[usize], element_size: usize) -> usize {
    FIXED_HEADER + 4 * shape.len() + shape.iter().product::<usize>() * element_size
}

/// Round every element through `f32`, as a 4-byte wire would.
pub fn quantize_tensor(t: &Tensor, element_size: usize) -> Tensor {
    if element_size == 8 {
        return t.clone();
    }
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

pub fn encode_message(msg: &Message, element_size: usize) -> Vec<u8> {
    assert!(element_size == 4 || element_size == 8, "element size must be 4 or 8");
    let shape = msg.payload.shape();
    let total = message_size_for(shape, element_size);
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.client_id.to_le_bytes());
    out.extend_from_slice(&msg.step_id.to_le_bytes());
    out.extend_from_slice(&(total as u64).to_le_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in msg.payload.data() {
        if element_size == 4 {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    debug_assert_eq!(out.len(), total);
    out
}

pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    let need = |offset: usize, n: usize| -> Result<()> {
        if bytes.len() < offset + n {
            Err(Error::Decode {
                offset,
                reason: format!("expected {} bytes, got {}", offset + n, bytes.len()),
            })
        } else {
            Ok(())
        }
    };
    need(0, FIXED_HEADER)?;
    if bytes[0..4] != MAGIC {
        return Err(Error::Decode { offset: 0, reason: "bad magic".into() });
    }
    if bytes[4] != VERSION {
        return Err(Error::Decode { offset: 4, reason: format!("unknown version {}", bytes[4]) });
    }
    let kind = MsgKind::from_u8(bytes[5])
        .ok_or(Error::Decode { offset: 5, reason: format!("unknown tag {}", bytes[5]) })?;
    let client_id = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let step_id = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let total_len = u64::from_le_bytes(bytes[18..26].try_into().unwrap()) as usize;
    let ndim = bytes[26] as usize;
    need(FIXED_HEADER, 4 * ndim)?;
    let mut shape = Vec::with_capacity(ndim);
    let mut off = FIXED_HEADER;
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        off += 4;
    }
    let count: usize = shape.iter().product();
    if count == 0 {
        return Err(Error::Decode { offset: 26, reason: "empty payload shape".into() });
    }
    let payload_len = total_len
        .checked_sub(off)
        .ok_or(Error::Decode { offset: 18, reason: "total_len shorter than header".into() })?;
    let element_size = payload_len / count;
    if element_size * count != payload_len || (element_size != 4 && element_size != 8) {
        return Err(Error::Decode {
            offset: 18,
            reason: format!("payload of {payload_len} bytes does not fit {count} elements"),
        });
    }
    if bytes.len() != total_len {
        return Err(Error::Decode {
            offset: off,
            reason: format!("expected total {total_len} bytes, got {}", bytes.len()),
        });
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let p = off + i * element_size;
        if element_size == 4 {
            data.push(f32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as f64);
        } else {
            data.push(f64::from_le_bytes(bytes[p..p + 8].try_into().unwrap()));
        }
    }
    Ok(Message { kind, client_id, step_id, payload: Tensor::new(shape, data)? })
}
