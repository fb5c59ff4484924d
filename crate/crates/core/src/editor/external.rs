//! Adapter for an out-of-process denoiser reached over TCP.
//!
//! Every message is a `u32` little-endian byte length followed by the body.
//! Request body: `u64` id, `u8` variant (0 uncond, 1 image, 2 full), `f32`
//! t, the noisy latent and the image-condition latent (each `u32` height,
//! width, channels then row-major `f32` values), and a `u32`-length UTF-8
//! instruction. Response body: `u64` id, `u8` variant, then one latent
//! holding the noise prediction.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Mutex;

use crate::error::{Error, Result};

use super::{DenoiseRequest, Denoiser, Latent, Variant};

/// Environment variable holding the `host:port` of the external editor.
pub const EDITOR_ADDR_ENV: &str = "COSAVATAR_EDITOR_ADDR";

const MAX_MESSAGE: usize = 1 << 30;

#[derive(Clone, Debug, PartialEq)]
pub struct WireRequest {
    pub id: u64,
    pub variant: Variant,
    pub t: f32,
    pub z_t: Latent,
    pub image_cond: Latent,
    pub instruction: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireResponse {
    pub id: u64,
    pub variant: Variant,
    pub eps: Latent,
}

fn put_latent(buf: &mut Vec<u8>, l: &Latent) {
    for d in [l.height, l.width, l.channels] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &l.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Protocol(format!("message truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn variant(&mut self) -> Result<Variant> {
        let tag = self.u8()?;
        Variant::from_tag(tag).ok_or_else(|| Error::Protocol(format!("unknown variant tag {tag}")))
    }
    fn latent(&mut self) -> Result<Latent> {
        let (h, w, c) = (self.u32()? as usize, self.u32()? as usize, self.u32()? as usize);
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .filter(|&n| n * 4 <= self.buf.len())
            .ok_or_else(|| Error::Protocol(format!("implausible latent shape {h}x{w}x{c}")))?;
        let data = (0..n).map(|_| self.f32().map(f64::from)).collect::<Result<_>>()?;
        Ok(Latent {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn frame(body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Reads one length-prefixed message body.
pub fn read_message(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|e| Error::io("editor socket", e))?;
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_MESSAGE {
        return Err(Error::Protocol(format!("message of {n} bytes exceeds limit")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body).map_err(|e| Error::io("editor socket", e))?;
    Ok(body)
}

impl WireRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.id.to_le_bytes());
        b.push(self.variant.tag());
        b.extend_from_slice(&self.t.to_le_bytes());
        put_latent(&mut b, &self.z_t);
        put_latent(&mut b, &self.image_cond);
        b.extend_from_slice(&(self.instruction.len() as u32).to_le_bytes());
        b.extend_from_slice(self.instruction.as_bytes());
        frame(b)
    }

    pub fn decode(body: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: body, pos: 0 };
        let id = c.u64()?;
        let variant = c.variant()?;
        let t = c.f32()?;
        let z_t = c.latent()?;
        let image_cond = c.latent()?;
        let n = c.u32()? as usize;
        let instruction = String::from_utf8(c.take(n)?.to_vec())
            .map_err(|_| Error::Protocol("instruction is not UTF-8".into()))?;
        c.finish()?;
        Ok(Self {
            id,
            variant,
            t,
            z_t,
            image_cond,
            instruction,
        })
    }
}

impl WireResponse {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.id.to_le_bytes());
        b.push(self.variant.tag());
        put_latent(&mut b, &self.eps);
        frame(b)
    }

    pub fn decode(body: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: body, pos: 0 };
        let id = c.u64()?;
        let variant = c.variant()?;
        let eps = c.latent()?;
        c.finish()?;
        Ok(Self { id, variant, eps })
    }
}

/// Serializes all queries over one connection.
pub struct ExternalDenoiser {
    addr: String,
    state: Mutex<(Option<TcpStream>, u64)>,
}

impl ExternalDenoiser {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            state: Mutex::new((None, 0)),
        }
    }

    pub fn from_env() -> Result<Self> {
        std::env::var(EDITOR_ADDR_ENV)
            .map(Self::new)
            .map_err(|_| Error::InvalidConfig(format!("external editor selected but {EDITOR_ADDR_ENV} is not set")))
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }
}

impl Denoiser for ExternalDenoiser {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<Latent> {
        let mut guard = self.state.lock().map_err(|_| Error::Protocol("poisoned connection".into()))?;
        let (conn, next_id) = &mut *guard;
        if conn.is_none() {
            let s = TcpStream::connect(&self.addr)
                .map_err(|e| Error::io(format!("connect {}", self.addr), e))?;
            *conn = Some(s);
        }
        let stream = conn.as_mut().expect("connected");
        let id = *next_id;
        *next_id += 1;
        let msg = WireRequest {
            id,
            variant: req.variant,
            t: req.t as f32,
            z_t: req.z_t.clone(),
            image_cond: req.image_cond.clone(),
            instruction: req.instruction.to_string(),
        }
        .encode();
        stream
            .write_all(&msg)
            .map_err(|e| Error::io("editor socket", e))?;
        let resp = WireResponse::decode(&read_message(stream)?)?;
        if resp.id != id || resp.variant != req.variant {
            return Err(Error::Protocol(format!(
                "response ({}, {:?}) does not match request ({id}, {:?})",
                resp.id, resp.variant, req.variant
            )));
        }
        Ok(resp.eps)
    }

    fn concurrent_safe(&self) -> bool {
        false
    }
}
