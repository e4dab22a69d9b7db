//! Little-endian binary formats.
//!
//! | magic  | contents                                                      |
//! |--------|---------------------------------------------------------------|
//! | `DVXG` | version u8, dim u8, K u16, sides u32 x dim, one byte per token |
//! | `DVXB` | same header, K = 2, tokens bit-packed LSB first               |
//! | `DVXM` | version u8, dim u8, sides u32 x dim, mask bit-packed          |
//! | `DVXP` | version u8, dim u8, K u16, sides u32 x dim, f32 x (L*K)        |
//! | `DVDM` | version u8, flags u8, architecture header, f64 parameters     |
//!
//! Readers reject trailing bytes and nonzero padding bits.

use crate::denoiser::{MlpArch, MlpDenoiser};
use crate::error::{Error, Result};
use crate::grid::{GridShape, ProbField, TokenGrid};

pub const VERSION: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn magic(&mut self) -> Result<[u8; 4]> {
        Ok(self.take(4, "magic")?.try_into().unwrap())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos;
        let v = self.u8("version")?;
        if v != VERSION {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn shape(&mut self, dim: u8, dim_at: usize) -> Result<GridShape> {
        if !(1..=3).contains(&dim) {
            return Err(Error::format(dim_at, format!("dimension {dim} not in 1..=3")));
        }
        let mut dims = Vec::with_capacity(dim as usize);
        for _ in 0..dim {
            let at = self.pos;
            let side = self.u32("side length")?;
            if side == 0 {
                return Err(Error::format(at, "zero side length"));
            }
            dims.push(side as usize);
        }
        let at = self.pos;
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(at, "grid size overflows"))?;
        GridShape::new(&dims)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_shape(out: &mut Vec<u8>, shape: &GridShape) {
    for &d in shape.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn pack_bits(bits: impl Iterator<Item = bool>, out: &mut Vec<u8>) {
    let mut byte = 0u8;
    let mut n = 0;
    for b in bits {
        byte |= (b as u8) << n;
        n += 1;
        if n == 8 {
            out.push(byte);
            byte = 0;
            n = 0;
        }
    }
    if n > 0 {
        out.push(byte);
    }
}

fn unpack_bits(r: &mut Reader<'_>, len: usize) -> Result<Vec<bool>> {
    let start = r.pos;
    let bytes = r.take(len.div_ceil(8), "bit-packed payload")?;
    let bits: Vec<bool> = (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
    if !len.is_multiple_of(8) && bytes[len / 8] >> (len % 8) != 0 {
        return Err(Error::format(start + len / 8, "nonzero padding bits"));
    }
    Ok(bits)
}

/// One byte per token.
pub fn encode_grid(grid: &TokenGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * grid.shape().ndim() + grid.len());
    out.extend_from_slice(b"DVXG");
    out.push(VERSION);
    out.push(grid.shape().ndim() as u8);
    out.extend_from_slice(&(grid.k() as u16).to_le_bytes());
    put_shape(&mut out, grid.shape());
    out.extend_from_slice(grid.tokens());
    out
}

/// Bit-packed binary grid.
pub fn encode_grid_packed(grid: &TokenGrid) -> Result<Vec<u8>> {
    if grid.k() != 2 {
        return Err(Error::Shape("bit-packed grids require K = 2".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(b"DVXB");
    out.push(VERSION);
    out.push(grid.shape().ndim() as u8);
    out.extend_from_slice(&2u16.to_le_bytes());
    put_shape(&mut out, grid.shape());
    pack_bits(grid.tokens().iter().map(|&t| t == 1), &mut out);
    Ok(out)
}

/// Read either grid encoding.
pub fn decode_grid(bytes: &[u8]) -> Result<TokenGrid> {
    let mut r = Reader::new(bytes);
    let magic = r.magic()?;
    let packed = match &magic {
        b"DVXG" => false,
        b"DVXB" => true,
        _ => return Err(Error::format(0, format!("bad grid magic {:?}", String::from_utf8_lossy(&magic)))),
    };
    r.version()?;
    let dim_at = r.pos;
    let dim = r.u8("dimension")?;
    let k_at = r.pos;
    let k = r.u16("category count")? as usize;
    if !(2..=256).contains(&k) || packed && k != 2 {
        return Err(Error::format(k_at, format!("invalid category count {k}")));
    }
    let shape = r.shape(dim, dim_at)?;
    let len = shape.len();
    let tokens = if packed {
        unpack_bits(&mut r, len)?.into_iter().map(u8::from).collect()
    } else {
        let start = r.pos;
        let payload = r.take(len, "token payload")?;
        if let Some(i) = payload.iter().position(|&t| t as usize >= k) {
            return Err(Error::format(start + i, format!("token {} not below K={k}", payload[i])));
        }
        payload.to_vec()
    };
    r.finish()?;
    TokenGrid::new(shape, k, tokens)
}

pub fn encode_mask(shape: &GridShape, mask: &[bool]) -> Result<Vec<u8>> {
    if mask.len() != shape.len() {
        return Err(Error::Shape("mask length does not match shape".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(b"DVXM");
    out.push(VERSION);
    out.push(shape.ndim() as u8);
    put_shape(&mut out, shape);
    pack_bits(mask.iter().copied(), &mut out);
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<(GridShape, Vec<bool>)> {
    let mut r = Reader::new(bytes);
    let magic = r.magic()?;
    if &magic != b"DVXM" {
        return Err(Error::format(0, format!("bad mask magic {:?}", String::from_utf8_lossy(&magic))));
    }
    r.version()?;
    let dim_at = r.pos;
    let dim = r.u8("dimension")?;
    let shape = r.shape(dim, dim_at)?;
    let bits = unpack_bits(&mut r, shape.len())?;
    r.finish()?;
    Ok((shape, bits))
}

/// Probability (or any per-token per-category) raster as f32.
pub fn encode_field(field: &ProbField) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"DVXP");
    out.push(VERSION);
    out.push(field.shape().ndim() as u8);
    out.extend_from_slice(&(field.k() as u16).to_le_bytes());
    put_shape(&mut out, field.shape());
    for &v in field.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<ProbField> {
    let mut r = Reader::new(bytes);
    let magic = r.magic()?;
    if &magic != b"DVXP" {
        return Err(Error::format(0, format!("bad raster magic {:?}", String::from_utf8_lossy(&magic))));
    }
    r.version()?;
    let dim_at = r.pos;
    let dim = r.u8("dimension")?;
    let k_at = r.pos;
    let k = r.u16("column count")? as usize;
    if k == 0 {
        return Err(Error::format(k_at, "zero column count"));
    }
    let shape = r.shape(dim, dim_at)?;
    let n = shape.len() * k;
    let payload = r.take(n * 4, "raster payload")?;
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    r.finish()?;
    ProbField::new(shape, k, values)
}

const FLAG_TIME: u8 = 1;

/// Model checkpoint: architecture header followed by every parameter as f64.
pub fn encode_model(model: &MlpDenoiser) -> Vec<u8> {
    let a = model.arch();
    let mut out = Vec::with_capacity(64 + 8 * model.n_params());
    out.extend_from_slice(b"DVDM");
    out.push(VERSION);
    out.push(if a.time_conditioned { FLAG_TIME } else { 0 });
    out.push(a.dims.len() as u8);
    for &d in &a.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(a.classes as u16).to_le_bytes());
    out.extend_from_slice(&(a.input_states as u16).to_le_bytes());
    out.extend_from_slice(&(a.hidden as u32).to_le_bytes());
    out.extend_from_slice(&(a.n_conditions as u32).to_le_bytes());
    out.extend_from_slice(&a.tau.to_le_bytes());
    out.extend_from_slice(&(model.n_params() as u64).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<MlpDenoiser> {
    let mut r = Reader::new(bytes);
    let magic = r.magic()?;
    if &magic != b"DVDM" {
        return Err(Error::format(0, format!("bad checkpoint magic {:?}", String::from_utf8_lossy(&magic))));
    }
    r.version()?;
    let flags_at = r.pos;
    let flags = r.u8("flags")?;
    if flags & !FLAG_TIME != 0 {
        return Err(Error::format(flags_at, format!("unknown flags {flags:#04x}")));
    }
    let dim_at = r.pos;
    let dim = r.u8("dimension")?;
    let shape = r.shape(dim, dim_at)?;
    let classes = r.u16("classes")? as usize;
    let input_states = r.u16("input states")? as usize;
    let hidden = r.u32("hidden width")? as usize;
    let n_conditions = r.u32("condition count")? as usize;
    let tau_at = r.pos;
    let tau = r.f64("tau")?;
    let arch = MlpArch {
        dims: shape.dims().to_vec(),
        classes,
        input_states,
        hidden,
        n_conditions,
        time_conditioned: flags & FLAG_TIME != 0,
        tau,
    };
    arch.validate().map_err(|e| Error::format(tau_at, e.to_string()))?;
    let count_at = r.pos;
    let count = r.u64("parameter count")? as usize;
    let expected = MlpDenoiser::zeros(arch.clone())?.n_params();
    if count != expected {
        return Err(Error::format(
            count_at,
            format!("parameter count {count} does not match architecture ({expected})"),
        ));
    }
    let payload = r.take(
        count.checked_mul(8).ok_or_else(|| Error::format(count_at, "parameter count overflows"))?,
        "parameters",
    )?;
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    r.finish()?;
    MlpDenoiser::from_params(arch, params)
}
