//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      4 bytes  "JREG"
//! version    u32      = 1
//! rng_id     u32      generator identifier (1 = ChaCha20)
//! seed       u64
//! depth      u32      L
//! dims       (L+1) × u32   d_0 … d_L
//! activation u32      0 = ReLU, 1 = LeakyReLU
//! slope      f64      LeakyReLU slope (0 for ReLU)
//! body       θ_1 … θ_L, each row-major f64
//! ```
//!
//! Parameters are always stored as `f64`, so `f32` and `f64` networks both
//! round-trip exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Activation, MlpParams};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"JREG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: MlpParams<T>,
    pub rng_id: u32,
    pub seed: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let dims = p.dims();
        let mut out = Vec::with_capacity(64 + 8 * p.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.rng_id.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(p.depth() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let (tag, slope) = match p.activation() {
            Activation::Relu => (0u32, 0.0f64),
            Activation::LeakyRelu { slope } => (1, slope),
        };
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&slope.to_le_bytes());
        for layer in p.layers() {
            for &v in layer.as_slice() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, path };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(path, 0, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, 4, format!("unsupported version {version}")));
        }
        let rng_id = r.u32()?;
        let seed = r.u64()?;
        let depth_at = r.pos;
        let depth = r.u32()? as usize;
        if depth == 0 || depth > 1024 {
            return Err(Error::format(path, depth_at as u64, format!("implausible depth {depth}")));
        }
        let mut dims = Vec::with_capacity(depth + 1);
        for _ in 0..=depth {
            dims.push(r.u32()? as usize);
        }
        let act_at = r.pos;
        let tag = r.u32()?;
        let slope = r.f64()?;
        let activation = match tag {
            0 => Activation::Relu,
            1 => Activation::LeakyRelu { slope },
            t => return Err(Error::format(path, act_at as u64, format!("unknown activation {t}"))),
        };
        let mut layers = Vec::with_capacity(depth);
        for w in dims.windows(2) {
            let (cols, rows) = (w[0], w[1]);
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let at = r.pos;
                let v = r.f64()?;
                if !v.is_finite() {
                    return Err(Error::format(path, at as u64, "non-finite weight"));
                }
                data.push(T::lit(v));
            }
            layers.push(Matrix::from_vec(rows, cols, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, r.pos as u64, "trailing bytes after body"));
        }
        Ok(Checkpoint {
            params: MlpParams::new(layers, activation)?,
            rng_id,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
}
