//! Versioned little-endian model checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes   "SPHCNNCK"
//! version      u32
//! n_map_in     u32
//! n_conv       u32
//! n_map_out    u32
//! channels     u32
//! width        u32
//! flags        u8        bit0 bias, bit1 skip, bit2 relu block 1, bit3 relu block 2
//! sparse hash  32 bytes  SHA-256 of the sparse grid directions
//! dense hash   32 bytes
//! P_sparse     u32
//! P_dense      u32
//! sparse grid  P_sparse x (theta f64, phi f64)
//! dense grid   P_dense  x (theta f64, phi f64)
//! tensors      f64 in declaration order: block 1 betas, block 1 bias,
//!              block 2 betas, block 2 bias (biases only when enabled)
//! ```

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::network::{Architecture, ModelParams};
use crate::sh::{Direction, GridHash, SphericalGrid};

pub const MAGIC: &[u8; 8] = b"SPHCNNCK";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let arch = params.architecture();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        arch.n_map_in as u32,
        arch.n_conv as u32,
        arch.n_map_out as u32,
        arch.channels as u32,
        arch.width as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let flags = arch.bias as u8
        | (arch.skip as u8) << 1
        | (arch.relu[0] as u8) << 2
        | (arch.relu[1] as u8) << 3;
    out.push(flags);
    out.extend_from_slice(&params.sparse_grid.hash().0);
    out.extend_from_slice(&params.dense_grid.hash().0);
    out.extend_from_slice(&(params.sparse_grid.len() as u32).to_le_bytes());
    out.extend_from_slice(&(params.dense_grid.len() as u32).to_le_bytes());
    for grid in [&params.sparse_grid, &params.dense_grid] {
        for d in grid.directions() {
            out.extend_from_slice(&d.theta().to_le_bytes());
            out.extend_from_slice(&d.phi().to_le_bytes());
        }
    }
    for v in params.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.source.to_string(),
            // binary file: report the byte offset in place of a line number
            line: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn hash(&mut self, what: &str) -> Result<GridHash> {
        let b = self.take(32, what)?;
        Ok(GridHash(b.try_into().expect("32 bytes")))
    }

    fn grid(
        &mut self,
        count: usize,
        expected: GridHash,
        role: &'static str,
    ) -> Result<SphericalGrid> {
        let mut dirs = Vec::with_capacity(count);
        for _ in 0..count {
            let theta = self.f64("grid direction")?;
            let phi = self.f64("grid direction")?;
            dirs.push(Direction::new(theta, phi).map_err(|e| self.err(e.to_string()))?);
        }
        let grid = SphericalGrid::new(dirs).map_err(|e| self.err(e.to_string()))?;
        if grid.hash() != expected {
            return Err(Error::GridMismatch {
                role,
                expected: expected.to_hex(),
                found: grid.hash().to_hex(),
            });
        }
        Ok(grid)
    }
}

pub fn decode(bytes: &[u8], source: &str) -> Result<ModelParams> {
    let mut r = Reader {
        bytes,
        pos: 0,
        source,
    };
    if r.take(8, "magic")? != MAGIC {
        return Err(r.err("not a model checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version,
            expected: VERSION,
        });
    }
    let n_map_in = r.u32("n_map_in")? as usize;
    let n_conv = r.u32("n_conv")? as usize;
    let n_map_out = r.u32("n_map_out")? as usize;
    let channels = r.u32("channels")? as usize;
    let width = r.u32("width")? as usize;
    let flags = r.take(1, "flags")?[0];
    if flags & !0x0f != 0 {
        return Err(r.err(format!("unknown flag bits {flags:#04x}")));
    }
    let arch = Architecture {
        n_map_in,
        n_conv,
        n_map_out,
        channels,
        width,
        bias: flags & 1 != 0,
        skip: flags & 2 != 0,
        relu: [flags & 4 != 0, flags & 8 != 0],
    };
    let sparse_hash = r.hash("sparse grid hash")?;
    let dense_hash = r.hash("dense grid hash")?;
    let p_sparse = r.u32("sparse point count")? as usize;
    let p_dense = r.u32("dense point count")? as usize;
    let sparse = r.grid(p_sparse, sparse_hash, "sparse")?;
    let dense = r.grid(p_dense, dense_hash, "dense")?;
    let mut params = ModelParams::zeros(&arch, Arc::new(sparse), Arc::new(dense))
        .map_err(|e| r.err(e.to_string()))?;
    let n = params.num_params();
    let flat = (0..n)
        .map(|_| r.f64("tensor data"))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(r.err(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - r.pos
        )));
    }
    params.set_flat(&flat).map_err(|e| r.err(e.to_string()))?;
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
