//! Binary checkpoint format.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic      8 bytes  "DSCNTCKP"
//! version    u32      1
//! kind       u8       0 generic, 1 ut, 2 dust
//! nonlin     u8       0 relu, 1 soft-threshold
//! threshold  f64
//! orient     u8       0 columns, 1 rows
//! eta        f64
//! n, d       u32, u32
//! layers     u32
//! classes    u32      0 when there is no readout
//! lambda1    f64
//! lambda2    f64
//! c          f64
//! shared     u8
//! residual   u8       UT identity-offset initialization flag
//! tag        u32 length + UTF-8 bytes
//! seed       u64
//! sigma_x    f64
//! blocks     u32 count, then per block:
//!            u32 name length, name, u32 rows, u32 cols, rows*cols f64 (row-major)
//! ```
//!
//! Blocks appear in canonical order and are checked by name and shape on load.

use std::path::Path;

use super::{AttentionOrientation, DustHyper, ModelKind, ModelParams, ModelSpec, Nonlinearity};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSCNTCKP";
pub const VERSION: u32 = 1;

/// Provenance stored next to the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub tag: String,
    pub seed: u64,
    /// Standard deviation of the clean training data, needed to rebuild
    /// evaluation noise at the same scale.
    pub sigma_x: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: CheckpointMeta,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.params.spec;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.u8(match s.kind {
            ModelKind::Generic => 0,
            ModelKind::Ut => 1,
            ModelKind::Dust => 2,
        });
        match s.nonlinearity {
            Nonlinearity::Relu => {
                w.u8(0);
                w.f64(0.0);
            }
            Nonlinearity::SoftThreshold(g) => {
                w.u8(1);
                w.f64(g);
            }
        }
        w.u8(match s.orientation {
            AttentionOrientation::Columns => 0,
            AttentionOrientation::Rows => 1,
        });
        w.f64(s.eta);
        w.u32(s.n);
        w.u32(s.d);
        w.u32(s.num_layers);
        w.u32(s.classes.unwrap_or(0));
        w.f64(s.dust.lambda1);
        w.f64(s.dust.lambda2);
        w.f64(s.dust.c);
        w.u8(s.shared_dictionary as u8);
        w.u8(s.residual_init as u8);
        w.str(&self.meta.tag);
        w.u64(self.meta.seed);
        w.f64(self.meta.sigma_x);
        let blocks = self.params.named_blocks();
        w.u32(blocks.len());
        for (name, t) in blocks {
            w.str(&name);
            w.u32(t.rows());
            w.u32(t.cols());
            for &v in t.data() {
                w.f64(v);
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = match r.u8()? {
            0 => ModelKind::Generic,
            1 => ModelKind::Ut,
            2 => ModelKind::Dust,
            k => return Err(Error::Format(format!("unknown model kind {k}"))),
        };
        let nl_tag = r.u8()?;
        let threshold = r.f64()?;
        let nonlinearity = match nl_tag {
            0 => Nonlinearity::Relu,
            1 => Nonlinearity::SoftThreshold(threshold),
            k => return Err(Error::Format(format!("unknown nonlinearity {k}"))),
        };
        let orientation = match r.u8()? {
            0 => AttentionOrientation::Columns,
            1 => AttentionOrientation::Rows,
            k => return Err(Error::Format(format!("unknown orientation {k}"))),
        };
        let eta = r.f64()?;
        let n = r.u32()?;
        let d = r.u32()?;
        let num_layers = r.u32()?;
        let classes = match r.u32()? {
            0 => None,
            c => Some(c),
        };
        let dust = DustHyper {
            lambda1: r.f64()?,
            lambda2: r.f64()?,
            c: r.f64()?,
        };
        let shared_dictionary = r.u8()? != 0;
        let residual_init = r.u8()? != 0;
        let meta = CheckpointMeta {
            tag: r.str()?,
            seed: r.u64()?,
            sigma_x: r.f64()?,
        };
        let spec = ModelSpec {
            kind,
            n,
            d,
            num_layers,
            nonlinearity,
            orientation,
            eta,
            dust,
            shared_dictionary,
            classes,
            residual_init,
        };
        let mut params = ModelParams::init(spec, 0)
            .map_err(|e| Error::Format(format!("invalid architecture: {e}")))?;

        let expected: Vec<(String, [usize; 2])> = params
            .named_blocks()
            .into_iter()
            .map(|(name, t)| (name, t.shape()))
            .collect();
        let count = r.u32()?;
        if count != expected.len() {
            return Err(Error::Format(format!(
                "expected {} blocks, found {count}",
                expected.len()
            )));
        }
        for ((want_name, want_shape), slot) in expected.into_iter().zip(params.blocks_mut()) {
            let name = r.str()?;
            let rows = r.u32()?;
            let cols = r.u32()?;
            if name != want_name || [rows, cols] != want_shape {
                return Err(Error::Format(format!(
                    "block `{name}` {rows}x{cols} does not match `{want_name}` {}x{}",
                    want_shape[0], want_shape[1]
                )));
            }
            let data = (0..rows * cols)
                .map(|_| r.f64())
                .collect::<Result<Vec<f64>>>()?;
            *slot = Tensor::new(rows, cols, data)?;
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint { params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
