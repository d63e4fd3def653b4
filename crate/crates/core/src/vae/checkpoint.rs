//! Binary checkpoint container for models and NMF dictionaries.
//!
//! All integers are little-endian `u32`, all parameters little-endian `f64`.
//!
//! ```text
//! magic    8 bytes  "AVSEPCKP"
//! version  u32      1
//! kind     u32      1 = conditional VAE, 2 = matrix set
//!
//! kind 1:  F, L, M, M_raw (u32), variance_floor (f64), net count (u32 = 4),
//!          per net: activation (u8), head (u8), dim count (u32), dims (u32...),
//!          then parameter blocks: per net, per layer, weights (out x in,
//!          row-major) followed by biases.
//! kind 2:  matrix count (u32), per matrix rows and cols (u32, u32),
//!          then each matrix's values row-major.
//! ```

use std::path::Path;

use super::model::CvaeModel;
use super::net::{Activation, Dense, DenseNet, OutputHead};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 8] = b"AVSEPCKP";
pub const VERSION: u32 = 1;
const KIND_MODEL: u32 = 1;
const KIND_MATRICES: u32 = 2;

const MAX_LAYERS: usize = 64;
const MAX_MATRICES: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Model(CvaeModel),
    Matrices(Vec<Matrix>),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("checkpoint", reason)
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.checked_mul(8).is_none_or(|b| b > self.remaining()) {
            return Err(bad("parameter block exceeds file size"));
        }
        let v: Vec<f64> = (0..n).map(|_| self.f64()).collect::<Result<_>>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(v)
    }
}

fn header(kind: u32) -> Writer {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u32(kind as usize);
    w
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Checkpoint::Model(m) => {
                let mut w = header(KIND_MODEL);
                w.u32(m.bins());
                w.u32(m.latent_dim());
                w.u32(m.visual_dim());
                w.u32(m.raw_visual_dim());
                w.f64s(&[m.variance_floor]);
                w.u32(4);
                for net in m.nets() {
                    w.u8(net.hidden_activation.code());
                    w.u8(net.head.code());
                    let dims = net.dims();
                    w.u32(dims.len());
                    for d in dims {
                        w.u32(d);
                    }
                }
                for blk in m.param_blocks() {
                    w.f64s(blk);
                }
                w.0
            }
            Checkpoint::Matrices(ms) => {
                let mut w = header(KIND_MATRICES);
                w.u32(ms.len());
                for m in ms {
                    w.u32(m.rows());
                    w.u32(m.cols());
                }
                for m in ms {
                    w.f64s(m.as_slice());
                }
                w.0
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        let out = match r.u32()? as u32 {
            KIND_MODEL => Checkpoint::Model(read_model(&mut r)?),
            KIND_MATRICES => Checkpoint::Matrices(read_matrices(&mut r)?),
            k => return Err(bad(format!("unknown kind {k}"))),
        };
        if r.remaining() != 0 {
            return Err(bad(format!("{} trailing bytes", r.remaining())));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_model(r: &mut Reader) -> Result<CvaeModel> {
    let f = r.u32()?;
    let l = r.u32()?;
    let m = r.u32()?;
    let m_raw = r.u32()?;
    let floor = r.f64()?;
    if r.u32()? != 4 {
        return Err(bad("model must hold exactly four networks"));
    }
    let mut shapes = Vec::with_capacity(4);
    for _ in 0..4 {
        let act = Activation::from_code(r.u8()?).ok_or_else(|| bad("unknown activation"))?;
        let head = OutputHead::from_code(r.u8()?).ok_or_else(|| bad("unknown output head"))?;
        let n = r.u32()?;
        if !(2..=MAX_LAYERS + 1).contains(&n) {
            return Err(bad(format!("network with {n} layer dims")));
        }
        let dims: Vec<usize> = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
        if dims.contains(&0) {
            return Err(bad("zero-width layer"));
        }
        shapes.push((act, head, dims));
    }
    let mut nets = Vec::with_capacity(4);
    for (act, head, dims) in shapes {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for d in dims.windows(2) {
            let n_w = d[0].checked_mul(d[1]).ok_or_else(|| bad("layer too large"))?;
            let weights = r.f64s(n_w)?;
            let biases = r.f64s(d[1])?;
            layers.push(Dense {
                inputs: d[0],
                outputs: d[1],
                weights,
                biases,
            });
        }
        nets.push(DenseNet {
            layers,
            hidden_activation: act,
            head,
        });
    }
    let decoder = nets.pop().unwrap();
    let prior = nets.pop().unwrap();
    let encoder = nets.pop().unwrap();
    let frontend = nets.pop().unwrap();
    let model = CvaeModel::from_nets(frontend, encoder, prior, decoder, floor)
        .map_err(|e| bad(e.to_string()))?;
    if (model.bins(), model.latent_dim(), model.visual_dim(), model.raw_visual_dim()) != (f, l, m, m_raw)
    {
        return Err(bad("header dims disagree with network shapes"));
    }
    Ok(model)
}

fn read_matrices(r: &mut Reader) -> Result<Vec<Matrix>> {
    let count = r.u32()?;
    if count > MAX_MATRICES {
        return Err(bad(format!("{count} matrices")));
    }
    let shapes: Vec<(usize, usize)> = (0..count)
        .map(|_| Ok((r.u32()?, r.u32()?)))
        .collect::<Result<_>>()?;
    shapes
        .into_iter()
        .map(|(rows, cols)| {
            let n = rows.checked_mul(cols).ok_or_else(|| bad("matrix too large"))?;
            Matrix::from_vec(rows, cols, r.f64s(n)?)
        })
        .collect()
}

pub fn save_model(path: impl AsRef<Path>, model: &CvaeModel) -> Result<()> {
    Checkpoint::Model(model.clone()).save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CvaeModel> {
    match Checkpoint::load(path)? {
        Checkpoint::Model(m) => Ok(m),
        Checkpoint::Matrices(_) => Err(bad("expected a model checkpoint, found matrices")),
    }
}
