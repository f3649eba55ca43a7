//! Trainable parameters: two parallel bottleneck adapters (one per
//! objective) and the text→visual projection used by image-text matching.
//!
//! Checkpoint layout (all little-endian): magic `IMGADP01`, `u32` layers,
//! `u32` hidden dim, `u32` bottleneck, `u32` visual dim, then `f64` values
//! in the order lm adapter, itm adapter, projection. Each adapter is stored
//! layer by layer, down-projection before up-projection, row-major.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng;

pub const CKPT_MAGIC: &[u8; 8] = b"IMGADP01";

/// Which adapter (if any) participates in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterRoute {
    None,
    Lm,
    Itm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterShape {
    pub layers: usize,
    pub hidden_dim: usize,
    pub bottleneck: usize,
    pub visual_dim: usize,
}

impl AdapterShape {
    /// Bottleneck width is `hidden_dim / reduction`.
    pub fn new(layers: usize, hidden_dim: usize, reduction: usize, visual_dim: usize) -> Result<Self> {
        if reduction == 0 || hidden_dim % reduction != 0 || hidden_dim / reduction == 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden dim {hidden_dim} not divisible into a bottleneck by reduction {reduction}"
            )));
        }
        if visual_dim == 0 {
            return Err(Error::InvalidConfig("visual dim must be positive".into()));
        }
        Ok(AdapterShape { layers, hidden_dim, bottleneck: hidden_dim / reduction, visual_dim })
    }

    pub fn num_params(&self) -> usize {
        2 * self.layers * 2 * self.hidden_dim * self.bottleneck + self.hidden_dim * self.visual_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    /// hidden × bottleneck
    pub down: Mat,
    /// bottleneck × hidden
    pub up: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckAdapter {
    pub layers: Vec<AdapterLayer>,
}

impl BottleneckAdapter {
    fn zeros(shape: &AdapterShape) -> Self {
        let layers = (0..shape.layers)
            .map(|_| AdapterLayer {
                down: Mat::zeros(shape.hidden_dim, shape.bottleneck),
                up: Mat::zeros(shape.bottleneck, shape.hidden_dim),
            })
            .collect();
        BottleneckAdapter { layers }
    }

    fn mats(&self) -> impl Iterator<Item = &Mat> {
        self.layers.iter().flat_map(|l| [&l.down, &l.up])
    }

    fn mats_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.layers.iter_mut().flat_map(|l| [&mut l.down, &mut l.up])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterInit {
    pub down_std: f64,
    pub projection_std: f64,
}

impl AdapterInit {
    /// `down_std = 1/√hidden`, `projection_std = 0.1/√hidden`.
    pub fn for_shape(shape: &AdapterShape) -> Self {
        let s = 1.0 / (shape.hidden_dim as f64).sqrt();
        AdapterInit { down_std: s, projection_std: 0.1 * s }
    }
}

/// The only trainable parameters. The same type doubles as a gradient
/// container.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub shape: AdapterShape,
    pub lm: BottleneckAdapter,
    pub itm: BottleneckAdapter,
    /// hidden × visual; maps the text context vector into visual space.
    pub projection: Mat,
}

impl AdapterParams {
    pub fn zeros(shape: AdapterShape) -> Self {
        AdapterParams {
            shape,
            lm: BottleneckAdapter::zeros(&shape),
            itm: BottleneckAdapter::zeros(&shape),
            projection: Mat::zeros(shape.hidden_dim, shape.visual_dim),
        }
    }

    /// Random down-projections and projection, zero up-projections, so the
    /// adapted backbone starts out identical to the frozen one.
    pub fn init(shape: AdapterShape, init: AdapterInit, seed: u64) -> Self {
        let mut r = rng::seeded(seed, 0xADA9);
        let mut p = Self::zeros(shape);
        for adapter in [&mut p.lm, &mut p.itm] {
            for layer in &mut adapter.layers {
                layer.down = Mat::randn(shape.hidden_dim, shape.bottleneck, init.down_std, &mut r);
            }
        }
        p.projection = Mat::randn(shape.hidden_dim, shape.visual_dim, init.projection_std, &mut r);
        p
    }

    pub fn adapter(&self, route: AdapterRoute) -> Option<&BottleneckAdapter> {
        match route {
            AdapterRoute::None => None,
            AdapterRoute::Lm => Some(&self.lm),
            AdapterRoute::Itm => Some(&self.itm),
        }
    }

    pub fn adapter_mut(&mut self, route: AdapterRoute) -> Option<&mut BottleneckAdapter> {
        match route {
            AdapterRoute::None => None,
            AdapterRoute::Lm => Some(&mut self.lm),
            AdapterRoute::Itm => Some(&mut self.itm),
        }
    }

    fn mats(&self) -> impl Iterator<Item = &Mat> {
        self.lm.mats().chain(self.itm.mats()).chain(std::iter::once(&self.projection))
    }

    fn mats_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.lm
            .mats_mut()
            .chain(self.itm.mats_mut())
            .chain(std::iter::once(&mut self.projection))
    }

    /// Number of scalars in the lm adapter, itm adapter and projection.
    pub fn section_lengths(&self) -> [usize; 3] {
        let a = self.shape.layers * 2 * self.shape.hidden_dim * self.shape.bottleneck;
        [a, a, self.shape.hidden_dim * self.shape.visual_dim]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.mats().flat_map(|m| m.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.shape.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.shape.num_params()
            )));
        }
        let mut off = 0;
        for m in self.mats_mut() {
            let n = m.data.len();
            m.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &AdapterParams) {
        for (a, b) in self.mats_mut().zip(other.mats()) {
            a.add_assign(b);
        }
    }

    /// `self += s · other`
    pub fn axpy(&mut self, s: f64, other: &AdapterParams) {
        for (a, b) in self.mats_mut().zip(other.mats()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.mats_mut() {
            m.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mats().all(Mat::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.mats().flat_map(|m| m.data.iter()).fold(0.0, |a, x| a.max(x.abs()))
    }

    /// SHA-256 over the raw bytes of one section.
    pub fn fingerprint(&self, which: AdapterSection) -> String {
        let mut h = Sha256::new();
        let mats: Vec<&Mat> = match which {
            AdapterSection::Lm => self.lm.mats().collect(),
            AdapterSection::Itm => self.itm.mats().chain(std::iter::once(&self.projection)).collect(),
            AdapterSection::All => self.mats().collect(),
        };
        for m in mats {
            for x in &m.data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn check_shape(&self, expected: &AdapterShape) -> Result<()> {
        if &self.shape != expected {
            return Err(Error::ShapeMismatch(format!(
                "adapter shape {:?} does not match backbone {:?}",
                self.shape, expected
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CKPT_MAGIC)?;
        for v in [self.shape.layers, self.shape.hidden_dim, self.shape.bottleneck, self.shape.visual_dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for m in self.mats() {
            for x in &m.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "checkpoint", detail };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != CKPT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| bad(e.to_string()))?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let shape = AdapterShape { layers: dims[0], hidden_dim: dims[1], bottleneck: dims[2], visual_dim: dims[3] };
        let mut body = Vec::new();
        r.read_to_end(&mut body).map_err(|e| bad(e.to_string()))?;
        if body.len() != shape.num_params() * 8 {
            return Err(bad(format!("expected {} bytes of weights, found {}", shape.num_params() * 8, body.len())));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut p = AdapterParams::zeros(shape);
        p.set_flat(&flat)?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterSection {
    Lm,
    /// itm adapter plus projection
    Itm,
    All,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> AdapterShape {
        AdapterShape::new(2, 16, 4, 8).unwrap()
    }

    #[test]
    fn init_zero_up() {
        let p = AdapterParams::init(shape(), AdapterInit::for_shape(&shape()), 3);
        for a in [&p.lm, &p.itm] {
            for l in &a.layers {
                assert!(l.up.data.iter().all(|&x| x == 0.0));
                assert!(l.down.data.iter().any(|&x| x != 0.0));
            }
        }
        assert_eq!(p.flatten().len(), shape().num_params());
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let mut p = AdapterParams::init(shape(), AdapterInit::for_shape(&shape()), 9);
        p.lm.layers[1].up.data[3] = -0.0;
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 16 + shape().num_params() * 8);
        let q = AdapterParams::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p.fingerprint(AdapterSection::All), q.fingerprint(AdapterSection::All));
    }

    #[test]
    fn reduction_must_divide() {
        assert!(AdapterShape::new(2, 64, 16, 32).is_ok());
        assert!(AdapterShape::new(2, 60, 16, 32).is_err());
    }
}
