//! Dual-grid voxel radiance field over the cube `[-1, 1]^3`.
//!
//! Density and color live on the same `R^3` lattice of nodes, stored
//! interleaved as `[density, r, g, b]` per node. Queries interpolate the raw
//! values trilinearly and only then apply the activation, so an optimizable
//! field always yields `sigma >= 0` and colors in `(0, 1)`.

mod adam;
mod render;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use render::{
    backward, backward_patches, composite_ray, render_patches, render_view, PatchGrad, RenderConfig,
};

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Floats per lattice node.
pub const NODE_STRIDE: usize = 4;

const MAGIC_LEARNED: &[u8; 8] = b"DLVOXSP1";
const MAGIC_DIRECT: &[u8; 8] = b"DLVOXID1";

/// How raw node values map to density and color.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// `sigma = softplus(raw)`, `c = sigmoid(raw)`; what the optimizer works on.
    SoftplusSigmoid,
    /// Raw values are density and color directly (clamped to their ranges).
    /// Used for baked ground truth, where exact zeros matter.
    Direct,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus is strictly positive");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Inverse of [`sigmoid`] for `y` in `(0, 1)`.
pub fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

impl Activation {
    #[inline]
    fn density(self, raw: f64) -> (f64, f64) {
        match self {
            Activation::SoftplusSigmoid => (softplus(raw), sigmoid(raw)),
            Activation::Direct => {
                if raw > 0.0 {
                    (raw, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }

    #[inline]
    fn color(self, raw: f64) -> (f64, f64) {
        match self {
            Activation::SoftplusSigmoid => {
                let c = sigmoid(raw);
                (c, c * (1.0 - c))
            }
            Activation::Direct => {
                if (0.0..=1.0).contains(&raw) {
                    (raw, 1.0)
                } else {
                    (raw.clamp(0.0, 1.0), 0.0)
                }
            }
        }
    }
}

/// Trilinear footprint of a query point: 8 node offsets into the parameter
/// vector and their interpolation weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Footprint {
    pub base: [usize; 8],
    pub weight: [f64; 8],
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    resolution: usize,
    activation: Activation,
    params: Vec<f64>,
}

impl VoxelField {
    /// Field with every node set to the same raw density and color values.
    pub fn constant(resolution: usize, density_raw: f64, color_raw: f64) -> Self {
        assert!(resolution >= 2, "field needs at least 2 nodes per axis");
        let n = resolution.pow(3);
        let mut params = Vec::with_capacity(n * NODE_STRIDE);
        for _ in 0..n {
            params.extend_from_slice(&[density_raw, color_raw, color_raw, color_raw]);
        }
        Self { resolution, activation: Activation::SoftplusSigmoid, params }
    }

    /// Field whose activated density is `sigma` and color is `gray` everywhere.
    pub fn uniform(resolution: usize, sigma: f64, gray: f64) -> Self {
        Self::constant(resolution, softplus_inv(sigma), logit(gray))
    }

    /// Field storing density and color directly, all zero (empty space).
    pub fn empty_direct(resolution: usize) -> Self {
        assert!(resolution >= 2, "field needs at least 2 nodes per axis");
        Self {
            resolution,
            activation: Activation::Direct,
            params: vec![0.0; resolution.pow(3) * NODE_STRIDE],
        }
    }

    pub fn from_params(resolution: usize, activation: Activation, params: Vec<f64>) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidParameter("field resolution must be >= 2".into()));
        }
        let expected = resolution.pow(3) * NODE_STRIDE;
        if params.len() != expected {
            return Err(Error::dims(expected, params.len()));
        }
        Ok(Self { resolution, activation, params })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_nodes(&self) -> usize {
        self.resolution.pow(3)
    }

    #[inline]
    pub fn node_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    /// World position of lattice node `i` along one axis.
    #[inline]
    pub fn node_coord(&self, i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / (self.resolution - 1) as f64
    }

    /// Spacing between adjacent nodes.
    pub fn cell_size(&self) -> f64 {
        2.0 / (self.resolution - 1) as f64
    }

    /// Activated `(sigma, color)` stored at a lattice node.
    pub fn node_value(&self, x: usize, y: usize, z: usize) -> (f64, [f64; 3]) {
        let b = self.node_index(x, y, z) * NODE_STRIDE;
        let p = &self.params[b..b + NODE_STRIDE];
        (
            self.activation.density(p[0]).0,
            [self.activation.color(p[1]).0, self.activation.color(p[2]).0, self.activation.color(p[3]).0],
        )
    }

    /// Activated density at every node, in node-index order.
    pub fn densities(&self) -> Vec<f64> {
        self.params.chunks_exact(NODE_STRIDE).map(|p| self.activation.density(p[0]).0).collect()
    }

    pub(crate) fn set_node_raw(&mut self, node: usize, raw: [f64; 4]) {
        self.params[node * NODE_STRIDE..(node + 1) * NODE_STRIDE].copy_from_slice(&raw);
    }

    /// Converts a direct-valued field into an optimizable one by inverting the
    /// activations, flooring density at `min_sigma` and squeezing colors into
    /// `[eps, 1 - eps]`.
    pub fn to_learned(&self, min_sigma: f64, eps: f64) -> VoxelField {
        if self.activation == Activation::SoftplusSigmoid {
            return self.clone();
        }
        let params = self
            .params
            .chunks_exact(NODE_STRIDE)
            .flat_map(|p| {
                [
                    softplus_inv(p[0].max(min_sigma)),
                    logit(p[1].clamp(eps, 1.0 - eps)),
                    logit(p[2].clamp(eps, 1.0 - eps)),
                    logit(p[3].clamp(eps, 1.0 - eps)),
                ]
            })
            .collect();
        VoxelField { resolution: self.resolution, activation: Activation::SoftplusSigmoid, params }
    }

    #[inline]
    pub(crate) fn footprint(&self, p: [f64; 3]) -> Option<Footprint> {
        if p.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return None;
        }
        let r = self.resolution;
        let scale = (r - 1) as f64 / 2.0;
        let mut i0 = [0usize; 3];
        let mut f = [0.0; 3];
        for a in 0..3 {
            let g = (p[a] + 1.0) * scale;
            let i = (g.floor() as usize).min(r - 2);
            i0[a] = i;
            f[a] = g - i as f64;
        }
        let mut fp = Footprint { base: [0; 8], weight: [0.0; 8] };
        for corner in 0..8 {
            let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
            let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
            let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
            fp.base[corner] = self.node_index(i0[0] + dx, i0[1] + dy, i0[2] + dz) * NODE_STRIDE;
            fp.weight[corner] = wx * wy * wz;
        }
        Some(fp)
    }

    /// Interpolated raw values `[density, r, g, b]` under a footprint.
    #[inline]
    pub(crate) fn interp_raw(&self, fp: &Footprint) -> [f64; 4] {
        let mut out = [0.0; 4];
        for k in 0..8 {
            let b = fp.base[k];
            let w = fp.weight[k];
            let p = &self.params[b..b + NODE_STRIDE];
            out[0] += w * p[0];
            out[1] += w * p[1];
            out[2] += w * p[2];
            out[3] += w * p[3];
        }
        out
    }

    /// Density and color at a world point. Points outside the cube have zero density.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        match self.footprint(p) {
            None => (0.0, [0.0; 3]),
            Some(fp) => {
                let raw = self.interp_raw(&fp);
                let a = self.activation;
                (a.density(raw[0]).0, [a.color(raw[1]).0, a.color(raw[2]).0, a.color(raw[3]).0])
            }
        }
    }

    /// Serializes as: 8-byte magic, `u32` resolution, then little-endian `f32`
    /// density values (node order) followed by `f32` rgb triples (node order).
    pub fn write_blob(&self, mut out: impl Write) -> Result<()> {
        let magic = match self.activation {
            Activation::SoftplusSigmoid => MAGIC_LEARNED,
            Activation::Direct => MAGIC_DIRECT,
        };
        out.write_all(magic)?;
        out.write_all(&(self.resolution as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.params.len() * 4);
        for p in self.params.chunks_exact(NODE_STRIDE) {
            buf.extend_from_slice(&(p[0] as f32).to_le_bytes());
        }
        for p in self.params.chunks_exact(NODE_STRIDE) {
            for v in &p[1..] {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_blob(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| Error::BadBlob("missing field magic".into()))?;
        let activation = match &magic {
            m if m == MAGIC_LEARNED => Activation::SoftplusSigmoid,
            m if m == MAGIC_DIRECT => Activation::Direct,
            _ => return Err(Error::BadBlob("not a voxel field blob".into())),
        };
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(|_| Error::BadBlob("missing resolution".into()))?;
        let resolution = u32::from_le_bytes(word) as usize;
        if !(2..=1024).contains(&resolution) {
            return Err(Error::BadBlob(format!("implausible resolution {resolution}")));
        }
        let n = resolution.pow(3);
        let mut bytes = vec![0u8; n * NODE_STRIDE * 4];
        input.read_exact(&mut bytes).map_err(|_| Error::BadBlob("truncated field data".into()))?;
        let floats: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let (dens, cols) = floats.split_at(n);
        let mut params = Vec::with_capacity(n * NODE_STRIDE);
        for i in 0..n {
            params.push(dens[i]);
            params.extend_from_slice(&cols[3 * i..3 * i + 3]);
        }
        Self::from_params(resolution, activation, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|source| Error::Write { path: path.into(), source })?;
        let mut w = std::io::BufWriter::new(file);
        self.write_blob(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| Error::Read { path: path.into(), source })?;
        Self::read_blob(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(res: usize, seed: u64) -> VoxelField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..res.pow(3) * NODE_STRIDE).map(|_| rng.random_range(-2.0..2.0)).collect();
        VoxelField::from_params(res, Activation::SoftplusSigmoid, params).unwrap()
    }

    #[test]
    fn node_query_returns_node_activation() {
        let f = random_field(5, 1);
        let (x, y, z) = (1, 3, 2);
        let p = [f.node_coord(x), f.node_coord(y), f.node_coord(z)];
        let (s, c) = f.sample_trilinear(p);
        let b = f.node_index(x, y, z) * NODE_STRIDE;
        let raw = &f.params()[b..b + 4];
        assert!((s - softplus(raw[0])).abs() < 1e-12);
        for k in 0..3 {
            assert!((c[k] - sigmoid(raw[k + 1])).abs() < 1e-12);
        }
    }

    #[test]
    fn midpoint_activates_average_raw() {
        let f = random_field(4, 2);
        let (x, y, z) = (1, 2, 0);
        let a = f.node_index(x, y, z) * NODE_STRIDE;
        let b = f.node_index(x + 1, y, z) * NODE_STRIDE;
        let mid = [(f.node_coord(x) + f.node_coord(x + 1)) / 2.0, f.node_coord(y), f.node_coord(z)];
        let (s, c) = f.sample_trilinear(mid);
        let p = f.params();
        // Activation after interpolation: softplus of the mean, not mean of softplus.
        assert!((s - softplus(0.5 * (p[a] + p[b]))).abs() < 1e-12);
        assert!((c[0] - sigmoid(0.5 * (p[a + 1] + p[b + 1]))).abs() < 1e-12);
    }

    #[test]
    fn outside_bounds_is_empty() {
        let f = VoxelField::uniform(4, 5.0, 0.3);
        assert_eq!(f.sample_trilinear([1.01, 0.0, 0.0]).0, 0.0);
        assert_eq!(f.sample_trilinear([0.0, -1.5, 0.0]).0, 0.0);
        assert!(f.sample_trilinear([1.0, 1.0, 1.0]).0 > 0.0);
    }

    #[test]
    fn uniform_inverts_activations() {
        let f = VoxelField::uniform(3, 0.01, 0.5);
        let (s, c) = f.sample_trilinear([0.1, 0.2, 0.3]);
        assert!((s - 0.01).abs() < 1e-12);
        assert!((c[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn blob_roundtrip_is_f32_exact() {
        let f = random_field(3, 9);
        let mut buf = Vec::new();
        f.write_blob(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC_LEARNED);
        assert_eq!(buf.len(), 8 + 4 + 27 * 4 * 4);
        let back = VoxelField::read_blob(buf.as_slice()).unwrap();
        for (a, b) in f.params().iter().zip(back.params()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(VoxelField::read_blob(&buf[..20]).is_err());
        assert!(VoxelField::read_blob(&b"NOTMAGIC0000"[..]).is_err());
    }
}
