//! Cameras, the view grid, and synthetic Gaussian-blob ground-truth scenes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{render_view, RenderConfig, VoxelField};
use crate::imaging::Image;

/// Density ceiling applied when baking a scene.
pub const SIGMA_MAX: f64 = 50.0;

/// Pinhole camera on a sphere around the origin, looking at the origin with +Y up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub fov_y: f64,
    pub image_w: usize,
    pub image_h: usize,
}

#[inline]
fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

impl Camera {
    /// Angles in degrees. Azimuth 0 / elevation 0 sits on the +Z axis.
    pub fn new(azimuth: f64, elevation: f64, radius: f64, fov_y: f64, image_w: usize, image_h: usize) -> Self {
        Self { azimuth, elevation, radius, fov_y, image_w, image_h }
    }

    pub fn with_resolution(&self, w: usize, h: usize) -> Self {
        Self { image_w: w, image_h: h, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y > 0.0 && self.fov_y < 120.0) {
            return Err(Error::InvalidParameter(format!("fov_y {} outside (0, 120)", self.fov_y)));
        }
        if self.elevation.abs() >= 90.0 {
            return Err(Error::InvalidParameter("|elevation| must be < 90".into()));
        }
        if self.image_w == 0 || self.image_h == 0 || self.radius <= 0.0 {
            return Err(Error::InvalidParameter("camera needs positive size and radius".into()));
        }
        Ok(())
    }

    pub fn position(&self) -> [f64; 3] {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        [
            self.radius * el.cos() * az.sin(),
            self.radius * el.sin(),
            self.radius * el.cos() * az.cos(),
        ]
    }

    /// Camera basis `(right, up, forward)`.
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let pos = self.position();
        let fwd = normalize([-pos[0], -pos[1], -pos[2]]);
        let right = normalize(cross(fwd, [0.0, 1.0, 0.0]));
        let up = cross(right, fwd);
        (right, up, fwd)
    }

    /// World-space ray through the center of pixel `(row, col)`.
    #[inline]
    pub fn ray(&self, row: usize, col: usize) -> ([f64; 3], [f64; 3]) {
        let (right, up, fwd) = self.basis();
        let tan = (self.fov_y.to_radians() / 2.0).tan();
        let aspect = self.image_w as f64 / self.image_h as f64;
        let x = ((col as f64 + 0.5) / self.image_w as f64 * 2.0 - 1.0) * tan * aspect;
        let y = (1.0 - (row as f64 + 0.5) / self.image_h as f64 * 2.0) * tan;
        let d = normalize([
            fwd[0] + x * right[0] + y * up[0],
            fwd[1] + x * right[1] + y * up[1],
            fwd[2] + x * right[2] + y * up[2],
        ]);
        (self.position(), d)
    }
}

/// Regular azimuth x elevation grid of training views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridParams {
    pub n_az: usize,
    pub n_el: usize,
    pub az_range: [f64; 2],
    pub el_range: [f64; 2],
    pub radius: f64,
    pub fov_y: f64,
    pub resolution: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            n_az: 8,
            n_el: 8,
            az_range: [-22.5, 22.5],
            el_range: [-10.0, 10.0],
            radius: 2.5,
            fov_y: 40.0,
            resolution: 64,
        }
    }
}

impl GridParams {
    /// The 20x20 frontal-hemisphere grid at 512 px.
    pub fn paper_scale() -> Self {
        Self { n_az: 20, n_el: 20, resolution: 512, ..Self::default() }
    }

    fn axis(n: usize, range: [f64; 2]) -> Vec<f64> {
        if n == 1 {
            return vec![(range[0] + range[1]) / 2.0];
        }
        (0..n).map(|i| range[0] + (range[1] - range[0]) * i as f64 / (n - 1) as f64).collect()
    }

    fn cell(n: usize, range: [f64; 2]) -> f64 {
        let span = (range[1] - range[0]).abs();
        if n >= 2 && span > 0.0 {
            span / (n - 1) as f64
        } else {
            span.max(1.0)
        }
    }
}

/// Cameras on the regular grid, elevation-major (azimuth varies fastest).
pub fn camera_grid(g: &GridParams) -> Result<Vec<Camera>> {
    if g.n_az == 0 || g.n_el == 0 {
        return Err(Error::InvalidParameter("grid needs n_az, n_el >= 1".into()));
    }
    let azs = GridParams::axis(g.n_az, g.az_range);
    let els = GridParams::axis(g.n_el, g.el_range);
    let mut cams = Vec::with_capacity(azs.len() * els.len());
    for &el in &els {
        for &az in &azs {
            let cam = Camera::new(az, el, g.radius, g.fov_y, g.resolution, g.resolution);
            cam.validate()?;
            cams.push(cam);
        }
    }
    Ok(cams)
}

pub const HOLDOUT_ATTEMPTS: usize = 10_000;

/// `k` evaluation cameras drawn uniformly inside the grid's ranges, each at
/// least a quarter cell (in normalized grid units) from every grid node.
pub fn holdout_cameras(g: &GridParams, k: usize, seed: u64) -> Result<Vec<Camera>> {
    if k == 0 {
        return Err(Error::InvalidParameter("holdout count must be >= 1".into()));
    }
    let nodes = camera_grid(g)?;
    let (ca, ce) = (GridParams::cell(g.n_az, g.az_range), GridParams::cell(g.n_el, g.el_range));
    let (alo, ahi) = (g.az_range[0].min(g.az_range[1]), g.az_range[0].max(g.az_range[1]));
    let (elo, ehi) = (g.el_range[0].min(g.el_range[1]), g.el_range[0].max(g.el_range[1]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k);
    let mut attempts = 0;
    while out.len() < k {
        if attempts >= HOLDOUT_ATTEMPTS {
            return Err(Error::HoldoutExhausted(HOLDOUT_ATTEMPTS));
        }
        attempts += 1;
        let az = alo + (ahi - alo) * rng.random::<f64>();
        let el = elo + (ehi - elo) * rng.random::<f64>();
        let clear = nodes.iter().all(|n| {
            let (da, de) = ((az - n.azimuth) / ca, (el - n.elevation) / ce);
            (da * da + de * de).sqrt() >= 0.25
        });
        if clear {
            out.push(Camera::new(az, el, g.radius, g.fov_y, g.resolution, g.resolution));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub color: [f64; 3],
    pub peak_density: f64,
}

impl Blob {
    /// Unclamped Gaussian density contribution at `p`.
    #[inline]
    pub fn density_at(&self, p: [f64; 3]) -> f64 {
        let mut q = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            q += d * d;
        }
        self.peak_density * (-0.5 * q).exp()
    }
}

/// A ground-truth scene: a sum of anisotropic Gaussian density blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub blobs: Vec<Blob>,
}

impl SceneSpec {
    /// Head-like composite: skull, hair cap, eyes, nose, mouth cavity and a
    /// thin protruding tongue. Proportions and colors vary with `seed`.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce4e);
        let mut jit = |s: f64| rng.random_range(-s..=s);
        let skin = [0.82 + jit(0.08), 0.62 + jit(0.08), 0.48 + jit(0.08)];
        let hair = [0.22 + jit(0.1), 0.14 + jit(0.08), 0.08 + jit(0.06)];
        let iris = [0.1 + jit(0.05), 0.2 + jit(0.1), 0.45 + jit(0.15)];
        let scale = 1.0 + jit(0.08);
        let eye_x = 0.13 + jit(0.015);
        let tongue_len = 0.1 + jit(0.02);
        let tongue_tilt = jit(0.04);
        let s = |v: f64| v * scale;
        let blobs = vec![
            Blob {
                center: [jit(0.02), jit(0.02), 0.0],
                radii: [s(0.14), s(0.17), s(0.14)],
                color: skin,
                peak_density: 2000.0,
            },
            Blob {
                center: [0.0, s(0.11), s(-0.07)],
                radii: [s(0.15), s(0.13), s(0.14)],
                color: hair,
                peak_density: 2000.0,
            },
            Blob { center: [-eye_x, s(0.07), s(0.34)], radii: [0.04; 3], color: iris, peak_density: 3000.0 },
            Blob { center: [eye_x, s(0.07), s(0.34)], radii: [0.04; 3], color: iris, peak_density: 3000.0 },
            Blob {
                center: [0.0, s(-0.02), s(0.4)],
                radii: [0.035, 0.05, 0.05],
                color: [skin[0] + 0.05, skin[1] - 0.05, skin[2] - 0.05],
                peak_density: 2000.0,
            },
            Blob {
                center: [0.0, s(-0.15), s(0.33)],
                radii: [0.08, 0.03, 0.05],
                color: [0.35, 0.04, 0.06],
                peak_density: 3000.0,
            },
            Blob {
                center: [tongue_tilt, s(-0.19), s(0.4) + tongue_len],
                radii: [0.035, 0.02, tongue_len],
                color: [0.92, 0.38, 0.46],
                peak_density: 3000.0,
            },
        ];
        Self { seed, blobs }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.blobs.iter().enumerate() {
            if !(b.peak_density > 0.0) {
                return Err(Error::InvalidParameter(format!("blob {i}: peak_density must be > 0")));
            }
            if b.radii.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::InvalidParameter(format!("blob {i}: radii must be > 0")));
            }
            let reach = b.center.iter().map(|c| c * c).sum::<f64>().sqrt() + b.radii.iter().cloned().fold(0.0, f64::max);
            if reach > 1.0 {
                return Err(Error::InvalidParameter(format!("blob {i} leaves the unit region")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|source| Error::Write { path: path.into(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read { path: path.into(), source })?;
        Self::from_json(&text)
    }
}

/// Samples the scene at every lattice node of a `resolution^3` grid.
/// Density is capped at [`SIGMA_MAX`]; color is the density-weighted blob color.
pub fn bake_scene(spec: &SceneSpec, resolution: usize) -> Result<VoxelField> {
    if resolution < 8 {
        return Err(Error::InvalidParameter("bake resolution must be >= 8".into()));
    }
    let mut field = VoxelField::empty_direct(resolution);
    for z in 0..resolution {
        for y in 0..resolution {
            for x in 0..resolution {
                let p = [field.node_coord(x), field.node_coord(y), field.node_coord(z)];
                let mut total = 0.0;
                let mut rgb = [0.0; 3];
                for b in &spec.blobs {
                    let d = b.density_at(p);
                    total += d;
                    for k in 0..3 {
                        rgb[k] += d * b.color[k];
                    }
                }
                if total > 0.0 {
                    let node = field.node_index(x, y, z);
                    field.set_node_raw(
                        node,
                        [total.min(SIGMA_MAX), rgb[0] / total, rgb[1] / total, rgb[2] / total],
                    );
                }
            }
        }
    }
    Ok(field)
}

/// Ground-truth renders of a baked field.
pub fn render_gt(field: &VoxelField, cameras: &[Camera], cfg: &RenderConfig) -> Result<Vec<Image>> {
    cfg.validate()?;
    cameras
        .iter()
        .map(|c| {
            c.validate()?;
            Ok(render_view(field, c, cfg))
        })
        .collect()
}
