//! Spherical projection of scans into vertex maps, grid normal estimation and
//! remapping of the current frame into the last frame's coordinates.
//!
//! Pixel coordinates follow
//!
//! ```text
//! w = floor((f_w - atan2(p_y, p_x)) / eta_w)
//! h = floor((f_h - asin(p_z / d)) / eta_h)
//! ```
//!
//! with angles in degrees. Points falling outside `[0, W) × [0, H)` are
//! discarded, and when several points land on one pixel the closest wins.

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    /// Maximum horizontal angle `f_w`, degrees.
    pub fov_horizontal: f64,
    /// Upper vertical angle `f_h`, degrees.
    pub fov_up: f64,
    /// Horizontal angular density, degrees per pixel.
    pub eta_w: f64,
    /// Vertical angular density, degrees per pixel.
    pub eta_h: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for ProjectionConfig {
    /// `f_w = 180°`, `f_h = 23°`, `η = 0.5°`, `H × W = 52 × 720`.
    fn default() -> Self {
        Self {
            fov_horizontal: 180.0,
            fov_up: 23.0,
            eta_w: 0.5,
            eta_h: 0.5,
            height: 52,
            width: 720,
        }
    }
}

impl ProjectionConfig {
    /// Window matched to the HDL-64E vertical field, `(-23°, 3°]`.
    pub fn hdl64() -> Self {
        Self {
            fov_up: 3.0,
            ..Self::default()
        }
    }

    /// Coarse grid for desk-scale training: 16 × 64 pixels covering
    /// `(-30°, 30°]` vertically and the full horizontal sweep.
    pub fn desk() -> Self {
        Self {
            fov_horizontal: 180.0,
            fov_up: 30.0,
            eta_w: 5.625,
            eta_h: 3.75,
            height: 16,
            width: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_w > 0.0 && self.eta_h > 0.0) {
            return Err(Error::Config("angular densities must be positive".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("map dimensions must be positive".into()));
        }
        let expected_w = 2.0 * self.fov_horizontal / self.eta_w;
        if (expected_w - self.width as f64).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "width {} inconsistent with 2·f_w/η_w = {expected_w}",
                self.width
            )));
        }
        Ok(())
    }

    /// Grid cell `(row h, column w)` of `p`, or `None` when outside the window.
    pub fn pixel_of(&self, p: &Vec3) -> Option<(usize, usize)> {
        let d = p.norm();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let azimuth = p.y.atan2(p.x).to_degrees();
        let elevation = (p.z / d).clamp(-1.0, 1.0).asin().to_degrees();
        let w = ((self.fov_horizontal - azimuth) / self.eta_w).floor();
        let h = ((self.fov_up - elevation) / self.eta_h).floor();
        if w < 0.0 || h < 0.0 || w >= self.width as f64 || h >= self.height as f64 {
            return None;
        }
        Some((h as usize, w as usize))
    }

    /// Angular size of one pixel, radians (the larger of the two axes).
    pub fn pixel_angle(&self) -> f64 {
        self.eta_w.max(self.eta_h).to_radians()
    }
}

/// H×W grid of 3-vectors with a validity mask. Invalid cells hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3 {
    pub height: usize,
    pub width: usize,
    pub values: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl Grid3 {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![Vec3::zeros(); height * width],
            valid: vec![false; height * width],
        }
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize) -> usize {
        h * self.width + w
    }

    pub fn get(&self, h: usize, w: usize) -> Option<&Vec3> {
        let i = self.index(h, w);
        self.valid[i].then(|| &self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn same_shape(&self, other: &Grid3) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Row-major `3 × H × W` channel-first layout, zeros at invalid cells.
    pub fn to_channels(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for (i, v) in self.values.iter().enumerate() {
            if self.valid[i] {
                out[i] = v.x;
                out[n + i] = v.y;
                out[2 * n + i] = v.z;
            }
        }
        out
    }
}

/// Projected scan: each valid pixel holds the closest point mapped to it.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexMap {
    pub grid: Grid3,
    /// Non-finite input points skipped during projection.
    pub rejected: usize,
}

/// Unit normals on the vertex-map grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub grid: Grid3,
}

/// Projects `cloud` onto the grid, keeping the minimum-depth point per pixel.
pub fn project(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<VertexMap> {
    if cloud.is_empty() {
        return Err(Error::Empty("cannot project an empty cloud"));
    }
    let (grid, _, _, rejected) = project_points(&cloud.points, None, cfg);
    if rejected > 0 {
        log::warn!("projection skipped {rejected} non-finite points");
    }
    Ok(VertexMap { grid, rejected })
}

/// Shared projection core. Returns vertex grid, optional normal grid, the
/// source index of each pixel and the number of non-finite points skipped.
fn project_points(
    points: &[Vec3],
    normals: Option<(&[Vec3], &[bool])>,
    cfg: &ProjectionConfig,
) -> (Grid3, Option<Grid3>, Vec<Option<usize>>, usize) {
    let mut grid = Grid3::empty(cfg.height, cfg.width);
    let mut ngrid = normals.map(|_| Grid3::empty(cfg.height, cfg.width));
    let mut depth = vec![f64::INFINITY; cfg.height * cfg.width];
    let mut origin = vec![None; cfg.height * cfg.width];
    let mut rejected = 0;
    for (k, p) in points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            rejected += 1;
            continue;
        }
        let Some((h, w)) = cfg.pixel_of(p) else {
            continue;
        };
        let i = grid.index(h, w);
        let d = p.norm();
        if d < depth[i] {
            depth[i] = d;
            grid.values[i] = *p;
            grid.valid[i] = true;
            origin[i] = Some(k);
            if let (Some(ng), Some((ns, nvalid))) = (ngrid.as_mut(), normals) {
                ng.valid[i] = nvalid[k];
                ng.values[i] = if nvalid[k] { ns[k] } else { Vec3::zeros() };
            }
        }
    }
    (grid, ngrid, origin, rejected)
}

#[inline]
fn neighbor_weight(a: &Vec3, b: &Vec3) -> f64 {
    (-0.5 * (a.norm() - b.norm()).abs()).exp()
}

/// Normal map from 4-neighborhoods of the vertex map.
///
/// For each pixel with valid up/right/down/left neighbors the normal is the
/// normalized sum of depth-weighted cross products of consecutive neighbor
/// offsets, in the order (up, right), (right, down), (down, left), (left, up).
/// Border pixels, pixels with a missing neighbor and degenerate sums are
/// marked invalid.
pub fn compute_normal_map(v: &VertexMap) -> NormalMap {
    let g = &v.grid;
    let mut out = Grid3::empty(g.height, g.width);
    if g.height < 3 || g.width < 3 {
        return NormalMap { grid: out };
    }
    for h in 1..g.height - 1 {
        for w in 1..g.width - 1 {
            let Some(center) = g.get(h, w) else {
                continue;
            };
            let neighbors = [
                g.get(h - 1, w),
                g.get(h, w + 1),
                g.get(h + 1, w),
                g.get(h, w - 1),
            ];
            if neighbors.iter().any(Option::is_none) {
                continue;
            }
            let offsets: Vec<Vec3> = neighbors
                .iter()
                .map(|n| {
                    let n = n.expect("checked above");
                    neighbor_weight(n, center) * (n - center)
                })
                .collect();
            let mut sum = Vec3::zeros();
            for i in 0..4 {
                sum += offsets[i].cross(&offsets[(i + 1) % 4]);
            }
            let norm = sum.norm();
            if norm > 1e-12 && norm.is_finite() {
                let i = out.index(h, w);
                out.values[i] = sum / norm;
                out.valid[i] = true;
            }
        }
    }
    NormalMap { grid: out }
}

/// Remapped maps plus, for every output pixel, the input pixel it came from.
#[derive(Clone, Debug)]
pub struct RemappedMaps {
    pub vertex: VertexMap,
    pub normal: NormalMap,
    pub origin: Vec<Option<usize>>,
}

/// Transforms every valid vertex by `R v + t` and normal by `R n`, then
/// re-projects into a fresh grid of the same shape.
pub fn remap(
    v: &VertexMap,
    n: &NormalMap,
    pose: &Pose,
    cfg: &ProjectionConfig,
) -> Result<(VertexMap, NormalMap)> {
    let r = remap_indexed(v, n, pose, cfg)?;
    Ok((r.vertex, r.normal))
}

pub fn remap_indexed(
    v: &VertexMap,
    n: &NormalMap,
    pose: &Pose,
    cfg: &ProjectionConfig,
) -> Result<RemappedMaps> {
    if !v.grid.same_shape(&n.grid) {
        return Err(Error::shape(
            &[v.grid.height, v.grid.width],
            &[n.grid.height, n.grid.width],
        ));
    }
    if v.grid.height != cfg.height || v.grid.width != cfg.width {
        return Err(Error::shape(
            &[cfg.height, cfg.width],
            &[v.grid.height, v.grid.width],
        ));
    }
    let rot = pose.rotation_matrix();
    let mut pixels = Vec::new();
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut nvalid = Vec::new();
    for i in 0..v.grid.values.len() {
        if !v.grid.valid[i] {
            continue;
        }
        pixels.push(i);
        points.push(rot * v.grid.values[i] + pose.translation);
        normals.push(rot * n.grid.values[i]);
        nvalid.push(n.grid.valid[i]);
    }
    let (grid, ngrid, origin, _) = project_points(&points, Some((&normals, &nvalid)), cfg);
    Ok(RemappedMaps {
        vertex: VertexMap { grid, rejected: 0 },
        normal: NormalMap {
            grid: ngrid.expect("normals were supplied"),
        },
        origin: origin.into_iter().map(|o| o.map(|k| pixels[k])).collect(),
    })
}
