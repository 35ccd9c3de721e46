//! Camera models, pixel back-projection and the metric BEV grid.
//!
//! World frame: +X to the right of the ground camera, +Y down, +Z forward
//! (right-handed). The BEV camera sits above the scene looking along +Y, so
//! a smaller Y is higher up and the BEV image plane is the XZ plane. BEV
//! rows follow world Z and columns follow world X.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl PinholeIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::domain(format!(
                "pinhole focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Projects a camera-frame point to continuous image coordinates
    /// `(u, v)`; `None` when the point is not in front of the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        if p[2] <= 0.0 {
            return None;
        }
        Some((self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanoramaGeometry {
    pub width: usize,
    pub height: usize,
}

impl PanoramaGeometry {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        let g = Self { width, height };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::domain(format!(
                "panorama must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Ground camera model. Pixel (row i, col j) of a pinhole image is centred
/// at image coordinates (j + 0.5, i + 0.5).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CameraModel {
    Pinhole(PinholeIntrinsics),
    Panorama(PanoramaGeometry),
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            CameraModel::Pinhole(k) => k.validate(),
            CameraModel::Panorama(g) => g.validate(),
        }
    }

    /// 3D point for pixel (row, col) of an image with the given size.
    pub fn backproject_pixel(&self, row: usize, col: usize, depth: f64, height: usize, width: usize) -> Result<Vec3> {
        match self {
            CameraModel::Pinhole(k) => Ok(backproject_pinhole(col as f64 + 0.5, row as f64 + 0.5, depth, k)),
            CameraModel::Panorama(g) => {
                if g.width != width || g.height != height {
                    return Err(Error::domain(format!(
                        "panorama geometry {}x{} does not match image {}x{}",
                        g.width, g.height, width, height
                    )));
                }
                let (u, v) = panorama_pixel_to_angles(col as f64, row as f64, g)?;
                backproject_panorama(u, v, depth)
            }
        }
    }

    /// Unit-depth ray for pixel (row, col): the point at depth 1.
    pub fn pixel_ray(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Vec3> {
        self.backproject_pixel(row, col, 1.0, height, width)
    }
}

/// `K⁻¹ · depth · [u, v, 1]ᵀ`.
pub fn backproject_pinhole(u: f64, v: f64, depth: f64, k: &PinholeIntrinsics) -> Vec3 {
    [(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth]
}

/// Scales `depth` along the unit direction for azimuth `u` and polar angle
/// `v` (measured from straight up, -Y).
pub fn backproject_panorama(u: f64, v: f64, depth: f64) -> Result<Vec3> {
    if !(0.0..=PI).contains(&v) {
        return Err(Error::domain(format!("polar angle {v} outside [0, pi]")));
    }
    let (sv, cv) = v.sin_cos();
    let (su, cu) = u.sin_cos();
    Ok([-sv * cu * depth, -cv * depth, -sv * su * depth])
}

/// Inverse of the panorama direction: angles `(u, v)` of a nonzero vector.
pub fn panorama_angles_of(p: Vec3) -> Option<(f64, f64)> {
    let r = crate::linalg::norm3(p);
    if r <= 0.0 {
        return None;
    }
    let v = (-p[1] / r).clamp(-1.0, 1.0).acos();
    let u = (-p[2]).atan2(-p[0]).rem_euclid(2.0 * PI);
    Some((u, v))
}

/// Pixel-centre convention: `u = 2π(u_px + ½)/W`, `v = π(v_px + ½)/H`.
pub fn panorama_pixel_to_angles(u_px: f64, v_px: f64, g: &PanoramaGeometry) -> Result<(f64, f64)> {
    if !(0.0..g.width as f64).contains(&u_px) || !(0.0..g.height as f64).contains(&v_px) {
        return Err(Error::domain(format!(
            "pixel ({u_px}, {v_px}) outside {}x{} panorama",
            g.width, g.height
        )));
    }
    Ok((
        2.0 * PI * (u_px + 0.5) / g.width as f64,
        PI * (v_px + 0.5) / g.height as f64,
    ))
}

/// Metric BEV grid. Cell (row, col) has its centre at world
/// `(x, z) = (origin_x + col·β, origin_z + row·β)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub size: usize,
    pub beta: f64,
    pub origin_x: f64,
    pub origin_z: f64,
}

impl BevGridSpec {
    pub fn new(size: usize, beta: f64, origin_x: f64, origin_z: f64) -> Result<Self> {
        let g = Self {
            size,
            beta,
            origin_x,
            origin_z,
        };
        g.validate()?;
        Ok(g)
    }

    /// Grid whose cell (size/2, size/2) is centred on the camera.
    pub fn centered(size: usize, beta: f64) -> Result<Self> {
        let half = (size / 2) as f64 * beta;
        Self::new(size, beta, -half, -half)
    }

    /// Grid of `size` cells spanning `extent` metres, centred on the camera.
    pub fn from_extent(size: usize, extent: f64) -> Result<Self> {
        if size == 0 {
            return Err(Error::domain("grid size must be at least 1"));
        }
        Self::centered(size, extent / size as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::domain("grid size must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::domain(format!("grid resolution must be positive, got {}", self.beta)));
        }
        if !self.origin_x.is_finite() || !self.origin_z.is_finite() {
            return Err(Error::domain("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.size * self.size
    }

    /// World (x, z) of a cell centre.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + col as f64 * self.beta,
            self.origin_z + row as f64 * self.beta,
        )
    }

    /// Integer cell containing a continuous cell coordinate, if inside.
    pub fn cell_of(&self, row: f64, col: f64) -> Option<(usize, usize)> {
        let r = row.round();
        let c = col.round();
        let n = self.size as f64;
        if r >= 0.0 && r < n && c >= 0.0 && c < n {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }
}

/// Orthographic top-down projection: drops Y and scales into cell units.
pub fn world_to_bev_cell(p: Vec3, grid: &BevGridSpec) -> (f64, f64) {
    ((p[2] - grid.origin_z) / grid.beta, (p[0] - grid.origin_x) / grid.beta)
}
