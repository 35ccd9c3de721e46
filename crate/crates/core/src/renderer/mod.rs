//! Orthographic splatting of feature Gaussians into BEV maps.
//!
//! Each primitive becomes a [`Splat2D`]: its mean dropped onto the XZ plane
//! (in cell units) and the XZ block of its 3D covariance, dilated by a
//! 0.3 cell² low-pass. Splats are composited front to back in ascending
//! world Y (highest first), ties broken by id:
//!
//! ```text
//! α_b = min(clamp, O_b · exp(-½ dᵀ Σ₂⁻¹ d))
//! F += f_b α_b T_b,  C += c_b α_b T_b,  T_{b+1} = T_b (1 - α_b)
//! ```
//!
//! [`render_forward`] is the tiled parallel path and [`render_backward`] its
//! analytic gradient. [`render_reference`] is a naive per-cell oracle.

mod backward;
mod forward;
mod reference;

pub use backward::{render_backward, GradientBundle};
pub use forward::{render_forward, render_forward_traced};
pub use reference::render_reference;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{world_to_bev_cell, BevGridSpec};
use crate::linalg::{Mat3, Quat, Sym2, Vec3};
use crate::maps::FeatureMap;
use crate::primitives::{covariance_backward, GaussianPrimitive, PrimitiveSet};

/// Low-pass dilation added to every projected covariance, in cell².
pub const COV_DILATION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    /// Continuous (row, col) cell coordinates.
    pub mean2: [f64; 2],
    /// Dilated 2D covariance in cell², rows/cols ordered (z, x).
    pub cov2: Sym2,
    pub inv_cov2: Sym2,
    pub base_opacity: f64,
    pub feature: Vec<f64>,
    pub confidence: f64,
    /// World Y of the mean; smaller is closer to the BEV camera.
    pub sort_key: f64,
    /// Three standard deviations along the major axis, in cells.
    pub radius: f64,
    pub id: usize,
}

/// Compositing thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub alpha_clamp: f64,
    /// Contributions with α below this are skipped.
    pub alpha_floor: f64,
    /// Traversal at a cell stops once T drops below this.
    pub transmittance_cutoff: f64,
    /// Footprint half-extent in standard deviations of the major axis.
    pub footprint_sigmas: f64,
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            alpha_clamp: 0.99,
            alpha_floor: 1.0 / 255.0,
            transmittance_cutoff: 1e-4,
            footprint_sigmas: 3.0,
            tile_size: 16,
        }
    }
}

impl RenderSettings {
    /// No α floor and no early termination; the footprint reaches 7σ where
    /// the kernel is below 3e-11, so only negligible tails are dropped.
    pub fn exact() -> Self {
        Self {
            alpha_floor: 0.0,
            transmittance_cutoff: 0.0,
            footprint_sigmas: 7.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_clamp > 0.0 && self.alpha_clamp < 1.0) {
            return Err(Error::Config(format!("alpha_clamp must lie in (0,1), got {}", self.alpha_clamp)));
        }
        if !(self.alpha_floor >= 0.0) || !(self.transmittance_cutoff >= 0.0) {
            return Err(Error::Config("alpha_floor and transmittance_cutoff must be non-negative".into()));
        }
        if !(self.footprint_sigmas > 0.0) || self.tile_size == 0 {
            return Err(Error::Config("footprint_sigmas and tile_size must be positive".into()));
        }
        Ok(())
    }
}

/// Rendered BEV maps: features `[C,S,S]`, confidence `[S,S]` and the
/// residual transmittance `[S,S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevOutput {
    pub f_bev: FeatureMap,
    pub c_bev: FeatureMap,
    pub final_t: FeatureMap,
}

impl BevOutput {
    pub fn empty(dim: usize, size: usize) -> Self {
        Self {
            f_bev: FeatureMap::zeros(dim, size, size),
            c_bev: FeatureMap::zeros(1, size, size),
            final_t: FeatureMap::filled(1, size, size, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.f_bev.channels
    }

    pub fn size(&self) -> usize {
        self.f_bev.height
    }
}

pub fn project_to_bev(p: &GaussianPrimitive, feature: &[f64], grid: &BevGridSpec, id: usize) -> Result<Splat2D> {
    let sigma = p.covariance();
    let b2 = grid.beta * grid.beta;
    // Orthographic top-down Jacobian selects the (z, x) block.
    let cov2 = Sym2::new(
        sigma[2][2] / b2 + COV_DILATION,
        sigma[2][0] / b2,
        sigma[0][0] / b2 + COV_DILATION,
    );
    let inv_cov2 = cov2
        .inverse()
        .ok_or_else(|| Error::domain(format!("projected covariance of primitive {id} is singular")))?;
    let (row, col) = world_to_bev_cell(p.mean, grid);
    Ok(Splat2D {
        mean2: [row, col],
        cov2,
        inv_cov2,
        base_opacity: p.opacity,
        feature: feature.to_vec(),
        confidence: p.confidence,
        sort_key: p.mean[1],
        radius: 3.0 * cov2.max_eigenvalue().sqrt(),
        id,
    })
}

/// Projects a whole set; splat `i` comes from primitive `i`.
pub fn project_set(set: &PrimitiveSet, grid: &BevGridSpec) -> Result<Vec<Splat2D>> {
    set.primitives
        .par_iter()
        .enumerate()
        .map(|(i, p)| project_to_bev(p, set.feature(i), grid, i))
        .collect()
}

/// Gradient of a primitive's 3D mean, scale and rotation given gradients on
/// its splat's `mean2` and `inv_cov2`.
///
/// `d_inv_cov2.b` is the derivative with respect to the shared off-diagonal
/// parameter (both entries move together).
pub fn project_backward(p: &GaussianPrimitive, splat: &Splat2D, grid: &BevGridSpec, d_mean2: [f64; 2], d_inv_cov2: Sym2) -> (Vec3, Vec3, Quat) {
    let d_mean = [d_mean2[1] / grid.beta, 0.0, d_mean2[0] / grid.beta];
    // Per-entry gradient of the inverse, then d(Σ⁻¹) = -Σ⁻¹ dΣ Σ⁻¹.
    let g = Sym2::new(d_inv_cov2.a, 0.5 * d_inv_cov2.b, d_inv_cov2.c);
    let s = splat.inv_cov2.sandwich(&g);
    let b2 = grid.beta * grid.beta;
    let mut d_sigma: Mat3 = [[0.0; 3]; 3];
    d_sigma[2][2] = -s.a / b2;
    d_sigma[2][0] = -s.b / b2;
    d_sigma[0][2] = -s.b / b2;
    d_sigma[0][0] = -s.c / b2;
    let (d_scale, d_rot) = covariance_backward(p.scale, p.rotation, &d_sigma);
    (d_mean, d_scale, d_rot)
}

/// Indices of `splats` in compositing order: ascending sort key, then id.
pub(crate) fn compositing_order(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&i, &j| {
        splats[i]
            .sort_key
            .total_cmp(&splats[j].sort_key)
            .then(splats[i].id.cmp(&splats[j].id))
    });
    order
}

/// Per-tile lists of positions into the compositing order.
pub(crate) struct TileBins {
    pub tile_size: usize,
    pub tiles_per_side: usize,
    pub bins: Vec<Vec<u32>>,
}

/// Compact per-splat record used in the inner loops.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Packed {
    pub m0: f64,
    pub m1: f64,
    pub inv: Sym2,
    pub opacity: f64,
    pub confidence: f64,
    pub extent2: f64,
    pub id: usize,
}

pub(crate) struct Prepared {
    /// Splats in compositing order.
    pub packed: Vec<Packed>,
    /// Input index of each packed entry.
    pub source: Vec<usize>,
    /// Features in compositing order, `len × dim`.
    pub features: Vec<f64>,
    pub bins: TileBins,
}

pub(crate) fn prepare(splats: &[Splat2D], grid: &BevGridSpec, dim: usize, settings: &RenderSettings) -> Prepared {
    let order = compositing_order(splats);
    let scale = settings.footprint_sigmas / 3.0;
    let mut packed = Vec::with_capacity(order.len());
    let mut features = Vec::with_capacity(order.len() * dim);
    for &i in &order {
        let s = &splats[i];
        let extent = s.radius * scale;
        packed.push(Packed {
            m0: s.mean2[0],
            m1: s.mean2[1],
            inv: s.inv_cov2,
            opacity: s.base_opacity,
            confidence: s.confidence,
            extent2: extent * extent,
            id: s.id,
        });
        features.extend_from_slice(&s.feature[..dim]);
    }
    let tile = settings.tile_size;
    let per_side = grid.size.div_ceil(tile);
    let mut bins = vec![Vec::new(); per_side * per_side];
    let last = grid.size as f64 - 1.0;
    for (k, p) in packed.iter().enumerate() {
        let e = p.extent2.sqrt();
        let (r0, r1, c0, c1) = if e.is_finite() {
            (p.m0 - e, p.m0 + e, p.m1 - e, p.m1 + e)
        } else {
            (0.0, last, 0.0, last)
        };
        if r1 < 0.0 || c1 < 0.0 || r0 > last || c0 > last || !(r0 <= r1 && c0 <= c1) {
            continue;
        }
        let r0 = r0.max(0.0).ceil() as usize;
        let c0 = c0.max(0.0).ceil() as usize;
        let r1 = r1.min(last).floor() as usize;
        let c1 = c1.min(last).floor() as usize;
        if r0 > r1 || c0 > c1 {
            continue;
        }
        for tr in r0 / tile..=r1 / tile {
            for tc in c0 / tile..=c1 / tile {
                bins[tr * per_side + tc].push(k as u32);
            }
        }
    }
    Prepared {
        packed,
        source: order,
        features,
        bins: TileBins {
            tile_size: tile,
            tiles_per_side: per_side,
            bins,
        },
    }
}

impl TileBins {
    /// Cell ranges (rows, cols) covered by a tile, clipped to the grid.
    pub fn tile_cells(&self, tile: usize, size: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let tr = tile / self.tiles_per_side;
        let tc = tile % self.tiles_per_side;
        let r0 = tr * self.tile_size;
        let c0 = tc * self.tile_size;
        (r0..(r0 + self.tile_size).min(size), c0..(c0 + self.tile_size).min(size))
    }
}
