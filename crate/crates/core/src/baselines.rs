//! Comparison BEV synthesis methods: flat-ground inverse perspective mapping
//! and direct point projection with a top-down z-buffer.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{panorama_angles_of, world_to_bev_cell, BevGridSpec, CameraModel};
use crate::linalg::Vec3;
use crate::maps::FeatureMap;
use crate::primitives::PrimitiveSet;

/// A BEV map with a per-cell flag (validity for IPM, occupancy for direct
/// projection).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMap {
    pub map: FeatureMap,
    pub mask: Vec<bool>,
}

impl MaskedMap {
    pub fn mask_map(&self) -> FeatureMap {
        let n = self.map.height;
        FeatureMap::from_vec(1, n, n, self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
            .expect("mask matches map")
    }
}

/// Where a camera ray leaves the origin and meets the ground plane
/// `Y = cam_height`; `None` for rays that are level or point upward.
pub fn ground_intersection(direction: Vec3, cam_height: f64) -> Option<Vec3> {
    if direction[1] <= 0.0 {
        return None;
    }
    let t = cam_height / direction[1];
    Some([direction[0] * t, cam_height, direction[2] * t])
}

/// Bilinear sample at continuous pixel-index coordinates, clamped at the
/// borders; columns wrap when `wrap` is set.
fn bilinear(map: &FeatureMap, row: f64, col: f64, wrap: bool, out: &mut [f64]) {
    let (h, w) = (map.height as f64, map.width as f64);
    let row = row.clamp(0.0, h - 1.0);
    let col = if wrap { col.rem_euclid(w) } else { col.clamp(0.0, w - 1.0) };
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let r0 = r0 as usize;
    let c0 = c0 as usize;
    let r1 = (r0 + 1).min(map.height - 1);
    let c1 = if wrap { (c0 + 1) % map.width } else { (c0 + 1).min(map.width - 1) };
    for (ch, o) in out.iter_mut().enumerate() {
        *o = (1.0 - fr) * ((1.0 - fc) * map.get(ch, r0, c0) + fc * map.get(ch, r0, c1))
            + fr * ((1.0 - fc) * map.get(ch, r1, c0) + fc * map.get(ch, r1, c1));
    }
}

/// Flat-ground inverse perspective mapping. Every BEV cell centre is placed on
/// the plane `Y = cam_height` (camera at the origin, +Y down), projected into
/// the ground image and bilinearly sampled.
pub fn ipm_project(features: &FeatureMap, camera: &CameraModel, cam_height: f64, grid: &BevGridSpec) -> Result<MaskedMap> {
    if !(cam_height > 0.0) {
        return Err(Error::domain(format!("camera height must be positive, got {cam_height}")));
    }
    camera.validate()?;
    grid.validate()?;
    if let CameraModel::Panorama(g) = camera {
        if g.width != features.width || g.height != features.height {
            return Err(Error::domain("panorama geometry does not match the feature map"));
        }
    }
    let n = grid.size;
    let c = features.channels;
    let cells: Vec<Option<Vec<f64>>> = (0..n * n)
        .into_par_iter()
        .map(|cell| {
            let (x, z) = grid.cell_center(cell / n, cell % n);
            let p = [x, cam_height, z];
            let (row, col, wrap) = match camera {
                CameraModel::Pinhole(k) => {
                    let (u, v) = k.project(p)?;
                    if !(0.0..features.width as f64).contains(&u) || !(0.0..features.height as f64).contains(&v) {
                        return None;
                    }
                    (v - 0.5, u - 0.5, false)
                }
                CameraModel::Panorama(_) => {
                    let (u, v) = panorama_angles_of(p)?;
                    (
                        v * features.height as f64 / PI - 0.5,
                        u * features.width as f64 / (2.0 * PI) - 0.5,
                        true,
                    )
                }
            };
            let mut out = vec![0.0; c];
            bilinear(features, row, col, wrap, &mut out);
            Some(out)
        })
        .collect();
    let mut map = FeatureMap::zeros(c, n, n);
    let mut mask = vec![false; n * n];
    for (cell, v) in cells.into_iter().enumerate() {
        if let Some(v) = v {
            mask[cell] = true;
            for (ch, x) in v.into_iter().enumerate() {
                map.data[ch * n * n + cell] = x;
            }
        }
    }
    Ok(MaskedMap { map, mask })
}

/// Drops every primitive mean into the cell that contains it. Per cell the
/// highest point (smallest world Y, then smallest id) wins and writes its
/// confidence-weighted feature.
pub fn direct_project(set: &PrimitiveSet, grid: &BevGridSpec) -> MaskedMap {
    let n = grid.size;
    let mut winner: Vec<Option<usize>> = vec![None; n * n];
    for (i, p) in set.primitives.iter().enumerate() {
        let (row, col) = world_to_bev_cell(p.mean, grid);
        let Some((r, c)) = grid.cell_of(row, col) else {
            continue;
        };
        let slot = &mut winner[r * n + c];
        // Ids increase with i, so strict comparison keeps the lower id on ties.
        if slot.is_none_or(|w| p.mean[1] < set.primitives[w].mean[1]) {
            *slot = Some(i);
        }
    }
    let mut map = FeatureMap::zeros(set.dim, n, n);
    let mut mask = vec![false; n * n];
    for (cell, w) in winner.into_iter().enumerate() {
        if let Some(i) = w {
            mask[cell] = true;
            let conf = set.primitives[i].confidence;
            for (ch, &f) in set.feature(i).iter().enumerate() {
                map.data[ch * n * n + cell] = conf * f;
            }
        }
    }
    MaskedMap { map, mask }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PanoramaGeometry, PinholeIntrinsics};
    use crate::linalg::IDENTITY_QUAT;
    use crate::primitives::GaussianPrimitive;

    fn prim(mean: Vec3, conf: f64) -> GaussianPrimitive {
        GaussianPrimitive {
            mean,
            scale: [0.1; 3],
            rotation: IDENTITY_QUAT,
            opacity: 0.5,
            confidence: conf,
            pixel: 0,
            slot: 0,
        }
    }

    #[test]
    fn level_ray_never_meets_ground() {
        assert!(ground_intersection([0.0, 0.0, 1.0], 1.65).is_none());
        assert!(ground_intersection([0.0, -0.2, 1.0], 1.65).is_none());
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let p = ground_intersection([0.0, h, h], 1.0).unwrap();
        assert!((p[2] - 1.0).abs() < 1e-12 && p[0].abs() < 1e-12);
    }

    #[test]
    fn forty_five_degree_pixel_lands_at_one_metre() {
        // Pixel (row 4, col 2) is centred on (u, v) = (2.5, 4.5); with f = 2
        // and principal point (2.5, 2.5) its ray is (0, 1, 1).
        let k = PinholeIntrinsics::new(2.0, 2.0, 2.5, 2.5).unwrap();
        let mut feats = FeatureMap::zeros(1, 6, 5);
        feats.set(0, 4, 2, 7.0);
        let grid = BevGridSpec::new(5, 0.5, -1.0, 0.0).unwrap();
        let out = ipm_project(&feats, &CameraModel::Pinhole(k), 1.0, &grid).unwrap();
        // cell containing (x, z) = (0, 1)
        let (r, c) = grid.cell_of(2.0, 2.0).unwrap();
        assert!(out.mask[r * 5 + c]);
        assert!((out.map.get(0, r, c) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn cells_behind_pinhole_are_invalid() {
        let k = PinholeIntrinsics::new(50.0, 50.0, 32.0, 16.0).unwrap();
        let feats = FeatureMap::filled(2, 32, 64, 1.0);
        let grid = BevGridSpec::centered(40, 0.5).unwrap();
        let out = ipm_project(&feats, &CameraModel::Pinhole(k), 1.65, &grid).unwrap();
        for r in 0..40 {
            for c in 0..40 {
                let (_, z) = grid.cell_center(r, c);
                if z <= 0.0 {
                    assert!(!out.mask[r * 40 + c]);
                }
            }
        }
        assert!(out.mask.iter().any(|&m| m));
        assert!(ipm_project(&feats, &CameraModel::Pinhole(k), 0.0, &grid).is_err());
    }

    #[test]
    fn lowering_pinhole_never_invalidates() {
        let k = PinholeIntrinsics::new(40.0, 40.0, 32.0, 12.0).unwrap();
        let feats = FeatureMap::filled(1, 24, 64, 1.0);
        let grid = BevGridSpec::centered(40, 0.5).unwrap();
        let cam = CameraModel::Pinhole(k);
        let heights = [3.0, 2.0, 1.65, 1.0, 0.5];
        for pair in heights.windows(2) {
            let high = ipm_project(&feats, &cam, pair[0], &grid).unwrap();
            let low = ipm_project(&feats, &cam, pair[1], &grid).unwrap();
            for (h, l) in high.mask.iter().zip(&low.mask) {
                assert!(!h || *l);
            }
        }
    }

    #[test]
    fn panorama_ipm_covers_the_grid() {
        let g = PanoramaGeometry::new(32, 16).unwrap();
        let mut feats = FeatureMap::zeros(1, 16, 32);
        for r in 0..16 {
            for c in 0..32 {
                feats.set(0, r, c, r as f64);
            }
        }
        let grid = BevGridSpec::centered(9, 1.0).unwrap();
        let out = ipm_project(&feats, &CameraModel::Panorama(g), 1.65, &grid).unwrap();
        assert!(out.mask.iter().all(|&m| m));
        // farther cells look closer to the horizon (smaller rows)
        let centre = out.map.get(0, 4, 4);
        let edge = out.map.get(0, 4, 8);
        assert!(centre > edge && edge >= 7.5);
    }

    #[test]
    fn highest_point_wins() {
        let grid = BevGridSpec::new(4, 1.0, 0.0, 0.0).unwrap();
        let mut set = PrimitiveSet::empty(1);
        set.push(prim([1.0, 1.0, 1.0], 1.0), &[3.0]);
        set.push(prim([1.2, -2.0, 0.9], 0.5), &[8.0]);
        let out = direct_project(&set, &grid);
        assert_eq!(out.map.get(0, 1, 1), 4.0);
        assert_eq!(out.mask.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn empty_and_duplicates() {
        let grid = BevGridSpec::new(3, 1.0, 0.0, 0.0).unwrap();
        let out = direct_project(&PrimitiveSet::empty(2), &grid);
        assert!(out.map.data.iter().all(|&v| v == 0.0));
        assert!(out.mask.iter().all(|&m| !m));

        let mut set = PrimitiveSet::empty(1);
        set.push(prim([0.0, 0.0, 0.0], 1.0), &[1.0]);
        set.push(prim([0.1, -1.0, 0.0], 1.0), &[2.0]);
        set.push(prim([2.0, 0.0, 2.0], 1.0), &[5.0]);
        let once = direct_project(&set, &grid);
        let mut dup = set.clone();
        dup.push(set.primitives[1], &[2.0]);
        dup.push(set.primitives[1], &[2.0]);
        assert_eq!(direct_project(&dup, &grid), once);
    }
}
