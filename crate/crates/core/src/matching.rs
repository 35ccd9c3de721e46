//! Confidence-weighted cosine similarity between a satellite feature map and
//! a rendered BEV map over a window of integer translations.
//!
//! Both maps share the same `S×S` grid. For an offset `(Δr, Δc)` the BEV
//! cell `u` is compared with satellite cell `u + Δ` over the overlapping
//! region. The satellite norm is taken over the BEV map's support inside
//! that region (cells where any BEV channel is nonzero), so satellite cells
//! the ground view never observed do not dilute the score:
//!
//! ```text
//! P(Δ) = Σ_u ⟨s(u+Δ), w(u)⟩ / (‖s(·+Δ)‖_supp · ‖w‖_overlap)
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::FeatureMap;
use crate::tensor_io::TensorContainer;

const NORM_EPS: f64 = 1e-12;

/// `(2R+1)²` similarity values indexed by integer cell offsets in `[-R, R]²`,
/// stored row-major from `(-R, -R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub radius: usize,
    pub beta: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakResult {
    /// (Δrow, Δcol) in cells.
    pub offset: (i64, i64),
    pub value: f64,
    /// (Δz, Δx) in metres.
    pub offset_m: (f64, f64),
}

/// JSON sidecar stored next to a similarity tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySidecar {
    pub r: usize,
    pub beta: f64,
}

impl SimilarityMap {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn index(&self, dr: i64, dc: i64) -> usize {
        let r = self.radius as i64;
        debug_assert!(dr.abs() <= r && dc.abs() <= r);
        ((dr + r) as usize) * self.side() + (dc + r) as usize
    }

    pub fn offset_of(&self, index: usize) -> (i64, i64) {
        let r = self.radius as i64;
        ((index / self.side()) as i64 - r, (index % self.side()) as i64 - r)
    }

    pub fn get(&self, dr: i64, dc: i64) -> f64 {
        self.values[self.index(dr, dc)]
    }

    pub fn to_tensor(&self) -> Result<TensorContainer> {
        TensorContainer::from_f64(vec![self.side(), self.side()], self.values.clone())
    }

    pub fn sidecar(&self) -> SimilaritySidecar {
        SimilaritySidecar {
            r: self.radius,
            beta: self.beta,
        }
    }

    pub fn from_parts(t: &TensorContainer, sidecar: &SimilaritySidecar) -> Result<Self> {
        let side = 2 * sidecar.r + 1;
        if t.shape() != [side, side] {
            return Err(Error::domain(format!(
                "similarity tensor {:?} does not match radius {}",
                t.shape(),
                sidecar.r
            )));
        }
        Ok(Self {
            radius: sidecar.r,
            beta: sidecar.beta,
            values: t.to_f64_vec(),
        })
    }
}

/// Per-channel product `c_bev · f_bev`.
pub fn weight_features(f_bev: &FeatureMap, c_bev: &FeatureMap) -> Result<FeatureMap> {
    if c_bev.channels != 1 || c_bev.height != f_bev.height || c_bev.width != f_bev.width {
        return Err(Error::domain(format!(
            "confidence map {}x{}x{} does not match features {}x{}",
            c_bev.channels, c_bev.height, c_bev.width, f_bev.height, f_bev.width
        )));
    }
    let plane = f_bev.plane();
    let mut out = f_bev.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v *= c_bev.data[i % plane];
    }
    Ok(out)
}

/// Gradients of [`weight_features`] with respect to both inputs.
pub fn weight_features_backward(f_bev: &FeatureMap, c_bev: &FeatureMap, d_w: &FeatureMap) -> (FeatureMap, FeatureMap) {
    let plane = f_bev.plane();
    let mut d_f = d_w.clone();
    let mut d_c = FeatureMap::zeros(1, f_bev.height, f_bev.width);
    for (i, g) in d_f.data.iter_mut().enumerate() {
        let cell = i % plane;
        d_c.data[cell] += *g * f_bev.data[i];
        *g *= c_bev.data[cell];
    }
    (d_f, d_c)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Overlap of the BEV grid with the satellite grid shifted by `d`, as a
/// half-open range of BEV indices along one axis.
#[inline]
fn overlap(size: usize, d: i64) -> (usize, usize) {
    let s = size as i64;
    ((-d).max(0) as usize, (s - d).min(s).max(0) as usize)
}

/// Scan helpers shared by the forward map and its backward pass.
struct Scan<'a> {
    sat: &'a FeatureMap,
    bev: &'a FeatureMap,
    /// Σ over channels of s², per satellite cell.
    sat_energy: Vec<f64>,
    /// Per BEV cell: any channel nonzero.
    support: Vec<bool>,
    /// Per BEV row, the half-open column range holding the support.
    bev_cols: Vec<(usize, usize)>,
}

impl<'a> Scan<'a> {
    fn new(sat: &'a FeatureMap, bev: &'a FeatureMap) -> Self {
        let (h, w) = (bev.height, bev.width);
        let plane = h * w;
        let support: Vec<bool> = (0..plane).map(|i| (0..bev.channels).any(|ch| bev.data[ch * plane + i] != 0.0)).collect();
        let sat_energy = (0..plane)
            .map(|i| (0..sat.channels).map(|ch| sat.data[ch * plane + i].powi(2)).sum())
            .collect();
        let bev_cols = (0..h)
            .map(|r| {
                let row = &support[r * w..(r + 1) * w];
                match row.iter().position(|&b| b) {
                    Some(first) => (first, w - row.iter().rev().position(|&b| b).unwrap()),
                    None => (0, 0),
                }
            })
            .collect();
        Self {
            sat,
            bev,
            sat_energy,
            support,
            bev_cols,
        }
    }

    /// (numerator, ‖s‖² over the support, ‖w‖²) for offset (dr, dc).
    fn terms(&self, dr: i64, dc: i64) -> (f64, f64, f64) {
        let n = self.bev.height;
        let (r0, r1) = overlap(n, dr);
        let (c0, c1) = overlap(n, dc);
        let mut num = 0.0;
        let mut ss = 0.0;
        let mut ww = 0.0;
        let w = self.bev.width;
        for r in r0..r1 {
            let (nz0, nz1) = self.bev_cols[r];
            let a = nz0.max(c0);
            let b = nz1.min(c1);
            if a >= b {
                continue;
            }
            let sr = (r as i64 + dr) as usize;
            let sa = (a as i64 + dc) as usize;
            let energy = &self.sat_energy[sr * w + sa..sr * w + sa + (b - a)];
            for (k, e) in energy.iter().enumerate() {
                if self.support[r * w + a + k] {
                    ss += e;
                }
            }
            for ch in 0..self.bev.channels {
                let base = ch * n * w;
                let brow = &self.bev.data[base + r * w + a..base + r * w + b];
                let srow = &self.sat.data[base + sr * w + sa..base + sr * w + sa + (b - a)];
                num += dot(brow, srow);
                ww += dot(brow, brow);
            }
        }
        (num, ss, ww)
    }
}

fn check_inputs(f_sat: &FeatureMap, f_bev_w: &FeatureMap, r: usize) -> Result<()> {
    if !f_sat.same_shape(f_bev_w) || f_sat.height != f_sat.width {
        return Err(Error::domain(format!(
            "satellite {}x{}x{} and BEV {}x{}x{} maps must be equal and square",
            f_sat.channels, f_sat.height, f_sat.width, f_bev_w.channels, f_bev_w.height, f_bev_w.width
        )));
    }
    if r + 1 > f_sat.height {
        return Err(Error::domain(format!(
            "search radius {r} too large for a {}-cell map",
            f_sat.height
        )));
    }
    Ok(())
}

#[inline]
fn cosine(num: f64, ss: f64, ww: f64) -> f64 {
    let (ns, nw) = (ss.sqrt(), ww.sqrt());
    if ns < NORM_EPS || nw < NORM_EPS {
        0.0
    } else {
        num / (ns * nw)
    }
}

/// Similarity for every offset in `[-r, r]²`.
pub fn similarity_map(f_sat: &FeatureMap, f_bev_w: &FeatureMap, r: usize, beta: f64) -> Result<SimilarityMap> {
    check_inputs(f_sat, f_bev_w, r)?;
    let scan = Scan::new(f_sat, f_bev_w);
    let side = 2 * r + 1;
    let ri = r as i64;
    let values = (0..side * side)
        .into_par_iter()
        .map(|k| {
            let (num, ss, ww) = scan.terms((k / side) as i64 - ri, (k % side) as i64 - ri);
            cosine(num, ss, ww)
        })
        .collect();
    Ok(SimilarityMap { radius: r, beta, values })
}

/// Gradient with respect to `f_bev_w` given gradients on selected offsets.
pub fn similarity_backward(f_sat: &FeatureMap, f_bev_w: &FeatureMap, r: usize, d_values: &[((i64, i64), f64)]) -> Result<FeatureMap> {
    check_inputs(f_sat, f_bev_w, r)?;
    let scan = Scan::new(f_sat, f_bev_w);
    let mut grad = FeatureMap::zeros(f_bev_w.channels, f_bev_w.height, f_bev_w.width);
    let n = f_bev_w.height;
    for &((dr, dc), g) in d_values {
        if g == 0.0 {
            continue;
        }
        let (num, ss, ww) = scan.terms(dr, dc);
        let (ns, nw) = (ss.sqrt(), ww.sqrt());
        if ns < NORM_EPS || nw < NORM_EPS {
            continue;
        }
        let value = num / (ns * nw);
        let a = g / (ns * nw);
        let b = g * value / ww;
        let (r0, r1) = overlap(n, dr);
        let (c0, c1) = overlap(n, dc);
        for ch in 0..f_bev_w.channels {
            for row in r0..r1 {
                let sr = (row as i64 + dr) as usize;
                for col in c0..c1 {
                    let sc = (col as i64 + dc) as usize;
                    let i = f_bev_w.index(ch, row, col);
                    grad.data[i] += a * f_sat.get(ch, sr, sc) - b * f_bev_w.data[i];
                }
            }
        }
    }
    Ok(grad)
}

/// Maximum value; ties go to the smallest row-major offset index.
pub fn peak(m: &SimilarityMap) -> PeakResult {
    let mut best = 0;
    for (i, &v) in m.values.iter().enumerate() {
        if v > m.values[best] {
            best = i;
        }
    }
    result_at(m, best)
}

fn result_at(m: &SimilarityMap, index: usize) -> PeakResult {
    let offset = m.offset_of(index);
    PeakResult {
        offset,
        value: m.values[index],
        offset_m: (offset.0 as f64 * m.beta, offset.1 as f64 * m.beta),
    }
}

/// Peak restricted to the square window of half-width `half` cells around
/// `center`, clipped to the map; `None` when nothing remains.
pub fn peak_in_window(m: &SimilarityMap, center: (i64, i64), half: i64) -> Option<PeakResult> {
    let r = m.radius as i64;
    let (r0, r1) = ((center.0 - half).max(-r), (center.0 + half).min(r));
    let (c0, c1) = ((center.1 - half).max(-r), (center.1 + half).min(r));
    if r0 > r1 || c0 > c1 {
        return None;
    }
    let mut best: Option<usize> = None;
    for dr in r0..=r1 {
        for dc in c0..=c1 {
            let i = m.index(dr, dc);
            if best.is_none_or(|b| m.values[i] > m.values[b]) {
                best = Some(i);
            }
        }
    }
    best.map(|i| result_at(m, i))
}

/// Bilinear rotation of every channel about the map centre (cells outside
/// the source read as zero).
pub fn rotate_map(map: &FeatureMap, angle: f64) -> FeatureMap {
    let mut out = FeatureMap::zeros(map.channels, map.height, map.width);
    let cy = (map.height / 2) as f64;
    let cx = (map.width / 2) as f64;
    let (s, c) = angle.sin_cos();
    for r in 0..map.height {
        for col in 0..map.width {
            let y = r as f64 - cy;
            let x = col as f64 - cx;
            // inverse rotation into the source
            let sy = c * y - s * x + cy;
            let sx = s * y + c * x + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            for ch in 0..map.channels {
                let mut v = 0.0;
                for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let (yy, xx) = (y0 + dy, x0 + dx);
                        if yy >= 0.0 && xx >= 0.0 && (yy as usize) < map.height && (xx as usize) < map.width && wy * wx > 0.0 {
                            v += wy * wx * map.get(ch, yy as usize, xx as usize);
                        }
                    }
                }
                out.set(ch, r, col, v);
            }
        }
    }
    out
}

/// Exhaustive orientation search: rotates the BEV map by `k·2π/n_angles`
/// and keeps the rotation whose similarity peak is highest (first wins on
/// ties). Returns the angle with its map.
pub fn similarity_with_rotation(f_sat: &FeatureMap, f_bev_w: &FeatureMap, r: usize, beta: f64, n_angles: usize) -> Result<(f64, SimilarityMap)> {
    if n_angles == 0 {
        return Err(Error::domain("rotation search needs at least one angle"));
    }
    let mut best: Option<(f64, SimilarityMap, f64)> = None;
    for k in 0..n_angles {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / n_angles as f64;
        let rotated = if k == 0 { f_bev_w.clone() } else { rotate_map(f_bev_w, angle) };
        let m = similarity_map(f_sat, &rotated, r, beta)?;
        let v = peak(&m).value;
        if best.as_ref().is_none_or(|b| v > b.2) {
            best = Some((angle, m, v));
        }
    }
    let (angle, m, _) = best.expect("at least one angle");
    Ok((angle, m))
}
