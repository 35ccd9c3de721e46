use rayon::prelude::*;

use super::{prepare, Prepared, RenderSettings, Splat2D};
use crate::geometry::BevGridSpec;
use crate::linalg::Sym2;
use crate::maps::FeatureMap;

/// Gradients per splat, indexed like the input slice.
///
/// `d_inv_cov2.b` is the derivative with respect to the shared off-diagonal
/// entry of the symmetric inverse covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub dim: usize,
    pub d_feature: Vec<f64>,
    pub d_confidence: Vec<f64>,
    pub d_opacity: Vec<f64>,
    pub d_mean2: Vec<[f64; 2]>,
    pub d_inv_cov2: Vec<Sym2>,
}

impl GradientBundle {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            dim,
            d_feature: vec![0.0; n * dim],
            d_confidence: vec![0.0; n],
            d_opacity: vec![0.0; n],
            d_mean2: vec![[0.0; 2]; n],
            d_inv_cov2: vec![Sym2::new(0.0, 0.0, 0.0); n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_opacity.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.d_feature[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.d_feature.iter().chain(&self.d_confidence).chain(&self.d_opacity).all(|v| v.is_finite())
            && self.d_mean2.iter().all(|m| m[0].is_finite() && m[1].is_finite())
            && self.d_inv_cov2.iter().all(|s| s.a.is_finite() && s.b.is_finite() && s.c.is_finite())
    }
}

/// Stride of the per-entry scratch: features, confidence, opacity, mean (2),
/// inverse covariance (3).
fn stride(dim: usize) -> usize {
    dim + 7
}

struct Contribution {
    pos: u32,
    local: usize,
    alpha: f64,
    g: f64,
    t: f64,
    clamped: bool,
    d0: f64,
    d1: f64,
}

fn backward_tile(prep: &Prepared, tile: usize, size: usize, dim: usize, settings: &RenderSettings, d_f: &FeatureMap, d_c: &FeatureMap) -> Vec<f64> {
    let bin = &prep.bins.bins[tile];
    let st = stride(dim);
    let mut local = vec![0.0; bin.len() * st];
    if bin.is_empty() {
        return local;
    }
    let (rows, cols) = prep.bins.tile_cells(tile, size);
    let plane = size * size;
    let mut contribs: Vec<Contribution> = Vec::new();
    let mut acc_f = vec![0.0; dim];
    let mut up_f = vec![0.0; dim];
    for r in rows {
        for c in cols.clone() {
            let cell = r * size + c;
            let mut any = d_c.data[cell] != 0.0;
            for (ch, u) in up_f.iter_mut().enumerate() {
                *u = d_f.data[ch * plane + cell];
                any |= *u != 0.0;
            }
            if !any {
                continue;
            }
            // Replay the forward traversal for this cell.
            contribs.clear();
            let (pr, pc) = (r as f64, c as f64);
            let mut t = 1.0;
            for (li, &pos) in bin.iter().enumerate() {
                let s = &prep.packed[pos as usize];
                let d0 = pr - s.m0;
                let d1 = pc - s.m1;
                if d0 * d0 + d1 * d1 > s.extent2 {
                    continue;
                }
                let g = (-0.5 * s.inv.quad(d0, d1)).exp();
                let raw_alpha = s.opacity * g;
                let clamped = raw_alpha > settings.alpha_clamp;
                let alpha = if clamped { settings.alpha_clamp } else { raw_alpha };
                if alpha < settings.alpha_floor {
                    continue;
                }
                contribs.push(Contribution {
                    pos,
                    local: li,
                    alpha,
                    g,
                    t,
                    clamped,
                    d0,
                    d1,
                });
                t *= 1.0 - alpha;
                if t < settings.transmittance_cutoff {
                    break;
                }
            }
            // Back to front; acc holds what is composited behind the current
            // splat, normalised to its own transmittance.
            acc_f.iter_mut().for_each(|a| *a = 0.0);
            let up_c = d_c.data[cell];
            let mut acc_c = 0.0;
            for k in contribs.iter().rev() {
                let s = &prep.packed[k.pos as usize];
                let feat = &prep.features[k.pos as usize * dim..(k.pos as usize + 1) * dim];
                let w = k.alpha * k.t;
                let out = &mut local[k.local * st..(k.local + 1) * st];
                let mut d_alpha = 0.0;
                for ch in 0..dim {
                    out[ch] += up_f[ch] * w;
                    d_alpha += up_f[ch] * (feat[ch] - acc_f[ch]);
                    acc_f[ch] = k.alpha * feat[ch] + (1.0 - k.alpha) * acc_f[ch];
                }
                out[dim] += up_c * w;
                d_alpha += up_c * (s.confidence - acc_c);
                acc_c = k.alpha * s.confidence + (1.0 - k.alpha) * acc_c;
                d_alpha *= k.t;
                if k.clamped {
                    continue;
                }
                out[dim + 1] += d_alpha * k.g;
                let d_g = d_alpha * s.opacity;
                // ∂g/∂mean = g·Σ⁻¹d, ∂g/∂Σ⁻¹ = -½ g ddᵀ
                let ad0 = s.inv.a * k.d0 + s.inv.b * k.d1;
                let ad1 = s.inv.b * k.d0 + s.inv.c * k.d1;
                let gg = d_g * k.g;
                out[dim + 2] += gg * ad0;
                out[dim + 3] += gg * ad1;
                out[dim + 4] += -0.5 * gg * k.d0 * k.d0;
                out[dim + 5] += -gg * k.d0 * k.d1;
                out[dim + 6] += -0.5 * gg * k.d1 * k.d1;
            }
        }
    }
    local
}

/// Analytic gradient of [`super::render_forward`] with the same settings,
/// given upstream gradients on `f_bev` (`[C,S,S]`) and `c_bev` (`[S,S]`).
///
/// Per contributing splat b at a cell: `∂L/∂f_b = ∂L/∂F · α_b T_b` and
/// `∂L/∂α_b = T_b · ∂L/∂F · (f_b - f_acc)`, where `f_acc` is the
/// composite of everything behind b. Tiles are reduced in a fixed order, so
/// the result is independent of the thread count.
pub fn render_backward(splats: &[Splat2D], grid: &BevGridSpec, settings: &RenderSettings, d_f: &FeatureMap, d_c: &FeatureMap) -> GradientBundle {
    let dim = d_f.channels;
    let size = grid.size;
    assert_eq!((d_f.height, d_f.width), (size, size), "feature gradient must match the grid");
    assert_eq!((d_c.channels, d_c.height, d_c.width), (1, size, size), "confidence gradient must be [S,S]");
    let mut grads = GradientBundle::zeros(splats.len(), dim);
    if splats.is_empty() {
        return grads;
    }
    let prep = prepare(splats, grid, dim, settings);
    let locals: Vec<Vec<f64>> = (0..prep.bins.bins.len())
        .into_par_iter()
        .map(|tile| backward_tile(&prep, tile, size, dim, settings, d_f, d_c))
        .collect();
    let st = stride(dim);
    for (tile, local) in locals.iter().enumerate() {
        for (li, &pos) in prep.bins.bins[tile].iter().enumerate() {
            let i = prep.source[pos as usize];
            let v = &local[li * st..(li + 1) * st];
            for ch in 0..dim {
                grads.d_feature[i * dim + ch] += v[ch];
            }
            grads.d_confidence[i] += v[dim];
            grads.d_opacity[i] += v[dim + 1];
            grads.d_mean2[i][0] += v[dim + 2];
            grads.d_mean2[i][1] += v[dim + 3];
            let s = &mut grads.d_inv_cov2[i];
            s.a += v[dim + 4];
            s.b += v[dim + 5];
            s.c += v[dim + 6];
        }
    }
    grads
}
