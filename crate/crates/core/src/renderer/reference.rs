use super::{compositing_order, BevOutput, Splat2D};
use crate::geometry::BevGridSpec;

/// Naive oracle: every cell scans every splat in compositing order. Only the
/// α clamp is applied; no footprint test, α floor or early termination.
pub fn render_reference(splats: &[Splat2D], grid: &BevGridSpec, dim: usize, alpha_clamp: f64) -> BevOutput {
    let size = grid.size;
    let plane = size * size;
    let mut out = BevOutput::empty(dim, size);
    let order = compositing_order(splats);
    for r in 0..size {
        for c in 0..size {
            let cell = r * size + c;
            let mut t = 1.0;
            for &i in &order {
                let s = &splats[i];
                let d0 = r as f64 - s.mean2[0];
                let d1 = c as f64 - s.mean2[1];
                let g = (-0.5 * s.inv_cov2.quad(d0, d1)).exp();
                let alpha = (s.base_opacity * g).min(alpha_clamp);
                let w = alpha * t;
                for ch in 0..dim {
                    out.f_bev.data[ch * plane + cell] += s.feature[ch] * w;
                }
                out.c_bev.data[cell] += s.confidence * w;
                t *= 1.0 - alpha;
            }
            out.final_t.data[cell] = t;
        }
    }
    out
}
