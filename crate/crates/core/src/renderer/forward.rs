use rayon::prelude::*;

use super::{prepare, BevOutput, Prepared, RenderSettings, Splat2D};
use crate::geometry::BevGridSpec;

struct TileOut {
    f: Vec<f64>,
    c: Vec<f64>,
    t: Vec<f64>,
    trace: Vec<u64>,
}

const TRACE_SEED: u64 = 0xcbf2_9ce4_8422_2325;

#[inline]
fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0000_0100_0000_01b3)
}

fn render_tile(prep: &Prepared, tile: usize, size: usize, dim: usize, settings: &RenderSettings, trace: bool) -> TileOut {
    let (rows, cols) = prep.bins.tile_cells(tile, size);
    let n = rows.len() * cols.len();
    let mut out = TileOut {
        f: vec![0.0; n * dim],
        c: vec![0.0; n],
        t: vec![1.0; n],
        trace: if trace { vec![TRACE_SEED; n] } else { Vec::new() },
    };
    let bin = &prep.bins.bins[tile];
    let mut k = 0;
    for r in rows.clone() {
        for c in cols.clone() {
            let (pr, pc) = (r as f64, c as f64);
            let mut t = 1.0;
            let mut conf = 0.0;
            let mut h = TRACE_SEED;
            let f = &mut out.f[k * dim..(k + 1) * dim];
            for &pos in bin {
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
                let w = alpha * t;
                let feat = &prep.features[pos as usize * dim..(pos as usize + 1) * dim];
                for (acc, &x) in f.iter_mut().zip(feat) {
                    *acc += x * w;
                }
                conf += s.confidence * w;
                if trace {
                    h = mix(h, ((s.id as u64) << 1) | clamped as u64);
                }
                t *= 1.0 - alpha;
                if t < settings.transmittance_cutoff {
                    break;
                }
            }
            out.c[k] = conf;
            out.t[k] = t;
            if trace {
                out.trace[k] = h;
            }
            k += 1;
        }
    }
    out
}

fn render_impl(splats: &[Splat2D], grid: &BevGridSpec, dim: usize, settings: &RenderSettings, trace: bool) -> (BevOutput, Vec<u64>) {
    let size = grid.size;
    let mut output = BevOutput::empty(dim, size);
    let mut cell_trace = if trace { vec![TRACE_SEED; size * size] } else { Vec::new() };
    if splats.is_empty() {
        return (output, cell_trace);
    }
    let prep = prepare(splats, grid, dim, settings);
    let tiles: Vec<TileOut> = (0..prep.bins.bins.len())
        .into_par_iter()
        .map(|tile| render_tile(&prep, tile, size, dim, settings, trace))
        .collect();
    let plane = size * size;
    for (tile, out) in tiles.into_iter().enumerate() {
        let (rows, cols) = prep.bins.tile_cells(tile, size);
        let mut k = 0;
        for r in rows {
            for c in cols.clone() {
                let cell = r * size + c;
                for ch in 0..dim {
                    output.f_bev.data[ch * plane + cell] = out.f[k * dim + ch];
                }
                output.c_bev.data[cell] = out.c[k];
                output.final_t.data[cell] = out.t[k];
                if trace {
                    cell_trace[cell] = out.trace[k];
                }
                k += 1;
            }
        }
    }
    (output, cell_trace)
}

/// Tiled front-to-back compositing. The result depends only on the
/// compositing order, never on input order or thread count.
pub fn render_forward(splats: &[Splat2D], grid: &BevGridSpec, dim: usize, settings: &RenderSettings) -> BevOutput {
    render_impl(splats, grid, dim, settings, false).0
}

/// Forward pass plus a per-cell fingerprint of which splats contributed and
/// whether their α was clamped. Two evaluations with equal fingerprints lie
/// on the same smooth branch of the renderer.
pub fn render_forward_traced(splats: &[Splat2D], grid: &BevGridSpec, dim: usize, settings: &RenderSettings) -> (BevOutput, Vec<u64>) {
    render_impl(splats, grid, dim, settings, true)
}
