//! The full differentiable chain for one query:
//!
//! raw attributes → primitives → splats → BEV maps → confidence weighting →
//! similarity maps (positive and negatives) → peaks → losses
//!
//! plus its analytic gradient with respect to the raw attributes and the
//! per-pixel features and confidences. [`gradient_check`] compares it with
//! central differences.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, CameraModel, PinholeIntrinsics};
use crate::losses::{self, LossConfig, LossReport};
use crate::maps::FeatureMap;
use crate::matching::{self, PeakResult, SimilarityMap};
use crate::primitives::{self, GroundView, PrimitiveParams, PrimitiveSet, RawAttributes, RAW_CHANNELS};
use crate::renderer::{self, BevOutput, RenderSettings, Splat2D};

/// Everything about a query except the raw primitive attributes.
#[derive(Debug, Clone)]
pub struct Query {
    pub view: GroundView,
    pub params: PrimitiveParams,
    pub grid: BevGridSpec,
    pub settings: RenderSettings,
    pub sat_pos: FeatureMap,
    pub sat_negs: Vec<FeatureMap>,
    /// Similarity search radius in cells.
    pub radius: usize,
    /// Noisy location label as a similarity-map offset.
    pub label: (i64, i64),
    pub loss: LossConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub report: LossReport,
    pub peak: PeakResult,
    /// Fingerprint of every discrete choice made in the forward pass (sort
    /// order, contributing splats, α clamps, peak cells). Equal fingerprints
    /// mean the same smooth branch.
    pub signature: u64,
}

/// Gradient of `l_total` with respect to the query's free inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGradient {
    pub raw: RawAttributes,
    pub features: FeatureMap,
    pub confidence: FeatureMap,
}

impl ObjectiveGradient {
    pub fn raw_norm(&self) -> f64 {
        self.raw.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

struct Forward {
    set: PrimitiveSet,
    splats: Vec<Splat2D>,
    bev: BevOutput,
    weighted: FeatureMap,
    pos: SimilarityMap,
    negs: Vec<SimilarityMap>,
    report: LossReport,
    gps: losses::GpsTerm,
    signature: u64,
}

impl Query {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.settings.validate()?;
        if self.sat_negs.is_empty() {
            return Err(Error::Config("the objective needs at least one negative map".into()));
        }
        Ok(())
    }

    fn forward(&self, raw: &RawAttributes) -> Result<Forward> {
        let set = primitives::generate_primitives(&self.view, raw, &self.params)?;
        let splats = renderer::project_set(&set, &self.grid)?;
        let (bev, trace) = renderer::render_forward_traced(&splats, &self.grid, set.dim, &self.settings);
        let weighted = matching::weight_features(&bev.f_bev, &bev.c_bev)?;
        let beta = self.grid.beta;
        let pos = matching::similarity_map(&self.sat_pos, &weighted, self.radius, beta)?;
        let negs = self
            .sat_negs
            .iter()
            .map(|s| matching::similarity_map(s, &weighted, self.radius, beta))
            .collect::<Result<Vec<_>>>()?;
        let (report, gps) = losses::evaluate(&pos, &negs, self.label, &self.loss)?;

        let mut h = DefaultHasher::new();
        trace.hash(&mut h);
        for m in std::iter::once(&pos).chain(&negs) {
            matching::peak(m).offset.hash(&mut h);
        }
        gps.window.offset.hash(&mut h);
        (gps.global.value - gps.window.value).partial_cmp(&0.0).hash(&mut h);
        Ok(Forward {
            set,
            splats,
            bev,
            weighted,
            pos,
            negs,
            report,
            gps,
            signature: h.finish(),
        })
    }

    pub fn evaluate(&self, raw: &RawAttributes) -> Result<Evaluation> {
        let fw = self.forward(raw)?;
        Ok(Evaluation {
            report: fw.report,
            peak: matching::peak(&fw.pos),
            signature: fw.signature,
        })
    }

    pub fn evaluate_with_gradient(&self, raw: &RawAttributes) -> Result<(Evaluation, ObjectiveGradient)> {
        let fw = self.forward(raw)?;
        let beta = self.grid.beta;

        // Loss → selected similarity cells.
        let pos_peak = matching::peak(&fw.pos);
        let neg_peaks: Vec<PeakResult> = fw.negs.iter().map(matching::peak).collect();
        let neg_values: Vec<f64> = neg_peaks.iter().map(|p| p.value).collect();
        let (d_pos, d_negs) = losses::weakly_loss_backward(pos_peak.value, &neg_values, self.loss.alpha);
        let mut pos_cells = vec![(pos_peak.offset, d_pos)];
        if self.loss.lambda1 == 1 {
            pos_cells.extend(losses::gps_loss_backward(&fw.gps));
        }

        // Similarity → weighted BEV.
        let mut d_w = matching::similarity_backward(&self.sat_pos, &fw.weighted, self.radius, &pos_cells)?;
        for ((sat, p), g) in self.sat_negs.iter().zip(&neg_peaks).zip(&d_negs) {
            let part = matching::similarity_backward(sat, &fw.weighted, self.radius, &[(p.offset, *g)])?;
            d_w.data.iter_mut().zip(&part.data).for_each(|(a, b)| *a += b);
        }
        let (d_f, d_c) = matching::weight_features_backward(&fw.bev.f_bev, &fw.bev.c_bev, &d_w);

        // Renderer → splat parameters → primitive parameters → raw values.
        let bundle = renderer::render_backward(&fw.splats, &self.grid, &self.settings, &d_f, &d_c);
        let (h, w) = (self.view.height(), self.view.width());
        let dim = fw.set.dim;
        let mut g_raw = RawAttributes::zeros(self.params.n_p, h, w);
        let mut g_feat = FeatureMap::zeros(dim, h, w);
        let mut g_conf = FeatureMap::zeros(1, h, w);
        for (i, prim) in fw.set.primitives.iter().enumerate() {
            let (d_mean, d_scale, d_rot) =
                renderer::project_backward(prim, &fw.splats[i], &self.grid, bundle.d_mean2[i], bundle.d_inv_cov2[i]);
            let slot = raw.slot(prim.slot, prim.pixel);
            let g = primitives::activate_backward(
                &slot,
                self.params.max_offset,
                self.params.max_scale,
                d_mean,
                d_scale,
                d_rot,
                bundle.d_opacity[i],
            );
            for (ch, v) in g.iter().enumerate() {
                let k = g_raw.index(prim.slot, ch, prim.pixel);
                g_raw.data[k] += v;
            }
            for (ch, v) in bundle.feature(i).iter().enumerate() {
                g_feat.data[ch * h * w + prim.pixel] += v;
            }
            g_conf.data[prim.pixel] += bundle.d_confidence[i];
        }
        let _ = beta;
        Ok((
            Evaluation {
                report: fw.report,
                peak: pos_peak,
                signature: fw.signature,
            },
            ObjectiveGradient {
                raw: g_raw,
                features: g_feat,
                confidence: g_conf,
            },
        ))
    }
}

/// Parameter families reported by the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamClass {
    Feature,
    Confidence,
    Opacity,
    Offset,
    Scale,
    Rotation,
}

impl ParamClass {
    pub const ALL: [ParamClass; 6] = [
        ParamClass::Feature,
        ParamClass::Confidence,
        ParamClass::Opacity,
        ParamClass::Offset,
        ParamClass::Scale,
        ParamClass::Rotation,
    ];

    fn of_raw_channel(ch: usize) -> Self {
        match ch {
            0..=2 => ParamClass::Offset,
            3..=5 => ParamClass::Scale,
            6..=9 => ParamClass::Rotation,
            _ => ParamClass::Opacity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: ParamClass,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes whose ±h evaluations left the smooth branch of the base point.
    pub skipped: usize,
    pub classes: Vec<ClassReport>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
        for c in &other.classes {
            match self.classes.iter_mut().find(|m| m.class == c.class) {
                Some(m) => {
                    m.checked += c.checked;
                    m.skipped += c.skipped;
                    m.max_rel_error = m.max_rel_error.max(c.max_rel_error);
                }
                None => self.classes.push(*c),
            }
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of `l_total` against central differences
/// with step `h` on every raw attribute, feature and confidence value.
/// Probes that cross a discrete branch (see [`Evaluation::signature`]) are
/// counted as skipped instead of compared.
pub fn gradient_check(query: &Query, raw: &RawAttributes, h: f64, floor: f64) -> Result<GradCheckReport> {
    let (base, grad) = query.evaluate_with_gradient(raw)?;
    let mut classes: Vec<ClassReport> = ParamClass::ALL
        .iter()
        .map(|&class| ClassReport {
            class,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        })
        .collect();
    let mut record = |class: ParamClass, plus: Evaluation, minus: Evaluation, analytic: f64| {
        let c = classes.iter_mut().find(|c| c.class == class).expect("known class");
        if plus.signature != base.signature || minus.signature != base.signature {
            c.skipped += 1;
            return;
        }
        let numeric = (plus.report.l_total - minus.report.l_total) / (2.0 * h);
        c.checked += 1;
        c.max_rel_error = c.max_rel_error.max(relative_error(analytic, numeric, floor));
    };

    let mut probe = raw.clone();
    for i in 0..raw.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = query.evaluate(&probe)?;
        probe.data[i] = orig - h;
        let minus = query.evaluate(&probe)?;
        probe.data[i] = orig;
        let ch = (i / raw.pixels()) % RAW_CHANNELS;
        record(ParamClass::of_raw_channel(ch), plus, minus, grad.raw.data[i]);
    }

    let mut q = query.clone();
    for i in 0..query.view.features.data.len() {
        let orig = q.view.features.data[i];
        q.view.features.data[i] = orig + h;
        let plus = q.evaluate(raw)?;
        q.view.features.data[i] = orig - h;
        let minus = q.evaluate(raw)?;
        q.view.features.data[i] = orig;
        record(ParamClass::Feature, plus, minus, grad.features.data[i]);
    }
    for i in 0..query.view.confidence.data.len() {
        let orig = q.view.confidence.data[i];
        q.view.confidence.data[i] = orig + h;
        let plus = q.evaluate(raw)?;
        q.view.confidence.data[i] = orig - h;
        let minus = q.evaluate(raw)?;
        q.view.confidence.data[i] = orig;
        record(ParamClass::Confidence, plus, minus, grad.confidence.data[i]);
    }

    Ok(GradCheckReport {
        max_rel_error: classes.iter().map(|c| c.max_rel_error).fold(0.0, f64::max),
        checked: classes.iter().map(|c| c.checked).sum(),
        skipped: classes.iter().map(|c| c.skipped).sum(),
        classes,
    })
}

/// Small random query for gradient checks: a pinhole view whose primitives
/// land inside a 32×32 grid, a positive satellite map rendered from
/// perturbed attributes and random negatives.
pub fn random_gradcheck_query(seed: u64, splats: usize, dim: usize, settings: RenderSettings) -> Result<(Query, RawAttributes)> {
    if splats == 0 || dim == 0 {
        return Err(Error::domain("gradcheck needs at least one splat and one channel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_p = if splats % 2 == 0 { 2 } else { 1 };
    let pixels = splats / n_p;
    let w = (1..=8).rev().find(|d| pixels % d == 0).unwrap_or(1);
    let h = pixels / w;
    let k = PinholeIntrinsics::new(w as f64, w as f64, w as f64 / 2.0, h as f64 / 2.0)?;
    let depth = FeatureMap::from_vec(1, h, w, (0..h * w).map(|_| rng.gen_range(3.0..11.0)).collect())?;
    let features = FeatureMap::from_vec(dim, h, w, (0..dim * h * w).map(|_| standard_normal(&mut rng)).collect())?;
    let confidence = FeatureMap::from_vec(1, h, w, (0..h * w).map(|_| rng.gen_range(0.2..1.0)).collect())?;
    let view = GroundView {
        camera: CameraModel::Pinhole(k),
        depth,
        features,
        confidence,
    };
    let params = PrimitiveParams {
        n_p,
        ..PrimitiveParams::default()
    };
    let grid = BevGridSpec::new(32, 0.5, -8.0, -1.0)?;
    let mut raw = RawAttributes::zeros(n_p, h, w);
    for slot in 0..n_p {
        for p in 0..h * w {
            let mut v = [0.0; RAW_CHANNELS];
            for (ch, x) in v.iter_mut().enumerate() {
                *x = match ch {
                    0..=2 => 0.8 * standard_normal(&mut rng),
                    3..=5 => 1.0 + 0.5 * standard_normal(&mut rng),
                    6..=9 => standard_normal(&mut rng),
                    _ => 0.8 * standard_normal(&mut rng),
                };
            }
            raw.set_slot(slot, p, &v);
        }
    }
    let radius = 3;
    let mut query = Query {
        view,
        params,
        grid,
        settings,
        sat_pos: FeatureMap::zeros(dim, 32, 32),
        sat_negs: Vec::new(),
        radius,
        label: (1, 0),
        loss: LossConfig {
            alpha: 10.0,
            d: 1.0,
            lambda1: 1,
            negatives: 2,
        },
    };
    // Positive: the weighted render of jittered attributes, shifted by one
    // row, plus noise.
    let mut jitter = raw.clone();
    jitter.data.iter_mut().for_each(|v| *v += 0.3 * standard_normal(&mut rng));
    let set = primitives::generate_primitives(&query.view, &jitter, &query.params)?;
    let splats_j = renderer::project_set(&set, &query.grid)?;
    let bev = renderer::render_forward(&splats_j, &query.grid, dim, &RenderSettings::exact());
    let weighted = matching::weight_features(&bev.f_bev, &bev.c_bev)?;
    let mut sat = FeatureMap::zeros(dim, 32, 32);
    for ch in 0..dim {
        for r in 0..32 {
            for c in 0..32 {
                let src = if r >= 1 { weighted.get(ch, r - 1, c) } else { 0.0 };
                sat.set(ch, r, c, src + 0.05 * standard_normal(&mut rng));
            }
        }
    }
    query.sat_pos = sat;
    query.sat_negs = (0..query.loss.negatives)
        .map(|_| FeatureMap::from_vec(dim, 32, 32, (0..dim * 1024).map(|_| 0.3 * standard_normal(&mut rng)).collect()))
        .collect::<Result<_>>()?;
    query.validate()?;
    Ok((query, raw))
}

/// Standard normal draw (Box–Muller).
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
