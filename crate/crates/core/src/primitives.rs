//! Lifting ground-view pixels into 3D feature Gaussians.
//!
//! Each pixel is back-projected with its depth, then `n_p` primitives are
//! spawned around it from raw (unbounded) attributes: a bounded offset, a
//! bounded anisotropic scale, a rotation quaternion and an opacity. Every
//! primitive of a pixel carries that pixel's feature vector and confidence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::linalg::{self, Mat3, Quat, Vec3, IDENTITY_QUAT};
use crate::maps::FeatureMap;
use crate::tensor_io::TensorContainer;

/// Raw values per primitive slot: 3 offset, 3 scale, 4 quaternion, 1 opacity.
pub const RAW_CHANNELS: usize = 11;
pub const RAW_OFFSET: usize = 0;
pub const RAW_SCALE: usize = 3;
pub const RAW_QUAT: usize = 6;
pub const RAW_OPACITY: usize = 10;

const QUAT_EPS: f64 = 1e-12;

/// Raw attribute maps laid out as `[n_p, 11, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAttributes {
    pub n_p: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RawAttributes {
    pub fn zeros(n_p: usize, height: usize, width: usize) -> Self {
        Self {
            n_p,
            height,
            width,
            data: vec![0.0; n_p * RAW_CHANNELS * height * width],
        }
    }

    /// Every slot initialised to the same raw vector.
    pub fn constant(n_p: usize, height: usize, width: usize, slot: [f64; RAW_CHANNELS]) -> Self {
        let mut raw = Self::zeros(n_p, height, width);
        for k in 0..n_p {
            for p in 0..height * width {
                raw.set_slot(k, p, &slot);
            }
        }
        raw
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, slot: usize, channel: usize, pixel: usize) -> usize {
        (slot * RAW_CHANNELS + channel) * self.pixels() + pixel
    }

    pub fn slot(&self, slot: usize, pixel: usize) -> [f64; RAW_CHANNELS] {
        let mut out = [0.0; RAW_CHANNELS];
        for (ch, v) in out.iter_mut().enumerate() {
            *v = self.data[self.index(slot, ch, pixel)];
        }
        out
    }

    pub fn set_slot(&mut self, slot: usize, pixel: usize, values: &[f64; RAW_CHANNELS]) {
        for (ch, &v) in values.iter().enumerate() {
            let i = self.index(slot, ch, pixel);
            self.data[i] = v;
        }
    }

    pub fn to_tensor(&self) -> Result<TensorContainer> {
        TensorContainer::from_f64(
            vec![self.n_p, RAW_CHANNELS, self.height, self.width],
            self.data.clone(),
        )
    }

    pub fn from_tensor(t: &TensorContainer) -> Result<Self> {
        match *t.shape() {
            [n_p, RAW_CHANNELS, h, w] => Ok(Self {
                n_p,
                height: h,
                width: w,
                data: t.to_f64_vec(),
            }),
            ref other => Err(Error::domain(format!(
                "raw attributes must be [N_p, 11, H, W], got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrimitiveParams {
    pub n_p: usize,
    pub max_offset: f64,
    pub max_scale: f64,
}

impl Default for PrimitiveParams {
    fn default() -> Self {
        Self {
            n_p: 3,
            max_offset: 0.5,
            max_scale: 0.5,
        }
    }
}

impl PrimitiveParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_p == 0 {
            return Err(Error::domain("n_p must be at least 1"));
        }
        if !(self.max_offset > 0.0) || !(self.max_scale > 0.0) {
            return Err(Error::domain(format!(
                "max_offset and max_scale must be positive, got {} and {}",
                self.max_offset, self.max_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activated {
    pub offset: Vec3,
    pub scale: Vec3,
    pub rotation: Quat,
    pub opacity: f64,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bounded activations: `max_offset·tanh`, `max_scale·sigmoid`, `sigmoid`
/// opacity and a normalised quaternion (identity when the raw one vanishes).
pub fn activate_attributes(raw: &[f64; RAW_CHANNELS], max_offset: f64, max_scale: f64) -> Result<Activated> {
    if !(max_offset > 0.0) || !(max_scale > 0.0) {
        return Err(Error::domain("max_offset and max_scale must be positive"));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(format!("raw attribute channel {i} is not finite")));
    }
    let offset = [
        max_offset * raw[RAW_OFFSET].tanh(),
        max_offset * raw[RAW_OFFSET + 1].tanh(),
        max_offset * raw[RAW_OFFSET + 2].tanh(),
    ];
    let scale = [
        max_scale * sigmoid(raw[RAW_SCALE]),
        max_scale * sigmoid(raw[RAW_SCALE + 1]),
        max_scale * sigmoid(raw[RAW_SCALE + 2]),
    ];
    let q = [raw[RAW_QUAT], raw[RAW_QUAT + 1], raw[RAW_QUAT + 2], raw[RAW_QUAT + 3]];
    let n = linalg::quat_norm(q);
    let rotation = if n < QUAT_EPS {
        IDENTITY_QUAT
    } else {
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    };
    Ok(Activated {
        offset,
        scale,
        rotation,
        opacity: sigmoid(raw[RAW_OPACITY]),
    })
}

/// Gradient of the activations with respect to the raw slot values.
pub fn activate_backward(
    raw: &[f64; RAW_CHANNELS],
    max_offset: f64,
    max_scale: f64,
    d_offset: Vec3,
    d_scale: Vec3,
    d_rotation: Quat,
    d_opacity: f64,
) -> [f64; RAW_CHANNELS] {
    let mut out = [0.0; RAW_CHANNELS];
    for i in 0..3 {
        let t = raw[RAW_OFFSET + i].tanh();
        out[RAW_OFFSET + i] = d_offset[i] * max_offset * (1.0 - t * t);
        let s = sigmoid(raw[RAW_SCALE + i]);
        out[RAW_SCALE + i] = d_scale[i] * max_scale * s * (1.0 - s);
    }
    let q = [raw[RAW_QUAT], raw[RAW_QUAT + 1], raw[RAW_QUAT + 2], raw[RAW_QUAT + 3]];
    let n = linalg::quat_norm(q);
    if n >= QUAT_EPS {
        // d(q/|q|) = (I - q̂q̂ᵀ)/|q|
        let qh = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        let proj: f64 = (0..4).map(|i| qh[i] * d_rotation[i]).sum();
        for i in 0..4 {
            out[RAW_QUAT + i] = (d_rotation[i] - qh[i] * proj) / n;
        }
    }
    let o = sigmoid(raw[RAW_OPACITY]);
    out[RAW_OPACITY] = d_opacity * o * (1.0 - o);
    out
}

/// `Σ = R·diag(s)²·Rᵀ`.
pub fn build_covariance(scale: Vec3, rotation: Quat) -> Mat3 {
    let r = linalg::quat_to_mat(rotation);
    let mut sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            sigma[i][j] = (0..3).map(|k| r[i][k] * r[j][k] * scale[k] * scale[k]).sum();
        }
    }
    sigma
}

/// Pulls a gradient on the (independent) entries of Σ back onto scale and
/// rotation.
pub fn covariance_backward(scale: Vec3, rotation: Quat, d_sigma: &Mat3) -> (Vec3, Quat) {
    let r = linalg::quat_to_mat(rotation);
    // Σ = M Mᵀ with M = R S, so dL/dM = (G + Gᵀ) M.
    let mut gs = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            gs[i][j] = d_sigma[i][j] + d_sigma[j][i];
        }
    }
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * scale[j];
        }
    }
    let d_m = linalg::mat3_mul(&gs, &m);
    let mut d_scale = [0.0; 3];
    let mut d_r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d_scale[j] += d_m[i][j] * r[i][j];
            d_r[i][j] = d_m[i][j] * scale[j];
        }
    }
    (d_scale, linalg::quat_to_mat_backward(rotation, &d_r))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    pub scale: Vec3,
    pub rotation: Quat,
    pub opacity: f64,
    pub confidence: f64,
    /// Source pixel (row-major index) and slot within that pixel.
    pub pixel: usize,
    pub slot: usize,
}

impl GaussianPrimitive {
    pub fn covariance(&self) -> Mat3 {
        build_covariance(self.scale, self.rotation)
    }
}

/// Primitives in generation order plus their feature vectors (`len × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveSet {
    pub dim: usize,
    pub primitives: Vec<GaussianPrimitive>,
    pub features: Vec<f64>,
}

/// Number of columns before the features in the primitive table.
const TABLE_FIXED: usize = 12;

impl PrimitiveSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            primitives: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, p: GaussianPrimitive, feature: &[f64]) {
        debug_assert_eq!(feature.len(), self.dim);
        self.primitives.push(p);
        self.features.extend_from_slice(feature);
    }

    /// `[N, 12 + C]` table: mean(3), scale(3), quat(4), opacity, confidence,
    /// features(C). An empty set has no tensor representation.
    pub fn to_tensor(&self) -> Result<TensorContainer> {
        if self.is_empty() {
            return Err(Error::domain("an empty primitive set has no tensor form"));
        }
        let cols = TABLE_FIXED + self.dim;
        let mut data = Vec::with_capacity(self.len() * cols);
        for (i, p) in self.primitives.iter().enumerate() {
            data.extend_from_slice(&p.mean);
            data.extend_from_slice(&p.scale);
            data.extend_from_slice(&p.rotation);
            data.push(p.opacity);
            data.push(p.confidence);
            data.extend_from_slice(self.feature(i));
        }
        TensorContainer::from_f64(vec![self.len(), cols], data)
    }

    pub fn from_tensor(t: &TensorContainer) -> Result<Self> {
        let [n, cols] = *t.shape() else {
            return Err(Error::domain(format!("primitive table must be 2-D, got {:?}", t.shape())));
        };
        if cols <= TABLE_FIXED {
            return Err(Error::domain(format!("primitive table needs more than {TABLE_FIXED} columns")));
        }
        let data = t.to_f64_vec();
        let mut set = PrimitiveSet::empty(cols - TABLE_FIXED);
        for (i, row) in data.chunks_exact(cols).enumerate() {
            let q = [row[6], row[7], row[8], row[9]];
            let n = linalg::quat_norm(q);
            let rotation = if n < QUAT_EPS { IDENTITY_QUAT } else { [q[0] / n, q[1] / n, q[2] / n, q[3] / n] };
            let p = GaussianPrimitive {
                mean: [row[0], row[1], row[2]],
                scale: [row[3], row[4], row[5]],
                rotation,
                opacity: row[10],
                confidence: row[11],
                pixel: i,
                slot: 0,
            };
            if p.scale.iter().any(|&s| !(s > 0.0)) || !(0.0..=1.0).contains(&p.opacity) {
                return Err(Error::domain(format!("primitive {i} has invalid scale or opacity")));
            }
            set.push(p, &row[TABLE_FIXED..]);
        }
        debug_assert_eq!(set.len(), n);
        Ok(set)
    }
}

/// Ground-view inputs for one query: camera plus depth `[H,W]`, features
/// `[C,H,W]` and confidences `[H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundView {
    pub camera: CameraModel,
    pub depth: FeatureMap,
    pub features: FeatureMap,
    pub confidence: FeatureMap,
}

impl GroundView {
    pub fn height(&self) -> usize {
        self.depth.height
    }

    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let (h, w) = (self.depth.height, self.depth.width);
        if self.depth.channels != 1 || self.confidence.channels != 1 {
            return Err(Error::domain("depth and confidence maps must have one channel"));
        }
        if self.features.height != h || self.features.width != w || self.confidence.height != h || self.confidence.width != w {
            return Err(Error::domain(format!(
                "ground maps disagree: depth {}x{}, features {}x{}, confidence {}x{}",
                h, w, self.features.height, self.features.width, self.confidence.height, self.confidence.width
            )));
        }
        if let Some(d) = self.depth.data.iter().find(|d| !(**d >= 0.0)) {
            return Err(Error::domain(format!("depth {d} is negative or NaN")));
        }
        Ok(())
    }

    /// Back-projected pixel centres (μ_i), row-major.
    pub fn base_points(&self) -> Result<Vec<Vec3>> {
        let (h, w) = (self.height(), self.width());
        (0..h * w)
            .into_par_iter()
            .map(|p| self.camera.backproject_pixel(p / w, p % w, self.depth.data[p], h, w))
            .collect()
    }
}

/// Builds `n_p` primitives per pixel, pixel-major and slot-minor.
pub fn generate_primitives(view: &GroundView, raw: &RawAttributes, params: &PrimitiveParams) -> Result<PrimitiveSet> {
    view.validate()?;
    params.validate()?;
    let (h, w) = (view.height(), view.width());
    if raw.height != h || raw.width != w || raw.n_p != params.n_p {
        return Err(Error::domain(format!(
            "raw attributes [{}, 11, {}, {}] do not match n_p={} and image {}x{}",
            raw.n_p, raw.height, raw.width, params.n_p, h, w
        )));
    }
    let base = view.base_points()?;
    let per_pixel: Vec<Vec<GaussianPrimitive>> = (0..h * w)
        .into_par_iter()
        .map(|p| {
            (0..params.n_p)
                .map(|k| {
                    let a = activate_attributes(&raw.slot(k, p), params.max_offset, params.max_scale)?;
                    Ok(GaussianPrimitive {
                        mean: linalg::add3(base[p], a.offset),
                        scale: a.scale,
                        rotation: a.rotation,
                        opacity: a.opacity,
                        confidence: view.confidence.data[p],
                        pixel: p,
                        slot: k,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let dim = view.features.channels;
    let mut set = PrimitiveSet {
        dim,
        primitives: Vec::with_capacity(h * w * params.n_p),
        features: Vec::with_capacity(h * w * params.n_p * dim),
    };
    let feature_of = |p: usize| -> Vec<f64> { view.features.pixel(p / w, p % w) };
    for (p, prims) in per_pixel.into_iter().enumerate() {
        let f = feature_of(p);
        for prim in prims {
            set.push(prim, &f);
        }
    }
    Ok(set)
}
