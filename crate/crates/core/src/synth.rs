//! Synthetic scenes with a known answer.
//!
//! A scene is a flat ground plane at `Y = +cam_height` (camera at the origin)
//! tiled with square patches, plus axis-aligned boxes standing on it. Every
//! ground tile and every box carries a fixed random unit feature. The ground
//! view is ray-cast from the camera; the satellite map is a top-down point
//! sample of the static surfaces, translated by a planted offset.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::config::{GridConfig, DEFAULT_CAM_HEIGHT};
use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, CameraModel, PanoramaGeometry};
use crate::losses::LossConfig;
use crate::maps::FeatureMap;
use crate::matching::{self, PeakResult};
use crate::objective::Query;
use crate::primitives::{self, GroundView, PrimitiveParams, RawAttributes};
use crate::renderer::{self, RenderSettings};

/// Depth written for rays that hit nothing. Far enough that even rays next
/// to the zenith land kilometres outside any BEV grid.
pub const SKY_DEPTH: f64 = 1.0e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    /// Side of the square region boxes are scattered over, in metres.
    pub extent: f64,
    pub n_boxes: usize,
    /// Footprint side range in metres.
    pub box_size: [f64; 2],
    pub box_height: [f64; 2],
    /// Share of boxes drawn from `tall_height` instead of `box_height`.
    pub tall_fraction: f64,
    pub tall_height: [f64; 2],
    /// Share of boxes that are dynamic: zero confidence on the ground and
    /// absent from the satellite map.
    pub dynamic_fraction: f64,
    pub feature_dim: usize,
    /// Std of Gaussian noise added to ground-view features.
    pub feature_noise: f64,
    /// Side of a ground texture tile in metres.
    pub ground_tile: f64,
    /// How much tiles differ from one shared ground feature: 0 gives a
    /// uniform ground, 1 independent random tiles.
    pub ground_contrast: f64,
    /// No box comes closer than this to the camera.
    pub clear_radius: f64,
    pub cam_height: f64,
    pub camera: CameraModel,
    pub image_height: usize,
    pub image_width: usize,
    pub grid: GridConfig,
    /// Planted offsets are drawn uniformly from `±search_range` per axis.
    pub search_range: f64,
    /// Fixed `(Δz, Δx)` offset in metres instead of a random draw.
    pub planted_offset: Option<[f64; 2]>,
    /// Error of the noisy location label: the label used by the GPS loss is
    /// the planted offset plus this `(Δz, Δx)`, in metres.
    pub label_error: [f64; 2],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: 120.0,
            n_boxes: 40,
            box_size: [2.0, 6.0],
            box_height: [0.4, 1.2],
            tall_fraction: 0.0,
            tall_height: [5.0, 12.0],
            dynamic_fraction: 0.0,
            feature_dim: 8,
            feature_noise: 0.0,
            ground_tile: 2.0,
            ground_contrast: 1.0,
            clear_radius: 4.0,
            cam_height: DEFAULT_CAM_HEIGHT,
            camera: CameraModel::Panorama(PanoramaGeometry { width: 256, height: 64 }),
            image_height: 64,
            image_width: 256,
            grid: GridConfig {
                size: 128,
                beta: 70.0 / 128.0,
                origin_x: None,
                origin_z: None,
            },
            search_range: 20.0,
            planted_offset: None,
            label_error: [0.0, 0.0],
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
        return Err(Error::domain(format!("{name} must satisfy 0 < min <= max, got {r:?}")));
    }
    Ok(())
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0) {
            return Err(Error::domain(format!("extent must be positive, got {}", self.extent)));
        }
        if self.feature_dim < 2 {
            return Err(Error::domain(format!("feature_dim must be at least 2, got {}", self.feature_dim)));
        }
        for (name, f) in [
            ("dynamic_fraction", self.dynamic_fraction),
            ("tall_fraction", self.tall_fraction),
            ("ground_contrast", self.ground_contrast),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::domain(format!("{name} must lie in [0,1], got {f}")));
            }
        }
        check_range("box_size", self.box_size)?;
        check_range("box_height", self.box_height)?;
        check_range("tall_height", self.tall_height)?;
        if !(self.ground_tile > 0.0) || !(self.cam_height > 0.0) || !(self.search_range >= 0.0) || !(self.feature_noise >= 0.0) {
            return Err(Error::domain("ground_tile and cam_height must be positive; search_range and feature_noise non-negative"));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::domain("ground image must be non-empty"));
        }
        self.camera.validate()?;
        if let CameraModel::Panorama(g) = self.camera {
            if (g.height, g.width) != (self.image_height, self.image_width) {
                return Err(Error::domain("panorama geometry does not match the image size"));
            }
        }
        self.grid.spec()?;
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<BevGridSpec> {
        self.grid.spec()
    }

    /// Search radius in cells covering `±search_range`.
    pub fn radius_cells(&self) -> usize {
        (self.search_range / self.grid.beta).ceil() as usize
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Axis-aligned box standing on the ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub x: [f64; 2],
    pub z: [f64; 2],
    /// World Y of the roof (ground is at `+cam_height`).
    pub top: f64,
    pub dynamic: bool,
    pub feature_id: usize,
}

/// The ground truth a scene was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub boxes: Vec<SceneBox>,
    pub view: GroundView,
    pub satellite: FeatureMap,
    /// `(Δz, Δx)` in metres: BEV cell `u` corresponds to satellite cell
    /// `u + offset/β`.
    pub planted_offset: (f64, f64),
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Deterministic features of the scene's surfaces.
struct Palette {
    seed: u64,
    dim: usize,
    tile: f64,
    /// Shift of the tile lattice so tile edges do not line up with cells.
    phase: [f64; 2],
    contrast: f64,
    ground: Vec<f64>,
    boxes: Vec<Vec<f64>>,
    tiles: HashMap<(i64, i64), Vec<f64>>,
}

impl Palette {
    fn tile_feature(&mut self, x: f64, z: f64) -> &[f64] {
        let key = (
            ((x - self.phase[0]) / self.tile).floor() as i64,
            ((z - self.phase[1]) / self.tile).floor() as i64,
        );
        let (seed, dim, c) = (self.seed, self.dim, self.contrast);
        let ground = &self.ground;
        self.tiles.entry(key).or_insert_with(|| {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            (seed, key).hash(&mut h);
            let own = unit_vector(&mut ChaCha8Rng::seed_from_u64(h.finish()), dim);
            let k = (1.0 - c * c).sqrt();
            let v: Vec<f64> = own.iter().zip(ground).map(|(o, g)| c * o + k * g).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
    }
}

/// Entry distance of a ray from the origin into a box, if it hits.
fn ray_box(dir: [f64; 3], b: &SceneBox, ground: f64) -> Option<f64> {
    let lo = [b.x[0], b.top, b.z[0]];
    let hi = [b.x[1], ground, b.z[1]];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if lo[a] > 0.0 || hi[a] < 0.0 {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = (lo[a] / dir[a], hi[a] / dir[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some(t0)
}

fn place_boxes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<SceneBox> {
    let half = spec.extent / 2.0;
    let mut boxes = Vec::with_capacity(spec.n_boxes);
    while boxes.len() < spec.n_boxes {
        let w = rng.gen_range(spec.box_size[0]..=spec.box_size[1]);
        let d = rng.gen_range(spec.box_size[0]..=spec.box_size[1]);
        let cx = rng.gen_range(-half..=half);
        let cz = rng.gen_range(-half..=half);
        let tall = rng.gen_bool(spec.tall_fraction);
        let range = if tall { spec.tall_height } else { spec.box_height };
        let height = rng.gen_range(range[0]..=range[1]);
        let dynamic = rng.gen_bool(spec.dynamic_fraction);
        let x = [cx - w / 2.0, cx + w / 2.0];
        let z = [cz - d / 2.0, cz + d / 2.0];
        // distance from the camera to the footprint
        let dx = (x[0].max(0.0) - 0.0).max(0.0 - x[1]).max(0.0);
        let dz = (z[0].max(0.0) - 0.0).max(0.0 - z[1]).max(0.0);
        if (dx * dx + dz * dz).sqrt() < spec.clear_radius {
            continue;
        }
        boxes.push(SceneBox {
            x,
            z,
            top: spec.cam_height - height,
            dynamic,
            feature_id: boxes.len(),
        });
    }
    boxes
}

/// Builds the ground view and the translated satellite map of a scene.
pub fn make_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    // Independent streams, so e.g. the box count does not move the offset.
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(k);
        r
    };
    let mut rng = stream(0);
    let mut offset_rng = stream(1);
    let mut noise_rng = stream(2);
    let boxes = place_boxes(spec, &mut rng);
    let mut palette = Palette {
        seed: spec.seed,
        dim: spec.feature_dim,
        tile: spec.ground_tile,
        phase: [
            offset_rng.gen_range(0.0..spec.ground_tile),
            offset_rng.gen_range(0.0..spec.ground_tile),
        ],
        contrast: spec.ground_contrast,
        ground: unit_vector(&mut stream(3), spec.feature_dim),
        boxes: (0..boxes.len()).map(|_| unit_vector(&mut rng, spec.feature_dim)).collect(),
        tiles: HashMap::new(),
    };
    let planted = match spec.planted_offset {
        Some([dz, dx]) => (dz, dx),
        None if spec.search_range > 0.0 => (
            offset_rng.gen_range(-spec.search_range..=spec.search_range),
            offset_rng.gen_range(-spec.search_range..=spec.search_range),
        ),
        None => (0.0, 0.0),
    };

    let (h, w, c) = (spec.image_height, spec.image_width, spec.feature_dim);
    let ground = spec.cam_height;
    let mut depth = FeatureMap::zeros(1, h, w);
    let mut features = FeatureMap::zeros(c, h, w);
    let mut confidence = FeatureMap::zeros(1, h, w);
    for row in 0..h {
        for col in 0..w {
            let dir = spec.camera.pixel_ray(row, col, h, w)?;
            let mut best: Option<(f64, Option<usize>)> = if dir[1] > 0.0 { Some((ground / dir[1], None)) } else { None };
            for (i, b) in boxes.iter().enumerate() {
                if let Some(t) = ray_box(dir, b, ground) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, Some(i)));
                    }
                }
            }
            let p = row * w + col;
            match best {
                None => depth.data[p] = SKY_DEPTH,
                Some((t, hit)) => {
                    depth.data[p] = t;
                    let (f, conf) = match hit {
                        Some(i) => (palette.boxes[boxes[i].feature_id].clone(), if boxes[i].dynamic { 0.0 } else { 1.0 }),
                        None => (palette.tile_feature(t * dir[0], t * dir[2]).to_vec(), 1.0),
                    };
                    confidence.data[p] = conf;
                    for (ch, v) in f.into_iter().enumerate() {
                        let noise = if spec.feature_noise > 0.0 { spec.feature_noise * crate::objective::standard_normal(&mut noise_rng) } else { 0.0 };
                        features.set(ch, row, col, v + noise);
                    }
                }
            }
        }
    }

    let grid = spec.grid_spec()?;
    let n = grid.size;
    let mut satellite = FeatureMap::zeros(c, n, n);
    for r in 0..n {
        for col in 0..n {
            let (bx, bz) = grid.cell_center(r, col);
            let (x, z) = (bx - planted.1, bz - planted.0);
            let roof = boxes
                .iter()
                .filter(|b| !b.dynamic && b.x[0] <= x && x <= b.x[1] && b.z[0] <= z && z <= b.z[1])
                .min_by(|a, b| a.top.total_cmp(&b.top));
            let f = match roof {
                Some(b) => palette.boxes[b.feature_id].clone(),
                None => palette.tile_feature(x, z).to_vec(),
            };
            for (ch, v) in f.into_iter().enumerate() {
                satellite.set(ch, r, col, v);
            }
        }
    }

    Ok(Scene {
        spec: spec.clone(),
        boxes,
        view: GroundView {
            camera: spec.camera,
            depth,
            features,
            confidence,
        },
        satellite,
        planted_offset: planted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Bevsplat,
    Ipm,
    Direct,
}

impl std::str::FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bevsplat" => Ok(Pipeline::Bevsplat),
            "ipm" => Ok(Pipeline::Ipm),
            "direct" => Ok(Pipeline::Direct),
            other => Err(Error::Config(format!("unknown pipeline {other:?}"))),
        }
    }
}

/// Settings shared by every scene of a localization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub primitives: PrimitiveParams,
    pub render: RenderSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            primitives: PrimitiveParams::default(),
            render: RenderSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub seed: u64,
    pub planted_m: (f64, f64),
    pub estimated_m: (f64, f64),
    pub error_m: f64,
    pub peak: f64,
}

impl LocalizationRecord {
    fn new(seed: u64, planted: (f64, f64), peak: &PeakResult) -> Self {
        let est = peak.offset_m;
        Self {
            seed,
            planted_m: planted,
            estimated_m: est,
            error_m: ((planted.0 - est.0).powi(2) + (planted.1 - est.1).powi(2)).sqrt(),
            peak: peak.value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub n: usize,
    pub mean_error_m: f64,
    pub median_error_m: f64,
    pub recall_1m: f64,
    pub recall_3m: f64,
}

impl LocalizationSummary {
    pub fn from_records(records: &[LocalizationRecord]) -> Self {
        let n = records.len();
        let mut errors: Vec<f64> = records.iter().map(|r| r.error_m).collect();
        errors.sort_by(f64::total_cmp);
        let median = match n {
            0 => 0.0,
            _ if n % 2 == 1 => errors[n / 2],
            _ => 0.5 * (errors[n / 2 - 1] + errors[n / 2]),
        };
        let recall = |t: f64| if n == 0 { 0.0 } else { errors.iter().filter(|&&e| e <= t).count() as f64 / n as f64 };
        Self {
            n,
            mean_error_m: if n == 0 { 0.0 } else { errors.iter().sum::<f64>() / n as f64 },
            median_error_m: median,
            recall_1m: recall(1.0),
            recall_3m: recall(3.0),
        }
    }
}

/// The confidence-weighted BEV map a pipeline produces for a scene.
pub fn bev_for(scene: &Scene, pipeline: Pipeline, cfg: &PipelineConfig) -> Result<FeatureMap> {
    let grid = scene.spec.grid_spec()?;
    let view = &scene.view;
    match pipeline {
        Pipeline::Bevsplat | Pipeline::Direct => {
            let raw = RawAttributes::zeros(cfg.primitives.n_p, view.height(), view.width());
            let set = primitives::generate_primitives(view, &raw, &cfg.primitives)?;
            if pipeline == Pipeline::Direct {
                return Ok(baselines::direct_project(&set, &grid).map);
            }
            let splats = renderer::project_set(&set, &grid)?;
            let bev = renderer::render_forward(&splats, &grid, set.dim, &cfg.render);
            matching::weight_features(&bev.f_bev, &bev.c_bev)
        }
        Pipeline::Ipm => {
            let weighted = weight_ground(view)?;
            Ok(baselines::ipm_project(&weighted, &view.camera, scene.spec.cam_height, &grid)?.map)
        }
    }
}

/// Ground features multiplied by their confidence.
pub fn weight_ground(view: &GroundView) -> Result<FeatureMap> {
    matching::weight_features(&view.features, &view.confidence)
}

/// Localizes one scene: the similarity peak against its satellite map.
pub fn localize_scene(scene: &Scene, pipeline: Pipeline, cfg: &PipelineConfig) -> Result<LocalizationRecord> {
    let bev = bev_for(scene, pipeline, cfg)?;
    let beta = scene.spec.grid.beta;
    let sim = matching::similarity_map(&scene.satellite, &bev, scene.spec.radius_cells(), beta)?;
    Ok(LocalizationRecord::new(scene.spec.seed, scene.planted_offset, &matching::peak(&sim)))
}

/// Runs `n_scenes` scenes with seeds `spec.seed, spec.seed + 1, ...`.
pub fn evaluate_localization(n_scenes: usize, pipeline: Pipeline, spec: &SceneSpec, cfg: &PipelineConfig) -> Result<(LocalizationSummary, Vec<LocalizationRecord>)> {
    if n_scenes == 0 {
        return Err(Error::domain("at least one scene is required"));
    }
    let records = (0..n_scenes as u64)
        .map(|i| localize_scene(&make_scene(&spec.with_seed(spec.seed + i))?, pipeline, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((LocalizationSummary::from_records(&records), records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeTrace {
    /// `l_total` before each step and after the last one (`steps + 1` values).
    pub losses: Vec<f64>,
    /// Raw-attribute gradient norm at the same points.
    pub grad_norms: Vec<f64>,
    pub final_record: LocalizationRecord,
}

/// Builds the objective for a scene: its satellite map is the positive, the
/// satellite maps of the next `loss.negatives` seeds are the negatives, and
/// the label is the planted offset plus `label_error`, rounded to cells.
pub fn scene_query(scene: &Scene, cfg: &PipelineConfig, loss: LossConfig) -> Result<Query> {
    let spec = &scene.spec;
    let negs = (1..=loss.negatives as u64)
        .map(|k| Ok(make_scene(&spec.with_seed(spec.seed + k))?.satellite))
        .collect::<Result<Vec<_>>>()?;
    let beta = spec.grid.beta;
    let radius = spec.radius_cells();
    let r = radius as i64;
    let label = (
        (((scene.planted_offset.0 + spec.label_error[0]) / beta).round() as i64).clamp(-r, r),
        (((scene.planted_offset.1 + spec.label_error[1]) / beta).round() as i64).clamp(-r, r),
    );
    let q = Query {
        view: scene.view.clone(),
        params: cfg.primitives,
        grid: spec.grid_spec()?,
        settings: cfg.render,
        sat_pos: scene.satellite.clone(),
        sat_negs: negs,
        radius,
        label,
        loss,
    };
    q.validate()?;
    Ok(q)
}

/// Plain gradient descent on the raw attributes, starting from zeros.
pub fn optimize_primitives(scene: &Scene, steps: usize, step_size: f64, cfg: &PipelineConfig, loss: LossConfig) -> Result<OptimizeTrace> {
    if steps == 0 {
        return Err(Error::domain("optimize needs at least one step"));
    }
    let query = scene_query(scene, cfg, loss)?;
    let mut raw = RawAttributes::zeros(cfg.primitives.n_p, scene.view.height(), scene.view.width());
    let mut losses = Vec::with_capacity(steps + 1);
    let mut grad_norms = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (eval, grad) = query.evaluate_with_gradient(&raw)?;
        let norm = grad.raw_norm();
        if !eval.report.l_total.is_finite() || !norm.is_finite() {
            return Err(Error::Divergence { step });
        }
        losses.push(eval.report.l_total);
        grad_norms.push(norm);
        if step == steps {
            return Ok(OptimizeTrace {
                losses,
                grad_norms,
                final_record: LocalizationRecord::new(scene.spec.seed, scene.planted_offset, &eval.peak),
            });
        }
        raw.data.iter_mut().zip(&grad.raw.data).for_each(|(r, g)| *r -= step_size * g);
    }
    unreachable!("the loop returns on its last step")
}
