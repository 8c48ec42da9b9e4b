//! Synthetic multi-modal scenes and toy encoders.
//!
//! Scenes place colored boxes in front of a pinhole camera. Each object's
//! point cloud is drawn from a small set of geometry archetypes; an
//! "ambiguous" object uses an archetype shared between the two classes of
//! its pair, so class identity is recoverable only from the rendered
//! image texture. This makes the fusion claim testable at desk scale:
//! a point-only model is chance-level on ambiguous objects, a fused one
//! is not.

mod train;

pub use train::*;

use thiserror::Error;

use crate::attention::FeaturePyramid;
use crate::diffcore::{
    add_row, conv2d, matmul, relu, Parameter, StreamRng, Tensor,
};
use crate::demf::PointFeatureSet;
use crate::eval::{Box3, GroundTruthBox};
use crate::geometry::{ref_point, CameraModel, Point3};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid scene spec: {0}")]
    SpecInvalid(String),
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub objects_per_scene: usize,
    pub ambiguity_fraction: f64,
    pub num_points: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub min_points: usize,
    pub clutter_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_classes: 4,
            objects_per_scene: 3,
            ambiguity_fraction: 0.0,
            num_points: 2048,
            image_width: 64,
            image_height: 64,
            min_points: 50,
            clutter_fraction: 0.2,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), ToyError> {
        if self.num_classes < 2 || !self.num_classes.is_multiple_of(2) {
            return Err(ToyError::SpecInvalid(format!(
                "num_classes must be an even number >= 2, got {}",
                self.num_classes
            )));
        }
        if self.objects_per_scene == 0 {
            return Err(ToyError::SpecInvalid("objects_per_scene must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_fraction) {
            return Err(ToyError::SpecInvalid(format!(
                "ambiguity_fraction must be in [0,1], got {}",
                self.ambiguity_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.clutter_fraction) {
            return Err(ToyError::SpecInvalid("clutter_fraction must be in [0,1)".into()));
        }
        let per_object = (self.num_points as f64 * (1.0 - self.clutter_fraction)) as usize
            / self.objects_per_scene;
        if per_object < self.min_points {
            return Err(ToyError::SpecInvalid(format!(
                "only {per_object} points per object, need at least {}",
                self.min_points
            )));
        }
        if self.image_width < 8 || self.image_height < 8 {
            return Err(ToyError::SpecInvalid("image must be at least 8x8".into()));
        }
        Ok(())
    }
}

pub struct ToyScene {
    pub points: Vec<Point3>,
    /// (3, H, W) color image in [0,1].
    pub image: Tensor,
    pub cam: CameraModel,
    pub gts: Vec<GroundTruthBox>,
    /// Whether each ground truth uses a class-pair-shared archetype.
    pub ambiguous: Vec<bool>,
}

fn class_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.90, 0.10, 0.10],
        [0.10, 0.20, 0.90],
        [0.95, 0.80, 0.10],
        [0.10, 0.85, 0.30],
        [0.80, 0.10, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.50, 0.10],
        [0.55, 0.30, 0.05],
    ];
    PALETTE[class % PALETTE.len()]
}

/// Color shared by both classes of a pair; carries no class identity
/// beyond the pair.
fn pair_color(class: usize) -> [f64; 3] {
    const PAIRS: [[f64; 3]; 4] = [
        [0.55, 0.55, 0.55],
        [0.30, 0.45, 0.35],
        [0.45, 0.30, 0.45],
        [0.25, 0.25, 0.50],
    ];
    PAIRS[(class / 2) % PAIRS.len()]
}

/// Archetype id for an object: ambiguous objects share one per class
/// pair, unambiguous ones get a class-unique shape.
fn archetype_for(class: usize, ambiguous: bool) -> usize {
    if ambiguous {
        4 + (class / 2) % 2
    } else {
        class % 4
    }
}

/// Samples one point on the object surface dictated by the archetype.
fn sample_archetype_point(arche: usize, bbox: &Box3, rng: &mut StreamRng) -> Point3 {
    let c = bbox.center;
    let h = [bbox.size[0] / 2.0, bbox.size[1] / 2.0, bbox.size[2] / 2.0];
    let u = |rng: &mut StreamRng| rng.uniform_range(-1.0, 1.0);
    let (dx, dy, dz) = match arche % 6 {
        // Full box surface.
        0 => {
            let face = rng.uniform_usize(6);
            let (a, b) = (u(rng), u(rng));
            match face {
                0 => (1.0, a, b),
                1 => (-1.0, a, b),
                2 => (a, 1.0, b),
                3 => (a, -1.0, b),
                4 => (a, b, 1.0),
                _ => (a, b, -1.0),
            }
        }
        // Top face only.
        1 => (u(rng), -1.0, u(rng)),
        // Two opposite side faces.
        2 => {
            let s = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
            (s, u(rng), u(rng))
        }
        // Box edges.
        3 => {
            let axis = rng.uniform_usize(3);
            let t = u(rng);
            let sa = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
            let sb = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
            match axis {
                0 => (t, sa, sb),
                1 => (sa, t, sb),
                _ => (sa, sb, t),
            }
        }
        // Lower band of the side faces: no points above the box center,
        // so candidate projections land in the lower part of the image
        // footprint.
        4 => {
            let face = rng.uniform_usize(4);
            let dy = rng.uniform_range(0.15, 1.0);
            let t = u(rng);
            match face {
                0 => (1.0, dy, t),
                1 => (-1.0, dy, t),
                2 => (t, dy, 1.0),
                _ => (t, dy, -1.0),
            }
        }
        // Bottom face only (camera +y points down the image).
        _ => (u(rng), 1.0, u(rng)),
    };
    Point3::new(c.x + dx * h[0], c.y + dy * h[1], c.z + dz * h[2])
}

/// Default synthetic camera for a W x H image: focal length W pixels,
/// principal point at the image center.
pub fn default_camera(width: usize, height: usize) -> CameraModel {
    CameraModel::new(
        [
            width as f64,
            0.0,
            width as f64 / 2.0,
            0.0,
            width as f64,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        ],
        width as f64,
        height as f64,
    )
    .expect("synthetic camera is valid")
}

/// Deterministic scene generation: identical (seed, spec) produce
/// bit-identical scenes.
pub fn synth_scene(seed: u64, spec: &SceneSpec) -> Result<ToyScene, ToyError> {
    spec.validate()?;
    let mut rng = StreamRng::new(seed, "scene");
    let cam = default_camera(spec.image_width, spec.image_height);
    let (w0, h0) = (spec.image_width, spec.image_height);

    // Place objects whose centers project inside the image with a margin
    // and do not crowd each other.
    let mut gts: Vec<GroundTruthBox> = Vec::new();
    let mut ambiguous = Vec::new();
    for _ in 0..spec.objects_per_scene {
        let class = rng.uniform_usize(spec.num_classes);
        let is_amb = rng.uniform() < spec.ambiguity_fraction;
        let mut placed = false;
        for _try in 0..200 {
            let z = rng.uniform_range(2.6, 4.0);
            let x = z * rng.uniform_range(-0.34, 0.34);
            let y = z * rng.uniform_range(-0.34, 0.34);
            let center = Point3::new(x, y, z);
            let size = [
                rng.uniform_range(0.8, 1.3),
                rng.uniform_range(0.8, 1.3),
                rng.uniform_range(0.8, 1.3),
            ];
            let r = ref_point(&cam, center);
            let inside = matches!(r, Ok(u) if u.a > 0.08 && u.a < 0.92 && u.b > 0.08 && u.b < 0.92);
            let clear = gts
                .iter()
                .all(|g| g.bbox.center.dist(&center) > 1.3);
            if inside && clear {
                gts.push(GroundTruthBox {
                    bbox: Box3::new(center, size),
                    class_id: class,
                });
                ambiguous.push(is_amb);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(ToyError::SpecInvalid(
                "could not place objects; scene too crowded".into(),
            ));
        }
    }

    // Points: object surfaces plus uniform clutter.
    let object_points =
        (spec.num_points as f64 * (1.0 - spec.clutter_fraction)) as usize;
    let per_object = object_points / spec.objects_per_scene;
    let mut points = Vec::with_capacity(spec.num_points);
    for (gi, gt) in gts.iter().enumerate() {
        let arche = archetype_for(gt.class_id, ambiguous[gi]);
        for _ in 0..per_object {
            points.push(sample_archetype_point(arche, &gt.bbox, &mut rng));
        }
    }
    while points.len() < spec.num_points {
        points.push(Point3::new(
            rng.uniform_range(-1.8, 1.8),
            rng.uniform_range(-1.8, 1.8),
            rng.uniform_range(2.2, 5.0),
        ));
    }

    // Render: flat painter's projection of box footprints, far to near,
    // with a per-class color texture.
    let mut image = vec![0.0; 3 * h0 * w0];
    for py in 0..h0 {
        for px in 0..w0 {
            let g = 0.08 + 0.04 * ((px + py) % 7) as f64 / 7.0;
            for ch in 0..3 {
                image[ch * h0 * w0 + py * w0 + px] = g;
            }
        }
    }
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by(|&a, &b| gts[b].bbox.center.z.total_cmp(&gts[a].bbox.center.z));
    for gi in order {
        let gt = &gts[gi];
        let c = gt.bbox.center;
        let h = [gt.bbox.size[0] / 2.0, gt.bbox.size[1] / 2.0, gt.bbox.size[2] / 2.0];
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let corner =
                        Point3::new(c.x + sx * h[0], c.y + sy * h[1], c.z + sz * h[2]);
                    if let Ok(u) = ref_point(&cam, corner) {
                        umin = umin.min(u.a * w0 as f64);
                        umax = umax.max(u.a * w0 as f64);
                        vmin = vmin.min(u.b * h0 as f64);
                        vmax = vmax.max(u.b * h0 as f64);
                    }
                }
            }
        }
        // Body in the pair-shared color; the class-identifying color only
        // appears in a band along the top of the footprint, away from the
        // projected center. Class identity is thus recoverable from the
        // image but not from a single look at the center pixel.
        let body = pair_color(gt.class_id);
        let band = class_color(gt.class_id);
        let band_end = vmin + 0.45 * (vmax - vmin);
        let x0 = umin.max(0.0) as usize;
        let x1 = (umax.min(w0 as f64 - 1.0)) as usize;
        let y0 = vmin.max(0.0) as usize;
        let y1 = (vmax.min(h0 as f64 - 1.0)) as usize;
        for py in y0..=y1.min(h0 - 1) {
            let color = if (py as f64) < band_end { band } else { body };
            for px in x0..=x1.min(w0 - 1) {
                for ch in 0..3 {
                    image[ch * h0 * w0 + py * w0 + px] = color[ch];
                }
            }
        }
    }

    Ok(ToyScene {
        points,
        image: Tensor::new(&[3, h0, w0], image),
        cam,
        gts,
        ambiguous,
    })
}

/// Farthest-point sampling over the raw cloud; stands in for the point
/// backbone's candidate sampler.
pub fn farthest_point_sample(points: &[Point3], n: usize) -> Vec<Point3> {
    assert!(!points.is_empty());
    let n = n.min(points.len());
    // Deterministic start: the point nearest the cloud centroid.
    let cx = points.iter().map(|p| p.x).sum::<f64>() / points.len() as f64;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / points.len() as f64;
    let cz = points.iter().map(|p| p.z).sum::<f64>() / points.len() as f64;
    let centroid = Point3::new(cx, cy, cz);
    let first = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.dist(&centroid).total_cmp(&b.1.dist(&centroid)))
        .unwrap()
        .0;
    let mut chosen = vec![first];
    let mut min_dist: Vec<f64> = points.iter().map(|p| p.dist(&points[first])).collect();
    while chosen.len() < n {
        let next = min_dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            let d = p.dist(&points[next]);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    chosen.iter().map(|&i| points[i]).collect()
}

pub const POINT_STAT_DIM: usize = 7;

pub struct PointEncoderParams {
    pub width: usize,
    pub radius: f64,
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
}

impl PointEncoderParams {
    pub fn init(name: &str, width: usize, radius: f64, rng: &mut StreamRng) -> PointEncoderParams {
        let bound1 = 1.0 / (POINT_STAT_DIM as f64).sqrt();
        let bound2 = 1.0 / (width as f64).sqrt();
        PointEncoderParams {
            width,
            radius,
            w1: Parameter::new(
                format!("{name}.w1"),
                &[POINT_STAT_DIM, width],
                (0..POINT_STAT_DIM * width)
                    .map(|_| rng.uniform_range(-bound1, bound1))
                    .collect(),
            ),
            b1: Parameter::new(format!("{name}.b1"), &[width], vec![0.0; width]),
            w2: Parameter::new(
                format!("{name}.w2"),
                &[width, width],
                (0..width * width)
                    .map(|_| rng.uniform_range(-bound2, bound2))
                    .collect(),
            ),
            b2: Parameter::new(format!("{name}.b2"), &[width], vec![0.0; width]),
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }
}

/// Local point statistics around a candidate: normalized neighbor count,
/// centroid offset, and covariance diagonal. Empty neighborhoods give the
/// zero vector. Translation of points and candidate together leaves the
/// statistics unchanged.
pub fn local_stats(points: &[Point3], candidate: &Point3, radius: f64) -> [f64; POINT_STAT_DIM] {
    let mut count = 0.0;
    let mut mean = [0.0; 3];
    for p in points {
        if p.dist(candidate) <= radius {
            count += 1.0;
            mean[0] += p.x - candidate.x;
            mean[1] += p.y - candidate.y;
            mean[2] += p.z - candidate.z;
        }
    }
    if count == 0.0 {
        return [0.0; POINT_STAT_DIM];
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    let mut var = [0.0; 3];
    for p in points {
        if p.dist(candidate) <= radius {
            let d = [
                p.x - candidate.x - mean[0],
                p.y - candidate.y - mean[1],
                p.z - candidate.z - mean[2],
            ];
            for i in 0..3 {
                var[i] += d[i] * d[i];
            }
        }
    }
    for v in var.iter_mut() {
        *v /= count;
    }
    [
        count / 64.0,
        mean[0],
        mean[1],
        mean[2],
        var[0],
        var[1],
        var[2],
    ]
}

/// Candidate features from farthest-point-sampled seeds and a small MLP
/// over local statistics.
pub fn toy_point_encoder(
    points: &[Point3],
    n_candidates: usize,
    params: &PointEncoderParams,
) -> PointFeatureSet {
    let coords = farthest_point_sample(points, n_candidates);
    let n = coords.len();
    let mut stats = vec![0.0; n * POINT_STAT_DIM];
    for (i, c) in coords.iter().enumerate() {
        stats[i * POINT_STAT_DIM..(i + 1) * POINT_STAT_DIM]
            .copy_from_slice(&local_stats(points, c, params.radius));
    }
    let x = Tensor::new(&[n, POINT_STAT_DIM], stats);
    let h = relu(&add_row(&matmul(&x, &params.w1.tensor), &params.b1.tensor));
    let feats = add_row(&matmul(&h, &params.w2.tensor), &params.b2.tensor);
    PointFeatureSet::new(feats, coords).expect("encoder output is consistent")
}

pub struct ImageEncoderParams {
    pub width: usize,
    pub levels: usize,
    pub convs: Vec<(Parameter, Parameter)>,
}

impl ImageEncoderParams {
    pub fn init(name: &str, width: usize, levels: usize, rng: &mut StreamRng) -> ImageEncoderParams {
        let mut convs = Vec::with_capacity(levels);
        for l in 0..levels {
            let cin = if l == 0 { 3 } else { width };
            let bound = 1.0 / ((cin * 9) as f64).sqrt();
            convs.push((
                Parameter::new(
                    format!("{name}.conv{l}.w"),
                    &[width, cin, 3, 3],
                    (0..width * cin * 9)
                        .map(|_| rng.uniform_range(-bound, bound))
                        .collect(),
                ),
                Parameter::new(format!("{name}.conv{l}.b"), &[width], vec![0.0; width]),
            ));
        }
        ImageEncoderParams {
            width,
            levels,
            convs,
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        self.convs
            .iter()
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }
}

/// Stride-2 convolution chain; level l has spatial extents ceil(H/2^(l+1)).
pub fn toy_image_encoder(image: &Tensor, params: &ImageEncoderParams) -> FeaturePyramid {
    let mut levels = Vec::with_capacity(params.levels);
    let mut x = image.clone();
    for (w, b) in &params.convs {
        x = relu(&conv2d(&x, &w.tensor, &b.tensor, 2, 1));
        levels.push(x.clone());
    }
    FeaturePyramid::new(levels).expect("encoder pyramid is consistent")
}
