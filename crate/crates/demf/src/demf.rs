//! The DeMF block: self-attention, projection-anchored deformable
//! cross-attention, and FFN with residuals and post-norm, stacked with
//! per-layer prediction heads, query positional embeddings from box
//! parameters, and layer-averaged auxiliary losses.

use thiserror::Error;

use crate::attention::{
    ms_deform_attn_batch, self_attn, AttnError, DeformAttnParams, FeaturePyramid, OffsetMode,
    SelfAttnParams,
};
use crate::diffcore::{
    abs, add, add_row, dropout, layer_norm, log_softmax_rows, matmul, nll_rows, relu, scale,
    select_rows, slice_cols, softmax_rows, sub, sum, Parameter, StreamRng, Tensor,
};
use crate::eval::{Box3, Detection, GroundTruthBox};
use crate::geometry::{ref_point, CameraModel, Point3, Unit2};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum DemfError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("per-layer loss list is empty")]
    EmptyList,
    #[error(transparent)]
    Attn(#[from] AttnError),
}

/// The candidate set: N feature vectors with their 3D coordinates.
pub struct PointFeatureSet {
    pub feats: Tensor,
    pub coords: Vec<Point3>,
}

impl PointFeatureSet {
    pub fn new(feats: Tensor, coords: Vec<Point3>) -> Result<PointFeatureSet, DemfError> {
        let s = feats.shape();
        if s.len() != 2 || s[0] != coords.len() || coords.is_empty() {
            return Err(DemfError::ShapeMismatch(s, vec![coords.len(), 0]));
        }
        Ok(PointFeatureSet { feats, coords })
    }
}

/// Per-candidate box predictions of one head. Sizes are parameterized as
/// log-sizes so decoded sizes are always positive.
#[derive(Clone)]
pub struct BoxPreds {
    pub logits: Tensor,
    pub centers: Tensor,
    pub log_sizes: Tensor,
}

impl BoxPreds {
    /// The 6-value box parameterization (center, log-size) per candidate,
    /// detached from the gradient graph.
    pub fn detached_param_vector(&self) -> Tensor {
        let n = self.centers.shape()[0];
        let cv = self.centers.data();
        let sv = self.log_sizes.data();
        let mut data = vec![0.0; n * 6];
        for i in 0..n {
            data[i * 6..i * 6 + 3].copy_from_slice(&cv[i * 3..i * 3 + 3]);
            data[i * 6 + 3..i * 6 + 6].copy_from_slice(&sv[i * 3..i * 3 + 3]);
        }
        Tensor::new(&[n, 6], data)
    }

    pub fn decode_boxes(&self) -> Vec<Box3> {
        let n = self.centers.shape()[0];
        let cv = self.centers.data();
        let sv = self.log_sizes.data();
        (0..n)
            .map(|i| {
                Box3::new(
                    Point3::new(cv[i * 3], cv[i * 3 + 1], cv[i * 3 + 2]),
                    [
                        sv[i * 3].exp(),
                        sv[i * 3 + 1].exp(),
                        sv[i * 3 + 2].exp(),
                    ],
                )
            })
            .collect()
    }
}

fn linear_init(rng: &mut StreamRng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect()
}

/// Per-layer prediction head: 2-layer MLP, hidden width C, no parameter
/// sharing across layers. Outputs class logits (background last), a
/// center offset from the candidate coordinate, and log-sizes.
pub struct PredHead {
    pub num_classes: usize,
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
}

impl PredHead {
    pub fn init(name: &str, width: usize, num_classes: usize, rng: &mut StreamRng) -> PredHead {
        let out = num_classes + 1 + 6;
        PredHead {
            num_classes,
            w1: Parameter::new(format!("{name}.w1"), &[width, width], linear_init(rng, width, width)),
            b1: Parameter::new(format!("{name}.b1"), &[width], vec![0.0; width]),
            w2: Parameter::new(format!("{name}.w2"), &[width, out], linear_init(rng, width, out)),
            b2: Parameter::new(format!("{name}.b2"), &[out], vec![0.0; out]),
        }
    }

    pub fn forward(&self, feats: &Tensor, coords: &[Point3]) -> BoxPreds {
        let h = relu(&add_row(&matmul(feats, &self.w1.tensor), &self.b1.tensor));
        let out = add_row(&matmul(&h, &self.w2.tensor), &self.b2.tensor);
        let nc = self.num_classes;
        let logits = slice_cols(&out, 0, nc + 1);
        let center_off = slice_cols(&out, nc + 1, 3);
        let log_sizes = slice_cols(&out, nc + 4, 3);
        let mut base = vec![0.0; coords.len() * 3];
        for (i, c) in coords.iter().enumerate() {
            base[i * 3] = c.x;
            base[i * 3 + 1] = c.y;
            base[i * 3 + 2] = c.z;
        }
        let centers = add(&center_off, &Tensor::new(&[coords.len(), 3], base));
        BoxPreds {
            logits,
            centers,
            log_sizes,
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }
}

pub struct DemfLayerParams {
    pub self_attn: SelfAttnParams,
    pub cross: DeformAttnParams,
    pub ffn_w1: Parameter,
    pub ffn_b1: Parameter,
    pub ffn_w2: Parameter,
    pub ffn_b2: Parameter,
    pub ln1_g: Parameter,
    pub ln1_b: Parameter,
    pub ln2_g: Parameter,
    pub ln2_b: Parameter,
    pub ln3_g: Parameter,
    pub ln3_b: Parameter,
    pub pos_w: Parameter,
    pub pos_b: Parameter,
}

impl DemfLayerParams {
    pub fn init(
        name: &str,
        width: usize,
        heads: usize,
        samples: usize,
        levels: usize,
        mode: OffsetMode,
        rng: &mut StreamRng,
    ) -> DemfLayerParams {
        let c = width;
        let hidden = 4 * c;
        DemfLayerParams {
            self_attn: SelfAttnParams::init(&format!("{name}.sa"), c, heads, rng),
            cross: DeformAttnParams::init(&format!("{name}.ca"), c, heads, samples, levels, mode, rng),
            ffn_w1: Parameter::new(format!("{name}.ffn.w1"), &[c, hidden], linear_init(rng, c, hidden)),
            ffn_b1: Parameter::new(format!("{name}.ffn.b1"), &[hidden], vec![0.0; hidden]),
            ffn_w2: Parameter::new(format!("{name}.ffn.w2"), &[hidden, c], linear_init(rng, hidden, c)),
            ffn_b2: Parameter::new(format!("{name}.ffn.b2"), &[c], vec![0.0; c]),
            ln1_g: Parameter::new(format!("{name}.ln1.g"), &[c], vec![1.0; c]),
            ln1_b: Parameter::new(format!("{name}.ln1.b"), &[c], vec![0.0; c]),
            ln2_g: Parameter::new(format!("{name}.ln2.g"), &[c], vec![1.0; c]),
            ln2_b: Parameter::new(format!("{name}.ln2.b"), &[c], vec![0.0; c]),
            ln3_g: Parameter::new(format!("{name}.ln3.g"), &[c], vec![1.0; c]),
            ln3_b: Parameter::new(format!("{name}.ln3.b"), &[c], vec![0.0; c]),
            pos_w: Parameter::new(format!("{name}.pos.w"), &[6, c], linear_init(rng, 6, c)),
            pos_b: Parameter::new(format!("{name}.pos.b"), &[c], vec![0.0; c]),
        }
    }

    pub fn parameters(&self, fusion_enabled: bool) -> Vec<Parameter> {
        let mut v = self.self_attn.parameters();
        if fusion_enabled {
            v.extend(self.cross.parameters());
        }
        // ln2 runs on the residual path even without the cross branch.
        v.push(self.ln2_g.clone());
        v.push(self.ln2_b.clone());
        v.extend([
            self.ffn_w1.clone(),
            self.ffn_b1.clone(),
            self.ffn_w2.clone(),
            self.ffn_b2.clone(),
            self.ln1_g.clone(),
            self.ln1_b.clone(),
            self.ln3_g.clone(),
            self.ln3_b.clone(),
            self.pos_w.clone(),
            self.pos_b.clone(),
        ]);
        v
    }
}

#[derive(Debug, Clone)]
pub struct DemfConfig {
    pub width: usize,
    pub heads: usize,
    pub samples: usize,
    pub levels: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub offset_mode: OffsetMode,
    /// When false the deformable cross-attention branch is skipped
    /// entirely (the point-only baseline).
    pub fusion_enabled: bool,
}

pub struct DemfStack {
    pub config: DemfConfig,
    pub layers: Vec<DemfLayerParams>,
    pub heads: Vec<PredHead>,
}

impl DemfStack {
    pub fn init(config: DemfConfig, rng: &mut StreamRng) -> DemfStack {
        let layers = (0..config.depth)
            .map(|l| {
                DemfLayerParams::init(
                    &format!("demf.layer{l}"),
                    config.width,
                    config.heads,
                    config.samples,
                    config.levels,
                    config.offset_mode,
                    rng,
                )
            })
            .collect();
        let heads = (0..=config.depth)
            .map(|l| PredHead::init(&format!("demf.head{l}"), config.width, config.num_classes, rng))
            .collect();
        DemfStack {
            config,
            layers,
            heads,
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.parameters(self.config.fusion_enabled));
        }
        for h in &self.heads {
            v.extend(h.parameters());
        }
        v
    }
}

/// One residual DeMF layer: self-attention, deformable cross-attention at
/// the reference points, FFN; layer norm after each residual add, dropout
/// inside both attention sub-blocks during training.
#[allow(clippy::too_many_arguments)]
pub fn demf_layer(
    feats: &Tensor,
    refs: &[Unit2],
    degenerate: &[bool],
    pyramid: &FeaturePyramid,
    pos: &Tensor,
    params: &DemfLayerParams,
    config: &DemfConfig,
    training: bool,
    rng: &mut StreamRng,
) -> Result<Tensor, DemfError> {
    let s = feats.shape();
    if s.len() != 2 || s[0] != refs.len() || s[1] != config.width {
        return Err(DemfError::ShapeMismatch(s, vec![refs.len(), config.width]));
    }
    let sa = self_attn(feats, pos, &params.self_attn)?;
    let sa = dropout(&sa, config.dropout, training, rng);
    let z1 = layer_norm(&add(feats, &sa), &params.ln1_g.tensor, &params.ln1_b.tensor, LN_EPS);

    let z2 = if config.fusion_enabled {
        let ca = ms_deform_attn_batch(&z1, refs, Some(degenerate), pyramid, &params.cross)?;
        let ca = dropout(&ca, config.dropout, training, rng);
        layer_norm(&add(&z1, &ca), &params.ln2_g.tensor, &params.ln2_b.tensor, LN_EPS)
    } else {
        layer_norm(&z1, &params.ln2_g.tensor, &params.ln2_b.tensor, LN_EPS)
    };

    let h = relu(&add_row(&matmul(&z2, &params.ffn_w1.tensor), &params.ffn_b1.tensor));
    let ffn = add_row(&matmul(&h, &params.ffn_w2.tensor), &params.ffn_b2.tensor);
    Ok(layer_norm(
        &add(&z2, &ffn),
        &params.ln3_g.tensor,
        &params.ln3_b.tensor,
        LN_EPS,
    ))
}

pub struct LayerOutput {
    pub feats: Tensor,
    pub preds: BoxPreds,
}

/// Computes normalized reference points for all candidates. Degenerate
/// projections get a zero reference and a flag; they keep participating
/// in self-attention and the FFN but contribute nothing to cross-attention.
pub fn reference_points(cam: &CameraModel, coords: &[Point3]) -> (Vec<Unit2>, Vec<bool>) {
    let mut refs = Vec::with_capacity(coords.len());
    let mut flags = Vec::with_capacity(coords.len());
    for c in coords {
        match ref_point(cam, *c) {
            Ok(r) => {
                refs.push(r);
                flags.push(false);
            }
            Err(_) => {
                refs.push(Unit2 { a: 0.0, b: 0.0 });
                flags.push(true);
            }
        }
    }
    (refs, flags)
}

/// Runs the full stack. Layer 0 applies prediction head 0 to the raw
/// input features; each subsequent layer receives a positional embedding
/// computed from the previous layer's box parameters (detached) and emits
/// its own head's predictions.
pub fn demf_forward(
    pf: &PointFeatureSet,
    cam: &CameraModel,
    pyramid: &FeaturePyramid,
    stack: &DemfStack,
    training: bool,
    rng: &mut StreamRng,
) -> Result<Vec<LayerOutput>, DemfError> {
    let (refs, flags) = reference_points(cam, &pf.coords);
    let mut outputs = Vec::with_capacity(stack.config.depth + 1);
    outputs.push(LayerOutput {
        feats: pf.feats.clone(),
        preds: stack.heads[0].forward(&pf.feats, &pf.coords),
    });
    let mut z = pf.feats.clone();
    for (l, layer) in stack.layers.iter().enumerate() {
        // Refined spatial encoding from the previous layer's boxes,
        // cut from the gradient graph so per-layer heads stay independent.
        let box_vec = outputs[l].preds.detached_param_vector();
        let pos = add_row(&matmul(&box_vec, &layer.pos_w.tensor), &layer.pos_b.tensor);
        z = demf_layer(
            &z,
            &refs,
            &flags,
            pyramid,
            &pos,
            layer,
            &stack.config,
            training,
            rng,
        )?;
        outputs.push(LayerOutput {
            feats: z.clone(),
            preds: stack.heads[l + 1].forward(&z, &pf.coords),
        });
    }
    Ok(outputs)
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub class_ce: f64,
    pub center_l1: f64,
    pub size_l1: f64,
    pub assign_radius: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class_ce: 1.0,
            center_l1: 1.0,
            size_l1: 1.0,
            assign_radius: 0.5,
        }
    }
}

/// Assigns each candidate coordinate to its nearest ground-truth center
/// within the radius; `None` means background.
pub fn assign_candidates(
    coords: &[Point3],
    gts: &[GroundTruthBox],
    radius: f64,
) -> Vec<Option<usize>> {
    coords
        .iter()
        .map(|c| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                let d = c.dist(&gt.bbox.center);
                if d <= radius && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((gi, d));
                }
            }
            best.map(|(gi, _)| gi)
        })
        .collect()
}

/// Classification plus box-regression loss for one head's predictions:
/// cross-entropy over classes (background for unassigned candidates),
/// L1 on center and log-size for assigned ones. Returns a scalar sum.
pub fn detection_loss(
    preds: &BoxPreds,
    coords: &[Point3],
    gts: &[GroundTruthBox],
    weights: &LossWeights,
) -> Tensor {
    let bg = preds.num_classes();
    let assign = assign_candidates(coords, gts, weights.assign_radius);
    let targets: Vec<usize> = assign
        .iter()
        .map(|a| a.map(|gi| gts[gi].class_id).unwrap_or(bg))
        .collect();
    let logp = log_softmax_rows(&preds.logits);
    let ce = sum(&nll_rows(&logp, &targets));
    let mut loss = scale(&ce, weights.class_ce);

    let assigned: Vec<(usize, usize)> = assign
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|gi| (i, gi)))
        .collect();
    if !assigned.is_empty() {
        let rows: Vec<usize> = assigned.iter().map(|(i, _)| *i).collect();
        let mut tc = vec![0.0; assigned.len() * 3];
        let mut ts = vec![0.0; assigned.len() * 3];
        for (o, (_, gi)) in assigned.iter().enumerate() {
            let gt = &gts[*gi];
            tc[o * 3] = gt.bbox.center.x;
            tc[o * 3 + 1] = gt.bbox.center.y;
            tc[o * 3 + 2] = gt.bbox.center.z;
            for d in 0..3 {
                ts[o * 3 + d] = gt.bbox.size[d].ln();
            }
        }
        let target_centers = Tensor::new(&[assigned.len(), 3], tc);
        let target_log_sizes = Tensor::new(&[assigned.len(), 3], ts);
        let c_l1 = sum(&abs(&sub(&select_rows(&preds.centers, &rows), &target_centers)));
        let s_l1 = sum(&abs(&sub(&select_rows(&preds.log_sizes, &rows), &target_log_sizes)));
        loss = add(&loss, &scale(&c_l1, weights.center_l1));
        loss = add(&loss, &scale(&s_l1, weights.size_l1));
    }
    loss
}

impl BoxPreds {
    pub fn num_classes(&self) -> usize {
        self.logits.shape()[1] - 1
    }
}

/// Arithmetic mean of the per-layer losses (the layer-averaged objective).
pub fn total_loss(per_layer: &[Tensor]) -> Result<Tensor, DemfError> {
    if per_layer.is_empty() {
        return Err(DemfError::EmptyList);
    }
    let mut acc = per_layer[0].clone();
    for l in &per_layer[1..] {
        acc = add(&acc, l);
    }
    Ok(scale(&acc, 1.0 / per_layer.len() as f64))
}

/// Turns one head's predictions into detections: candidates whose argmax
/// class is background are dropped, the rest score with their class
/// probability.
pub fn predictions_to_detections(preds: &BoxPreds) -> Vec<Detection> {
    let n = preds.logits.shape()[0];
    let ncls = preds.num_classes();
    let probs = softmax_rows(&preds.logits).data();
    let boxes = preds.decode_boxes();
    let mut dets = Vec::new();
    for i in 0..n {
        let row = &probs[i * (ncls + 1)..(i + 1) * (ncls + 1)];
        let (arg, &p) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        if arg == ncls {
            continue;
        }
        dets.push(Detection {
            bbox: boxes[i],
            class_id: arg,
            score: p,
        });
    }
    dets
}

/// Eval-time ensemble: averages class probabilities and box parameters
/// across all layer heads, then decodes detections from the average.
pub fn ensemble_predictions(outputs: &[LayerOutput]) -> BoxPreds {
    assert!(!outputs.is_empty());
    let n = outputs[0].preds.logits.shape()[0];
    let ncls = outputs[0].preds.num_classes();
    let k = outputs.len() as f64;
    let mut probs = vec![0.0; n * (ncls + 1)];
    let mut centers = vec![0.0; n * 3];
    let mut log_sizes = vec![0.0; n * 3];
    for o in outputs {
        for (acc, v) in probs.iter_mut().zip(softmax_rows(&o.preds.logits).data()) {
            *acc += v / k;
        }
        for (acc, v) in centers.iter_mut().zip(o.preds.centers.data()) {
            *acc += v / k;
        }
        for (acc, v) in log_sizes.iter_mut().zip(o.preds.log_sizes.data()) {
            *acc += v / k;
        }
    }
    // Averaged probabilities stand in for logits; their log keeps argmax
    // and relative magnitudes for scoring.
    let logits: Vec<f64> = probs.iter().map(|p| p.max(1e-300).ln()).collect();
    BoxPreds {
        logits: Tensor::new(&[n, ncls + 1], logits),
        centers: Tensor::new(&[n, 3], centers),
        log_sizes: Tensor::new(&[n, 3], log_sizes),
    }
}
