//! Bilinear sampling, deformable attention over single- and multi-scale
//! feature maps, and standard multi-head self-attention.
//!
//! A query attends to K sampled locations per head on each pyramid level,
//! anchored at a normalized reference point. Offsets and attention logits
//! come from linear heads over the query; attention weights are softmaxed
//! jointly over all levels*samples per head. Offsets are expressed in
//! units of the sampled level's grid cells, so one logit unit is about
//! one pixel at every scale.

use thiserror::Error;

use crate::diffcore::{
    add, add_row, matmul, mul, mul_row, reshape, sample_rows, scale, slice_cols, softmax_rows,
    transpose, concat_cols, deform_combine, Parameter, StreamRng, Tensor,
};
use crate::geometry::Unit2;

#[derive(Debug, Error)]
pub enum AttnError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("pyramid has {got} levels, params expect {expected}")]
    LevelMismatch { expected: usize, got: usize },
    #[error("grid sampling requires a perfect-square K, got {0}")]
    NonSquareK(usize),
}

/// Multi-scale image feature maps sharing a channel width.
#[derive(Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub channels: usize,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<FeaturePyramid, AttnError> {
        if levels.is_empty() {
            return Err(AttnError::LevelMismatch {
                expected: 1,
                got: 0,
            });
        }
        let c = levels[0].shape()[0];
        for lv in &levels {
            let s = lv.shape();
            if s.len() != 3 || s[0] != c {
                return Err(AttnError::ShapeMismatch(s, vec![c, 0, 0]));
            }
        }
        Ok(FeaturePyramid { levels, channels: c })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetMode {
    Learned,
    Grid,
}

/// Parameters of one deformable attention block.
///
/// Column layouts: the offset head emits (level, head, sample, 2) so each
/// level's block is contiguous; the weight head emits (head, level, sample)
/// so the per-head joint softmax is a plain row reshape.
pub struct DeformAttnParams {
    pub heads: usize,
    pub samples: usize,
    pub levels: usize,
    pub width: usize,
    pub mode: OffsetMode,
    pub value_w: Parameter,
    pub value_b: Parameter,
    pub output_w: Parameter,
    pub output_b: Parameter,
    pub offset_w: Parameter,
    pub offset_b: Parameter,
    pub weight_w: Parameter,
    pub weight_b: Parameter,
}

fn linear_init(rng: &mut StreamRng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect()
}

impl DeformAttnParams {
    /// Initializes a block. Offset weights start at zero with biases set
    /// so the initial samples form a small ring around the reference:
    /// head m, sample k at angle 2*pi*(m*K+k)/(M*K), radius k+1 cells,
    /// replicated per level. The weight head starts at zero, giving
    /// uniform initial attention.
    pub fn init(
        name: &str,
        width: usize,
        heads: usize,
        samples: usize,
        levels: usize,
        mode: OffsetMode,
        rng: &mut StreamRng,
    ) -> DeformAttnParams {
        assert!(width.is_multiple_of(heads), "C must be divisible by M");
        let c = width;
        let (m, k, l) = (heads, samples, levels);
        let mut offset_bias = vec![0.0; l * m * k * 2];
        for li in 0..l {
            for mi in 0..m {
                for ki in 0..k {
                    let angle =
                        2.0 * std::f64::consts::PI * (mi * k + ki) as f64 / (m * k) as f64;
                    let radius = (ki + 1) as f64;
                    let base = ((li * m + mi) * k + ki) * 2;
                    offset_bias[base] = radius * angle.cos();
                    offset_bias[base + 1] = radius * angle.sin();
                }
            }
        }
        DeformAttnParams {
            heads,
            samples,
            levels,
            width,
            mode,
            value_w: Parameter::new(format!("{name}.value.w"), &[c, c], linear_init(rng, c, c)),
            value_b: Parameter::new(format!("{name}.value.b"), &[c], vec![0.0; c]),
            output_w: Parameter::new(format!("{name}.output.w"), &[c, c], linear_init(rng, c, c)),
            output_b: Parameter::new(format!("{name}.output.b"), &[c], vec![0.0; c]),
            offset_w: Parameter::new(
                format!("{name}.offset.w"),
                &[c, l * m * k * 2],
                vec![0.0; c * l * m * k * 2],
            ),
            offset_b: Parameter::new(format!("{name}.offset.b"), &[l * m * k * 2], offset_bias),
            weight_w: Parameter::new(
                format!("{name}.weight.w"),
                &[c, m * l * k],
                vec![0.0; c * m * l * k],
            ),
            weight_b: Parameter::new(format!("{name}.weight.b"), &[m * l * k], vec![0.0; m * l * k]),
        }
    }

    /// Identity-shaped parameters for reduction tests: value and output
    /// projections are the identity, offset and weight heads are zero.
    pub fn identity(width: usize, heads: usize, samples: usize, levels: usize) -> DeformAttnParams {
        let mut rng = StreamRng::new(0, "identity");
        let p = DeformAttnParams::init(
            "id",
            width,
            heads,
            samples,
            levels,
            OffsetMode::Learned,
            &mut rng,
        );
        let mut eye = vec![0.0; width * width];
        for i in 0..width {
            eye[i * width + i] = 1.0;
        }
        p.value_w.tensor.set_data(eye.clone());
        p.output_w.tensor.set_data(eye);
        p.offset_b
            .tensor
            .set_data(vec![0.0; p.offset_b.tensor.len()]);
        p
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut v = vec![
            self.value_w.clone(),
            self.value_b.clone(),
            self.output_w.clone(),
            self.output_b.clone(),
            self.weight_w.clone(),
            self.weight_b.clone(),
        ];
        if self.mode == OffsetMode::Learned {
            v.push(self.offset_w.clone());
            v.push(self.offset_b.clone());
        }
        v
    }
}

fn integer_sqrt(k: usize) -> Option<usize> {
    let r = (k as f64).sqrt().round() as usize;
    if r * r == k {
        Some(r)
    } else {
        None
    }
}

/// Multi-scale deformable attention over a batch of N queries.
///
/// `refs[i]` anchors query i; a `true` in `degenerate` zeroes that query's
/// contribution entirely (its candidate could not be projected).
pub fn ms_deform_attn_batch(
    queries: &Tensor,
    refs: &[Unit2],
    degenerate: Option<&[bool]>,
    pyramid: &FeaturePyramid,
    params: &DeformAttnParams,
) -> Result<Tensor, AttnError> {
    let sq = queries.shape();
    if sq.len() != 2 || sq[1] != params.width || sq[0] != refs.len() {
        return Err(AttnError::ShapeMismatch(sq, vec![refs.len(), params.width]));
    }
    if pyramid.levels.len() != params.levels {
        return Err(AttnError::LevelMismatch {
            expected: params.levels,
            got: pyramid.levels.len(),
        });
    }
    if pyramid.channels != params.width {
        return Err(AttnError::ShapeMismatch(
            vec![pyramid.channels],
            vec![params.width],
        ));
    }
    let n = sq[0];
    let (m, k, l, c) = (params.heads, params.samples, params.levels, params.width);
    let d = c / m;

    // Reference point repeated for every (head, sample) of its candidate.
    let mut base = vec![0.0; n * m * k * 2];
    for (i, r) in refs.iter().enumerate() {
        for j in 0..m * k {
            base[(i * m * k + j) * 2] = r.a;
            base[(i * m * k + j) * 2 + 1] = r.b;
        }
    }
    let base = Tensor::new(&[n * m * k, 2], base);

    let learned_offsets = match params.mode {
        OffsetMode::Learned => Some(add_row(
            &matmul(queries, &params.offset_w.tensor),
            &params.offset_b.tensor,
        )),
        OffsetMode::Grid => None,
    };
    let grid_side = match params.mode {
        OffsetMode::Grid => Some(integer_sqrt(k).ok_or(AttnError::NonSquareK(k))?),
        OffsetMode::Learned => None,
    };

    let mut projected = Vec::with_capacity(l);
    for (li, level) in pyramid.levels.iter().enumerate() {
        let s = level.shape();
        let (h, w) = (s[1], s[2]);
        // Offsets are in grid cells of this level; convert to normalized units.
        let cell = Tensor::new(&[2], vec![1.0 / w as f64, 1.0 / h as f64]);
        let offs = match (&learned_offsets, grid_side) {
            (Some(all), _) => {
                let block = slice_cols(all, li * m * k * 2, m * k * 2);
                reshape(&block, &[n * m * k, 2])
            }
            (None, Some(side)) => {
                // Fixed grid centered on the reference, 1-cell spacing.
                let half = (side as f64 - 1.0) / 2.0;
                let mut data = vec![0.0; n * m * k * 2];
                for i in 0..n * m {
                    for ki in 0..k {
                        let gy = (ki / side) as f64 - half;
                        let gx = (ki % side) as f64 - half;
                        data[(i * k + ki) * 2] = gx;
                        data[(i * k + ki) * 2 + 1] = gy;
                    }
                }
                Tensor::new(&[n * m * k, 2], data)
            }
            _ => unreachable!(),
        };
        let uv = add(&mul_row(&offs, &cell), &base);
        let sampled = sample_rows(level, &uv);
        projected.push(add_row(
            &matmul(&sampled, &params.value_w.tensor),
            &params.value_b.tensor,
        ));
    }

    let logits = add_row(&matmul(queries, &params.weight_w.tensor), &params.weight_b.tensor);
    let weights = softmax_rows(&reshape(&logits, &[n * m, l * k]));

    let combined = deform_combine(&weights, &projected, m, d);
    let mut out = add_row(&matmul(&combined, &params.output_w.tensor), &params.output_b.tensor);

    if let Some(flags) = degenerate {
        if flags.iter().any(|f| *f) {
            let mut mask = vec![1.0; n * c];
            for (i, f) in flags.iter().enumerate() {
                if *f {
                    for j in 0..c {
                        mask[i * c + j] = 0.0;
                    }
                }
            }
            out = mul(&out, &Tensor::new(&[n, c], mask));
        }
    }
    Ok(out)
}

/// Single-scale deformable attention for one query (L = 1).
pub fn deform_attn(
    q: &Tensor,
    p: Unit2,
    x: &Tensor,
    params: &DeformAttnParams,
) -> Result<Tensor, AttnError> {
    if params.levels != 1 {
        return Err(AttnError::LevelMismatch {
            expected: 1,
            got: params.levels,
        });
    }
    let pyramid = FeaturePyramid::new(vec![x.clone()])?;
    ms_deform_attn(q, p, &pyramid, params)
}

/// Multi-scale deformable attention for one query.
pub fn ms_deform_attn(
    q: &Tensor,
    p_hat: Unit2,
    pyramid: &FeaturePyramid,
    params: &DeformAttnParams,
) -> Result<Tensor, AttnError> {
    let sq = q.shape();
    if sq != vec![params.width] {
        return Err(AttnError::ShapeMismatch(sq, vec![params.width]));
    }
    let qm = reshape(q, &[1, params.width]);
    let out = ms_deform_attn_batch(&qm, &[p_hat], None, pyramid, params)?;
    Ok(reshape(&out, &[params.width]))
}

/// Deformable attention with fixed-grid sampling locations; attention
/// weights are still learned.
pub fn grid_deform_attn(
    q: &Tensor,
    p_hat: Unit2,
    pyramid: &FeaturePyramid,
    params: &DeformAttnParams,
) -> Result<Tensor, AttnError> {
    if params.mode != OffsetMode::Grid {
        return Err(AttnError::NonSquareK(params.samples));
    }
    ms_deform_attn(q, p_hat, pyramid, params)
}

pub struct SelfAttnParams {
    pub heads: usize,
    pub width: usize,
    pub query_w: Parameter,
    pub query_b: Parameter,
    pub key_w: Parameter,
    pub key_b: Parameter,
    pub value_w: Parameter,
    pub value_b: Parameter,
    pub output_w: Parameter,
    pub output_b: Parameter,
}

impl SelfAttnParams {
    pub fn init(name: &str, width: usize, heads: usize, rng: &mut StreamRng) -> SelfAttnParams {
        assert!(width.is_multiple_of(heads), "C must be divisible by M");
        let c = width;
        SelfAttnParams {
            heads,
            width,
            query_w: Parameter::new(format!("{name}.q.w"), &[c, c], linear_init(rng, c, c)),
            query_b: Parameter::new(format!("{name}.q.b"), &[c], vec![0.0; c]),
            key_w: Parameter::new(format!("{name}.k.w"), &[c, c], linear_init(rng, c, c)),
            key_b: Parameter::new(format!("{name}.k.b"), &[c], vec![0.0; c]),
            value_w: Parameter::new(format!("{name}.v.w"), &[c, c], linear_init(rng, c, c)),
            value_b: Parameter::new(format!("{name}.v.b"), &[c], vec![0.0; c]),
            output_w: Parameter::new(format!("{name}.o.w"), &[c, c], linear_init(rng, c, c)),
            output_b: Parameter::new(format!("{name}.o.b"), &[c], vec![0.0; c]),
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![
            self.query_w.clone(),
            self.query_b.clone(),
            self.key_w.clone(),
            self.key_b.clone(),
            self.value_w.clone(),
            self.value_b.clone(),
            self.output_w.clone(),
            self.output_b.clone(),
        ]
    }
}

/// Multi-head scaled dot-product attention over the candidate set.
/// Queries and keys are zs + pos; values are zs. The residual add is the
/// caller's responsibility.
pub fn self_attn(zs: &Tensor, pos: &Tensor, params: &SelfAttnParams) -> Result<Tensor, AttnError> {
    let s = zs.shape();
    if s.len() != 2 || s[1] != params.width {
        return Err(AttnError::ShapeMismatch(s, vec![0, params.width]));
    }
    if pos.shape() != s {
        return Err(AttnError::ShapeMismatch(pos.shape(), s));
    }
    let d = params.width / params.heads;
    let qk_in = add(zs, pos);
    let q = add_row(&matmul(&qk_in, &params.query_w.tensor), &params.query_b.tensor);
    let k = add_row(&matmul(&qk_in, &params.key_w.tensor), &params.key_b.tensor);
    let v = add_row(&matmul(zs, &params.value_w.tensor), &params.value_b.tensor);

    let mut heads_out = Vec::with_capacity(params.heads);
    for m in 0..params.heads {
        let qm = slice_cols(&q, m * d, d);
        let km = slice_cols(&k, m * d, d);
        let vm = slice_cols(&v, m * d, d);
        let scores = scale(&matmul(&qm, &transpose(&km)), 1.0 / (d as f64).sqrt());
        let attn = softmax_rows(&scores);
        heads_out.push(matmul(&attn, &vm));
    }
    let merged = concat_cols(&heads_out);
    Ok(add_row(&matmul(&merged, &params.output_w.tensor), &params.output_b.tensor))
}
