//! Finite-difference verification of analytic gradients for every
//! attention building block and a full fusion layer (float64, h = 1e-5,
//! relative tolerance 1e-6, 20 random seeds per op).

mod common;

use demf::attention::{
    ms_deform_attn_batch, self_attn, DeformAttnParams, FeaturePyramid, OffsetMode, SelfAttnParams,
};
use demf::demf::{demf_layer, DemfConfig, DemfLayerParams};
use demf::diffcore::{grad_check, sample_rows, sum, StreamRng, Tensor};
use demf::geometry::Unit2;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

#[test]
fn bilinear_sample_gradients() {
    for seed in 0..20u64 {
        let mut rng = StreamRng::new(seed, "gc-bilinear");
        let (c, h, w) = (2, 4, 5);
        let map = Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.normal()).collect())
            .requires_grad(true);
        // Interior locations: away from pixel-boundary kinks where the
        // bilinear surface is only piecewise differentiable.
        let uv = Tensor::new(
            &[3, 2],
            (0..6)
                .map(|_| {
                    let cell = rng.uniform_range(0.25, 0.75);
                    (rng.uniform_usize(3) as f64 + cell + 0.5) / 5.0
                })
                .collect(),
        )
        .requires_grad(true);
        let weights = Tensor::new(&[3, c], (0..3 * c).map(|_| rng.normal()).collect());
        let report = grad_check(
            |ins| sum(&demf::diffcore::mul(&sample_rows(&ins[0], &ins[1]), &weights)),
            &[map, uv],
            H,
            TOL,
        );
        assert!(report.pass, "seed {seed}: {:?}", report.worst());
    }
}

fn deform_params_and_pyramid(
    rng: &mut StreamRng,
    levels: usize,
) -> (Tensor, Vec<Unit2>, FeaturePyramid, DeformAttnParams, Vec<Tensor>) {
    let (n, c, m, k) = (2, 4, 2, 2);
    let params = DeformAttnParams::init("gc", c, m, k, levels, OffsetMode::Learned, rng);
    let feats =
        Tensor::new(&[n, c], (0..n * c).map(|_| rng.normal() * 0.5).collect()).requires_grad(true);
    let refs = vec![
        Unit2 {
            a: rng.uniform_range(0.3, 0.7),
            b: rng.uniform_range(0.3, 0.7),
        },
        Unit2 {
            a: rng.uniform_range(0.3, 0.7),
            b: rng.uniform_range(0.3, 0.7),
        },
    ];
    let mut maps = Vec::new();
    for li in 0..levels {
        let (h, w) = (6 - li, 5 - li);
        maps.push(
            Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.normal() * 0.5).collect())
                .requires_grad(true),
        );
    }
    let pyramid = FeaturePyramid::new(maps.clone()).unwrap();
    (feats, refs, pyramid, params, maps)
}

#[test]
fn deform_attn_gradients_single_level() {
    for seed in 0..20u64 {
        let mut rng = StreamRng::new(seed, "gc-deform");
        let (feats, refs, _, params, maps) = deform_params_and_pyramid(&mut rng, 1);
        let mut inputs = vec![feats];
        inputs.extend(maps);
        inputs.extend(params.parameters().iter().map(|p| p.tensor.clone()));
        let report = grad_check(
            |ins| {
                let pyramid = FeaturePyramid::new(vec![ins[1].clone()]).unwrap();
                sum(&ms_deform_attn_batch(&ins[0], &refs, None, &pyramid, &params).unwrap())
            },
            &inputs,
            H,
            TOL,
        );
        assert!(report.pass, "seed {seed}: {:?}", report.worst());
    }
}

#[test]
fn ms_deform_attn_gradients_two_levels() {
    for seed in 0..20u64 {
        let mut rng = StreamRng::new(seed, "gc-msdeform");
        let (feats, refs, _, params, maps) = deform_params_and_pyramid(&mut rng, 2);
        let mut inputs = vec![feats];
        inputs.extend(maps);
        inputs.extend(params.parameters().iter().map(|p| p.tensor.clone()));
        let report = grad_check(
            |ins| {
                let pyramid = FeaturePyramid::new(vec![ins[1].clone(), ins[2].clone()]).unwrap();
                sum(&ms_deform_attn_batch(&ins[0], &refs, None, &pyramid, &params).unwrap())
            },
            &inputs,
            H,
            TOL,
        );
        assert!(report.pass, "seed {seed}: {:?}", report.worst());
    }
}

#[test]
fn self_attn_gradients() {
    for seed in 0..20u64 {
        let mut rng = StreamRng::new(seed, "gc-selfattn");
        let (n, c, m) = (3, 4, 2);
        let params = SelfAttnParams::init("gcsa", c, m, &mut rng);
        let zs =
            Tensor::new(&[n, c], (0..n * c).map(|_| rng.normal()).collect()).requires_grad(true);
        let pos = Tensor::new(&[n, c], (0..n * c).map(|_| rng.normal() * 0.3).collect())
            .requires_grad(true);
        let mut inputs = vec![zs, pos];
        inputs.extend(params.parameters().iter().map(|p| p.tensor.clone()));
        let report = grad_check(
            |ins| sum(&self_attn(&ins[0], &ins[1], &params).unwrap()),
            &inputs,
            H,
            TOL,
        );
        assert!(report.pass, "seed {seed}: {:?}", report.worst());
    }
}

#[test]
fn full_demf_layer_gradients() {
    for seed in 0..20u64 {
        let mut rng = StreamRng::new(seed, "gc-layer");
        let config = DemfConfig {
            width: 4,
            heads: 2,
            samples: 1,
            levels: 1,
            depth: 1,
            num_classes: 2,
            dropout: 0.0,
            offset_mode: OffsetMode::Learned,
            fusion_enabled: true,
        };
        let params = DemfLayerParams::init("gcl", 4, 2, 1, 1, OffsetMode::Learned, &mut rng);
        let n = 2;
        let feats =
            Tensor::new(&[n, 4], (0..n * 4).map(|_| rng.normal()).collect()).requires_grad(true);
        let pos = Tensor::new(&[n, 4], (0..n * 4).map(|_| rng.normal() * 0.3).collect())
            .requires_grad(true);
        let map = Tensor::new(&[4, 5, 5], (0..4 * 25).map(|_| rng.normal() * 0.5).collect())
            .requires_grad(true);
        let refs = vec![
            Unit2 { a: 0.45, b: 0.55 },
            Unit2 { a: 0.6, b: 0.4 },
        ];
        let flags = vec![false, false];
        let mut inputs = vec![feats, pos, map];
        inputs.extend(params.parameters(true).iter().map(|p| p.tensor.clone()));
        let report = grad_check(
            |ins| {
                let pyramid = FeaturePyramid::new(vec![ins[2].clone()]).unwrap();
                let mut drop_rng = StreamRng::new(0, "unused");
                sum(
                    &demf_layer(
                        &ins[0], &refs, &flags, &pyramid, &ins[1], &params, &config, false,
                        &mut drop_rng,
                    )
                    .unwrap(),
                )
            },
            &inputs,
            H,
            TOL,
        );
        assert!(report.pass, "seed {seed}: {:?}", report.worst());
    }
}
