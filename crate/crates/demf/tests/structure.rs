//! Structural invariants: permutation equivariance, gradient detachment
//! of the box-parameter feedback path, gradient coverage of every
//! trainable parameter, and degenerate-candidate masking.

mod common;

use demf::attention::{ms_deform_attn_batch, DeformAttnParams, FeaturePyramid, OffsetMode};
use demf::demf::{detection_loss, total_loss, LossWeights, PredHead};
use demf::diffcore::{sum, StreamRng, Tensor};
use demf::geometry::{Point3, Unit2};
use demf::toydet::{synth_scene, train, SceneSpec, ToyModel, TrainConfig};

fn small_attn_instance(
    seed: u64,
) -> (Tensor, Vec<Unit2>, Vec<bool>, FeaturePyramid, DeformAttnParams) {
    let mut rng = StreamRng::new(seed, "structure");
    let (n, c, m, k, l) = (5, 8, 2, 2, 2);
    let params = DeformAttnParams::init("st", c, m, k, l, OffsetMode::Learned, &mut rng);
    let queries = Tensor::new(&[n, c], (0..n * c).map(|_| rng.normal()).collect());
    let refs: Vec<Unit2> = (0..n)
        .map(|_| Unit2 {
            a: rng.uniform(),
            b: rng.uniform(),
        })
        .collect();
    let degenerate = vec![false, true, false, false, true];
    let maps = vec![
        Tensor::new(&[c, 6, 6], (0..c * 36).map(|_| rng.normal()).collect()),
        Tensor::new(&[c, 4, 4], (0..c * 16).map(|_| rng.normal()).collect()),
    ];
    let pyramid = FeaturePyramid::new(maps).unwrap();
    (queries, refs, degenerate, pyramid, params)
}

#[test]
fn deformable_attention_is_permutation_equivariant() {
    let (queries, refs, degenerate, pyramid, params) = small_attn_instance(1);
    let n = refs.len();
    let c = params.width;
    let base = ms_deform_attn_batch(&queries, &refs, Some(&degenerate), &pyramid, &params)
        .unwrap()
        .data();
    let perm = [3usize, 0, 4, 1, 2];
    let qd = queries.data();
    let mut qperm = vec![0.0; n * c];
    for (i, &p) in perm.iter().enumerate() {
        qperm[i * c..(i + 1) * c].copy_from_slice(&qd[p * c..(p + 1) * c]);
    }
    let rperm: Vec<Unit2> = perm.iter().map(|&p| refs[p]).collect();
    let dperm: Vec<bool> = perm.iter().map(|&p| degenerate[p]).collect();
    let permuted = ms_deform_attn_batch(
        &Tensor::new(&[n, c], qperm),
        &rperm,
        Some(&dperm),
        &pyramid,
        &params,
    )
    .unwrap()
    .data();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(
            &permuted[i * c..(i + 1) * c],
            &base[p * c..(p + 1) * c],
            "row {i}"
        );
    }
}

#[test]
fn degenerate_candidates_produce_exactly_zero_rows() {
    let (queries, refs, degenerate, pyramid, params) = small_attn_instance(2);
    let c = params.width;
    let out = ms_deform_attn_batch(&queries, &refs, Some(&degenerate), &pyramid, &params)
        .unwrap()
        .data();
    for (i, flag) in degenerate.iter().enumerate() {
        let row = &out[i * c..(i + 1) * c];
        if *flag {
            assert!(row.iter().all(|v| *v == 0.0));
        } else {
            assert!(row.iter().any(|v| *v != 0.0));
        }
    }
}

#[test]
fn detached_box_vector_cuts_the_gradient_path() {
    let mut rng = StreamRng::new(7, "detach");
    let head = PredHead::init("h", 8, 3, &mut rng);
    let feats = Tensor::new(&[2, 8], (0..16).map(|_| rng.normal()).collect()).requires_grad(true);
    let coords = vec![Point3::new(0.0, 0.0, 2.0), Point3::new(0.5, 0.1, 2.5)];

    let preds = head.forward(&feats, &coords);
    sum(&preds.detached_param_vector()).backward().unwrap();
    assert!(feats.grad().is_none(), "detached path must not reach inputs");

    let preds = head.forward(&feats, &coords);
    sum(&preds.centers).backward().unwrap();
    assert!(feats.grad().is_some(), "live path must reach inputs");
}

#[test]
fn every_trainable_parameter_receives_a_gradient() {
    let mut config = TrainConfig::toy(3);
    config.scene = SceneSpec {
        num_points: 512,
        ..SceneSpec::default()
    };
    config.candidates = 8;
    config.demf.width = 16;
    let model = ToyModel::init(&config);
    let scene = synth_scene(11, &config.scene).unwrap();
    let mut rng = StreamRng::new(0, "drop");
    let outputs = model.forward(&scene, false, &mut rng).unwrap();
    let coords = demf::toydet::farthest_point_sample(&scene.points, config.candidates);
    let losses: Vec<Tensor> = outputs
        .iter()
        .map(|o| detection_loss(&o.preds, &coords, &scene.gts, &LossWeights::default()))
        .collect();
    total_loss(&losses).unwrap().backward().unwrap();
    for p in model.trainable_parameters(false) {
        assert!(p.tensor.grad().is_some(), "no gradient for '{}'", p.name);
    }
}

#[test]
fn two_identical_candidates_get_identical_outputs() {
    let (queries, mut refs, _, pyramid, params) = small_attn_instance(4);
    let c = params.width;
    let qd = queries.data();
    let mut dup = qd.clone();
    dup.copy_within(0..c, c);
    refs[1] = refs[0];
    let out = ms_deform_attn_batch(
        &Tensor::new(&[refs.len(), c], dup),
        &refs,
        None,
        &pyramid,
        &params,
    )
    .unwrap()
    .data();
    assert_eq!(&out[0..c], &out[c..2 * c]);
}

#[test]
fn checkpoints_from_different_configs_are_rejected() {
    let a = TrainConfig::toy(1);
    let mut b = TrainConfig::toy(1);
    b.demf.fusion_enabled = false;
    let model_a = ToyModel::init(&a);
    let model_b = ToyModel::init(&b);
    let bytes = demf::diffcore::save_checkpoint(&model_a.parameters());
    assert!(demf::diffcore::load_checkpoint(&bytes, &model_b.parameters()).is_err());
}

#[test]
fn non_finite_loss_aborts_training_with_step_context() {
    let mut config = TrainConfig::toy(5);
    config.scene.num_points = 512;
    config.candidates = 8;
    config.demf.width = 16;
    config.steps = 5;
    // A loss weight at f64::MAX overflows the weighted sum to +inf on the
    // very first step, which the training loop must turn into an error
    // rather than silently writing non-finite metrics.
    config.loss.class_ce = f64::MAX;
    match train(&config) {
        Err(demf::toydet::TrainError::NonFiniteLoss { step, value }) => {
            assert_eq!(step, 0);
            assert!(!value.is_finite());
        }
        Ok(_) => panic!("an overflowing loss weight should abort training"),
        Err(e) => panic!("unexpected error: {e}"),
    }
}
