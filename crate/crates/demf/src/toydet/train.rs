//! End-to-end toy model: encoders plus the fusion stack, with a training
//! loop and held-out evaluation.

use thiserror::Error;

use crate::attention::FeaturePyramid;
use crate::demf::{
    demf_forward, detection_loss, ensemble_predictions, predictions_to_detections, total_loss,
    BoxPreds, DemfConfig, DemfError, DemfStack, LayerOutput, LossWeights,
};
use crate::diffcore::{AdamW, AdamWConfig, OptimError, Parameter, StreamRng, Tensor};
use crate::eval::{mean_average_precision, ConfusionMatrix, SceneResult};
use crate::toydet::{
    synth_scene, toy_image_encoder, toy_point_encoder, ImageEncoderParams, PointEncoderParams,
    SceneSpec, ToyError, ToyScene,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Scene(#[from] ToyError),
    #[error(transparent)]
    Model(#[from] DemfError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("non-finite loss {value} at step {step}; training aborted")]
    NonFiniteLoss { step: usize, value: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub candidates: usize,
    pub stat_radius: f64,
    pub demf: DemfConfig,
    /// Keep the image stream's weights fixed during training.
    pub freeze_image: bool,
    pub optim: AdamWConfig,
    /// (name prefix, learning-rate multiplier) pairs.
    pub lr_multipliers: Vec<(String, f64)>,
    pub steps: usize,
    pub eval_every: usize,
    pub eval_scenes: usize,
    pub loss: LossWeights,
    /// Average all per-layer heads at eval time instead of using the last.
    pub ensemble: bool,
    pub iou_threshold: f64,
    /// When false every step reuses the seed-0 scene (overfitting mode).
    pub resample_scenes: bool,
}

impl TrainConfig {
    /// Desk-scale defaults used by the binary and the test suites.
    pub fn toy(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            scene: SceneSpec::default(),
            candidates: 32,
            stat_radius: 0.6,
            demf: DemfConfig {
                width: 32,
                heads: 4,
                samples: 2,
                levels: 2,
                depth: 2,
                num_classes: 4,
                dropout: 0.4,
                offset_mode: crate::attention::OffsetMode::Learned,
                fusion_enabled: true,
            },
            freeze_image: false,
            optim: AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
            lr_multipliers: Vec::new(),
            steps: 300,
            eval_every: 0,
            eval_scenes: 16,
            loss: LossWeights::default(),
            ensemble: false,
            iou_threshold: 0.25,
            resample_scenes: true,
        }
    }
}

pub struct ToyModel {
    pub point_enc: PointEncoderParams,
    pub image_enc: ImageEncoderParams,
    pub stack: DemfStack,
    pub candidates: usize,
}

impl ToyModel {
    pub fn init(config: &TrainConfig) -> ToyModel {
        let mut rng = StreamRng::new(config.seed, "init");
        ToyModel {
            point_enc: PointEncoderParams::init(
                "point_enc",
                config.demf.width,
                config.stat_radius,
                &mut rng,
            ),
            image_enc: ImageEncoderParams::init(
                "image_enc",
                config.demf.width,
                config.demf.levels,
                &mut rng,
            ),
            stack: DemfStack::init(config.demf.clone(), &mut rng),
            candidates: config.candidates,
        }
    }

    /// Every parameter, for checkpointing. The baseline (fusion disabled)
    /// has no cross-attention parameters in this set, so baseline and
    /// fused checkpoints are distinguishable by construction.
    pub fn parameters(&self) -> Vec<Parameter> {
        let mut v = self.point_enc.parameters();
        if self.stack.config.fusion_enabled {
            v.extend(self.image_enc.parameters());
        }
        v.extend(self.stack.parameters());
        v
    }

    /// Parameters the optimizer updates: excludes the image stream when
    /// frozen and all image-side parameters when fusion is disabled.
    pub fn trainable_parameters(&self, freeze_image: bool) -> Vec<Parameter> {
        let mut v = self.point_enc.parameters();
        if self.stack.config.fusion_enabled && !freeze_image {
            v.extend(self.image_enc.parameters());
        }
        v.extend(self.stack.parameters());
        v
    }

    /// Full forward pass on one scene. Without fusion the image is never
    /// touched; a constant single-cell pyramid satisfies the stack's
    /// interface at zero cost.
    pub fn forward(
        &self,
        scene: &ToyScene,
        training: bool,
        rng: &mut StreamRng,
    ) -> Result<Vec<LayerOutput>, DemfError> {
        let pf = toy_point_encoder(&scene.points, self.candidates, &self.point_enc);
        let pyramid = if self.stack.config.fusion_enabled {
            toy_image_encoder(&scene.image, &self.image_enc)
        } else {
            let c = self.stack.config.width;
            let dummy = Tensor::new(&[c, 1, 1], vec![0.0; c]);
            FeaturePyramid::new(vec![dummy; self.stack.config.levels])
                .expect("dummy pyramid is consistent")
        };
        demf_forward(&pf, &scene.cam, &pyramid, &self.stack, training, rng)
    }

    /// Eval-time predictions: ensemble over heads or the final head.
    pub fn predict(&self, scene: &ToyScene, ensemble: bool) -> Result<BoxPreds, DemfError> {
        let mut rng = StreamRng::new(0, "eval");
        let outputs = self.forward(scene, false, &mut rng)?;
        Ok(if ensemble {
            ensemble_predictions(&outputs)
        } else {
            outputs.last().unwrap().preds.clone()
        })
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub per_layer: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub map: f64,
    pub confusion: ConfusionMatrix,
    /// (correct, total) over ground truths with a pair-shared archetype.
    pub ambiguous_correct: usize,
    pub ambiguous_total: usize,
}

impl EvalSummary {
    pub fn ambiguous_accuracy(&self) -> Option<f64> {
        if self.ambiguous_total == 0 {
            None
        } else {
            Some(self.ambiguous_correct as f64 / self.ambiguous_total as f64)
        }
    }
}

/// Classifies each ambiguous ground truth through its nearest candidate:
/// argmax over the real classes (background excluded) of that candidate's
/// scores. Returns (correct, total).
pub fn ambiguous_subset_accuracy(
    scene: &ToyScene,
    coords: &[crate::geometry::Point3],
    preds: &BoxPreds,
) -> (usize, usize) {
    let ncls = preds.num_classes();
    let logits = preds.logits.data();
    let mut correct = 0;
    let mut total = 0;
    for (gi, gt) in scene.gts.iter().enumerate() {
        if !scene.ambiguous[gi] {
            continue;
        }
        total += 1;
        let nearest = coords
            .iter()
            .enumerate()
            .min_by(|a, b| {
                a.1.dist(&gt.bbox.center)
                    .total_cmp(&b.1.dist(&gt.bbox.center))
            })
            .map(|(i, _)| i)
            .unwrap();
        let row = &logits[nearest * (ncls + 1)..nearest * (ncls + 1) + ncls];
        let arg = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        if arg == gt.class_id {
            correct += 1;
        }
    }
    (correct, total)
}

fn eval_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(1_000_000).wrapping_add(i as u64)
}

fn train_seed(base: u64, step: usize) -> u64 {
    base.wrapping_add(step as u64)
}

/// Evaluates the model on freshly generated held-out scenes (a disjoint
/// seed range from training).
pub fn evaluate_model(model: &ToyModel, config: &TrainConfig) -> Result<EvalSummary, TrainError> {
    let mut scene_results = Vec::with_capacity(config.eval_scenes);
    let mut confusion = ConfusionMatrix::new(config.demf.num_classes);
    let mut amb_correct = 0;
    let mut amb_total = 0;
    for i in 0..config.eval_scenes {
        let scene = synth_scene(eval_seed(config.seed, i), &config.scene)?;
        let preds = model.predict(&scene, config.ensemble)?;
        let coords =
            crate::toydet::farthest_point_sample(&scene.points, model.candidates);
        let result = SceneResult {
            detections: predictions_to_detections(&preds),
            gts: scene.gts.clone(),
        };
        confusion.accumulate(&result, config.iou_threshold);
        let (c, t) = ambiguous_subset_accuracy(&scene, &coords, &preds);
        amb_correct += c;
        amb_total += t;
        scene_results.push(result);
    }
    Ok(EvalSummary {
        map: mean_average_precision(&scene_results, config.demf.num_classes, config.iou_threshold),
        confusion,
        ambiguous_correct: amb_correct,
        ambiguous_total: amb_total,
    })
}

pub struct TrainOutcome {
    pub model: ToyModel,
    pub records: Vec<StepRecord>,
    /// (step, summary) for each periodic evaluation.
    pub evals: Vec<(usize, EvalSummary)>,
}

/// Trains a fresh model. Fully deterministic for a fixed config: scene
/// seeds, initialization, and dropout all derive from `config.seed`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.scene.validate()?;
    let model = ToyModel::init(config);
    let trainable = model.trainable_parameters(config.freeze_image);
    let mut opt = AdamW::new(config.optim.clone());
    for (prefix, mult) in &config.lr_multipliers {
        opt.set_lr_multiplier(prefix, *mult);
    }
    let mut drop_rng = StreamRng::new(config.seed, "dropout");
    let mut records = Vec::with_capacity(config.steps);
    let mut evals = Vec::new();

    for step in 0..config.steps {
        let scene_seed = if config.resample_scenes {
            train_seed(config.seed, step)
        } else {
            train_seed(config.seed, 0)
        };
        let scene = synth_scene(scene_seed, &config.scene)?;
        let outputs = model.forward(&scene, true, &mut drop_rng)?;
        let coords = crate::toydet::farthest_point_sample(&scene.points, model.candidates);
        let layer_losses: Vec<Tensor> = outputs
            .iter()
            .map(|o| detection_loss(&o.preds, &coords, &scene.gts, &config.loss))
            .collect();
        let loss = total_loss(&layer_losses)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, value });
        }
        loss.backward().expect("training loss is scalar");
        opt.step(&trainable)?;
        opt.zero_grad(&trainable);
        records.push(StepRecord {
            step,
            loss: value,
            per_layer: layer_losses.iter().map(|l| l.item()).collect(),
        });
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            evals.push((step + 1, evaluate_model(&model, config)?));
        }
    }
    Ok(TrainOutcome {
        model,
        records,
        evals,
    })
}

pub const METRICS_CSV_HEADER: &str = "# demf-metrics v1";

/// Versioned CSV trace of a run: per-step losses plus periodic eval rows.
pub fn metrics_csv(outcome: &TrainOutcome) -> String {
    let mut out = String::new();
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    out.push_str("kind,step,loss,map,ambiguous_accuracy\n");
    let mut evals = outcome.evals.iter().peekable();
    for r in &outcome.records {
        out.push_str(&format!("train,{},{:.17e},,\n", r.step, r.loss));
        while let Some((s, e)) = evals.peek() {
            if *s == r.step + 1 {
                let acc = e
                    .ambiguous_accuracy()
                    .map(|a| format!("{a:.6}"))
                    .unwrap_or_default();
                out.push_str(&format!("eval,{},,{:.6},{}\n", s, e.map, acc));
                evals.next();
            } else {
                break;
            }
        }
    }
    out
}
