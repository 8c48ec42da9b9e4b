//! Property-based invariants for the geometry, softmax, evaluation, and
//! serialization layers.

mod common;

use demf::diffcore::{parse_checkpoint, softmax_rows, Tensor};
use demf::eval::{
    average_precision, confusion_matrix, iou3d, parse_box_file, write_box_file, Box3, BoxRecord,
    Detection, GroundTruthBox, SceneResult,
};
use demf::geometry::{parse_camera_file, project, write_camera_file, CameraModel, Point3};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = Box3> {
    (
        -50.0..50.0f64,
        -50.0..50.0f64,
        -50.0..50.0f64,
        0.1..10.0f64,
        0.1..10.0f64,
        0.1..10.0f64,
    )
        .prop_map(|(x, y, z, sx, sy, sz)| Box3::new(Point3::new(x, y, z), [sx, sy, sz]))
}

fn arb_scene() -> impl Strategy<Value = SceneResult> {
    (
        prop::collection::vec((arb_box(), 0usize..4, 0.0..1.0f64), 0..6),
        prop::collection::vec((arb_box(), 0usize..4), 0..5),
    )
        .prop_map(|(dets, gts)| SceneResult {
            detections: dets
                .into_iter()
                .map(|(bbox, class_id, score)| Detection {
                    bbox,
                    class_id,
                    score,
                })
                .collect(),
            gts: gts
                .into_iter()
                .map(|(bbox, class_id)| GroundTruthBox { bbox, class_id })
                .collect(),
        })
}

proptest! {
    #[test]
    fn projection_is_scale_invariant(
        x in -10.0..10.0f64,
        y in -10.0..10.0f64,
        z in 0.5..10.0f64,
        lambda in 0.1..100.0f64,
    ) {
        let cam = CameraModel::new(
            [64.0, 0.0, 32.0, 0.0, 64.0, 32.0, 0.0, 0.0, 1.0],
            64.0,
            64.0,
        ).unwrap();
        let p = Point3::new(x, y, z);
        let q = Point3::new(x * lambda, y * lambda, z * lambda);
        let a = project(&cam, p).unwrap();
        let b = project(&cam, q).unwrap();
        prop_assert!((a.u - b.u).abs() <= 1e-9 * (1.0 + a.u.abs()));
        prop_assert!((a.v - b.v).abs() <= 1e-9 * (1.0 + a.v.abs()));
    }

    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(a in arb_box(), b in arb_box()) {
        let ab = iou3d(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, iou3d(&b, &a));
        prop_assert!((iou3d(&a, &a) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in prop::collection::vec(prop::collection::vec(-30.0..30.0f64, 4), 1..5)
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let s = softmax_rows(&Tensor::new(&[n, 4], flat)).data();
        for i in 0..n {
            let row = &s[i * 4..(i + 1) * 4];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| *v > 0.0 && *v <= 1.0));
        }
    }

    #[test]
    fn ap_is_invariant_under_monotone_score_maps(
        scenes in prop::collection::vec(arb_scene(), 1..4),
        scale in 0.1..5.0f64,
    ) {
        let before = average_precision(&scenes, 4, 0.25);
        // Strictly increasing map of every score.
        let mapped: Vec<SceneResult> = scenes
            .iter()
            .map(|s| SceneResult {
                detections: s
                    .detections
                    .iter()
                    .map(|d| Detection { score: d.score * scale + 1.0, ..*d })
                    .collect(),
                gts: s.gts.clone(),
            })
            .collect();
        let after = average_precision(&mapped, 4, 0.25);
        prop_assert_eq!(before, after);
    }

    #[test]
    fn confusion_counts_are_conserved(scenes in prop::collection::vec(arb_scene(), 1..4)) {
        let cm = confusion_matrix(&scenes, 4, 0.25);
        let total: u64 = cm.counts.iter().flatten().sum();
        let preds: usize = scenes.iter().map(|s| s.detections.len()).sum();
        let matched: u64 = cm.counts[..4].iter().map(|r| r[..4].iter().sum::<u64>()).sum();
        let unmatched_gts: u64 = cm.counts[..4].iter().map(|r| r[4]).sum();
        let gts: usize = scenes.iter().map(|s| s.gts.len()).sum();
        prop_assert_eq!(total, preds as u64 + unmatched_gts);
        prop_assert_eq!(matched + unmatched_gts, gts as u64);
    }

    #[test]
    fn box_file_round_trips(
        records in prop::collection::vec(
            (0u64..1000, 0usize..8, arb_box(), prop::option::of(0.0..1.0f64)),
            0..10,
        )
    ) {
        let records: Vec<BoxRecord> = records
            .into_iter()
            .map(|(scene_id, class_id, bbox, score)| BoxRecord { scene_id, class_id, bbox, score })
            .collect();
        let text = write_box_file(&records);
        prop_assert_eq!(parse_box_file(&text).unwrap(), records);
    }

    #[test]
    fn camera_file_round_trips(
        psi in prop::collection::vec(-100.0..100.0f64, 9),
        w in 1.0..4096.0f64,
        h in 1.0..4096.0f64,
    ) {
        prop_assume!(psi.iter().any(|v| *v != 0.0));
        let mut p = [0.0; 9];
        p.copy_from_slice(&psi);
        let cams = vec![CameraModel::new(p, w, h).unwrap()];
        prop_assert_eq!(parse_camera_file(&write_camera_file(&cams)).unwrap(), cams);
    }

    #[test]
    fn checkpoint_parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = parse_checkpoint(&bytes);
    }
}
