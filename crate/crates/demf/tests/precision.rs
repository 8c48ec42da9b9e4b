//! The reduced-precision mode. Lives in its own test binary because the
//! precision flag is process-global.

use demf::diffcore::{matmul, set_precision, Precision, StreamRng, Tensor};

#[test]
fn f32_mode_rounds_op_outputs_and_is_deterministic() {
    let mut rng = StreamRng::new(1, "precision");
    let a = Tensor::new(&[4, 4], (0..16).map(|_| rng.normal()).collect());
    let b = Tensor::new(&[4, 4], (0..16).map(|_| rng.normal()).collect());

    let full = matmul(&a, &b).data();

    set_precision(Precision::F32);
    let low1 = matmul(&a, &b).data();
    let low2 = matmul(&a, &b).data();
    set_precision(Precision::F64);
    let restored = matmul(&a, &b).data();

    assert_eq!(low1, low2, "f32 mode must be deterministic");
    assert_eq!(full, restored, "restoring f64 restores exact results");
    assert!(
        low1.iter().zip(&full).any(|(l, f)| l != f),
        "f32 mode must actually round"
    );
    for (l, f) in low1.iter().zip(&full) {
        assert_eq!(*l, *l as f32 as f64, "f32 results carry no extra bits");
        assert!((l - f).abs() < 1e-5);
    }
}
