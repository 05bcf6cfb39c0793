//! Stored reference files versus freshly generated artefacts.

use std::path::PathBuf;

use gmmt_core::fusion::oracle_fuse;
use gmmt_core::golden::{decode_tensor, golden_denoiser, golden_denoiser_output, golden_scenarios, DENOISER_FILE, GOLDEN_TIMESTEP};
use gmmt_core::io::{decode_scenario, encode_scenario};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

#[test]
fn scenario_files_are_byte_identical() {
    for (name, s) in golden_scenarios() {
        let stored = std::fs::read(golden_dir().join(&name)).unwrap();
        assert_eq!(stored, encode_scenario(&s).unwrap(), "{name} drifted; regenerate with `gmmt goldens --force`");
        let back = decode_scenario::<f64>(&stored).unwrap();
        assert_eq!(back.fused_oracle, oracle_fuse(&back.f_rgb, &back.f_tir).unwrap());
    }
}

#[test]
fn denoiser_output_matches_stored_values() {
    let stored = decode_tensor(&std::fs::read(golden_dir().join(DENOISER_FILE)).unwrap()).unwrap();
    let now = golden_denoiser_output().unwrap();
    assert_eq!(stored.shape(), now.shape());
    let worst = stored.data().iter().zip(now.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "denoiser output moved by {worst:e}");
}

#[test]
fn input_concatenation_order_is_observable() {
    // Swapping the two modality inputs must change the stored output, so the
    // golden above pins the (x_t, f_rgb, f_tir, time) order.
    let (_, s) = golden_scenarios().remove(0);
    let b = |t: &gmmt_core::Tensor<f64>| t.clone().reshape(&[1, 4, 8, 8]).unwrap();
    let d = golden_denoiser();
    let straight = d.predict(&b(&s.fused_oracle), &b(&s.f_rgb), &b(&s.f_tir), &[GOLDEN_TIMESTEP]).unwrap();
    let swapped = d.predict(&b(&s.fused_oracle), &b(&s.f_tir), &b(&s.f_rgb), &[GOLDEN_TIMESTEP]).unwrap();
    assert_eq!(straight, golden_denoiser_output().unwrap());
    assert_ne!(straight, swapped);
}
