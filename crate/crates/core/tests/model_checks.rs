use motiondit::dit::{param_count, ModelConfig, Variant};

mod common;

#[test]
fn gradients_match_finite_differences_for_every_variant() {
    let expected: [(Variant, &[&str]); 4] = [
        (Variant::C2f, &["embed", "final", "four", "single", "time", "two"]),
        (Variant::NoC2f, &["embed", "final", "four", "time"]),
        (Variant::Caba, &["caba", "embed", "final", "time"]),
        (Variant::Maf, &["embed", "final", "four", "single", "time", "two"]),
    ];
    for (variant, groups) in expected {
        let checks = common::gradient_check(variant, 11);
        let names: Vec<&str> = checks.iter().map(|c| c.group.as_str()).collect();
        assert_eq!(names, groups, "{variant}");
        for c in checks {
            assert!(c.checked >= common::SAMPLES_PER_GROUP, "{variant}/{}: {} scalars", c.group, c.checked);
            assert!(c.max_rel <= common::FD_REL_TOL, "{variant}/{}: rel error {}", c.group, c.max_rel);
        }
    }
}

#[test]
fn joint_attention_matches_references() {
    for seed in 0..5 {
        let (single, two) = common::attention_reduction_errors(seed);
        assert!(single <= 1e-6, "single-stream error {single}");
        assert!(two <= 1e-6, "two-stream error {two}");
    }
}

#[test]
fn library_rope_matches_definition() {
    let x = motiondit::rng::gaussian_matrix(6, 16, &mut motiondit::rng::seeded(3));
    let pos = [0, 1, 5, 17, 300, 9000];
    let lib = motiondit::dit::rope_apply_matrix(&x, &pos, 2, 10_000.0).unwrap();
    let reference = common::reference_rope(&x, &pos, 2, 10_000.0);
    let err = (&lib - &reference).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(err < 1e-12, "{err}");
}

#[test]
fn rope_logits_depend_only_on_offsets() {
    let dev = common::rope_shift_deviation(100);
    assert!(dev <= 1e-5, "{dev}");
}

#[test]
fn closed_form_counts_match_enumeration() {
    for variant in [Variant::C2f, Variant::NoC2f, Variant::Caba, Variant::Maf] {
        let cfg = ModelConfig { variant, ..ModelConfig::tiny() };
        assert_eq!(param_count(&cfg), common::enumerated_params(&cfg), "{variant}");
    }
}

#[test]
fn staged_layout_uses_fewer_parameters() {
    let d = 64;
    let c2f = ModelConfig { d_model: d, n_four_stream: 3, n_two_stream: 6, n_single_stream: 12, ..Default::default() };
    let flat = ModelConfig { variant: Variant::NoC2f, ..c2f.clone() };
    let (a, b) = (common::enumerated_params(&c2f), common::enumerated_params(&flat));
    assert_eq!(a, param_count(&c2f));
    assert_eq!(b, param_count(&flat));
    assert!((a as f64 / b as f64) < 0.6, "ratio {}", a as f64 / b as f64);
}
