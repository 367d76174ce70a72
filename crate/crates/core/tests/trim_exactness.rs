use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trimlab::masking::MaskAssignment;
use trimlab::nn::{BackboneConfig, BackboneKind, InputSpec, ModelInstance, ModelSpec};
use trimlab::trimming::{apply_trim, plan_trim, verify_equivalence, TrimPlan};
use trimlab::Tensor;

fn small(kind: BackboneKind) -> ModelSpec {
    let mut cfg = BackboneConfig::with_kind(kind);
    cfg.conv_channels = vec![6, 8, 8, 10];
    cfg.d_model = 8;
    cfg.num_layers = 2;
    cfg.num_heads = 4;
    cfg.ffn_hidden = 12;
    cfg.conformer_channels = 6;
    cfg.conformer_kernel = 3;
    cfg.head_hidden = 7;
    cfg.build_spec(InputSpec { frames: 10, features: 5 }, Some(3)).unwrap()
}

fn random_masks(spec: &ModelSpec, rng: &mut ChaCha8Rng, p: f64) -> MaskAssignment {
    let mut m = MaskAssignment::all_ones(spec);
    for s in spec.sites() {
        m.set(&s.id, (0..s.units).map(|_| rng.gen_bool(p)).collect());
    }
    m
}

fn probes(spec: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let shape = vec![n, spec.input.frames, spec.input.features];
    let data = (0..shape.iter().product()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn trimmed_matches_masked_on_every_backbone() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in [BackboneKind::ConvT, BackboneKind::TransformerT, BackboneKind::ConformerT] {
        let spec = small(kind);
        let model = ModelInstance::<f64>::build(spec.clone(), 2).unwrap();
        for &p in &[0.0, 0.3, 0.7, 1.0] {
            let masks = random_masks(&spec, &mut rng, p);
            let plan = plan_trim(&spec, &masks).unwrap();
            let (trimmed, report) = apply_trim(&model, &plan).unwrap();
            let x = probes(&spec, 6, &mut rng);
            let dev = verify_equivalence(&model, &masks, &trimmed, &plan, &x).unwrap();
            assert!(dev <= 1e-10, "{kind:?} p={p}: deviation {dev}");
            assert!((0.0..=1.0).contains(&report.trimming_ratio));
        }
    }
}

#[test]
fn corrupted_plan_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = small(BackboneKind::ConvT);
    let model = ModelInstance::<f64>::build(spec.clone(), 2).unwrap();
    let mut masks = MaskAssignment::all_ones(&spec);
    masks.set("conv1.channels", vec![true, false, true, false, true, false, true, false]);
    let mut keep: BTreeMap<String, Vec<usize>> =
        spec.sites().into_iter().map(|s| (s.id.clone(), masks.keep_indices(&s.id).unwrap())).collect();
    keep.insert("conv1.channels".into(), vec![1, 3, 5, 7]);
    let plan = TrimPlan::from_keep(&spec, keep).unwrap();
    let (trimmed, _) = apply_trim(&model, &plan).unwrap();
    let dev = verify_equivalence(&model, &masks, &trimmed, &plan, &probes(&spec, 4, &mut rng)).unwrap();
    assert!(dev > 1e-3, "deviation {dev}");
}

#[test]
fn trimmed_matches_masked_in_single_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for kind in [BackboneKind::ConvT, BackboneKind::TransformerT, BackboneKind::ConformerT] {
        let spec = small(kind);
        let model = ModelInstance::<f32>::build(spec.clone(), 3).unwrap();
        for &p in &[0.2, 0.5, 0.8] {
            let masks = random_masks(&spec, &mut rng, p);
            let plan = plan_trim(&spec, &masks).unwrap();
            let (trimmed, _) = apply_trim(&model, &plan).unwrap();
            let x: Tensor<f32> = probes(&spec, 6, &mut rng).cast();
            let dev = verify_equivalence(&model, &masks, &trimmed, &plan, &x).unwrap();
            assert!(dev <= 1e-5, "{kind:?} p={p}: deviation {dev}");
        }
    }
}
