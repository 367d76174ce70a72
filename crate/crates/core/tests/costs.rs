mod common;

use common::{small_spec, BACKBONES};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trimlab::costbench::{bench_input, count_costs, instrumented_macs};
use trimlab::masking::MaskAssignment;
use trimlab::nn::{BackboneConfig, InputSpec, ModelInstance, ModelSpec};
use trimlab::trimming::plan_trim;

fn default_spec(kind: trimlab::nn::BackboneKind) -> ModelSpec {
    BackboneConfig::with_kind(kind).build_spec(InputSpec { frames: 30, features: 128 }, Some(10)).unwrap()
}

#[test]
fn closed_form_equals_executed_kernels() {
    for kind in BACKBONES {
        for (label, spec) in [("small", small_spec(kind, Some(3))), ("default", default_spec(kind))] {
            let model = ModelInstance::<f32>::build(spec.clone(), 0).unwrap();
            for batch in [1, 3] {
                let x = bench_input::<f32>(&spec, batch, 0);
                let counted = count_costs(&spec, batch).unwrap();
                let executed = instrumented_macs(&model, &x).unwrap();
                assert_eq!(counted.macs, executed, "{kind:?} {label} batch {batch}");
                assert_eq!(counted.flops, 2 * counted.macs);
                assert_eq!(counted.layers.iter().map(|l| l.macs).sum::<u64>(), counted.macs);
            }
        }
    }
}

#[test]
fn closed_form_matches_trimmed_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in BACKBONES {
        let spec = small_spec(kind, Some(3));
        let model = ModelInstance::<f32>::build(spec.clone(), 1).unwrap();
        let mut masks = MaskAssignment::all_ones(&spec);
        for s in spec.sites() {
            masks.set(&s.id, (0..s.units).map(|_| rng.gen_bool(0.5)).collect());
        }
        let plan = plan_trim(&spec, &masks).unwrap();
        let (trimmed, _) = trimlab::trimming::apply_trim(&model, &plan).unwrap();
        let x = bench_input::<f32>(&trimmed.spec, 2, 0);
        assert_eq!(count_costs(&trimmed.spec, 2).unwrap().macs, instrumented_macs(&trimmed, &x).unwrap(), "{kind:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trimming_never_increases_cost(kind in 0usize..3, seed in any::<u64>(), p in 0.0f64..=1.0) {
        let spec = small_spec(BACKBONES[kind], Some(3));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masks = MaskAssignment::all_ones(&spec);
        for s in spec.sites() {
            masks.set(&s.id, (0..s.units).map(|_| rng.gen_bool(p)).collect());
        }
        let plan = plan_trim(&spec, &masks).unwrap();
        let base = count_costs(&spec, 1).unwrap();
        let after = count_costs(&plan.spec_after, 1).unwrap();
        prop_assert!(after.params <= base.params);
        prop_assert!(after.macs <= base.macs);
        if plan.is_identity() {
            prop_assert_eq!(after.params, base.params);
            prop_assert_eq!(after.macs, base.macs);
        } else {
            prop_assert!(after.params < base.params);
            prop_assert!(after.macs < base.macs);
        }
    }
}
