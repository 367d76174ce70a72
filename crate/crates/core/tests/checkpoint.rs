mod common;

use common::{small_spec, BACKBONES};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trimlab::checkpoint::{Checkpoint, CheckpointError};
use trimlab::masking::{init_sites, MaskAssignment};
use trimlab::nn::ModelInstance;
use trimlab::trimming::{apply_trim, plan_trim};

fn sample(kind: usize, seed: u64, p: f64) -> Checkpoint {
    let spec = small_spec(BACKBONES[kind], Some(3));
    let model = ModelInstance::<f32>::build(spec.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = MaskAssignment::all_ones(&spec);
    for s in spec.sites() {
        masks.set(&s.id, (0..s.units).map(|_| rng.gen_bool(p)).collect());
    }
    let (trimmed, _) = apply_trim(&model, &plan_trim(&spec, &masks).unwrap()).unwrap();
    let mut sites = init_sites::<f32>(&trimmed.spec, 3.0);
    for s in &mut sites {
        for v in s.logits.data_mut() {
            *v = rng.gen_range(-5.0..5.0);
        }
    }
    let mut ck = Checkpoint::from_model(&trimmed).with_masks(&sites);
    ck.meta.insert("seed".into(), seed.into());
    ck
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bytes_survive_a_round_trip(kind in 0usize..3, seed in any::<u64>(), p in 0.0f64..=1.0) {
        let ck = sample(kind, seed, p);
        let bytes = ck.to_bytes();
        prop_assert_eq!(bytes.len(), ck.encoded_len());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes.clone());

        let model = back.model::<f32>().unwrap();
        let again = Checkpoint { meta: ck.meta.clone(), ..Checkpoint::from_model(&model).with_masks(&back.masks::<f32>().unwrap().unwrap()) };
        prop_assert_eq!(again.to_bytes(), bytes);
    }
}

#[test]
fn files_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = sample(2, 9, 0.5);
    let n = ck.save(&path).unwrap();
    let raw = std::fs::read(&path).unwrap();
    assert_eq!(n as usize, raw.len());
    let loaded = Checkpoint::load(&path).unwrap();
    let path2 = dir.path().join("n.ckpt");
    loaded.save(&path2).unwrap();
    assert_eq!(std::fs::read(&path2).unwrap(), raw);
}

#[test]
fn damaged_files_are_rejected() {
    let bytes = sample(0, 1, 0.7).to_bytes();
    assert!(matches!(Checkpoint::from_bytes(b"NOTMAGIC"), Err(CheckpointError::BadMagic)));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..12]).is_err());
}
