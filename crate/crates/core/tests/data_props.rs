use std::collections::BTreeSet;

use glimpse::data::{
    build_dataset, decode_caption, encode_caption, generate_corpus, read_annotations_bytes, write_annotations_bytes,
    DataError, SceneSpec,
};
use glimpse::decoder::{read_checkpoint_bytes, write_checkpoint_bytes, CheckpointError, DecoderParams, ModelDims};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_dataset(seed: u64, count: usize) -> Vec<u8> {
    let spec = SceneSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = generate_corpus(&spec, count, &mut rng).unwrap();
    let data = build_dataset(&scenes, &spec, &spec.vocabulary(), &mut rng).unwrap();
    write_annotations_bytes(&data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_bytes_round_trip(seed in any::<u64>(), count in 1usize..30) {
        let bytes = small_dataset(seed, count);
        let back = read_annotations_bytes(&bytes).unwrap();
        prop_assert_eq!(back.len(), count);
        prop_assert_eq!(write_annotations_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn every_strict_prefix_is_rejected(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let bytes = small_dataset(seed, 3);
        let n = (cut * bytes.len() as f64) as usize;
        prop_assert!(read_annotations_bytes(&bytes[..n]).is_err());
    }

    #[test]
    fn captions_round_trip_through_the_vocabulary(seed in any::<u64>()) {
        let spec = SceneSpec::default();
        let vocab = spec.vocabulary();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for scene in generate_corpus(&spec, 20, &mut rng).unwrap() {
            let ids = encode_caption(&scene.caption, &vocab);
            prop_assert_eq!(decode_caption(&ids, &vocab), scene.caption.clone());
            for &(pos, cell) in &scene.alignment {
                prop_assert!(scene.cells[cell].is_some());
                prop_assert!(pos < scene.caption.len());
            }
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), embed in 1usize..6, hidden in 1usize..6) {
        let dims = ModelDims { vocab: 7, embed, hidden, features: 4, attn: 3 };
        let params = DecoderParams::random(dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let bytes = write_checkpoint_bytes(&params);
        let back = read_checkpoint_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &params);
        prop_assert_eq!(write_checkpoint_bytes(&back), bytes);
    }
}

#[test]
fn trailing_bytes_and_bad_magic_are_typed() {
    let mut bytes = small_dataset(4, 2);
    bytes.push(0);
    assert!(matches!(
        read_annotations_bytes(&bytes),
        Err(DataError::TrailingBytes(1))
    ));
    bytes.pop();
    bytes[1] = b'x';
    assert!(matches!(read_annotations_bytes(&bytes), Err(DataError::BadMagic)));

    let params = DecoderParams::random(
        ModelDims {
            vocab: 5,
            embed: 2,
            hidden: 2,
            features: 2,
            attn: 2,
        },
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let mut ck = write_checkpoint_bytes(&params);
    ck[0] = b'X';
    assert!(matches!(read_checkpoint_bytes(&ck), Err(CheckpointError::BadMagic)));
}

#[test]
fn default_corpus_exercises_bucketing() {
    let spec = SceneSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scenes = generate_corpus(&spec, 5000, &mut rng).unwrap();
    let lengths: BTreeSet<usize> = scenes.iter().map(|s| s.caption.len()).collect();
    assert!(lengths.len() >= 2, "{lengths:?}");
    assert_eq!(spec.vocabulary().len(), 27);
}
