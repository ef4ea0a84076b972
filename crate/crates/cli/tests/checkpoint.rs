use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unimatch::{ModelConfig, ModelParams};
use unimatch_cli::{Checkpoint, CheckpointError, RunConfig};

fn sample() -> Checkpoint {
    let mut config = RunConfig::default();
    config.model = ModelConfig {
        layers: 2,
        hidden: 6,
        ..ModelConfig::default()
    };
    config.train.seed = 17;
    let params = ModelParams::init(&config.model, &mut ChaCha8Rng::seed_from_u64(4));
    Checkpoint {
        config,
        epoch: 12,
        params,
    }
}

#[test]
fn round_trip_is_fp32_exact_and_byte_stable() {
    let ck = sample();
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config, ck.config);
    assert_eq!(back.epoch, 12);
    for ((n, a), (m, b)) in ck.params.named().into_iter().zip(back.params.named()) {
        assert_eq!(n, m);
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = sample();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), ck.to_bytes());
}

#[test]
fn corruption_is_detected() {
    let bytes = sample().to_bytes();
    let mut flipped = bytes.clone();
    let last = flipped.len() - 10;
    flipped[last] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Checksum(_))));

    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(CheckpointError::Format(_))
    ));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(CheckpointError::Format(_))));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(CheckpointError::Format(_))));
}

#[test]
fn metadata_carries_run_facts() {
    let bytes = sample().to_bytes();
    let text = String::from_utf8_lossy(&bytes);
    assert!(text.contains("# epoch = 12"));
    assert!(text.contains("# seed = 17"));
    assert!(text.contains("# build = unimatch-v"));
}
