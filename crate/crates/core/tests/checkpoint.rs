use rnp::data::{synth_strokes, SynthSpec};
use rnp::model::{bind_constant, forward, Model, ModelConfig};
use rnp::train::checkpoint::{from_bytes, load, save, to_bytes, CheckpointError, CheckpointMeta};
use rnp::train::{TrainOptions, Trainer};
use rnp::{Tape, Tensor};

fn small() -> ModelConfig {
    ModelConfig { z_dim: 8, ..ModelConfig::default() }.with_steps(2, 2)
}

fn meta(cfg: &ModelConfig) -> CheckpointMeta {
    CheckpointMeta { config: cfg.clone(), dataset: "synth".into() }
}

#[test]
fn save_load_save_is_byte_identical() {
    let cfg = small();
    let model = Model::<Tensor<f32>>::init(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rnp");
    save(&path, &model, &meta(&cfg)).unwrap();
    let (back, m2) = load(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(m2, meta(&cfg));
    assert_eq!(to_bytes(&back, &m2), std::fs::read(&path).unwrap());
}

#[test]
fn corrupted_byte_is_a_crc_error() {
    let cfg = small();
    let bytes = to_bytes(&Model::init(&cfg).unwrap(), &meta(&cfg));
    for at in [10, bytes.len() / 2, bytes.len() - 5] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x40;
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::Crc { .. })), "byte {at}");
    }
    // Flipping the stored CRC itself is caught the same way.
    let mut bad = bytes.clone();
    *bad.last_mut().unwrap() ^= 1;
    assert!(matches!(from_bytes(&bad), Err(CheckpointError::Crc { .. })));
}

#[test]
fn bad_magic_and_truncation_are_distinct() {
    let cfg = small();
    let mut bytes = to_bytes(&Model::init(&cfg).unwrap(), &meta(&cfg));
    assert!(matches!(from_bytes(&bytes[..3]), Err(CheckpointError::Format(_) | CheckpointError::BadMagic(_))));
    bytes[0] = b'X';
    assert!(matches!(from_bytes(&bytes), Err(CheckpointError::BadMagic(_))));
    assert!(matches!(load("/nonexistent/m.rnp"), Err(CheckpointError::Io { .. })));
}

#[test]
fn config_that_disagrees_with_arrays_is_a_shape_error() {
    let cfg = small();
    let model = Model::<Tensor<f32>>::init(&cfg).unwrap();
    let lying = CheckpointMeta { config: ModelConfig { z_dim: 16, ..cfg }, dataset: "synth".into() };
    match from_bytes(&to_bytes(&model, &lying)) {
        Err(CheckpointError::Shape { expected, got, .. }) => assert_ne!(expected, got),
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn loaded_model_forward_is_bitwise_equal_on_eight_probes() {
    let cfg = small();
    let (ds, _) = synth_strokes(&SynthSpec::standard(16, 2)).unwrap();
    let mut trainer = Trainer::new(Model::init(&cfg).unwrap(), cfg.clone(), TrainOptions { batch_size: 8, ..TrainOptions::default() });
    trainer.run(&ds, 2).unwrap();
    let (back, _) = from_bytes(&to_bytes(&trainer.model, &meta(&cfg))).unwrap();
    let probes = ds.gather(&(0..8).collect::<Vec<_>>());
    let run = |m: &Model<Tensor<f32>>| {
        let mut tape = Tape::<f32>::new();
        let mv = bind_constant(&mut tape, m);
        let x = tape.constant(probes.clone());
        let f = forward(&mut tape, &mv, x, None, &cfg).unwrap();
        let mut bits: Vec<u32> = tape.value(*f.tree.image()).data().iter().map(|v| v.to_bits()).collect();
        bits.push(tape.value(f.total).item().to_bits());
        bits
    };
    assert_eq!(run(&trainer.model), run(&back));
}
