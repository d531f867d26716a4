use rga::formats::{load_checkpoint, load_prototypes, save_checkpoint, save_prototypes};
use rga_core::config::Config;
use rga_core::prototypes::PrototypeSet;
use rga_core::{Matrix, Model};

fn random_set(n: usize, d: usize, seed: u64) -> PrototypeSet {
    // values exactly representable in f32, so the round trip is exact
    let mut k = seed as f32;
    let mut draw = |len: usize| {
        (0..len)
            .map(|_| {
                k += 1.0;
                (k * 0.731).sin() as f64
            })
            .collect::<Vec<_>>()
    };
    let names = (0..n).map(|j| format!("part {j}")).collect();
    PrototypeSet::new(Matrix::from_vec(n, d, draw(n * d)).unwrap(), draw(d), names).unwrap()
}

#[test]
fn prototype_round_trip_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("p.bin");
    let set = random_set(4, 64, 1);
    save_prototypes(&path, &set).unwrap();
    let back = load_prototypes(&path, Some(64)).unwrap();
    assert!(back.frozen);
    assert_eq!(back.prototypes, set.prototypes);
    assert_eq!(back.background, set.background);
    assert_eq!(back.class_names, set.class_names);
    let again = tmp.path().join("q.bin");
    save_prototypes(&again, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn prototype_width_mismatch_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("p.bin");
    save_prototypes(&path, &random_set(4, 64, 2)).unwrap();
    let err = load_prototypes(&path, Some(32)).unwrap_err().to_string();
    assert!(err.contains("32") && err.contains("64"), "{err}");
}

#[test]
fn hand_built_prototype_file() {
    let rows: [[f32; 2]; 5] = [[1.0, 0.0], [0.0, 1.0], [-0.5, 0.25], [2.0, -3.0], [0.125, 0.75]];
    let mut bytes = b"RGAPROTO".to_vec();
    for v in [1u32, 4, 2] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for row in rows {
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes.extend_from_slice(b"head\nupper body\nlower body\nfoot\n");
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("hand.bin");
    std::fs::write(&path, &bytes).unwrap();

    let set = load_prototypes(&path, Some(2)).unwrap();
    assert_eq!(set.classes(), 4);
    for j in 0..4 {
        assert_eq!(set.prototypes.row(j), [rows[j][0] as f64, rows[j][1] as f64]);
    }
    assert_eq!(set.background, [0.125, 0.75]);
    assert_eq!(set.class_names, ["head", "upper body", "lower body", "foot"]);

    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    std::fs::write(&path, &corrupt).unwrap();
    assert!(load_prototypes(&path, None).is_err());
    std::fs::write(&path, &bytes[..30]).unwrap();
    assert!(load_prototypes(&path, None).is_err());
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let mut config = Config::default();
    for (k, v) in [("image_height", "32"), ("image_width", "16"), ("feature_dim", "16"), ("token_dim", "8")] {
        config.set(k, v).unwrap();
    }
    let model = Model::new(&config, 5, None).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    save_checkpoint(&a, &model.to_checkpoint()).unwrap();
    let loaded = Model::from_checkpoint(&load_checkpoint(&a).unwrap()).unwrap();
    assert_eq!(loaded, model);
    save_checkpoint(&b, &loaded.to_checkpoint()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let config = Config::default();
    let model = Model::new(&config, 3, None).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    save_checkpoint(&path, &model.to_checkpoint()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_checkpoint(&path).unwrap_err().to_string();
    assert!(err.contains("m.ckpt"), "{err}");
}
