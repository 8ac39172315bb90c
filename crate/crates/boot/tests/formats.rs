use mlb_boot::config::DataConfig;
use mlb_boot::mseg::{self, decode, encode, file_len, FormatError};
use mlb_boot::pipeline::{generate_data, load_data, write_data};
use mlb_boot::{BootError, ExperimentConfig};
use mlb_seg_core::data::{Dataset, Sample, Split};
use mlb_seg_core::{LabelMask, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dataset(seed: u64, count: usize, h: usize, w: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| Sample {
            image: Tensor::from_fn(&[1, h, w], |_| f64::from(rng.random::<f32>())),
            mask: rng
                .random_bool(0.7)
                .then(|| LabelMask::new(h, w, (0..h * w).map(|_| rng.random_range(0..2u8)).collect()).unwrap()),
        })
        .collect();
    Dataset {
        split: Split::Clean,
        samples,
    }
}

fn small_data() -> DataConfig {
    DataConfig {
        height: 16,
        width: 16,
        clean: 3,
        meta: 2,
        unlabeled: 5,
        eval: 2,
        ..ExperimentConfig::default().data
    }
}

#[test]
fn save_then_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let ds = random_dataset(seed, 1 + seed as usize, 6, 10);
        let path = dir.path().join(format!("d{seed}.mseg"));
        mseg::save(&path, &ds).unwrap();
        assert_eq!(mseg::load(&path, Split::Clean).unwrap(), ds);
    }
}

#[test]
fn labeled_file_size_follows_the_header_and_record_layout() {
    // 20-byte header (magic + four u32 fields), then image, flag, and mask
    // per record.
    for (count, h, w) in [(1, 2, 2), (3, 32, 32), (7, 6, 10)] {
        let mut ds = random_dataset(count as u64, count, h, w);
        for s in &mut ds.samples {
            s.mask.get_or_insert_with(|| LabelMask::filled(h, w, 0));
        }
        let bytes = encode(h, w, &ds.samples).unwrap();
        assert_eq!(bytes.len(), 20 + count * (h * w * 4 + h * w + 1));
        assert_eq!(bytes.len(), file_len(h, w, count, 0));
    }
}

#[test]
fn corrupted_magic_names_the_offset() {
    let bytes = encode(4, 4, &random_dataset(1, 2, 4, 4).samples).unwrap();
    for offset in 0..4 {
        let mut bad = bytes.clone();
        bad[offset] ^= 0x20;
        let err = decode(&bad).unwrap_err();
        assert!(
            matches!(err, FormatError::BadMagic { offset: o, .. } if o == offset),
            "{err:?}"
        );
        assert!(err.to_string().contains(&format!("offset {offset}")), "{err}");
    }
}

#[test]
fn every_truncation_is_a_structured_error() {
    let bytes = encode(3, 5, &random_dataset(2, 3, 3, 5).samples).unwrap();
    for len in 0..bytes.len() {
        match decode(&bytes[..len]) {
            Err(FormatError::Truncated {
                offset,
                needed,
                available,
                ..
            }) => {
                assert!(offset <= len);
                assert_eq!(available, len - offset);
                assert!(needed > available);
            }
            other => panic!("length {len}: {other:?}"),
        }
    }
}

#[test]
fn file_errors_carry_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.mseg");
    std::fs::write(&path, b"MSEX\x01\0\0\0").unwrap();
    let err = mseg::load(&path, Split::Eval).unwrap_err();
    assert!(matches!(err, BootError::Format { .. }));
    let msg = err.to_string();
    assert!(msg.contains("bad.mseg") && msg.contains("offset 3"), "{msg}");
    assert!(matches!(
        mseg::load(&dir.path().join("missing"), Split::Eval),
        Err(BootError::Io { .. })
    ));
}

#[test]
fn generated_splits_are_deterministic_and_disjoint() {
    let cfg = small_data();
    let a = generate_data(&cfg).unwrap();
    let b = generate_data(&cfg).unwrap();
    assert_eq!(a, b);
    let images: Vec<&Tensor> = [&a.splits.clean, &a.splits.meta, &a.splits.unlabeled, &a.splits.eval]
        .iter()
        .flat_map(|d| d.samples.iter().map(|s| &s.image))
        .collect();
    for i in 0..images.len() {
        for j in 0..i {
            assert_ne!(images[i], images[j], "samples {i} and {j} coincide");
        }
    }
    assert!(a.splits.unlabeled.samples.iter().all(|s| s.mask.is_none()));
    assert_eq!(a.unlabeled_truth.len(), 5);
    let other = generate_data(&DataConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(other.splits.clean, a.splits.clean);
}

#[test]
fn written_data_loads_back_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let generated = generate_data(&small_data()).unwrap();
    write_data(dir.path(), &generated.splits).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(
        manifest,
        "clean=clean.mseg\nmeta=meta.mseg\nunlabeled=unlabeled.mseg\neval=eval.mseg\n"
    );
    assert_eq!(load_data(dir.path()).unwrap(), generated.splits);
}

#[test]
fn loading_rejects_unlabeled_eval_and_mixed_grids() {
    let dir = tempfile::tempdir().unwrap();
    let mut splits = generate_data(&small_data()).unwrap().splits;
    splits.eval.samples[1].mask = None;
    write_data(dir.path(), &splits).unwrap();
    assert!(load_data(dir.path()).unwrap_err().to_string().contains("no mask"));

    let mut splits = generate_data(&small_data()).unwrap().splits;
    splits.meta = generate_data(&DataConfig {
        height: 8,
        width: 8,
        ..small_data()
    })
    .unwrap()
    .splits
    .meta;
    write_data(dir.path(), &splits).unwrap();
    assert!(load_data(dir.path()).is_err());

    std::fs::write(dir.path().join("manifest.txt"), "clean=clean.mseg\n").unwrap();
    assert!(load_data(dir.path())
        .unwrap_err()
        .to_string()
        .contains("no `meta` entry"));
}
