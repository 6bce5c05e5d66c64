use mimseq::data::{generate_split, read_dataset, write_dataset, DataError, DatasetFile, Split, SynthSpec};
use mimseq::model::checkpoint::{self, CheckpointError};
use mimseq::model::{Heads, SequenceModel};
use mimseq::par::Exec;
use proptest::prelude::*;

fn small_spec() -> SynthSpec {
    SynthSpec {
        classes: 4,
        frames: 8,
        side: 24,
        window_min: 3,
        window_max: 5,
        confusable: vec![(0, 1)],
        translation: 2,
        distractor_pool: 3,
        train_per_class: 3,
        test_per_class: 2,
        ..SynthSpec::default()
    }
}

fn small_dataset() -> DatasetFile {
    let spec = small_spec();
    DatasetFile::new(generate_split(&spec, Split::Train, Exec::Sequential).unwrap(), spec.classes).unwrap()
}

#[test]
fn dataset_round_trip_is_bitwise_identical() {
    let ds = small_dataset();
    let bytes = ds.to_bytes();
    let back = DatasetFile::read_from(&bytes[..]).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    write_dataset(&ds, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(read_dataset(&path).unwrap(), ds);
}

#[test]
fn windows_survive_the_round_trip() {
    let ds = small_dataset();
    let back = DatasetFile::read_from(&ds.to_bytes()[..]).unwrap();
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert!(a.window.is_some());
        assert_eq!(a.window, b.window);
        assert_eq!(a.label, b.label);
    }
}

#[test]
fn bad_magic_is_rejected() {
    let mut bytes = small_dataset().to_bytes();
    bytes[0] = b'X';
    assert!(matches!(DatasetFile::read_from(&bytes[..]), Err(DataError::BadMagic { .. })));
}

#[test]
fn unknown_version_is_rejected() {
    let mut bytes = small_dataset().to_bytes();
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(DatasetFile::read_from(&bytes[..]), Err(DataError::Version(99))));
}

#[test]
fn absurd_extents_are_rejected_before_reading_records() {
    let mut bytes = small_dataset().to_bytes();
    bytes[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
    bytes[20..24].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(DatasetFile::read_from(&bytes[..]), Err(DataError::ExtentOverflow(_))));
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut bytes = small_dataset().to_bytes();
    bytes.extend_from_slice(&[0, 1, 2]);
    assert!(matches!(DatasetFile::read_from(&bytes[..]), Err(DataError::TrailingBytes(3))));
}

#[test]
fn out_of_range_label_is_a_record_error() {
    let mut bytes = small_dataset().to_bytes();
    bytes[28..32].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(DatasetFile::read_from(&bytes[..]), Err(DataError::Record { index: 0, .. })));
}

#[test]
fn empty_dataset_is_refused() {
    assert!(DatasetFile::new(Vec::new(), 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_truncation_reports_its_offset(cut_frac in 0.0f64..1.0) {
        let bytes = small_dataset().to_bytes();
        let cut = ((bytes.len() - 1) as f64 * cut_frac) as usize;
        match DatasetFile::read_from(&bytes[..cut]) {
            Err(DataError::Truncated { offset, needed }) => {
                prop_assert_eq!(offset, cut as u64);
                prop_assert!(needed > 0);
            }
            other => prop_assert!(false, "expected truncation, got {:?}", other.map(|d| d.samples.len())),
        }
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = mimseq::checks::gradcheck_model_config();
    let model = SequenceModel::<f32>::new(cfg, Heads { lmim: true, gmim: true }, 5).unwrap();
    let bytes = checkpoint::to_bytes(&model);
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint::to_bytes(&back), bytes);
    assert!(back.has_lmim() && back.has_gmim() && back.has_weight_head());

    let mut bad = bytes.clone();
    bad[1] ^= 0xff;
    assert!(matches!(checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&42u32.to_le_bytes());
    assert!(matches!(checkpoint::from_bytes(&bad), Err(CheckpointError::Version(42))));
    for cut in [9, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}
