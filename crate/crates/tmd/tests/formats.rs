use proptest::prelude::*;
use tmd::{tmdb, tmde, Error};
use tmd_core::dataset::Scaler;
use tmd_core::defense::{ClassifierHead, Space};
use tmd_core::{rng, ArchConfig, EmbeddingDataset, ModelBundle, PriorState};

fn random_dataset(n: usize, dim: usize, labels: bool, seed: u64) -> EmbeddingDataset {
    let mut r = rng::seeded(seed);
    let data = (0..n * dim).map(|_| rng::standard_normal(&mut r) as f32).collect();
    let labels = labels.then(|| (0..n).map(|i| (i % 5) as i32).collect());
    EmbeddingDataset::new(dim, data, labels, false).unwrap()
}

#[test]
fn empty_dataset_is_a_bare_header() {
    let ds = EmbeddingDataset::new(768, vec![], None, false).unwrap();
    let b = tmde::encode(&ds).unwrap();
    assert_eq!(b.len(), 17);
    assert_eq!(tmde::decode(&b).unwrap(), ds);
}

#[test]
fn single_value_payload_is_little_endian() {
    let ds = EmbeddingDataset::new(1, vec![0.5], None, false).unwrap();
    let b = tmde::encode(&ds).unwrap();
    assert_eq!(b.len(), 21);
    assert_eq!(&b[17..], &[0x00, 0x00, 0x00, 0x3f]);
}

#[test]
fn hand_built_file_loads() {
    let mut b = b"TMDE\x01".to_vec();
    b.extend_from_slice(&2u32.to_le_bytes());
    b.extend_from_slice(&4u32.to_le_bytes());
    b.extend_from_slice(&[0, 0, 0, 0]);
    for v in [0.0f32, 0.0, 0.0, 0.0, 1.0, -1.0, 0.5, 0.25] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    let ds = tmde::decode(&b).unwrap();
    assert_eq!(ds.n(), 2);
    assert_eq!(ds.row(1), &[1.0, -1.0, 0.5, 0.25]);
    assert!(ds.labels().is_none());
}

#[test]
fn missing_row_is_corruption() {
    let ds = random_dataset(3, 4, false, 1);
    let b = tmde::encode(&ds).unwrap();
    let truncated = &b[..b.len() - 16];
    assert!(matches!(tmde::decode(truncated), Err(Error::Corrupt(_))));
}

#[test]
fn wrong_magic_and_version_are_distinguished() {
    let ds = random_dataset(2, 2, false, 1);
    let mut b = tmde::encode(&ds).unwrap();
    b[4] = 2;
    assert!(matches!(tmde::decode(&b), Err(Error::Version { found: 2, .. })));
    b[0] = b'X';
    assert!(matches!(tmde::decode(&b), Err(Error::Format(_))));
}

#[test]
fn random_dataset_round_trips_bit_for_bit() {
    let ds = random_dataset(100, 16, false, 42);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.tmde");
    tmde::write(&ds, &p).unwrap();
    let back = tmde::read(&p).unwrap();
    let a: Vec<u32> = ds.data().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
    assert_eq!(tmde::encode(&back).unwrap(), std::fs::read(&p).unwrap());
}

#[test]
fn labels_survive_the_round_trip() {
    let ds = random_dataset(50, 8, true, 3);
    let back = tmde::decode(&tmde::encode(&ds).unwrap()).unwrap();
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back, ds);
}

#[test]
fn missing_file_is_an_io_error() {
    let err = tmde::read(std::path::Path::new("/nonexistent/x.tmde")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert_eq!(err.exit_code(), 1);
}

fn full_bundle() -> ModelBundle {
    let mut arch = ArchConfig::mlp(6, 3, 2);
    arch.mlp_widths = Some(vec![8, 7]);
    let mut b = ModelBundle::init(&arch, 5).unwrap();
    b.prior = Some(PriorState::from_logits(vec![0.3, -1.25, 2.0]).unwrap());
    let raw = random_dataset(20, 6, false, 8);
    let b = b.with_scaler(Scaler::fit(&raw).unwrap()).unwrap();
    let head = ClassifierHead::new(2, 6, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect(), vec![0.1, -0.2], Space::Raw).unwrap();
    b.with_head(head).unwrap()
}

#[test]
fn fresh_bundle_round_trips_exactly() {
    let b = ModelBundle::init(&ArchConfig::mlp(4, 2, 3), 9).unwrap();
    let bytes = tmdb::encode(&b).unwrap();
    assert_eq!(tmdb::decode(&bytes).unwrap(), b);
}

#[test]
fn every_block_round_trips_and_projection_is_unchanged() {
    let b = full_bundle();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.tmdb");
    tmdb::write(&b, &p).unwrap();
    let back = tmdb::read(&p).unwrap();
    assert_eq!(back, b);
    let t = [0.1f32, -0.3, 0.7, 0.0, 0.2, -0.9];
    let x = b.project(&t, 15, 4).unwrap();
    let y = back.project(&t, 15, 4).unwrap();
    assert_eq!(x.t_hat.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.t_hat.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(x.distance.to_bits(), y.distance.to_bits());
}

#[test]
fn flipped_version_byte_is_a_version_error() {
    let mut bytes = tmdb::encode(&full_bundle()).unwrap();
    bytes[4] ^= 0xff;
    assert!(matches!(tmdb::decode(&bytes), Err(Error::Version { .. })));
}

#[test]
fn truncated_bundle_is_corruption() {
    let bytes = tmdb::encode(&full_bundle()).unwrap();
    for cut in [6, bytes.len() / 3, bytes.len() - 1] {
        assert!(matches!(tmdb::decode(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_finite_dataset_round_trips(
        n in 0usize..20,
        dim in 1usize..8,
        labeled in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut r = rng::seeded(seed);
        let data: Vec<f32> = (0..n * dim).map(|_| (rng::standard_normal(&mut r) * 1e3) as f32).collect();
        let labels = labeled.then(|| (0..n).map(|i| (i * 7 % 3) as i32).collect());
        let ds = EmbeddingDataset::new(dim, data, labels, false).unwrap();
        let bytes = tmde::encode(&ds).unwrap();
        prop_assert_eq!(bytes.len(), 17 + 4 * n * dim + if labeled { 4 * n } else { 0 });
        let back = tmde::decode(&bytes).unwrap();
        prop_assert_eq!(tmde::encode(&back).unwrap(), bytes);
    }

    #[test]
    fn any_single_byte_flip_in_a_bundle_is_detected(pos in 5usize..400, bit in 0u8..8) {
        let bytes = tmdb::encode(&full_bundle()).unwrap();
        let pos = pos.min(bytes.len() - 1);
        let mut bad = bytes.clone();
        bad[pos] ^= 1 << bit;
        prop_assert!(tmdb::decode(&bad).is_err());
    }
}
