mod common;

use std::path::Path;

use adapter_mixer::checkpoint::{ensure_compatible, MismatchReason};
use adapter_mixer::{load_checkpoint, save_checkpoint, validate_compat, AdapterCheckpoint, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn data_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data"))
}

/// Builds a file image by hand: length prefix, header text, payload.
fn image(header: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(payload);
    out
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[test]
fn minimal_file_loads() {
    let bytes = image(
        r#"{"a.down":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
        &f32_bytes(&[1.0, 2.0, 3.0, 4.0]),
    );
    let ckpt = AdapterCheckpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.param_count(), 4);
    assert_eq!(ckpt.get("a.down").unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(ckpt.metadata()["format_version"], "1");
}

#[test]
fn range_past_end_is_out_of_bounds() {
    let bytes = image(
        r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#,
        &f32_bytes(&[1.0, 2.0]),
    );
    let err = AdapterCheckpoint::from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("out-of-bounds data range"), "{err}");
}

#[test]
fn golden_file_is_canonical() {
    let golden = std::fs::read(data_dir().join("golden.adpt")).unwrap();
    let ckpt = load_checkpoint(data_dir().join("golden.adpt")).unwrap();
    assert_eq!(ckpt.to_bytes().unwrap(), golden);
    assert_eq!(ckpt.name(), Some("golden"));
    let w = ckpt.get("adapter.down.weight").unwrap();
    assert_eq!(w.shape(), &[2, 3]);
    assert_eq!(w.data()[3].to_bits(), (-0.0f32).to_bits());
    assert_eq!(w.data()[4], 1e-40f32);
}

#[test]
fn noncanonical_file_saves_as_golden() {
    let golden = std::fs::read(data_dir().join("golden.adpt")).unwrap();
    let ckpt = load_checkpoint(data_dir().join("golden_noncanonical.adpt")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("re.adpt");
    save_checkpoint(&ckpt, &out).unwrap();
    assert_eq!(std::fs::read(out).unwrap(), golden);
}

#[test]
fn golden_bytes_parse_independently() {
    let bytes = std::fs::read(data_dir().join("golden.adpt")).unwrap();
    let h = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + h]).unwrap();
    let payload = &bytes[8 + h..];
    let ckpt = AdapterCheckpoint::from_bytes(&bytes).unwrap();
    for (name, t) in ckpt.tensors() {
        let offs = header[name]["data_offsets"].as_array().unwrap();
        let (b, e) = (offs[0].as_u64().unwrap() as usize, offs[1].as_u64().unwrap() as usize);
        assert_eq!(&payload[b..e], f32_bytes(t.data()).as_slice());
    }
}

#[test]
fn million_values_round_trip() {
    let mut rng = common::rng(7);
    let data: Vec<f32> = (0..1_000_000)
        .map(|_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff))
        .collect();
    let ckpt = AdapterCheckpoint::from_tensors([("w", Tensor::new(vec![1000, 1000], data).unwrap())])
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.adpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let (a, b) = (ckpt.get("w").unwrap().data(), back.get("w").unwrap().data());
    let diffs = a.iter().zip(b).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    assert_eq!(diffs, 0);
}

#[test]
fn compat_examples() {
    let a = AdapterCheckpoint::from_tensors([("a.up", Tensor::zeros(vec![8, 32]))]).unwrap();
    assert!(validate_compat(&[&a, &a]).compatible);

    let b = AdapterCheckpoint::from_tensors([("b", Tensor::zeros(vec![1]))]).unwrap();
    let report = validate_compat(&[&a, &b]);
    assert!(!report.compatible);
    assert!(report
        .mismatches
        .iter()
        .any(|m| m.tensor == "a.up" && m.reason == MismatchReason::Missing));

    let c = AdapterCheckpoint::from_tensors([("a.up", Tensor::zeros(vec![8, 16]))]).unwrap();
    let report = validate_compat(&[&a, &c]);
    assert_eq!(report.mismatches.len(), 1);
    assert_eq!(report.mismatches[0].tensor, "a.up");
    assert_eq!(report.mismatches[0].reason, MismatchReason::ShapeMismatch);
    assert!(ensure_compatible(&[&a, &c]).is_err());
}

fn arb_checkpoint() -> impl Strategy<Value = AdapterCheckpoint> {
    prop::collection::btree_map(
        "[a-z][a-z0-9._]{0,11}",
        prop::collection::vec(
            prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO,
            1..40,
        ),
        1..5,
    )
    .prop_map(|tensors| {
        AdapterCheckpoint::from_tensors(
            tensors
                .into_iter()
                .map(|(name, data)| (name, Tensor::from_vec(data))),
        )
        .unwrap()
    })
}

proptest! {
    #[test]
    fn round_trip_is_bitwise(ckpt in arb_checkpoint()) {
        let bytes = ckpt.to_bytes().unwrap();
        let back = AdapterCheckpoint::from_bytes(&bytes).unwrap();
        prop_assert!(back.tensors_bitwise_eq(&ckpt));
        prop_assert_eq!(back.metadata(), ckpt.metadata());
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn insertion_order_does_not_matter(ckpt in arb_checkpoint()) {
        let mut reversed = AdapterCheckpoint::new();
        let entries: Vec<(String, Tensor)> =
            ckpt.tensors().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (n, t) in entries.into_iter().rev() {
            reversed.insert(n, t).unwrap();
        }
        prop_assert_eq!(reversed.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
    }

    #[test]
    fn compat_verdict_is_symmetric(a in arb_checkpoint(), b in arb_checkpoint()) {
        prop_assert_eq!(
            validate_compat(&[&a, &b]).compatible,
            validate_compat(&[&b, &a]).compatible
        );
    }
}
