//! Container files on disk: round trips and rejection of damaged models.

use std::io::ErrorKind;

use proptest::prelude::*;
use serde_json::Value;
use vitrc::model_io::{load_model, load_model_from_bytes, save_model, to_bytes};
use vitrc::{synth_toy_model, Error, ModelConfig, Vit};

fn cfg() -> ModelConfig {
    ModelConfig::toy(2, 2, 8, 2, 2, 3)
}

fn split(bytes: &[u8]) -> (Value, Vec<u8>) {
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
    (header, bytes[8 + n..].to_vec())
}

fn join(header: &Value, payload: &[u8]) -> Vec<u8> {
    let h = serde_json::to_vec(header).unwrap();
    let mut out = (h.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&h);
    out.extend_from_slice(payload);
    out
}

/// Drops tensor `index` from the table and its blob from the payload,
/// shifting later offsets so the file stays internally consistent.
fn without_tensor(bytes: &[u8], index: usize) -> (String, Vec<u8>) {
    let (mut header, payload) = split(bytes);
    let tensors = header["tensors"].as_array_mut().unwrap();
    let removed = tensors.remove(index);
    let off = removed["offset"].as_u64().unwrap();
    let len = removed["length"].as_u64().unwrap();
    for t in tensors.iter_mut() {
        let o = t["offset"].as_u64().unwrap();
        if o > off {
            t["offset"] = Value::from(o - len);
        }
    }
    let mut kept = payload[..off as usize].to_vec();
    kept.extend_from_slice(&payload[(off + len) as usize..]);
    let name = removed["name"].as_str().unwrap().to_string();
    (name, join(&header, &kept))
}

#[test]
fn save_load_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vitrc");
    let w = synth_toy_model(4, &cfg()).unwrap();
    save_model(&path, &cfg(), &w).unwrap();
    let (c, back) = load_model(&path).unwrap();
    assert_eq!(c, cfg());
    assert_eq!(back, w);
    let again = dir.path().join("again.vitrc");
    save_model(&again, &c, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    let vit = Vit::load(&path).unwrap();
    assert_eq!(vit.config(), &cfg());
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    match load_model(dir.path().join("absent.vitrc")) {
        Err(Error::Io { source, .. }) => assert_eq!(source.kind(), ErrorKind::NotFound),
        other => panic!("{other:?}"),
    }
}

#[test]
fn truncated_file_is_rejected() {
    let bytes = to_bytes(&cfg(), &synth_toy_model(1, &cfg()).unwrap()).unwrap();
    for cut in [0, 7, 8, 20, bytes.len() - 1] {
        let err = load_model_from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Io { .. } | Error::Format(_)), "cut {cut}: {err:?}");
    }
}

#[test]
fn distilled_checkpoint_is_rejected() {
    let bytes = to_bytes(&cfg(), &synth_toy_model(1, &cfg()).unwrap()).unwrap();
    let (mut header, mut payload) = split(&bytes);
    let d = cfg().embed_dim;
    let extra = serde_json::json!({
        "name": "dist_token", "dtype": "f32", "shape": [1, 1, d],
        "offset": payload.len(), "length": d * 4,
    });
    header["tensors"].as_array_mut().unwrap().push(extra);
    payload.extend(std::iter::repeat_n(0u8, d * 4));
    let err = load_model_from_bytes(&join(&header, &payload)).unwrap_err();
    assert!(err.to_string().contains("dist"), "{err}");
}

#[test]
fn wrong_shape_names_expected_and_found() {
    let bytes = to_bytes(&cfg(), &synth_toy_model(1, &cfg()).unwrap()).unwrap();
    let (mut header, payload) = split(&bytes);
    let t = header["tensors"]
        .as_array_mut()
        .unwrap()
        .iter_mut()
        .find(|t| t["name"] == "head.bias")
        .unwrap();
    // Same byte count, different shape.
    t["shape"] = serde_json::json!([1, 3]);
    let err = load_model_from_bytes(&join(&header, &payload)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("head.bias") && msg.contains("[3]") && msg.contains("[1, 3]"), "{msg}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deleting_any_tensor_is_rejected(index in 0usize..1000) {
        let c = cfg();
        let bytes = to_bytes(&c, &synth_toy_model(2, &c).unwrap()).unwrap();
        let index = index % c.tensor_specs().len();
        let (name, damaged) = without_tensor(&bytes, index);
        match load_model_from_bytes(&damaged) {
            Err(Error::MissingTensor(missing)) => prop_assert_eq!(missing, name),
            other => prop_assert!(false, "expected MissingTensor({}), got {:?}", name, other),
        }
    }
}
