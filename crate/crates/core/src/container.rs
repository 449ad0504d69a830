//! Tensor container reader/writer.
//!
//! Layout: bytes 0-7 hold an unsigned 64-bit little-endian header length N,
//! bytes 8..8+N a UTF-8 JSON object mapping tensor name to
//! `{"dtype": "F32"|"F64", "shape": [...], "data_offsets": [begin, end]}`
//! plus an optional `"__metadata__"` string map, and the remaining bytes are
//! the data section with offsets relative to its start. Elements are
//! row-major little-endian with no padding between tensors in canonical
//! writes.
//!
//! Writes are canonical: header keys sorted lexically, tensors laid out in
//! sorted-name order with contiguous offsets from 0, compact JSON. Identical
//! input therefore always produces byte-identical files, which is what merge
//! reruns and fixture regeneration lean on.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{Map, Value, json};

use crate::error::{Error, Result};
use crate::tensor::{DType, NamedTensor, numel_of};

pub const METADATA_KEY: &str = "__metadata__";

/// Tensors plus the verbatim metadata string map of one container.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub tensors: BTreeMap<String, NamedTensor>,
    pub metadata: BTreeMap<String, String>,
}

fn parse_usize_array(name: &str, v: &Value, field: &str) -> Result<Vec<usize>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Format(format!("tensor '{name}': '{field}' is not an array")))?;
    arr.iter()
        .map(|x| {
            x.as_u64()
                .map(|u| u as usize)
                .ok_or_else(|| Error::Format(format!("tensor '{name}': bad entry in '{field}'")))
        })
        .collect()
}

/// Parse a container from raw bytes.
pub fn parse_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 8 {
        return Err(Error::Format(
            "truncated file: missing header length".into(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let data_start = 8usize
        .checked_add(header_len)
        .ok_or_else(|| Error::Format("header length overflows".into()))?;
    if bytes.len() < data_start {
        return Err(Error::Format(format!(
            "truncated file: header declares {header_len} bytes, {} available",
            bytes.len() - 8
        )));
    }
    let header: Value = serde_json::from_slice(&bytes[8..data_start])
        .map_err(|e| Error::Format(format!("header not valid JSON: {e}")))?;
    let obj = header
        .as_object()
        .ok_or_else(|| Error::Format("header is not a JSON object".into()))?;
    let data = &bytes[data_start..];

    let mut metadata = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    let mut spans: Vec<(usize, usize, String)> = Vec::new();

    for (name, entry) in obj {
        if name == METADATA_KEY {
            let map = entry
                .as_object()
                .ok_or_else(|| Error::Format(format!("'{METADATA_KEY}' is not a JSON object")))?;
            for (k, v) in map {
                let s = v.as_str().ok_or_else(|| {
                    Error::Format(format!("metadata value for '{k}' is not a string"))
                })?;
                metadata.insert(k.clone(), s.to_string());
            }
            continue;
        }
        let entry = entry
            .as_object()
            .ok_or_else(|| Error::Format(format!("tensor '{name}': entry is not an object")))?;
        let dtype_str = entry
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Format(format!("tensor '{name}': missing dtype")))?;
        let dtype = DType::from_tag(dtype_str).ok_or_else(|| {
            Error::Format(format!("tensor '{name}': unsupported dtype '{dtype_str}'"))
        })?;
        let shape = parse_usize_array(
            name,
            entry
                .get("shape")
                .ok_or_else(|| Error::Format(format!("tensor '{name}': missing shape")))?,
            "shape",
        )?;
        let offsets = parse_usize_array(
            name,
            entry
                .get("data_offsets")
                .ok_or_else(|| Error::Format(format!("tensor '{name}': missing data_offsets")))?,
            "data_offsets",
        )?;
        let [begin, end] = offsets.as_slice() else {
            return Err(Error::Format(format!(
                "tensor '{name}': data_offsets must have exactly two entries"
            )));
        };
        let (begin, end) = (*begin, *end);
        if end < begin || end > data.len() {
            return Err(Error::Format(format!(
                "tensor '{name}': data_offsets [{begin}, {end}] out of bounds for data section of {} bytes",
                data.len()
            )));
        }
        let expected = numel_of(&shape) * dtype.size_bytes();
        if end - begin != expected {
            return Err(Error::Format(format!(
                "tensor '{name}': data span {} bytes but dtype/shape imply {expected}",
                end - begin
            )));
        }
        spans.push((begin, end, name.clone()));
        let t = NamedTensor::from_le_bytes(name.clone(), shape, dtype, &data[begin..end])?;
        tensors.insert(name.clone(), t);
    }

    spans.sort();
    for pair in spans.windows(2) {
        let (_, end_a, name_a) = &pair[0];
        let (begin_b, _, name_b) = &pair[1];
        if begin_b < end_a {
            return Err(Error::Format(format!(
                "overlapping data offsets between '{name_a}' and '{name_b}'"
            )));
        }
    }

    Ok(Container { tensors, metadata })
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let bytes = fs::read(path.as_ref())?;
    parse_container(&bytes)
}

/// Serialize to canonical container bytes.
pub fn serialize_container(
    tensors: &BTreeMap<String, NamedTensor>,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut header = Map::new();
    if !metadata.is_empty() {
        let meta: Map<String, Value> = metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), Value::Object(meta));
    }
    let mut offset = 0usize;
    let mut payload = Vec::new();
    // BTreeMap iteration is already sorted-name order.
    for (name, t) in tensors {
        if name.is_empty() {
            return Err(Error::Format("tensor names must be nonempty".into()));
        }
        if name == METADATA_KEY {
            return Err(Error::Format(format!(
                "tensor name '{METADATA_KEY}' collides with the metadata key"
            )));
        }
        let bytes = t.to_le_bytes();
        let end = offset + bytes.len();
        header.insert(
            name.clone(),
            json!({
                "dtype": t.dtype().as_str(),
                "shape": t.shape(),
                "data_offsets": [offset, end],
            }),
        );
        payload.extend_from_slice(&bytes);
        offset = end;
    }
    // serde_json maps are BTree-backed, so keys serialize lexically sorted.
    let header_bytes = serde_json::to_vec(&Value::Object(header))?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_container(
    tensors: &BTreeMap<String, NamedTensor>,
    metadata: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = serialize_container(tensors, metadata)?;
    fs::write(path.as_ref(), bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single() -> BTreeMap<String, NamedTensor> {
        let mut m = BTreeMap::new();
        m.insert(
            "w".to_string(),
            NamedTensor::from_f32("w", vec![2], vec![1.0, 2.0]).unwrap(),
        );
        m
    }

    #[test]
    fn single_tensor_round_trip() {
        let bytes = serialize_container(&single(), &BTreeMap::new()).unwrap();
        let c = parse_container(&bytes).unwrap();
        assert_eq!(c.tensors.len(), 1);
        assert_eq!(c.tensors["w"].to_f64_vec(), vec![1.0, 2.0]);
        assert_eq!(c.tensors["w"].dtype(), DType::F32);
    }

    #[test]
    fn empty_container_parses_as_empty() {
        let bytes = serialize_container(&BTreeMap::new(), &BTreeMap::new()).unwrap();
        let c = parse_container(&bytes).unwrap();
        assert!(c.tensors.is_empty());
        assert!(c.metadata.is_empty());
        // header is exactly "{}"
        assert_eq!(&bytes[8..], b"{}");
    }

    #[test]
    fn hand_crafted_minimal_container() {
        // One F32 tensor "w" of shape [2] holding [1.0, 2.0].
        let header = br#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        let c = parse_container(&bytes).unwrap();
        assert_eq!(c.tensors["w"].to_f64_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn header_length_matches_json_bytes() {
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), "7".to_string());
        let bytes = serialize_container(&single(), &meta).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = &bytes[8..8 + n];
        assert!(serde_json::from_slice::<Value>(header).is_ok());
        // metadata key sorts before lowercase tensor names
        assert!(header.starts_with(br#"{"__metadata__""#));
    }

    #[test]
    fn writes_are_byte_idempotent() {
        let a = serialize_container(&single(), &BTreeMap::new()).unwrap();
        let b = serialize_container(&single(), &BTreeMap::new()).unwrap();
        assert_eq!(a, b);
        // write . read . write == write
        let c = parse_container(&a).unwrap();
        let again = serialize_container(&c.tensors, &c.metadata).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = serialize_container(&single(), &BTreeMap::new()).unwrap();
        assert!(matches!(
            parse_container(&bytes[..6]),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            parse_container(&bytes[..bytes.len() / 2]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn invalid_json_header_is_rejected() {
        let header = b"not json";
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        assert!(matches!(parse_container(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_dtype_names_the_tensor() {
        let header = br#"{"w":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.push(0);
        match parse_container(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains('w') && msg.contains("I8")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let header = br#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[2,6]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 6]);
        match parse_container(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("overlap")),
            other => panic!("expected overlap error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_offsets_are_rejected() {
        let header = br#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 4]); // only 4 of the declared 8 bytes
        assert!(matches!(parse_container(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn empty_name_is_rejected_on_write() {
        let mut m = BTreeMap::new();
        m.insert(
            String::new(),
            NamedTensor::from_f32("", vec![0], vec![]).unwrap(),
        );
        assert!(serialize_container(&m, &BTreeMap::new()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            names in proptest::collection::btree_set("[a-z]{1,6}(\\.[a-z]{1,4}){0,2}", 1..6),
            payloads in proptest::collection::vec(
                (proptest::collection::vec(-1e6f64..1e6, 0..24), proptest::bool::ANY),
                6,
            ),
        ) {
            let mut tensors = BTreeMap::new();
            for (name, (data, wide)) in names.iter().zip(&payloads) {
                let n = data.len();
                let t = if *wide {
                    NamedTensor::from_f64(name.clone(), vec![n], data.clone()).unwrap()
                } else {
                    NamedTensor::from_f32(
                        name.clone(),
                        vec![n],
                        data.iter().map(|&x| x as f32).collect(),
                    )
                    .unwrap()
                };
                tensors.insert(name.clone(), t);
            }
            let mut meta = BTreeMap::new();
            meta.insert("k".to_string(), "v".to_string());
            let bytes = serialize_container(&tensors, &meta).unwrap();
            let c = parse_container(&bytes).unwrap();
            prop_assert_eq!(&c.metadata, &meta);
            for (name, t) in &tensors {
                let r = &c.tensors[name];
                prop_assert_eq!(r.dtype(), t.dtype());
                prop_assert_eq!(r.shape(), t.shape());
                prop_assert_eq!(r.to_le_bytes(), t.to_le_bytes());
            }
        }
    }
}
