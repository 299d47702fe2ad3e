//! Canonical JSON serialization: UTF-8, object keys sorted lexicographically,
//! floats rendered as the shortest round-trip decimal. Used for every file the
//! toolkit writes and as the basis for content-addressed ids.

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// Recursively sorts object keys so that serialization order is independent
/// of struct field order or map type.
fn sort_value(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut sorted: Vec<(String, Value)> =
                map.into_iter().map(|(k, v)| (k, sort_value(v))).collect();
            sorted.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(Map::from_iter(sorted))
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_value).collect()),
        other => other,
    }
}

/// Serializes `value` to canonical JSON text (compact, sorted keys).
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let raw = serde_json::to_value(value)?;
    serde_json::to_string(&sort_value(raw))
}

/// Serializes `value` to canonical JSON with indentation, for files meant to
/// be read and diffed by humans. Key order is still canonical.
pub fn to_canonical_json_pretty<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let raw = serde_json::to_value(value)?;
    serde_json::to_string_pretty(&sort_value(raw))
}

/// Content id: hex SHA-256 of the canonical serialization, truncated to
/// 16 hex characters. Identical content always maps to the same id.
pub fn content_id<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let canonical = to_canonical_json(value)?;
    let digest = Sha256::digest(canonical.as_bytes());
    let mut id = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        id.push_str(&format!("{byte:02x}"));
    }
    Ok(id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_recursively() {
        let v = json!({"b": {"z": 1, "a": 2}, "a": [{"y": 0, "x": 1}]});
        let s = to_canonical_json(&v).unwrap();
        assert_eq!(s, r#"{"a":[{"x":1,"y":0}],"b":{"a":2,"z":1}}"#);
    }

    #[test]
    fn floats_round_trip_shortest() {
        let v = json!({"x": 0.1, "y": 1.0, "z": 1e300});
        let s = to_canonical_json(&v).unwrap();
        assert_eq!(s, r#"{"x":0.1,"y":1.0,"z":1e+300}"#);
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["z"].as_f64(), Some(1e300));
    }

    #[test]
    fn content_id_is_stable_and_order_independent() {
        let a = json!({"p": 1, "q": 2});
        let b = json!({"q": 2, "p": 1});
        assert_eq!(content_id(&a).unwrap(), content_id(&b).unwrap());
        assert_eq!(content_id(&a).unwrap().len(), 16);
    }
}
