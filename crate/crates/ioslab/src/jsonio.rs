//! Canonical JSON and CSV emission: sorted keys, doubles printed with 17
//! significant digits, trailing newline. Identical data always produces
//! identical bytes, so artifacts diff cleanly across runs.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

/// Format a double with 17 significant digits, enough to round-trip any
/// f64 exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => {
            let _ = write!(out, "{b}");
        }
        Value::Number(n) => {
            if let Some(f) = n.as_f64().filter(|_| n.is_f64()) {
                out.push_str(&fmt_f64(f));
            } else {
                let _ = write!(out, "{n}");
            }
        }
        Value::String(s) => {
            let _ = write!(out, "{}", Value::String(s.clone()));
        }
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                out.push_str(&"  ".repeat(indent + 1));
                write_value(out, item, indent + 1);
            }
            out.push('\n');
            out.push_str(&"  ".repeat(indent));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push('{');
            // serde_json's map is BTreeMap-backed, so iteration is sorted.
            for (i, (k, val)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                out.push_str(&"  ".repeat(indent + 1));
                let _ = write!(out, "{}: ", Value::String(k.clone()));
                write_value(out, val, indent + 1);
            }
            out.push('\n');
            out.push_str(&"  ".repeat(indent));
            out.push('}');
        }
    }
}

/// Render a value as canonical JSON text with a trailing newline.
pub fn to_canonical_string(v: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, v, 0);
    out.push('\n');
    out
}

/// Serialize anything Serialize into canonical JSON text.
pub fn canonical_json<T: Serialize>(data: &T) -> Result<String, serde_json::Error> {
    Ok(to_canonical_string(&serde_json::to_value(data)?))
}

/// Write canonical JSON to a file.
pub fn write_json_file<T: Serialize>(path: &Path, data: &T) -> io::Result<()> {
    let text = canonical_json(data).map_err(io::Error::other)?;
    std::fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sorted_keys_and_float_format() {
        let v = json!({"zeta": 1.5, "alpha": {"b": 2, "a": [0.1]}});
        let s = to_canonical_string(&v);
        let alpha = s.find("\"alpha\"").unwrap();
        let zeta = s.find("\"zeta\"").unwrap();
        assert!(alpha < zeta);
        assert!(s.contains("1.5000000000000000e0"));
        assert!(s.contains("1.0000000000000001e-1")); // 0.1 round-trips
        assert!(s.ends_with('\n'));
    }

    #[test]
    fn identical_input_identical_bytes() {
        let v = json!({"m": [1.0, 2.0, 3.0], "s": "x"});
        assert_eq!(to_canonical_string(&v), to_canonical_string(&v));
    }
}
