//! Canonical JSON: sorted object keys, no whitespace, floats at fixed precision.

use serde_json::Value;

/// Decimal places used for every non-integer number.
pub const FLOAT_DECIMALS: usize = 4;

/// Round to the canonical float grid so that printing and re-parsing is exact.
pub fn quantize(x: f64) -> f64 {
    let scale = 10f64.powi(FLOAT_DECIMALS as i32);
    let q = (x * scale).round() / scale;
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

pub fn canonical_string(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, &mut out);
    out
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                let f = n.as_f64().unwrap_or(0.0);
                out.push_str(&format!("{:.*}", FLOAT_DECIMALS, quantize(f)));
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("key serializes"));
                out.push(':');
                write_value(&map[key], out);
            }
            out.push('}');
        }
    }
}

/// Canonical JSON of any serializable value.
pub fn to_canonical<T: serde::Serialize>(value: &T) -> serde_json::Result<String> {
    Ok(canonical_string(&serde_json::to_value(value)?))
}
