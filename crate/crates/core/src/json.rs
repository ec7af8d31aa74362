use serde::Serialize;

/// Serializes `value` as pretty JSON with object keys in sorted order.
///
/// Struct fields are routed through `serde_json::Value`, whose map type is a
/// `BTreeMap`, so the output is independent of field declaration order.
pub fn to_sorted_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}
