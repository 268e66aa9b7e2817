//! Small shared helpers for the CSV interfaces.

use std::collections::BTreeMap;
use std::path::Path;

/// Format a number with 9 significant digits, round-trip safe for the
/// magnitudes this toolkit emits.
pub fn fmt_num(value: f64) -> String {
    if value == 0.0 {
        return "0".to_string();
    }
    if !value.is_finite() {
        return value.to_string();
    }
    let formatted = format!("{value:.8e}");
    // prefer plain notation when it is not longer than necessary
    let plain = format!("{value:.9}");
    if plain.parse::<f64>() == formatted.parse::<f64>() && value.abs() < 1e6 && value.abs() >= 1e-3
    {
        // trim trailing zeros but keep at least one decimal
        let trimmed = plain.trim_end_matches('0');
        let trimmed = trimmed.strip_suffix('.').unwrap_or(trimmed);
        trimmed.to_string()
    } else {
        formatted
    }
}

/// Key=value pairs from an optional `<file>.meta` sidecar.
pub fn read_sidecar_meta(path: &Path) -> BTreeMap<String, String> {
    let mut pairs = BTreeMap::new();
    let sidecar = path.with_extension(format!(
        "{}.meta",
        path.extension().and_then(|e| e.to_str()).unwrap_or("csv")
    ));
    if let Ok(text) = std::fs::read_to_string(&sidecar) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                pairs.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
    }
    pairs
}
