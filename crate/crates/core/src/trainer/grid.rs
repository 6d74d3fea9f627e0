//! The controlled-variable ablation grid around a base configuration.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    /// File-system friendly id, e.g. `crop5s`.
    pub id: String,
    /// Row label, e.g. `Length Crop 5s`.
    pub label: String,
    pub config: TrainConfig,
}

/// Base plus ten single-field variants. Crop lengths keep their ratio to the
/// 30 s starting setting (5/30, 10/30, 15/30 of the base crop); the long
/// schedule doubles `total_steps`.
pub fn make_ablation_grid(base: &TrainConfig) -> Vec<GridEntry> {
    let entry = |id: &str, label: &str, edit: &dyn Fn(&mut TrainConfig)| {
        let mut config = base.clone();
        edit(&mut config);
        GridEntry { id: id.to_string(), label: label.to_string(), config }
    };
    let crop = |secs: f64| {
        // Rounded to whole samples.
        let rate = base.encoder.sample_rate as f64;
        move |c: &mut TrainConfig| c.crop_seconds = (base.crop_seconds * secs / 30.0 * rate).round() / rate
    };
    let layers = base.encoder.layers;
    vec![
        entry("base", "Starting Setting", &|_| {}),
        entry("crop5s", "Length Crop 5s", &crop(5.0)),
        entry("crop10s", "Length Crop 10s", &crop(10.0)),
        entry("crop15s", "Length Crop 15s", &crop(15.0)),
        entry("span5", "Mask Span 5", &|c| c.mask.span_length = 5),
        entry("span15", "Mask Span 15", &|c| c.mask.span_length = 15),
        entry("prob50", "Mask Prob 50%", &|c| c.mask.mask_prob = 0.5),
        entry("prob70", "Mask Prob 70%", &|c| c.mask.mask_prob = 0.7),
        entry("prob80", "Mask Prob 80%", &|c| c.mask.mask_prob = 0.8),
        entry("top12", "Target Top-12", &|c| c.target.top_k = layers),
        entry("step800k", "Step 800K", &|c| c.total_steps *= 2),
    ]
}

/// Dotted paths of every leaf value that differs between two configs.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let (a, b) = (serde_json::to_value(a).expect("config serializes"), serde_json::to_value(b).expect("config serializes"));
    let mut out = Vec::new();
    diff_values("", &a, &b, &mut out);
    out
}

fn diff_values(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                diff_values(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}
