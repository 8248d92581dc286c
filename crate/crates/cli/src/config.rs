use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

/// Option defaults read from `--config`. Keys match the long flag names
/// with dashes replaced by underscores.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub pitch_um: Option<f64>,
    pub grid: Option<String>,
    pub desk_scale: Option<bool>,
    pub source: Option<String>,
    pub natural_dir: Option<String>,
    pub psf_dataset: Option<String>,
    pub artificial_fraction: Option<f64>,
    pub kr_samples: Option<usize>,
    pub steps: Option<usize>,
    pub multi_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub validation_groups: Option<usize>,
    pub validate_every: Option<usize>,
    pub no_compensation: Option<bool>,
    pub spacing_px: Option<usize>,
    pub columns: Option<usize>,
    pub rows: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| crate::commands::input_error(format!("config {}: {e}", path.display())))
    }
}

/// Parses `RxA`, e.g. `12x16`.
pub fn parse_grid(s: &str) -> Option<(usize, usize)> {
    let (r, a) = s.split_once(['x', 'X'])?;
    let (r, a) = (r.trim().parse().ok()?, a.trim().parse().ok()?);
    (r > 0 && a > 0).then_some((r, a))
}

/// Period in pixels from `25mm`, `0.5in` or `295px` (bare numbers are
/// pixels).
pub fn parse_length_px(s: &str, dpi: f64) -> Option<f64> {
    let s = s.trim();
    let (num, scale) = if let Some(v) = s.strip_suffix("mm") {
        (v, dpi / 25.4)
    } else if let Some(v) = s.strip_suffix("in") {
        (v, dpi)
    } else if let Some(v) = s.strip_suffix("px") {
        (v, 1.0)
    } else {
        (s, 1.0)
    };
    let v: f64 = num.trim().parse().ok()?;
    (v > 0.0 && v.is_finite()).then_some(v * scale)
}
