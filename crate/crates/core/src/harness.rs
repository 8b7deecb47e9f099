//! Result files: per-epoch metrics CSV, final summary JSON, checkpoints and grid sweeps.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::aggregation::Strategy;
use crate::data::{dump_dataset, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::model::save_checkpoint;
use crate::protocol::{run_simulation, RunConfig, SimulationResult};

pub const SUMMARY_FORMAT_VERSION: u32 = 1;
pub const GRID_FORMAT_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "SPLITFED_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "splitfed-out";
pub const DEFAULT_SIGMAS: [f64; 7] = [0.0, 2e-4, 6e-4, 1e-3, 1e-2, 1e-1, 5e-1];

/// Shortest decimal that parses back to the same `f64`; non-finite values as `nan`, `inf`, `-inf`.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:?}")
    }
}

/// Inverse of [`fmt_float`].
pub fn parse_float(s: &str) -> Option<f64> {
    match s {
        "nan" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

/// A number that serializes to JSON as itself when finite and as a string otherwise.
/// Equality treats NaN as equal to NaN.
#[derive(Clone, Copy, Debug)]
pub struct Metric(pub f64);

impl PartialEq for Metric {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0 || (self.0.is_nan() && other.0.is_nan())
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&fmt_float(self.0))
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Metric;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or one of \"nan\", \"inf\", \"-inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Metric, E> {
                Ok(Metric(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Metric, E> {
                Ok(Metric(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Metric, E> {
                Ok(Metric(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Metric, E> {
                match v {
                    "nan" | "inf" | "-inf" => Ok(Metric(parse_float(v).unwrap())),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

pub const METRICS_HEADER: [&str; 17] = [
    "global_epoch",
    "client",
    "strategy",
    "sigma_noise",
    "train_loss",
    "val_loss",
    "indicator",
    "best_local_epoch",
    "r_weight",
    "test_loss",
    "test_accuracy_percent",
    "iou_bg",
    "iou_zp",
    "iou_te",
    "iou_bl",
    "iou_icm",
    "diverged",
];

/// CSV records of one run: per global epoch, one row per client then one `global` row.
pub fn metrics_records(result: &SimulationResult) -> Vec<Vec<String>> {
    let strategy = result.config.strategy.name.to_string();
    let sigma = fmt_float(result.config.channel.sigma_noise);
    let mut rows = Vec::new();
    for e in &result.history {
        for c in &e.clients {
            let mut row = vec![
                e.global_epoch.to_string(),
                c.client_id.to_string(),
                strategy.clone(),
                sigma.clone(),
                fmt_float(c.train_loss),
                fmt_float(c.val_loss),
                fmt_float(c.indicator),
                c.best_local_epoch.to_string(),
                fmt_float(c.r_weight),
            ];
            row.extend(std::iter::repeat_n(String::new(), 7));
            row.push(c.diverged.to_string());
            rows.push(row);
        }
        let mut row = vec![e.global_epoch.to_string(), "global".into(), strategy.clone(), sigma.clone()];
        row.extend(std::iter::repeat_n(String::new(), 5));
        row.push(fmt_float(e.test.loss));
        row.push(fmt_float(e.test.accuracy_percent));
        row.extend(e.test.iou.iter().map(|&v| fmt_float(v)));
        row.push(e.diverged.to_string());
        rows.push(row);
    }
    rows
}

pub fn write_metrics_csv<'a>(path: &Path, results: impl IntoIterator<Item = &'a SimulationResult>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in results {
        for row in metrics_records(r) {
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Final-epoch outcome of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub sigma_noise: f64,
    pub strategy: Strategy,
    pub global_epochs: usize,
    pub test_loss: Metric,
    pub test_accuracy_percent: f64,
    /// In the order of [`Summary::classes`].
    pub iou: Vec<f64>,
    pub diverged: bool,
    pub divergence_reason: Option<String>,
    /// Accuracy of a model that predicts background everywhere.
    pub background_accuracy_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format_version: u32,
    pub classes: Vec<String>,
    /// Noise level outer, strategy inner.
    pub cells: Vec<SummaryCell>,
}

pub fn summary_cell(result: &SimulationResult) -> SummaryCell {
    let last = result.final_epoch();
    SummaryCell {
        sigma_noise: result.config.channel.sigma_noise,
        strategy: result.config.strategy.name,
        global_epochs: last.global_epoch,
        test_loss: Metric(last.test.loss),
        test_accuracy_percent: last.test.accuracy_percent,
        iou: last.test.iou.clone(),
        diverged: result.diverged,
        divergence_reason: result.divergence_reason.clone(),
        background_accuracy_percent: 100.0 * result.background_fraction,
    }
}

pub fn summarize<'a>(results: impl IntoIterator<Item = &'a SimulationResult>) -> Summary {
    Summary {
        format_version: SUMMARY_FORMAT_VERSION,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        cells: results.into_iter().map(summary_cell).collect(),
    }
}

/// Fixed-width text rendering of a summary.
pub fn render_table(summary: &Summary) -> String {
    let mut out = format!("{:>10}  {:<7} {:>8} {:>7}", "sigma", "method", "loss", "acc");
    for c in &summary.classes {
        out.push_str(&format!(" {c:>6}"));
    }
    out.push('\n');
    for cell in &summary.cells {
        let loss =
            if cell.test_loss.0.is_finite() { format!("{:.4}", cell.test_loss.0) } else { fmt_float(cell.test_loss.0) };
        out.push_str(&format!(
            "{:>10}  {:<7} {:>8} {:>7.2}",
            fmt_float(cell.sigma_noise),
            cell.strategy.name(),
            loss,
            cell.test_accuracy_percent
        ));
        for v in &cell.iou {
            out.push_str(&format!(" {v:>6.2}"));
        }
        out.push('\n');
    }
    out
}

/// A sweep over noise levels and strategies around a base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub format_version: u32,
    pub sigmas: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub base: RunConfig,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            format_version: GRID_FORMAT_VERSION,
            sigmas: DEFAULT_SIGMAS.to_vec(),
            strategies: Strategy::ALL.to_vec(),
            base: RunConfig::default(),
        }
    }
}

impl GridSpec {
    /// Reads either a grid document (with a `base` section) or a plain run config,
    /// which is swept over the default noise levels and all strategies.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let spec = if value.get("base").is_some() || value.get("sigmas").is_some() {
            serde_json::from_value(value)?
        } else {
            GridSpec { base: serde_json::from_value(value)?, ..GridSpec::default() }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != GRID_FORMAT_VERSION {
            return Err(Error::config("format_version", format!("expected {GRID_FORMAT_VERSION}")));
        }
        if self.sigmas.is_empty() || self.strategies.is_empty() {
            return Err(Error::config("sigmas", "the grid needs at least one noise level and one strategy"));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::config("sigmas", format!("{s} is not a valid noise level")));
        }
        self.base.validate()
    }

    /// Run configs in summary order: noise level outer, strategy inner.
    pub fn cells(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &sigma in &self.sigmas {
            for &strategy in &self.strategies {
                let mut cfg = self.base.clone();
                cfg.channel.sigma_noise = sigma;
                cfg.strategy.name = strategy;
                out.push(cfg);
            }
        }
        out
    }
}

/// Runs every cell; cells execute in parallel and come back in [`GridSpec::cells`] order.
pub fn run_grid(spec: &GridSpec) -> Result<Vec<SimulationResult>> {
    spec.validate()?;
    spec.cells().par_iter().map(run_simulation).collect()
}

/// Output directory precedence: explicit argument, then the environment, then the config.
pub fn resolve_output_dir(explicit: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

pub fn cell_name(cfg: &RunConfig) -> String {
    format!("sigma_{}_{}", fmt_float(cfg.channel.sigma_noise), cfg.strategy.name)
}

/// Artifacts that belong to one run, without the metrics and summary files.
fn write_run_artifacts(dir: &Path, result: &SimulationResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&result.config)?)?;
    save_checkpoint(&dir.join("checkpoints"), "global_final", &result.config.architecture, &result.final_model)?;
    fs::write(dir.join("predictions.bin"), &result.final_epoch().test.predictions)?;
    Ok(())
}

fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}

/// Writes `metrics.csv`, `summary.json`, `config.json`, the final checkpoint,
/// the test-set predictions and the test set itself into `dir`.
pub fn write_run(dir: &Path, result: &SimulationResult) -> Result<Summary> {
    write_run_artifacts(dir, result)?;
    dump_dataset(&dir.join("test_set"), &result.test_set)?;
    write_metrics_csv(&dir.join("metrics.csv"), [result])?;
    let summary = summarize([result]);
    write_summary(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Writes the merged `metrics.csv` and `summary.json` at the top of `dir` and
/// each cell's artifacts under `cells/<name>/`.
pub fn write_grid(dir: &Path, spec: &GridSpec, results: &[SimulationResult]) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("grid.json"), serde_json::to_string_pretty(spec)?)?;
    for r in results {
        write_run_artifacts(&dir.join("cells").join(cell_name(&r.config)), r)?;
    }
    if let Some(first) = results.first() {
        dump_dataset(&dir.join("test_set"), &first.test_set)?;
    }
    write_metrics_csv(&dir.join("metrics.csv"), results)?;
    let summary = summarize(results);
    write_summary(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_roundtrips() {
        for v in [0.0, 1.0, 0.1, 1e-7, 123456.789, -2.5e300, f64::MIN_POSITIVE] {
            assert_eq!(parse_float(&fmt_float(v)).unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(fmt_float(f64::NAN), "nan");
        assert!(parse_float("nan").unwrap().is_nan());
        assert_eq!(fmt_float(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn metric_json() {
        assert_eq!(serde_json::to_string(&Metric(f64::NAN)).unwrap(), "\"nan\"");
        assert_eq!(serde_json::to_string(&Metric(0.25)).unwrap(), "0.25");
        let back: Metric = serde_json::from_str("\"nan\"").unwrap();
        assert_eq!(back, Metric(f64::NAN));
        assert!(serde_json::from_str::<Metric>("\"abc\"").is_err());
    }

    #[test]
    fn grid_cells_are_sigma_major() {
        let spec = GridSpec::default();
        let cells = spec.cells();
        assert_eq!(cells.len(), 21);
        assert_eq!(cells[0].strategy.name, Strategy::Naive);
        assert_eq!(cells[2].strategy.name, Strategy::Smart);
        assert_eq!(cells[3].channel.sigma_noise, 2e-4);
    }

    #[test]
    fn grid_accepts_plain_run_config() {
        let spec = GridSpec::from_json(r#"{"protocol": {"global_epochs": 2}}"#).unwrap();
        assert_eq!(spec.sigmas.len(), 7);
        assert_eq!(spec.base.protocol.global_epochs, 2);
        let spec = GridSpec::from_json(r#"{"sigmas": [0.0, 0.1], "strategies": ["smart"]}"#).unwrap();
        assert_eq!(spec.cells().len(), 2);
        assert!(GridSpec::from_json(r#"{"sigmas": [-1.0]}"#).is_err());
    }
}
