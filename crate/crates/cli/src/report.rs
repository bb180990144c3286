//! CSV outputs: per-epoch training metrics and experiment report rows.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use noisnn::trainer::EpochMetrics;

pub const METRICS_HEADER: &str = "epoch,loss,acc,seconds,lr";
pub const REPORT_HEADER: &str = "experiment,config,metric,value,seconds";

/// One line of an experiment report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    /// `key=value` pairs joined with `;`.
    pub config: String,
    pub metric: String,
    /// Numeric value, or a marker such as `timeout`.
    pub value: String,
    pub seconds: f64,
}

impl ReportRow {
    pub fn new(experiment: &str, config: &Config, metric: &str, value: f64, seconds: f64) -> Self {
        Self {
            experiment: experiment.into(),
            config: config.render(),
            metric: metric.into(),
            value: format!("{value}"),
            seconds,
        }
    }

    pub fn marker(experiment: &str, config: &Config, metric: &str, marker: &str, seconds: f64) -> Self {
        Self {
            value: marker.into(),
            ..Self::new(experiment, config, metric, 0.0, seconds)
        }
    }

    pub fn numeric(&self) -> Option<f64> {
        self.value.parse().ok()
    }
}

/// Ordered `key=value` configuration description.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config(Vec<(String, String)>);

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.0.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.0
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse(text: &str) -> Self {
        Self(
            text.split(';')
                .filter_map(|kv| kv.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }
}

/// Appends rows to a CSV file, writing the header only when the file is new
/// or empty.
pub struct ReportWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl ReportWriter {
    pub fn append(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let fresh = std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        if fresh {
            writeln!(file, "{REPORT_HEADER}")?;
        }
        let inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        Ok(Self { path, inner })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, row: &ReportRow) -> std::io::Result<()> {
        self.inner
            .write_record([
                row.experiment.as_str(),
                row.config.as_str(),
                row.metric.as_str(),
                row.value.as_str(),
                &format!("{:.3}", row.seconds),
            ])
            .map_err(std::io::Error::other)?;
        self.inner.flush()
    }
}

/// Reads back a report written by [`ReportWriter`].
pub fn read_report(path: impl AsRef<Path>) -> std::io::Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(std::io::Error::other)?;
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(std::io::Error::other)?;
        rows.push(ReportRow {
            experiment: rec[0].to_string(),
            config: rec[1].to_string(),
            metric: rec[2].to_string(),
            value: rec[3].to_string(),
            seconds: rec[4].parse().unwrap_or(0.0),
        });
    }
    Ok(rows)
}

/// Per-epoch training metrics.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(Self {
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> std::io::Result<()> {
        self.inner
            .write_record([
                m.epoch.to_string(),
                format!("{:.6}", m.loss),
                format!("{:.6}", m.acc),
                format!("{:.3}", m.seconds),
                format!("{:e}", m.lr),
            ])
            .map_err(std::io::Error::other)?;
        self.inner.flush()
    }
}
