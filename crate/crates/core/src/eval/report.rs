use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ReportRow;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::write_atomic;
use crate::priors::PriorKind;

pub const REPORT_COLUMNS: [&str; 6] = [
    "class",
    "method",
    "shots",
    "mean_iou",
    "relative_gain",
    "n_queries",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            _ => Err(Error::Configuration(format!("unknown report format {s:?}"))),
        }
    }
}

fn cells(r: &ReportRow) -> [String; 6] {
    [
        r.class.clone(),
        r.method.clone(),
        r.shots.to_string(),
        r.mean_iou.to_string(),
        r.relative_gain.map_or_else(String::new, |g| g.to_string()),
        r.n_queries.to_string(),
    ]
}

fn check_cell(s: &str) -> Result<()> {
    if s.contains([',', '|', '\n', '\r']) {
        return Err(Error::Parameter(format!(
            "report cell {s:?} contains a separator"
        )));
    }
    Ok(())
}

/// Rows as CSV or a markdown table, columns in [`REPORT_COLUMNS`] order.
/// Reals are written in shortest round-trip form, an absent gain as an empty
/// cell.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat) -> Result<Vec<u8>> {
    if rows.is_empty() {
        return Err(Error::Parameter("a report needs at least one row".into()));
    }
    let mut s = String::new();
    match format {
        ReportFormat::Csv => {
            s.push_str(&REPORT_COLUMNS.join(","));
            s.push('\n');
            for r in rows {
                let c = cells(r);
                c.iter().try_for_each(|x| check_cell(x))?;
                s.push_str(&c.join(","));
                s.push('\n');
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(s, "| {} |", REPORT_COLUMNS.join(" | "));
            let _ = writeln!(s, "|{}", "---|".repeat(REPORT_COLUMNS.len()));
            for r in rows {
                let c = cells(r);
                c.iter().try_for_each(|x| check_cell(x))?;
                let _ = writeln!(s, "| {} |", c.join(" | "));
            }
        }
    }
    Ok(s.into_bytes())
}

fn parse_row(cells: &[&str], line: usize) -> Result<ReportRow> {
    let bad = |what: &str| Error::Format {
        offset: line,
        message: format!("line {line}: {what}"),
    };
    if cells.len() != REPORT_COLUMNS.len() {
        return Err(bad(&format!(
            "{} cells, expected {}",
            cells.len(),
            REPORT_COLUMNS.len()
        )));
    }
    let real = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| bad(&format!("{s:?} is not a number")))
    };
    let count = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad(&format!("{s:?} is not a count")))
    };
    Ok(ReportRow {
        class: cells[0].to_string(),
        method: cells[1].to_string(),
        shots: count(cells[2])?,
        mean_iou: real(cells[3])?,
        relative_gain: if cells[4].is_empty() {
            None
        } else {
            Some(real(cells[4])?)
        },
        n_queries: count(cells[5])?,
    })
}

pub fn parse_csv_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_COLUMNS.join(",") => {}
        _ => {
            return Err(Error::Format {
                offset: 0,
                message: "missing report header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_row(&l.split(',').collect::<Vec<_>>(), i + 1))
        .collect()
}

pub fn parse_markdown_report(text: &str) -> Result<Vec<ReportRow>> {
    let split = |l: &str| -> Vec<String> {
        l.trim()
            .trim_start_matches('|')
            .trim_end_matches('|')
            .split('|')
            .map(|c| c.trim().to_string())
            .collect()
    };
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| split(l));
    if header.as_deref() != Some(&REPORT_COLUMNS.map(String::from)[..]) {
        return Err(Error::Format {
            offset: 0,
            message: "missing report header".into(),
        });
    }
    lines.next();
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let c = split(l);
            parse_row(&c.iter().map(String::as_str).collect::<Vec<_>>(), i + 1)
        })
        .collect()
}

/// Hex SHA-256 of the JSON form of a model configuration.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("configurations serialize");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// What produced a report, written next to it as `<report>.run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub variant: PriorKind,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub threshold: f64,
    #[serde(default)]
    pub notes: serde_json::Value,
}

impl ReportProvenance {
    pub fn new(config: &ModelConfig, threshold: f64) -> Self {
        Self {
            variant: config.variant,
            seed: config.seed,
            config_hash: config_hash(config),
            checkpoint: None,
            manifest: None,
            threshold,
            notes: serde_json::Value::Null,
        }
    }

    pub fn path_for(report: &Path) -> PathBuf {
        let mut s = report.as_os_str().to_owned();
        s.push(".run.json");
        PathBuf::from(s)
    }

    pub fn save(&self, report: &Path) -> Result<()> {
        write_atomic(&Self::path_for(report), &serde_json::to_vec_pretty(self)?)
    }
}
