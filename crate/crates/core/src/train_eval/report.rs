use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::{IoUReport, MetricsLog};
use crate::data::EpisodeSpec;
use crate::error::{Error, Result};

pub const LOSS_CSV_HEADER: &str = "iteration,seg_loss,par_loss,total_loss,elapsed_seconds";
pub const REPORT_CSV_HEADER: &str = "method,scenario,iou_class1,iou_class2,iou_mean,learning_time";

/// `"6m 38s"` below an hour, `"5h 17m 35s"` above, after rounding to seconds.
pub fn format_duration(seconds: f64) -> String {
    let total = seconds.max(0.0).round() as u64;
    let (h, m, s) = (total / 3600, total / 60 % 60, total % 60);
    if h > 0 {
        format!("{h}h {m}m {s}s")
    } else {
        format!("{m}m {s}s")
    }
}

/// Display name of the method built on an encoder preset.
pub fn method_name(preset: &str) -> String {
    match preset {
        "vgg16_like" => "PANet".into(),
        "vgg19_like" => "DPANet".into(),
        "res18_like" => "ResNet-18 based PANet".into(),
        "res50_like" => "ResNet-50 based PANet".into(),
        other => format!("{other} PANet"),
    }
}

pub fn scenario_name(spec: &EpisodeSpec) -> String {
    format!("{}way-{}shot", spec.way, spec.shot)
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::io(path, source),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

/// Writes the loss curve. Losses carry nine significant digits, enough to
/// recover every `f32` exactly.
pub fn export_loss_csv(log: &MetricsLog, path: &Path) -> Result<()> {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in log.rows() {
        out += &format!(
            "{},{:.8e},{:.8e},{:.8e},{:.6}\n",
            r.iteration, r.seg_loss, r.par_loss, r.total_loss, r.elapsed_seconds
        );
    }
    create(path)?.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub scenario: String,
    pub iou_class1: f64,
    pub iou_class2: Option<f64>,
    pub iou_mean: f64,
    pub learning_time: Option<String>,
}

impl ReportRow {
    pub fn new(method: impl Into<String>, scenario: impl Into<String>, report: &IoUReport) -> Self {
        Self {
            method: method.into(),
            scenario: scenario.into(),
            iou_class1: report.per_class.first().copied().unwrap_or(f64::NAN),
            iou_class2: report.per_class.get(1).copied(),
            iou_mean: report.mean,
            learning_time: report.learning_time_seconds.map(format_duration),
        }
    }

    fn fields(&self) -> [String; 6] {
        [
            self.method.clone(),
            self.scenario.clone(),
            format!("{:.4}", self.iou_class1),
            self.iou_class2.map(|v| format!("{v:.4}")).unwrap_or_default(),
            format!("{:.4}", self.iou_mean),
            self.learning_time.clone().unwrap_or_default(),
        ]
    }
}

/// Writes report rows as CSV, IoUs to four decimals.
pub fn export_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(REPORT_CSV_HEADER.split(','))
        .map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row.fields()).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`export_report`].
pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.join(",") != REPORT_CSV_HEADER {
        return Err(Error::Format(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let bad = |what: &str| Error::Format(format!("{}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for record in r.records() {
        let rec = record.map_err(|e| csv_error(path, e))?;
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|_| bad(REPORT_CSV_HEADER.split(',').nth(i).unwrap_or("")))
        };
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_owned());
        rows.push(ReportRow {
            method: rec[0].to_owned(),
            scenario: rec[1].to_owned(),
            iou_class1: num(2)?,
            iou_class2: if rec[3].is_empty() { None } else { Some(num(3)?) },
            iou_mean: num(4)?,
            learning_time: opt(&rec[5]),
        });
    }
    Ok(rows)
}

/// Markdown table with one line per method and an IoU mean / learning time
/// column pair per scenario, in order of first appearance.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut scenarios: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !scenarios.contains(&r.scenario.as_str()) {
            scenarios.push(&r.scenario);
        }
    }
    let mut out = String::from("| Method |");
    for s in &scenarios {
        out += &format!(" {s} IoU mean | {s} learning time |");
    }
    out += "\n|---|";
    out += &"---|---|".repeat(scenarios.len());
    out.push('\n');
    for m in &methods {
        out += &format!("| {m} |");
        for s in &scenarios {
            match rows.iter().rev().find(|r| r.method == *m && r.scenario == *s) {
                Some(r) => out += &format!(" {:.4} | {} |", r.iou_mean, r.learning_time.as_deref().unwrap_or("-")),
                None => out += " - | - |",
            }
        }
        out.push('\n');
    }
    out
}
