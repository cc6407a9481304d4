//! Accuracy family with abstention, the majority-class baseline, and
//! prototype-quality curves (source-image diversity and in-class evidence).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::calibrate::DEFAULT_CONFIDENCE_THRESHOLD;
use crate::dataset::{DatasetIndex, Split};
use crate::error::{Error, Result};

pub const DEFAULT_K_MAX: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub true_label: usize,
    pub predicted_label: usize,
    /// Max calibrated probability.
    pub confidence: f64,
    pub logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probabilities: Vec<f64>,
    pub abstained: bool,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.predicted_label == self.true_label
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceItem {
    pub prototype_id: usize,
    pub prototype_class: usize,
    pub source_image_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceTrace {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub true_label: usize,
    pub correct: bool,
    /// Most similar first.
    pub top_prototypes: Vec<TraceItem>,
}

/// Accuracy, accuracy among delivered predictions, and abstention rate, all in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub n: usize,
    pub delivered: usize,
    pub acc: f64,
    /// `None` when every record abstained.
    pub acc_at_threshold: Option<f64>,
    pub abstention_rate: f64,
    pub threshold: f64,
}

/// Abstention is re-derived from each record's confidence (`confidence < threshold`).
pub fn accuracy_report(records: &[PredictionRecord], threshold: f64) -> Result<AccuracyReport> {
    if records.is_empty() {
        return Err(Error::Empty("accuracy report needs at least one record".into()));
    }
    let n = records.len();
    let correct = records.iter().filter(|r| r.correct()).count();
    let delivered: Vec<&PredictionRecord> = records.iter().filter(|r| r.confidence >= threshold).collect();
    let delivered_correct = delivered.iter().filter(|r| r.correct()).count();
    Ok(AccuracyReport {
        n,
        delivered: delivered.len(),
        acc: 100.0 * correct as f64 / n as f64,
        acc_at_threshold: (!delivered.is_empty())
            .then(|| 100.0 * delivered_correct as f64 / delivered.len() as f64),
        abstention_rate: 100.0 * (n - delivered.len()) as f64 / n as f64,
        threshold,
    })
}

/// Accuracy (percent) of always predicting the most frequent TRAIN class on `split`.
/// Ties between majority classes go to the lowest class index.
pub fn most_common_baseline(index: &DatasetIndex, split: Split) -> Result<f64> {
    let counts = index.counts_per_class();
    let majority = (0..counts.len())
        .max_by(|&a, &b| counts[a].train.cmp(&counts[b].train).then(b.cmp(&a)))
        .filter(|&c| counts[c].train > 0)
        .ok_or_else(|| Error::Empty("TRAIN split is empty".into()))?;
    let total = index.split_len(split);
    if total == 0 {
        return Err(Error::Empty(format!("{split} split is empty")));
    }
    Ok(100.0 * counts[majority].get(Some(split)) as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCurve {
    pub class_id: usize,
    pub traces: usize,
    /// Value at k = 1..=k_max.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub curves: Vec<ClassCurve>,
    /// Classes with no usable traces.
    pub omitted: Vec<usize>,
}

impl CurveReport {
    pub fn get(&self, class_id: usize) -> Option<&ClassCurve> {
        self.curves.iter().find(|c| c.class_id == class_id)
    }

    /// Class with the smallest value at `k` (lowest id on ties).
    pub fn least_at(&self, k: usize) -> Option<&ClassCurve> {
        self.curves
            .iter()
            .min_by(|a, b| a.values[k - 1].total_cmp(&b.values[k - 1]).then(a.class_id.cmp(&b.class_id)))
    }
}

fn group_traces<'a>(
    traces: impl Iterator<Item = &'a EvidenceTrace>,
    num_classes: usize,
    k_max: usize,
) -> Result<Vec<Vec<&'a EvidenceTrace>>> {
    if k_max == 0 {
        return Err(Error::Empty("k_max must be at least 1".into()));
    }
    let mut groups = vec![Vec::new(); num_classes];
    for t in traces {
        if t.true_label >= num_classes {
            return Err(Error::LabelOutOfRange { label: t.true_label, classes: num_classes });
        }
        if t.top_prototypes.len() < k_max {
            return Err(Error::Empty(format!(
                "trace for {} has {} prototypes, need {k_max}",
                t.image_id,
                t.top_prototypes.len()
            )));
        }
        groups[t.true_label].push(t);
    }
    Ok(groups)
}

fn curves(
    groups: Vec<Vec<&EvidenceTrace>>,
    k_max: usize,
    value: impl Fn(&EvidenceTrace, usize) -> usize,
) -> CurveReport {
    let mut report = CurveReport::default();
    for (class_id, group) in groups.into_iter().enumerate() {
        if group.is_empty() {
            log::warn!("class {class_id} has no traces; omitted from curve");
            report.omitted.push(class_id);
            continue;
        }
        let values = (1..=k_max)
            .map(|k| group.iter().map(|t| value(t, k)).sum::<usize>() as f64 / group.len() as f64)
            .collect();
        report.curves.push(ClassCurve {
            class_id,
            traces: group.len(),
            values,
        });
    }
    report
}

/// Per class: mean number of distinct source images among the top-k
/// prototypes of correctly classified images.
pub fn diversity_curve(traces: &[EvidenceTrace], num_classes: usize, k_max: usize) -> Result<CurveReport> {
    let groups = group_traces(traces.iter().filter(|t| t.correct), num_classes, k_max)?;
    Ok(curves(groups, k_max, |t, k| {
        t.top_prototypes[..k]
            .iter()
            .map(|p| p.source_image_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }))
}

/// Per class: mean number of top-k prototypes owned by the image's true class.
pub fn inclass_curve(
    traces: &[EvidenceTrace],
    num_classes: usize,
    k_max: usize,
    correct_only: bool,
) -> Result<CurveReport> {
    let groups = group_traces(traces.iter().filter(|t| !correct_only || t.correct), num_classes, k_max)?;
    Ok(curves(groups, k_max, |t, k| {
        t.top_prototypes[..k]
            .iter()
            .filter(|p| p.prototype_class == t.true_label)
            .count()
    }))
}

/// Percent with at most two decimals and no trailing zeros: `81.3%`, `12%`, `19.83%`.
/// Halves round away from zero (`3.125` gives `3.13%`).
pub fn format_percent(value: f64) -> String {
    let rounded = (value * 100.0).round() / 100.0;
    let s = format!("{rounded:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s}%")
}

/// One row of the accuracy table: a model (or the baseline) across TRAIN, VAL, TEST.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub cells: [Option<TableCell>; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TableCell {
    /// Plain accuracy only, as for the baseline.
    AccuracyOnly(f64),
    Full(AccuracyReport),
}

impl TableRow {
    pub fn from_records(name: impl Into<String>, records: &[PredictionRecord], threshold: f64) -> Result<Self> {
        let mut cells = [None, None, None];
        for split in Split::ALL {
            let part: Vec<PredictionRecord> = records.iter().filter(|r| r.split == Some(split)).cloned().collect();
            if !part.is_empty() {
                cells[split.index()] = Some(TableCell::Full(accuracy_report(&part, threshold)?));
            }
        }
        Ok(Self { name: name.into(), cells })
    }

    pub fn baseline(index: &DatasetIndex) -> Self {
        let mut cells = [None, None, None];
        for split in Split::ALL {
            if let Ok(v) = most_common_baseline(index, split) {
                cells[split.index()] = Some(TableCell::AccuracyOnly(v));
            }
        }
        Self {
            name: "Most common (baseline)".into(),
            cells,
        }
    }

    /// The nine cell strings: (Acc, Acc(t), Abst Rate) for TRAIN, VAL, TEST.
    pub fn cell_strings(&self) -> [String; 9] {
        let dash = || "-".to_string();
        let mut out: [String; 9] = Default::default();
        for (s, cell) in self.cells.iter().enumerate() {
            let (a, b, c) = match cell {
                None => (dash(), dash(), dash()),
                Some(TableCell::AccuracyOnly(v)) => (format_percent(*v), dash(), dash()),
                Some(TableCell::Full(r)) => (
                    format_percent(r.acc),
                    r.acc_at_threshold.map(format_percent).unwrap_or_else(|| "n/a".into()),
                    format_percent(r.abstention_rate),
                ),
            };
            out[3 * s] = a;
            out[3 * s + 1] = b;
            out[3 * s + 2] = c;
        }
        out
    }
}

/// Aligned text table with a split banner and nine metric columns.
pub fn render_table(rows: &[TableRow], threshold: f64) -> String {
    let gate = format!("Acc ({})", threshold);
    let header: Vec<String> = std::iter::once(String::new())
        .chain((0..3).flat_map(|_| ["Acc".to_string(), gate.clone(), "Abst Rate".to_string()]))
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| std::iter::once(r.name.clone()).chain(r.cell_strings()).collect())
        .collect();
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            let sep = if i == 0 { "" } else if (i - 1) % 3 == 0 { " | " } else { "  " };
            s.push_str(sep);
            if i == 0 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "{cell:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let group_width = |g: usize| widths[1 + 3 * g] + widths[2 + 3 * g] + widths[3 + 3 * g] + 4;
    let mut banner = " ".repeat(widths[0]);
    for (g, name) in ["Train", "Val", "Test"].iter().enumerate() {
        let _ = write!(banner, " | {name:^w$}", w = group_width(g));
    }
    let mut out = String::new();
    out.push_str(banner.trim_end());
    out.push('\n');
    let head = line(&header);
    out.push_str(&head);
    out.push('\n');
    out.push_str(&"-".repeat(head.len()));
    out.push('\n');
    for row in &body {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

/// Table with the default confidence gate.
pub fn render_default_table(rows: &[TableRow]) -> String {
    render_table(rows, DEFAULT_CONFIDENCE_THRESHOLD)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Line plot of per-class curves (value against k) as SVG.
pub fn plot_curves(
    path: impl AsRef<Path>,
    report: &CurveReport,
    class_names: &[String],
    title: &str,
    y_label: &str,
) -> Result<()> {
    use plotters::prelude::*;
    let path = path.as_ref();
    let k_max = report.curves.first().map(|c| c.values.len()).unwrap_or(1);
    let y_max = report
        .curves
        .iter()
        .flat_map(|c| c.values.iter().cloned())
        .fold(1.0f64, f64::max)
        * 1.1;
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    let plot = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(44)
            .build_cartesian_2d(1f64..k_max.max(2) as f64, 0f64..y_max)?;
        chart
            .configure_mesh()
            .x_desc("k")
            .y_desc(y_label)
            .x_labels(k_max.max(2))
            .draw()?;
        for (i, curve) in report.curves.iter().enumerate() {
            let colour = Palette99::pick(i).to_rgba();
            let name = class_names
                .get(curve.class_id)
                .cloned()
                .unwrap_or_else(|| curve.class_id.to_string());
            chart
                .draw_series(LineSeries::new(
                    curve.values.iter().enumerate().map(|(k, v)| ((k + 1) as f64, *v)),
                    colour.stroke_width(2),
                ))?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], colour));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    plot().map_err(|e| Error::Config(format!("cannot draw {}: {e}", path.display())))
}

/// Per-class curves as a small aligned table.
pub fn render_curves(report: &CurveReport, class_names: &[String]) -> String {
    let mut out = String::new();
    let k_max = report.curves.first().map(|c| c.values.len()).unwrap_or(0);
    let name_w = report
        .curves
        .iter()
        .map(|c| class_names.get(c.class_id).map(String::len).unwrap_or(4))
        .max()
        .unwrap_or(5)
        .max(5);
    let _ = write!(out, "{:<name_w$} {:>6}", "class", "n");
    for k in 1..=k_max {
        let _ = write!(out, " {:>6}", format!("k={k}"));
    }
    out.push('\n');
    for c in &report.curves {
        let name = class_names.get(c.class_id).cloned().unwrap_or_else(|| c.class_id.to_string());
        let _ = write!(out, "{name:<name_w$} {:>6}", c.traces);
        for v in &c.values {
            let _ = write!(out, " {v:>6.3}");
        }
        out.push('\n');
    }
    for id in &report.omitted {
        let name = class_names.get(*id).cloned().unwrap_or_else(|| id.to_string());
        let _ = writeln!(out, "{name:<name_w$} (no traces)");
    }
    out
}

/// Count of records per split; useful for sanity lines in reports.
pub fn split_sizes(records: &[PredictionRecord]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        let key = r.split.map(|s| s.to_string()).unwrap_or_else(|| "unassigned".into());
        *m.entry(key).or_insert(0) += 1;
    }
    m
}
