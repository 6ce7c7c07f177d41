//! Accuracy metrics and report rendering (aligned text, CSV, JSON lines).

use std::fmt::Write as _;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backend::BackendDescriptor;
use crate::embedding::FusionWeight;
use crate::error::{Error, Result};
use crate::pipeline::{percent, MethodRun, Prediction, PrototypeMode, TextPolicy};
use crate::taxonomy::{AxisId, ClassValue, Taxonomy};

fn check_lengths(preds: &[Prediction], labels: &[ClassValue]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            predictions: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Top-1 accuracy in percent.
pub fn top1_accuracy(preds: &[Prediction], labels: &[ClassValue]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| &p.predicted == *l)
        .count();
    Ok(percent(correct, preds.len()))
}

/// Correct/total counts per true class. Merging tallies is associative, so
/// partitions can be counted independently.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassTally {
    counts: IndexMap<ClassValue, (usize, usize)>,
}

impl ClassTally {
    pub fn from_predictions(preds: &[Prediction], labels: &[ClassValue]) -> Self {
        let mut t = Self::default();
        for (p, l) in preds.iter().zip(labels) {
            let e = t.counts.entry(l.clone()).or_insert((0, 0));
            e.1 += 1;
            if &p.predicted == l {
                e.0 += 1;
            }
        }
        t
    }

    pub fn merge(mut self, other: &ClassTally) -> Self {
        for (k, (c, n)) in &other.counts {
            let e = self.counts.entry(k.clone()).or_insert((0, 0));
            e.0 += c;
            e.1 += n;
        }
        self
    }

    pub fn get(&self, value: &ClassValue) -> Option<(usize, usize)> {
        self.counts.get(value).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassRow {
    pub augment_axis: AxisId,
    /// Recall per true class, in canonical axis order. Classes with no
    /// queries are absent.
    pub per_value_accuracy: IndexMap<String, f64>,
    pub support: IndexMap<String, usize>,
}

impl PerClassRow {
    pub fn total_support(&self) -> usize {
        self.support.values().sum()
    }
}

/// Per-true-class recall on `axis`. Rows are ordered canonically by the
/// axis definition.
pub fn per_class_accuracy(
    preds: &[Prediction],
    labels: &[ClassValue],
    axis: &AxisId,
    taxonomy: &Taxonomy,
) -> Result<PerClassRow> {
    check_lengths(preds, labels)?;
    let tally = ClassTally::from_predictions(preds, labels);
    per_class_from_tally(&tally, axis, axis, taxonomy)
}

pub fn per_class_from_tally(
    tally: &ClassTally,
    axis: &AxisId,
    augment_axis: &AxisId,
    taxonomy: &Taxonomy,
) -> Result<PerClassRow> {
    let def = taxonomy.axis(axis)?;
    if let Some(stray) = tally.counts.keys().find(|k| &k.axis != axis) {
        return Err(Error::UnknownAxisValue {
            axis: axis.to_string(),
            value: stray.to_string(),
        });
    }
    let mut per_value_accuracy = IndexMap::new();
    let mut support = IndexMap::new();
    for cv in def.class_values() {
        if let Some((c, n)) = tally.get(&cv) {
            if n > 0 {
                per_value_accuracy.insert(cv.label.clone(), percent(c, n));
                support.insert(cv.label, n);
            }
        }
    }
    if support.len() != tally.counts.len() {
        return Err(Error::UnknownAxisValue {
            axis: axis.to_string(),
            value: "label outside the axis".into(),
        });
    }
    Ok(PerClassRow {
        augment_axis: augment_axis.clone(),
        per_value_accuracy,
        support,
    })
}

/// Spread between the best and worst served class, in percentage points.
pub fn bias_gap(row: &PerClassRow) -> f64 {
    let mut it = row.per_value_accuracy.values().copied();
    let Some(first) = it.next() else {
        return 0.0;
    };
    let (lo, hi) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi - lo
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationCell {
    pub method: PrototypeMode,
    pub target_axis: AxisId,
    pub augment_axis: AxisId,
    pub top1: f64,
    pub w_text: f64,
    pub w_image: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassEntry {
    pub method: PrototypeMode,
    pub row: PerClassRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub dataset: String,
    pub target_axis: AxisId,
    pub text_policy: TextPolicy,
    pub seed: u64,
    pub backends: Vec<BackendDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    /// Strategy axes in column order.
    pub columns: Vec<AxisId>,
    pub weight_selection: String,
}

pub const WEIGHT_SELECTION_NOTE: &str = "fusion weight tuned on the evaluation set";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metadata: ReportMetadata,
    pub grid: Vec<EvaluationCell>,
    pub per_class: Vec<PerClassEntry>,
}

impl EvaluationReport {
    pub fn new(metadata: ReportMetadata) -> Self {
        Self {
            metadata,
            grid: Vec::new(),
            per_class: Vec::new(),
        }
    }

    /// Adds the grid cell and per-class row for one method run.
    pub fn push_run(&mut self, run: &MethodRun, truths: &[ClassValue], taxonomy: &Taxonomy) -> Result<()> {
        if self
            .grid
            .iter()
            .any(|c| c.method == run.mode && c.augment_axis == run.augment_axis)
        {
            return Err(Error::InvalidConfig(format!(
                "duplicate cell {} / {}",
                run.mode, run.augment_axis
            )));
        }
        let top1 = top1_accuracy(&run.predictions, truths)?;
        let tally = ClassTally::from_predictions(&run.predictions, truths);
        let row = per_class_from_tally(&tally, &run.target_axis, &run.augment_axis, taxonomy)?;
        self.grid.push(EvaluationCell {
            method: run.mode,
            target_axis: run.target_axis.clone(),
            augment_axis: run.augment_axis.clone(),
            top1,
            w_text: run.w.text(),
            w_image: run.w.image(),
            support: truths.len(),
        });
        self.per_class.push(PerClassEntry { method: run.mode, row });
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.grid {
            if !seen.insert((c.method, c.augment_axis.clone())) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate cell {} / {}",
                    c.method, c.augment_axis
                )));
            }
            if !(0.0..=100.0).contains(&c.top1) || ((c.w_text + c.w_image) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "cell {} / {} out of range",
                    c.method, c.augment_axis
                )));
            }
        }
        Ok(())
    }

    pub fn cell(&self, method: PrototypeMode, augment: &AxisId) -> Option<&EvaluationCell> {
        self.grid
            .iter()
            .find(|c| c.method == method && &c.augment_axis == augment)
    }

    fn methods(&self) -> Vec<PrototypeMode> {
        PrototypeMode::ALL
            .into_iter()
            .filter(|m| self.grid.iter().any(|c| c.method == *m))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    JsonLines,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Text, ReportFormat::Csv, ReportFormat::JsonLines];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Text => "txt",
            ReportFormat::Csv => "csv",
            ReportFormat::JsonLines => "jsonl",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "table-text" | "txt" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" | "json-lines" => Ok(ReportFormat::JsonLines),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

pub fn render_report(report: &EvaluationReport, format: ReportFormat) -> Result<Vec<u8>> {
    report.validate()?;
    Ok(match format {
        ReportFormat::Text => render_text(report),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::JsonLines => render_jsonl(report)?,
    }
    .into_bytes())
}

pub fn format_weight(w_text: f64, w_image: f64) -> String {
    format!("{w_text:.2} / {w_image:.2}")
}

/// Column header for an augmenting axis relative to the target.
fn column_name(target: &AxisId, augment: &AxisId) -> String {
    if target == augment {
        "No Augment".to_string()
    } else {
        format!("{} Augment", title_case(augment.as_str()))
    }
}

fn title_case(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn aligned_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}", w = widths[i]);
            } else {
                let _ = write!(s, "  {c:>w$}", w = widths[i]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&line(&rule));
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn metadata_lines(m: &ReportMetadata) -> Vec<String> {
    let mut lines = vec![
        format!("dataset: {}", m.dataset),
        format!("target_axis: {}", m.target_axis),
        format!("text_policy: {}", m.text_policy.as_str()),
        format!("seed: {}", m.seed),
    ];
    for b in &m.backends {
        lines.push(format!(
            "backend: {} kind={} dim={} version={}",
            b.id,
            serde_json::to_value(b.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            b.embedding_dim,
            b.version
        ));
    }
    if let Some(ts) = &m.timestamp {
        lines.push(format!("timestamp: {ts}"));
    }
    lines.push(format!("weight_selection: {}", m.weight_selection));
    lines
}

fn render_text(report: &EvaluationReport) -> String {
    let m = &report.metadata;
    let mut out = String::new();
    for l in metadata_lines(m) {
        out.push_str(&l);
        out.push('\n');
    }
    let methods = report.methods();
    let mut header = vec!["Method".to_string()];
    header.extend(m.columns.iter().map(|a| column_name(&m.target_axis, a)));

    let grid_rows = |f: &dyn Fn(&EvaluationCell) -> String| -> Vec<Vec<String>> {
        methods
            .iter()
            .map(|method| {
                let mut row = vec![method.display_name().to_string()];
                row.extend(m.columns.iter().map(|a| {
                    report
                        .cell(*method, a)
                        .map(f)
                        .unwrap_or_else(|| "-".to_string())
                }));
                row
            })
            .collect()
    };

    let _ = writeln!(out, "\nTop-1 accuracy (%), target: {}", m.target_axis);
    out.push_str(&aligned_table(&header, &grid_rows(&|c| format!("{:.2}", c.top1))));

    let _ = writeln!(out, "\nFusion weights (text / image)");
    out.push_str(&aligned_table(
        &header,
        &grid_rows(&|c| format_weight(c.w_text, c.w_image)),
    ));

    for method in &methods {
        let entries: Vec<&PerClassEntry> = m
            .columns
            .iter()
            .filter_map(|a| {
                report
                    .per_class
                    .iter()
                    .find(|e| e.method == *method && &e.row.augment_axis == a)
            })
            .collect();
        if entries.is_empty() {
            continue;
        }
        let mut labels: Vec<&String> = Vec::new();
        for e in &entries {
            for k in e.row.per_value_accuracy.keys() {
                if !labels.contains(&k) {
                    labels.push(k);
                }
            }
        }
        let mut header = vec!["Strategy".to_string()];
        header.extend(labels.iter().map(|l| l.to_string()));
        header.push("Gap".to_string());
        let rows: Vec<Vec<String>> = entries
            .iter()
            .map(|e| {
                let mut row = vec![column_name(&m.target_axis, &e.row.augment_axis)];
                row.extend(labels.iter().map(|l| {
                    e.row
                        .per_value_accuracy
                        .get(*l)
                        .map(|v| format!("{v:.2}"))
                        .unwrap_or_else(|| "-".to_string())
                }));
                row.push(format!("{:.2}", bias_gap(&e.row)));
                row
            })
            .collect();
        let _ = writeln!(out, "\nPer-class accuracy (%), {}", method.display_name());
        out.push_str(&aligned_table(&header, &rows));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const CSV_HEADER: &str = "record,method,target_axis,augment_axis,class_value,top1,w_text,w_image,support";

fn render_csv(report: &EvaluationReport) -> String {
    let mut out = String::new();
    for l in metadata_lines(&report.metadata) {
        let _ = writeln!(out, "# {l}");
    }
    out.push_str(CSV_HEADER);
    out.push('\n');
    for c in &report.grid {
        let _ = writeln!(
            out,
            "grid,{},{},{},,{:.2},{:.2},{:.2},{}",
            c.method,
            csv_field(c.target_axis.as_str()),
            csv_field(c.augment_axis.as_str()),
            c.top1,
            c.w_text,
            c.w_image,
            c.support
        );
    }
    let target = &report.metadata.target_axis;
    for e in &report.per_class {
        for (label, acc) in &e.row.per_value_accuracy {
            let _ = writeln!(
                out,
                "per_class,{},{},{},{},{:.2},,,{}",
                e.method,
                csv_field(target.as_str()),
                csv_field(e.row.augment_axis.as_str()),
                csv_field(label),
                acc,
                e.row.support[label]
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportRecord {
    Metadata(ReportMetadata),
    Cell(EvaluationCell),
    PerClass(PerClassEntry),
}

fn render_jsonl(report: &EvaluationReport) -> Result<String> {
    let mut out = String::new();
    let records = std::iter::once(ReportRecord::Metadata(report.metadata.clone()))
        .chain(report.grid.iter().cloned().map(ReportRecord::Cell))
        .chain(report.per_class.iter().cloned().map(ReportRecord::PerClass));
    for r in records {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Reads back a JSON-lines report.
pub fn parse_jsonl(text: &str) -> Result<EvaluationReport> {
    let mut metadata = None;
    let mut grid = Vec::new();
    let mut per_class = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReportRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match rec {
            ReportRecord::Metadata(m) => metadata = Some(m),
            ReportRecord::Cell(c) => grid.push(c),
            ReportRecord::PerClass(p) => per_class.push(p),
        }
    }
    let metadata = metadata.ok_or(Error::Parse {
        line: 0,
        message: "missing metadata record".into(),
    })?;
    Ok(EvaluationReport {
        metadata,
        grid,
        per_class,
    })
}

/// Convenience for building a cell directly, mostly for fixtures.
pub fn cell(method: PrototypeMode, target: &str, augment: &str, top1: f64, w: FusionWeight, support: usize) -> EvaluationCell {
    EvaluationCell {
        method,
        target_axis: target.into(),
        augment_axis: augment.into(),
        top1,
        w_text: w.text(),
        w_image: w.image(),
        support,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cv(label: &str) -> ClassValue {
        ClassValue {
            axis: "gender".into(),
            label: label.into(),
        }
    }

    fn pred(label: &str) -> Prediction {
        Prediction {
            query: None,
            scores: IndexMap::new(),
            predicted: cv(label),
        }
    }

    fn row(values: &[(&str, f64)]) -> PerClassRow {
        PerClassRow {
            augment_axis: "race7".into(),
            per_value_accuracy: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            support: values.iter().map(|(k, _)| (k.to_string(), 1)).collect(),
        }
    }

    #[test]
    fn top1_trivial() {
        let labels = vec![cv("Male"), cv("Female")];
        assert_eq!(top1_accuracy(&[pred("Male"), pred("Female")], &labels).unwrap(), 100.0);
        assert_eq!(top1_accuracy(&[pred("Female"), pred("Male")], &labels).unwrap(), 0.0);
        assert!(matches!(top1_accuracy(&[], &[]), Err(Error::EmptyInput)));
        assert!(matches!(
            top1_accuracy(&[pred("Male")], &labels),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn per_class_recall_and_absent_support() {
        let tax = Taxonomy::default();
        let labels = vec![cv("Male"), cv("Male")];
        let r = per_class_accuracy(&[pred("Male"), pred("Female")], &labels, &"gender".into(), &tax).unwrap();
        assert_eq!(r.per_value_accuracy.len(), 1);
        assert_eq!(r.per_value_accuracy["Male"], 50.0);
        assert!(!r.per_value_accuracy.contains_key("Female"));

        let labels = vec![cv("Male"), cv("Female")];
        let r = per_class_accuracy(&[pred("Male"), pred("Male")], &labels, &"gender".into(), &tax).unwrap();
        assert_eq!(r.per_value_accuracy["Male"], 100.0);
        assert_eq!(r.per_value_accuracy["Female"], 0.0);
    }

    #[test]
    fn bias_gap_examples() {
        assert_eq!(bias_gap(&row(&[("A", 100.0), ("B", 0.0)])), 100.0);
        assert_eq!(bias_gap(&row(&[("A", 40.0), ("B", 40.0)])), 0.0);
        let race = row(&[
            ("White", 68.19),
            ("Black", 70.90),
            ("Indian", 15.38),
            ("East Asian", 43.46),
            ("Southeast Asian", 20.59),
            ("Middle Eastern", 57.58),
            ("Latino", 13.80),
        ]);
        assert!((bias_gap(&race) - 57.10).abs() < 1e-9);
    }

    #[test]
    fn weight_format() {
        let w = FusionWeight::from_percent(85);
        assert_eq!(format_weight(w.text(), w.image()), "0.85 / 0.15");
    }

    #[test]
    fn format_parse() {
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert!(matches!("xml".parse::<ReportFormat>(), Err(Error::UnknownFormat(_))));
    }

    fn sample_report() -> EvaluationReport {
        let mut r = EvaluationReport::new(ReportMetadata {
            dataset: "fixture".into(),
            target_axis: "profession".into(),
            text_policy: TextPolicy::AveragedPrompts,
            seed: 7,
            backends: vec![],
            timestamp: None,
            columns: ["profession", "race7", "race4", "gender", "age"].iter().map(|&a| a.into()).collect(),
            weight_selection: WEIGHT_SELECTION_NOTE.into(),
        });
        for (i, a) in ["profession", "race7", "race4", "gender", "age"].iter().enumerate() {
            r.grid.push(cell(PrototypeMode::ClipBaseline, "profession", a, 80.0 + i as f64, FusionWeight::TEXT_ONLY, 10));
            r.grid.push(cell(PrototypeMode::StandardD3g, "profession", a, 81.5, FusionWeight::from_percent(85), 10));
        }
        r
    }

    #[test]
    fn csv_cardinality_and_determinism() {
        let r = sample_report();
        let a = render_report(&r, ReportFormat::Csv).unwrap();
        assert_eq!(a, render_report(&r, ReportFormat::Csv).unwrap());
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("grid,")).count(), 10);
        let t = String::from_utf8(render_report(&r, ReportFormat::Text).unwrap()).unwrap();
        assert!(t.contains("0.85 / 0.15"));
        assert!(!t.contains('\u{2014}'));
    }

    #[test]
    fn jsonl_round_trip() {
        let r = sample_report();
        let bytes = render_report(&r, ReportFormat::JsonLines).unwrap();
        assert_eq!(parse_jsonl(std::str::from_utf8(&bytes).unwrap()).unwrap(), r);
    }

    #[test]
    fn jsonl_floats_round_trip_exactly() {
        let mut r = sample_report();
        r.grid[0].top1 = 100.0 * 113.0 / 120.0;
        r.grid[1].top1 = 100.0 * 115.0 / 120.0;
        let bytes = render_report(&r, ReportFormat::JsonLines).unwrap();
        let back = parse_jsonl(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(back.grid[0].top1.to_bits(), r.grid[0].top1.to_bits());
        assert_eq!(render_report(&back, ReportFormat::JsonLines).unwrap(), bytes);
    }

    #[test]
    fn duplicate_cell_rejected() {
        let mut r = sample_report();
        r.grid.push(r.grid[0].clone());
        assert!(render_report(&r, ReportFormat::Text).is_err());
    }

    proptest! {
        #[test]
        fn top1_is_support_weighted_mean(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..200)) {
            let tax = Taxonomy::default();
            let names = ["Male", "Female"];
            let preds: Vec<Prediction> = pairs.iter().map(|(p, _)| pred(names[*p])).collect();
            let labels: Vec<ClassValue> = pairs.iter().map(|(_, l)| cv(names[*l])).collect();
            let top1 = top1_accuracy(&preds, &labels).unwrap();
            let row = per_class_accuracy(&preds, &labels, &"gender".into(), &tax).unwrap();
            let mean: f64 = row.per_value_accuracy.iter().map(|(k, v)| v * row.support[k] as f64).sum::<f64>()
                / row.total_support() as f64;
            prop_assert!((top1 - mean).abs() < 1e-9);
            prop_assert_eq!(row.total_support(), preds.len());
        }

        #[test]
        fn per_class_permutation_invariant(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..100), rot in 0usize..100) {
            let tax = Taxonomy::default();
            let names = ["Male", "Female"];
            let mut zipped: Vec<(Prediction, ClassValue)> = pairs.iter().map(|(p, l)| (pred(names[*p]), cv(names[*l]))).collect();
            let (p1, l1): (Vec<_>, Vec<_>) = zipped.iter().cloned().unzip();
            let a = per_class_accuracy(&p1, &l1, &"gender".into(), &tax).unwrap();
            let n = zipped.len();
            zipped.rotate_left(rot % n);
            zipped.reverse();
            let (p2, l2): (Vec<_>, Vec<_>) = zipped.into_iter().unzip();
            let b = per_class_accuracy(&p2, &l2, &"gender".into(), &tax).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn tally_merge_matches_whole(pairs in prop::collection::vec((0usize..2, 0usize..2), 0..100), cut in 0usize..100) {
            let names = ["Male", "Female"];
            let preds: Vec<Prediction> = pairs.iter().map(|(p, _)| pred(names[*p])).collect();
            let labels: Vec<ClassValue> = pairs.iter().map(|(_, l)| cv(names[*l])).collect();
            let cut = cut.min(pairs.len());
            let whole = ClassTally::from_predictions(&preds, &labels);
            let merged = ClassTally::from_predictions(&preds[..cut], &labels[..cut])
                .merge(&ClassTally::from_predictions(&preds[cut..], &labels[cut..]));
            for name in names {
                prop_assert_eq!(whole.get(&cv(name)), merged.get(&cv(name)));
            }
        }

        #[test]
        fn bias_gap_nonnegative(vals in prop::collection::vec(0.0f64..100.0, 1..8)) {
            let names: Vec<String> = (0..vals.len()).map(|i| format!("c{i}")).collect();
            let r = row(&names.iter().map(String::as_str).zip(vals.iter().copied()).collect::<Vec<_>>());
            let g = bias_gap(&r);
            prop_assert!(g >= 0.0);
            let all_equal = vals.iter().all(|v| *v == vals[0]);
            prop_assert_eq!(g == 0.0, all_equal);
        }
    }
}
