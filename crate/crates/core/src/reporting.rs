//! Comparison tables over finished runs and the keyword frequency figure.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyword_filter::{curve_to_csv, CurvePoint};

/// The column order of [`ReportTable::to_tsv`].
pub const TSV_COLUMNS: [&str; 10] = [
    "model",
    "pretraining_data",
    "pretraining_method",
    "valid_acc",
    "valid_f1",
    "test_acc",
    "test_f1",
    "pretraining_minutes",
    "time_ratio",
    "data_size_ratio",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainingData {
    None,
    Whole,
    Summary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainingMethod {
    None,
    Random,
    Keyword,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::InvalidArgument(format!(concat!("unknown ", stringify!($ty), " {:?}"), other))),
                }
            }
        }
    };
}

str_enum!(PretrainingData { None => "none", Whole => "whole", Summary => "summary" });
str_enum!(PretrainingMethod { None => "none", Random => "random", Keyword => "keyword" });

/// Outcome of one experiment-matrix row. Metric fields are fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub row_id: String,
    pub model_id: String,
    pub pretraining_data: PretrainingData,
    pub pretraining_method: PretrainingMethod,
    pub valid_acc: f64,
    pub valid_f1: f64,
    pub test_acc: f64,
    pub test_f1: f64,
    pub pretraining_minutes: f64,
    pub time_ratio: Option<f64>,
    pub data_size_ratio: Option<f64>,
    /// Bytes of the pretraining corpus, the raw input of `data_size_ratio`.
    #[serde(default)]
    pub corpus_bytes: Option<u64>,
}

impl RunReport {
    pub fn validate(&self) -> Result<()> {
        let row = &self.row_id;
        let pretrained = self.pretraining_method != PretrainingMethod::None;
        if pretrained != (self.pretraining_data != PretrainingData::None) {
            return Err(Error::Integrity(format!("row {row}: pretraining data and method disagree")));
        }
        if !pretrained
            && (self.pretraining_minutes != 0.0 || self.time_ratio.is_some() || self.data_size_ratio.is_some())
        {
            return Err(Error::Integrity(format!("row {row}: no pretraining but minutes or ratios are set")));
        }
        if !(self.pretraining_minutes.is_finite() && self.pretraining_minutes >= 0.0) {
            return Err(Error::Integrity(format!("row {row}: bad pretraining minutes {}", self.pretraining_minutes)));
        }
        let fractions = [self.valid_acc, self.valid_f1, self.test_acc, self.test_f1];
        if fractions.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Integrity(format!("row {row}: metric outside [0, 1]")));
        }
        // Data size can exceed the whole corpus only by construction error;
        // time ratios are normalized by the maximum.
        for ratio in [self.time_ratio, self.data_size_ratio].into_iter().flatten() {
            if !(ratio.is_finite() && (0.0..=1.0 + 1e-12).contains(&ratio)) {
                return Err(Error::Integrity(format!("row {row}: ratio {ratio} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn order_key(&self) -> (PretrainingMethod, PretrainingData) {
        (self.pretraining_method, self.pretraining_data)
    }
}

/// Fills `time_ratio` (minutes over the slowest pretrained row) and
/// `data_size_ratio` (corpus bytes over `whole_bytes`) for every pretrained
/// row. Returns the row id used as the time baseline.
pub fn fill_ratios(reports: &mut [RunReport], whole_bytes: u64) -> Result<Option<String>> {
    let baseline = reports
        .iter()
        .filter(|r| r.pretraining_method != PretrainingMethod::None)
        .max_by(|a, b| a.pretraining_minutes.total_cmp(&b.pretraining_minutes))
        .map(|r| (r.row_id.clone(), r.pretraining_minutes));
    for r in reports.iter_mut() {
        if r.pretraining_method == PretrainingMethod::None {
            r.time_ratio = None;
            r.data_size_ratio = None;
            continue;
        }
        let (_, max) = baseline.as_ref().expect("a pretrained row exists");
        r.time_ratio = Some(if *max > 0.0 { r.pretraining_minutes / max } else { 1.0 });
        let bytes = r.corpus_bytes.ok_or_else(|| Error::Integrity(format!("row {} lacks corpus_bytes", r.row_id)))?;
        if whole_bytes == 0 {
            return Err(Error::Integrity("whole corpus has zero bytes".into()));
        }
        r.data_size_ratio = Some(bytes as f64 / whole_bytes as f64);
    }
    Ok(baseline.map(|(id, _)| id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    Best,
    Second,
}

/// Indices of the best and second-best values; ties go to the earlier row.
pub fn rank_column(values: &[f64]) -> (Option<usize>, Option<usize>) {
    let argmax = |skip: Option<usize>| {
        let mut best: Option<usize> = None;
        for (i, v) in values.iter().enumerate() {
            if Some(i) == skip {
                continue;
            }
            if best.is_none_or(|b| *v > values[b]) {
                best = Some(i);
            }
        }
        best
    };
    let first = argmax(None);
    (first, first.and_then(|f| argmax(Some(f))))
}

fn ranks(values: &[f64]) -> Vec<Option<Rank>> {
    let (best, second) = rank_column(values);
    (0..values.len())
        .map(|i| {
            if Some(i) == best {
                Some(Rank::Best)
            } else if Some(i) == second {
                Some(Rank::Second)
            } else {
                None
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<RunReport>,
    pub test_acc_rank: Vec<Option<Rank>>,
    pub test_f1_rank: Vec<Option<Rank>>,
}

/// Orders rows none, random-whole, random-summary, keyword-whole,
/// keyword-summary and flags the best and second-best test metrics.
pub fn build_table(reports: Vec<RunReport>) -> Result<ReportTable> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("cannot build a table from zero reports".into()));
    }
    let mut seen = BTreeSet::new();
    for r in &reports {
        if !seen.insert(r.row_id.as_str()) {
            return Err(Error::Integrity(format!("duplicate row id {:?}", r.row_id)));
        }
        r.validate()?;
    }
    let mut rows = reports;
    rows.sort_by(|a, b| a.order_key().cmp(&b.order_key()).then_with(|| a.row_id.cmp(&b.row_id)));
    let acc: Vec<f64> = rows.iter().map(|r| r.test_acc).collect();
    let f1: Vec<f64> = rows.iter().map(|r| r.test_f1).collect();
    Ok(ReportTable { test_acc_rank: ranks(&acc), test_f1_rank: ranks(&f1), rows })
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_default()
}

fn parse_pct(raw: &str, location: &str) -> Result<f64> {
    raw.parse::<f64>().map(|v| v / 100.0).map_err(|_| Error::parse(location, format!("bad percentage {raw:?}")))
}

fn minutes_md(m: f64) -> String {
    if m > 0.0 && m < 0.005 {
        "<0.01".to_string()
    } else {
        format!("{m:.2}")
    }
}

fn decorate(text: String, rank: Option<Rank>) -> String {
    match rank {
        Some(Rank::Best) => format!("**{text}**"),
        Some(Rank::Second) => format!("*{text}*"),
        None => text,
    }
}

impl ReportTable {
    /// Tab-separated table with percentage points for fractions, minutes
    /// to six decimals and empty cells for absent ratios.
    pub fn to_tsv(&self) -> String {
        let mut out = TSV_COLUMNS.join("\t");
        out.push('\n');
        for r in &self.rows {
            let cells = [
                r.model_id.clone(),
                r.pretraining_data.to_string(),
                r.pretraining_method.to_string(),
                pct(r.valid_acc),
                pct(r.valid_f1),
                pct(r.test_acc),
                pct(r.test_f1),
                format!("{:.6}", r.pretraining_minutes),
                opt_pct(r.time_ratio),
                opt_pct(r.data_size_ratio),
            ];
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }

    /// Parses [`Self::to_tsv`] output back into a table. Row ids are
    /// rebuilt as `<method>_<data>` (or `none`).
    pub fn from_tsv(raw: &str) -> Result<Self> {
        let mut lines = raw.lines();
        let header = lines.next().ok_or_else(|| Error::parse("line 1", "empty table"))?;
        if header.split('\t').collect::<Vec<_>>() != TSV_COLUMNS {
            return Err(Error::parse("line 1", "unexpected header"));
        }
        let mut reports = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let location = format!("line {}", i + 2);
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != TSV_COLUMNS.len() {
                return Err(Error::parse(
                    &location,
                    format!("expected {} cells, got {}", TSV_COLUMNS.len(), cells.len()),
                ));
            }
            let data: PretrainingData = cells[1].parse()?;
            let method: PretrainingMethod = cells[2].parse()?;
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { parse_pct(s, &location).map(Some) };
            reports.push(RunReport {
                row_id: row_id(method, data),
                model_id: cells[0].to_string(),
                pretraining_data: data,
                pretraining_method: method,
                valid_acc: parse_pct(cells[3], &location)?,
                valid_f1: parse_pct(cells[4], &location)?,
                test_acc: parse_pct(cells[5], &location)?,
                test_f1: parse_pct(cells[6], &location)?,
                pretraining_minutes: cells[7]
                    .parse()
                    .map_err(|_| Error::parse(&location, format!("bad minutes {:?}", cells[7])))?,
                time_ratio: opt(cells[8])?,
                data_size_ratio: opt(cells[9])?,
                corpus_bytes: None,
            });
        }
        build_table(reports)
    }

    /// Markdown rendition: best test scores in bold, second-best in italics.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| Model - Pretraining Data - Pretraining Method | Valid. Acc. | Valid. F1 Score | Test Acc. | Test F1 Score | Pretraining Time (min) | Pretraining Time Ratio | Data Size Ratio |\n",
        );
        out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
        for (i, r) in self.rows.iter().enumerate() {
            let name = match r.pretraining_method {
                PretrainingMethod::None => format!("{} - No Pretraining", r.model_id),
                m => {
                    let data = if r.pretraining_data == PretrainingData::Whole { "Whole Data" } else { "Summary" };
                    let method = if m == PretrainingMethod::Random { "Random Masking" } else { "Keyword Masking" };
                    format!("{} - {data} - {method}", r.model_id)
                }
            };
            let ratio = |v: Option<f64>| v.map(|v| format!("{}%", pct(v))).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "| {name} | {}% | {}% | {} | {} | {} | {} | {} |\n",
                pct(r.valid_acc),
                pct(r.valid_f1),
                decorate(format!("{}%", pct(r.test_acc)), self.test_acc_rank[i]),
                decorate(format!("{}%", pct(r.test_f1)), self.test_f1_rank[i]),
                minutes_md(r.pretraining_minutes),
                ratio(r.time_ratio),
                ratio(r.data_size_ratio),
            ));
        }
        out
    }

    /// Checks that the time ratios follow from the minutes column and the
    /// flags from the metric columns. The resolutions are the rendering
    /// precision of minutes and ratios (0 for in-memory tables). Data size
    /// ratios are checked when `whole_bytes` and per-row bytes are known.
    pub fn check_consistency(
        &self,
        minutes_resolution: f64,
        ratio_resolution: f64,
        whole_bytes: Option<u64>,
    ) -> Result<()> {
        let max = self
            .rows
            .iter()
            .filter(|r| r.pretraining_method != PretrainingMethod::None)
            .map(|r| r.pretraining_minutes)
            .fold(f64::NEG_INFINITY, f64::max);
        for r in &self.rows {
            r.validate()?;
            let Some(ratio) = r.time_ratio else {
                if r.pretraining_method != PretrainingMethod::None {
                    return Err(Error::Integrity(format!("row {} lacks a time ratio", r.row_id)));
                }
                continue;
            };
            let expected = if max > 0.0 { r.pretraining_minutes / max } else { 1.0 };
            // Worst-case error of m/max when both are rounded to the
            // minutes resolution, plus rounding of the rendered ratio.
            let slack =
                if max > 0.0 { (minutes_resolution / 2.0) / max * (1.0 + r.pretraining_minutes / max) } else { 0.0 };
            let tol = slack + ratio_resolution / 2.0 + 1e-12;
            if (ratio - expected).abs() > tol {
                return Err(Error::Integrity(format!(
                    "row {}: time ratio {ratio} but minutes imply {expected}",
                    r.row_id
                )));
            }
            if let (Some(whole), Some(bytes), Some(ds)) = (whole_bytes, r.corpus_bytes, r.data_size_ratio) {
                let expected = bytes as f64 / whole as f64;
                if (ds - expected).abs() > ratio_resolution / 2.0 + 1e-12 {
                    return Err(Error::Integrity(format!(
                        "row {}: data size ratio {ds} but bytes imply {expected}",
                        r.row_id
                    )));
                }
            }
        }
        let acc: Vec<f64> = self.rows.iter().map(|r| r.test_acc).collect();
        let f1: Vec<f64> = self.rows.iter().map(|r| r.test_f1).collect();
        if ranks(&acc) != self.test_acc_rank || ranks(&f1) != self.test_f1_rank {
            return Err(Error::Integrity("best/second-best flags disagree with the metric columns".into()));
        }
        Ok(())
    }

    pub fn save(&self, tsv_path: impl AsRef<Path>, markdown_path: impl AsRef<Path>) -> Result<()> {
        let (tsv, md) = (tsv_path.as_ref(), markdown_path.as_ref());
        fs::write(tsv, self.to_tsv()).map_err(|e| Error::io(tsv, e))?;
        fs::write(md, self.to_markdown()).map_err(|e| Error::io(md, e))
    }
}

/// Canonical row id for a (method, data) pair, e.g. `keyword_summary`.
pub fn row_id(method: PretrainingMethod, data: PretrainingData) -> String {
    match method {
        PretrainingMethod::None => "none".to_string(),
        m => format!("{m}_{data}"),
    }
}

/// Renders the frequency curve as an SVG bar chart with a dashed vertical
/// cut-off line at `cutoff`. Returns the image and an optional warning.
pub fn render_frequency_svg(curve: &[CurvePoint], cutoff: usize) -> Result<(String, Option<String>)> {
    if curve.is_empty() {
        return Err(Error::InvalidArgument("frequency curve is empty".into()));
    }
    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 30.0;
    const BOTTOM: f64 = 60.0;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let max_words = curve.iter().map(|p| p.num_words).max().unwrap_or(1).max(1) as f64;
    let slot = plot_w / curve.len() as f64;
    let bar = slot * 0.8;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    svg.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    svg.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{}\" stroke=\"black\"/>\n",
        TOP + plot_h
    ));
    for tick in 0..=4 {
        let value = max_words * tick as f64 / 4.0;
        let y = TOP + plot_h - plot_h * tick as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.0}</text>\n",
            LEFT - 6.0,
            y + 4.0,
            value
        ));
    }
    let label_every = curve.len().div_ceil(30).max(1);
    for (i, p) in curve.iter().enumerate() {
        let h = plot_h * p.num_words as f64 / max_words;
        let x = LEFT + slot * i as f64 + (slot - bar) / 2.0;
        svg.push_str(&format!(
            "<rect class=\"bar\" data-frequency=\"{}\" data-words=\"{}\" x=\"{x:.2}\" y=\"{:.2}\" width=\"{bar:.2}\" height=\"{h:.2}\" fill=\"#4c72b0\"/>\n",
            p.frequency,
            p.num_words,
            TOP + plot_h - h
        ));
        if i % label_every == 0 {
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                x + bar / 2.0,
                TOP + plot_h + 16.0,
                p.frequency
            ));
        }
    }

    let min_level = curve[0].frequency;
    let mut warning = None;
    let index = match curve.iter().position(|p| p.frequency >= cutoff) {
        Some(0) if cutoff < min_level => {
            warning = Some(format!(
                "cut-off {cutoff} is below the lowest plotted frequency {min_level}; drawing it at the boundary"
            ));
            0
        }
        Some(i) => i,
        None => curve.len(),
    };
    let line_x = LEFT + slot * index as f64;
    svg.push_str(&format!(
        "<line id=\"cutoff\" data-cutoff=\"{cutoff}\" x1=\"{line_x:.2}\" y1=\"{TOP}\" x2=\"{line_x:.2}\" y2=\"{}\" stroke=\"#c44e52\" stroke-width=\"2\" stroke-dasharray=\"6,4\"/>\n",
        TOP + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.1}\" fill=\"#c44e52\">cut-off = {cutoff}</text>\n",
        line_x + 4.0,
        TOP + 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">Keyword frequency</text>\n",
        LEFT + plot_w / 2.0,
        H - 15.0
    ));
    svg.push_str(&format!(
        "<text x=\"15\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 15 {:.1})\">Number of keywords</text>\n",
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    ));
    svg.push_str("</svg>\n");
    Ok((svg, warning))
}

/// Writes the SVG figure and its CSV data from the same `curve`.
pub fn emit_frequency_figure(
    curve: &[CurvePoint],
    cutoff: usize,
    svg_path: impl AsRef<Path>,
    csv_path: impl AsRef<Path>,
) -> Result<Option<String>> {
    let (svg, warning) = render_frequency_svg(curve, cutoff)?;
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let (svg_path, csv_path) = (svg_path.as_ref(), csv_path.as_ref());
    fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))?;
    fs::write(csv_path, curve_to_csv(curve)).map_err(|e| Error::io(csv_path, e))?;
    Ok(warning)
}

/// Published reference tables, kept for format and flag-logic tests only.
pub mod fixtures {
    use super::*;

    const RAW: &str = include_str!("../data/reference_tables.tsv");

    #[derive(Debug, Clone, PartialEq)]
    pub struct ReferenceRow {
        pub table: u32,
        pub dataset: String,
        pub report: RunReport,
        pub test_acc_rank: Option<Rank>,
        pub test_f1_rank: Option<Rank>,
    }

    #[derive(Deserialize)]
    struct Raw {
        table: u32,
        dataset: String,
        model: String,
        pretraining_data: String,
        pretraining_method: String,
        valid_acc: f64,
        valid_f1: f64,
        test_acc: f64,
        test_f1: f64,
        pretraining_minutes: f64,
        time_ratio: Option<f64>,
        data_size_ratio: Option<f64>,
        test_acc_flag: String,
        test_f1_flag: String,
    }

    fn rank(flag: &str) -> Option<Rank> {
        match flag {
            "best" => Some(Rank::Best),
            "second" => Some(Rank::Second),
            _ => None,
        }
    }

    pub fn reference_rows() -> Vec<ReferenceRow> {
        let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(RAW.as_bytes());
        reader
            .deserialize::<Raw>()
            .map(|row| {
                let r = row.expect("fixture rows parse");
                let data: PretrainingData = r.pretraining_data.parse().expect("fixture data kind");
                let method: PretrainingMethod = r.pretraining_method.parse().expect("fixture method");
                ReferenceRow {
                    table: r.table,
                    dataset: r.dataset,
                    report: RunReport {
                        row_id: row_id(method, data),
                        model_id: r.model,
                        pretraining_data: data,
                        pretraining_method: method,
                        valid_acc: r.valid_acc / 100.0,
                        valid_f1: r.valid_f1 / 100.0,
                        test_acc: r.test_acc / 100.0,
                        test_f1: r.test_f1 / 100.0,
                        pretraining_minutes: r.pretraining_minutes,
                        time_ratio: r.time_ratio.map(|v| v / 100.0),
                        data_size_ratio: r.data_size_ratio.map(|v| v / 100.0),
                        corpus_bytes: None,
                    },
                    test_acc_rank: rank(&r.test_acc_flag),
                    test_f1_rank: rank(&r.test_f1_flag),
                }
            })
            .collect()
    }

    /// Rows of one reference table, in the file's order.
    pub fn reference_table(table: u32) -> Vec<ReferenceRow> {
        reference_rows().into_iter().filter(|r| r.table == table).collect()
    }
}
