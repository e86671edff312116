//! Writing an [`AnalysisReport`] to disk: JSON, long-format CSV, the text
//! table and SVG figures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{AnalysisReport, Change, IouBars, PairKind, PairResult, PairStatus};
use crate::cam::colormap;
use crate::error::{Error, Result};
use crate::npy::write_atomic;
use crate::similarity::{CkaMatrix, LayerCka};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReportFormat {
    Json,
    Csv,
    TextTable,
    SvgBars,
    SvgMatrix,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 5] = [
        ReportFormat::Json,
        ReportFormat::Csv,
        ReportFormat::TextTable,
        ReportFormat::SvgBars,
        ReportFormat::SvgMatrix,
    ];
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "text_table" => Ok(ReportFormat::TextTable),
            "svg_bars" => Ok(ReportFormat::SvgBars),
            "svg_matrix" => Ok(ReportFormat::SvgMatrix),
            _ => Err(Error::InvalidConfig(format!("unknown report format '{s}'"))),
        }
    }
}

/// Signed, two decimals, and never `-0.00`.
pub(crate) fn signed(v: f64) -> String {
    let s = format!("{v:+.2}");
    if s == "-0.00" {
        "+0.00".into()
    } else {
        s
    }
}

/// One line per S.Var pair, `<reference> vs. <target>  <value>`, grouped.
pub fn render_table(r: &AnalysisReport) -> String {
    let mut groups: Vec<Option<u32>> = Vec::new();
    for p in &r.pairs {
        if p.spec.kind == PairKind::Svar && !groups.contains(&p.spec.group) {
            groups.push(p.spec.group);
        }
    }
    // numbered groups in order, ungrouped rows last
    groups.sort_by_key(|g| (g.is_none(), *g));
    let mut out = format!(
        "Semantic variance (lambda = {})\n",
        r.provenance.spec.lambda
    );
    for g in groups {
        out.push('\n');
        match g {
            Some(n) => writeln!(out, "[group {n}]").unwrap(),
            None => out.push_str("[other]\n"),
        }
        for p in r.pairs.iter().filter(|p| p.spec.kind == PairKind::Svar && p.spec.group == g) {
            let value = match &p.result {
                Some(PairResult::Svar(s)) => signed(s.aggregate),
                _ => format!("failed: {}", p.error.as_deref().unwrap_or("unknown error")),
            };
            writeln!(
                out,
                "{} vs. {}  {}",
                p.spec.reference_label(),
                p.spec.target_label(),
                value
            )
            .unwrap();
        }
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

/// Long format: `pair,kind,row,column,value`.
pub fn render_csv(r: &AnalysisReport) -> String {
    let mut out = String::from("pair,kind,row,column,value\n");
    let mut row = |pair: &str, kind: &str, row: &str, col: &str, v: f64| {
        writeln!(
            out,
            "{},{},{},{},{}",
            csv_field(pair),
            kind,
            csv_field(row),
            csv_field(col),
            v
        )
        .unwrap();
    };
    for p in &r.pairs {
        let name = p.spec.name.as_str();
        match &p.result {
            Some(PairResult::Svar(s)) => {
                for t in &s.terms {
                    let c = t.concept.to_string();
                    row(name, "svar", &c, "iou_target", t.iou_target);
                    row(name, "svar", &c, "iou_reference", t.iou_reference);
                    row(name, "svar", &c, "proportion", t.proportion);
                    row(name, "svar", &c, "value", t.value);
                    row(name, "svar", &c, "term", t.term);
                }
                row(name, "svar", "all", "aggregate", s.aggregate);
            }
            Some(PairResult::CkaPerLayer { layers }) => {
                for l in layers {
                    row(name, "cka_per_layer", &l.layer, "cka", l.cka);
                }
            }
            Some(PairResult::CkaCrossLevel(mat)) => {
                for (i, a) in mat.rows.iter().enumerate() {
                    for (j, b) in mat.cols.iter().enumerate() {
                        row(name, "cka_cross_level", a, b, mat.get(i, j));
                    }
                }
            }
            Some(PairResult::IouBars(b)) => {
                for e in &b.bars {
                    let c = e.concept.to_string();
                    row(name, "iou_bars", &c, "baseline", e.baseline);
                    row(name, "iou_bars", &c, "target", e.target);
                }
            }
            None => {}
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const SVG_STYLE: &str = "<style>\
.baseline{fill:#9e9e9e}\
.delta.increase{fill:#d62728}\
.delta.decrease{fill:#2ca02c}\
.delta.emergent{fill:#d62728;stroke:#000;stroke-width:1}\
.delta.vanished{fill:#2ca02c;stroke:#000;stroke-width:1;stroke-dasharray:2 2}\
.cka{fill:#1f77b4}\
text{font-family:sans-serif;font-size:10px}\
</style>";

/// Stacked bars per concept: the baseline IoU in grey, with the change to the
/// target drawn on top and classed by kind. Emergent and vanished concepts
/// are also marked with an arrow.
pub fn render_svg_bars(bars: &IouBars, title: &str) -> String {
    let (bar_w, gap, plot_h, top, left) = (16.0, 6.0, 200.0, 24.0, 32.0);
    let width = left + bars.bars.len() as f64 * (bar_w + gap) + gap;
    let height = top + plot_h + 40.0;
    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    )
    .unwrap();
    s.push_str(SVG_STYLE);
    s.push('\n');
    writeln!(s, "<text x=\"{left}\" y=\"14\">{}</text>", escape(title)).unwrap();
    let y_of = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    for (i, e) in bars.bars.iter().enumerate() {
        let x = left + gap + i as f64 * (bar_w + gap);
        let low = e.baseline.min(e.target);
        let high = e.baseline.max(e.target);
        writeln!(
            s,
            "<rect class=\"baseline\" data-concept=\"{}\" x=\"{x}\" y=\"{}\" width=\"{bar_w}\" height=\"{}\"/>",
            e.concept,
            y_of(low),
            plot_h * low.clamp(0.0, 1.0)
        )
        .unwrap();
        if let Some(change) = e.change {
            let class = match change {
                Change::Increase => "increase",
                Change::Decrease => "decrease",
                Change::Emergent => "emergent",
                Change::Vanished => "vanished",
            };
            writeln!(
                s,
                "<rect class=\"delta {class}\" data-concept=\"{}\" x=\"{x}\" y=\"{}\" width=\"{bar_w}\" height=\"{}\"/>",
                e.concept,
                y_of(high),
                plot_h * (high.clamp(0.0, 1.0) - low.clamp(0.0, 1.0))
            )
            .unwrap();
            let marker = match change {
                Change::Emergent => Some('\u{2191}'),
                Change::Vanished => Some('\u{2193}'),
                _ => None,
            };
            if let Some(m) = marker {
                writeln!(
                    s,
                    "<text class=\"marker\" x=\"{}\" y=\"{}\">{m}</text>",
                    x + 4.0,
                    y_of(high) - 3.0
                )
                .unwrap();
            }
        }
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\">{}</text>",
            x + 2.0,
            top + plot_h + 14.0,
            e.concept
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn render_svg_layers(layers: &[LayerCka], title: &str) -> String {
    let (bar_w, gap, plot_h, top, left) = (28.0, 10.0, 160.0, 24.0, 32.0);
    let width = left + layers.len() as f64 * (bar_w + gap) + gap;
    let height = top + plot_h + 40.0;
    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    )
    .unwrap();
    s.push_str(SVG_STYLE);
    s.push('\n');
    writeln!(s, "<text x=\"{left}\" y=\"14\">{}</text>", escape(title)).unwrap();
    for (i, l) in layers.iter().enumerate() {
        let x = left + gap + i as f64 * (bar_w + gap);
        let h = plot_h * l.cka.clamp(0.0, 1.0);
        writeln!(
            s,
            "<rect class=\"cka\" x=\"{x}\" y=\"{}\" width=\"{bar_w}\" height=\"{h}\"/>",
            top + plot_h - h
        )
        .unwrap();
        writeln!(s, "<text x=\"{x}\" y=\"{}\">{:.2}</text>", top + plot_h - h - 3.0, l.cka).unwrap();
        writeln!(
            s,
            "<text x=\"{x}\" y=\"{}\">{}</text>",
            top + plot_h + 14.0,
            escape(&l.layer)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Heat-map of a CKA matrix with the value printed in each cell.
pub fn render_svg_matrix(mat: &CkaMatrix, title: &str) -> String {
    let (cell, top, left) = (40.0, 24.0, 64.0);
    let width = left + mat.cols.len() as f64 * cell + 8.0;
    let height = top + mat.rows.len() as f64 * cell + 24.0;
    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    )
    .unwrap();
    s.push_str(SVG_STYLE);
    s.push('\n');
    writeln!(s, "<text x=\"{left}\" y=\"14\">{}</text>", escape(title)).unwrap();
    for (i, r) in mat.rows.iter().enumerate() {
        let y = top + i as f64 * cell;
        writeln!(s, "<text x=\"4\" y=\"{}\">{}</text>", y + cell / 2.0, escape(r)).unwrap();
        for j in 0..mat.cols.len() {
            let v = mat.get(i, j);
            let [red, green, blue] = colormap(v);
            let x = left + j as f64 * cell;
            writeln!(
                s,
                "<rect class=\"cell\" x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"#{red:02x}{green:02x}{blue:02x}\"/>"
            )
            .unwrap();
            let ink = if v > 0.6 { "#000" } else { "#fff" };
            writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" fill=\"{ink}\">{v:.2}</text>",
                x + 8.0,
                y + cell / 2.0 + 3.0
            )
            .unwrap();
        }
    }
    for (j, c) in mat.cols.iter().enumerate() {
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\">{}</text>",
            left + j as f64 * cell + 4.0,
            top + mat.rows.len() as f64 * cell + 14.0,
            escape(c)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Write the selected formats under `out_dir` and return the files written.
///
/// ```text
/// out_dir/report.json
/// out_dir/report.csv
/// out_dir/tables/semantic_variance.txt
/// out_dir/figures/<pair>.svg
/// ```
pub fn emit_report(r: &AnalysisReport, out_dir: impl AsRef<Path>, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, text: String| -> Result<()> {
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
        Ok(())
    };
    if formats.contains(&ReportFormat::Json) {
        let path = out_dir.join("report.json");
        let mut text = serde_json::to_string_pretty(r).map_err(|e| Error::json(&path, e))?;
        text.push('\n');
        put(path, text)?;
    }
    if formats.contains(&ReportFormat::Csv) {
        put(out_dir.join("report.csv"), render_csv(r))?;
    }
    if formats.contains(&ReportFormat::TextTable) {
        put(out_dir.join("tables").join("semantic_variance.txt"), render_table(r))?;
    }
    let figures = out_dir.join("figures");
    for p in r.pairs.iter().filter(|p| p.status == PairStatus::Ok) {
        let stem = file_stem(&p.spec.name);
        match &p.result {
            Some(PairResult::IouBars(b)) if formats.contains(&ReportFormat::SvgBars) => {
                let title = format!("{} -> {}", p.spec.reference_label(), p.spec.target_label());
                put(figures.join(format!("{stem}.svg")), render_svg_bars(b, &title))?;
            }
            Some(PairResult::CkaPerLayer { layers }) if formats.contains(&ReportFormat::SvgBars) => {
                let title = format!("CKA {} / {}", p.spec.target, p.spec.reference_label());
                put(figures.join(format!("{stem}.svg")), render_svg_layers(layers, &title))?;
            }
            Some(PairResult::CkaCrossLevel(mat)) if formats.contains(&ReportFormat::SvgMatrix) => {
                let title = format!("CKA across layers of {}", p.spec.target);
                put(figures.join(format!("{stem}.svg")), render_svg_matrix(mat, &title))?;
            }
            _ => {}
        }
    }
    Ok(written)
}
