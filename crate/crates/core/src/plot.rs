//! Per-word turn-shift probability plots as TSV tables or SVG bar charts.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::TsTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotFormat {
    Tsv,
    Svg,
}

impl std::str::FromStr for PlotFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(PlotFormat::Tsv),
            "svg" => Ok(PlotFormat::Svg),
            _ => Err(Error::Config(format!("unknown plot format {s:?} (tsv|svg)"))),
        }
    }
}

/// One labelled bar series.
#[derive(Debug, Clone, Copy)]
pub struct Series<'a> {
    pub label: &'a str,
    pub trace: &'a TsTrace,
}

const COLORS: [&str; 2] = ["#4c72b0", "#dd8452"];
const SLOT: f64 = 56.0;
const PLOT_H: f64 = 200.0;
const LEFT: f64 = 48.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 70.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// `word<TAB>probability` rows, one column per series after the first.
pub fn render_tsv(series: &[Series<'_>]) -> Result<String> {
    check(series)?;
    let mut out = String::from("word");
    for s in series {
        write!(out, "\t{}", s.label).unwrap();
    }
    out.push('\n');
    for (i, w) in series[0].trace.words.iter().enumerate() {
        out.push_str(w);
        for s in series {
            write!(out, "\t{:.6}", s.trace.probs[i]).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Bar chart: words on the x-axis, one bar per series and word, a dashed
/// threshold line and the ground-truth end word highlighted.
pub fn render_svg(series: &[Series<'_>], threshold: Option<f64>) -> Result<String> {
    check(series)?;
    let words = &series[0].trace.words;
    let end = series[0].trace.end_index;
    let width = LEFT + SLOT * words.len() as f64 + 16.0;
    let height = TOP + PLOT_H + BOTTOM;
    let base = TOP + PLOT_H;
    let bar_w = (SLOT - 12.0) / series.len() as f64;
    let y = |p: f64| base - p * PLOT_H;

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (i, label) in [0.0, 0.5, 1.0].iter().enumerate() {
        let yy = y(*label);
        writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            width - 16.0,
            LEFT - 6.0,
            yy + 4.0,
            ["0", "0.5", "1"][i]
        )
        .unwrap();
    }
    let xe = LEFT + SLOT * end as f64;
    writeln!(
        out,
        r##"<rect x="{xe:.1}" y="{TOP}" width="{SLOT}" height="{PLOT_H}" fill="#f2f2f2" class="end"/>"##
    )
    .unwrap();
    for (k, s) in series.iter().enumerate() {
        writeln!(out, r#"<g class="series" data-label="{}">"#, escape(s.label)).unwrap();
        for (i, p) in s.trace.probs.iter().enumerate() {
            let x = LEFT + SLOT * i as f64 + 6.0 + bar_w * k as f64;
            writeln!(
                out,
                r#"<rect x="{x:.1}" y="{:.1}" width="{bar_w:.1}" height="{:.1}" fill="{}"><title>{} {p:.6}</title></rect>"#,
                y(*p),
                p * PLOT_H,
                COLORS[k % COLORS.len()],
                escape(&s.trace.words[i])
            )
            .unwrap();
        }
        writeln!(out, "</g>").unwrap();
        writeln!(
            out,
            r#"<rect x="{:.1}" y="10" width="10" height="10" fill="{}"/><text x="{:.1}" y="19">{}</text>"#,
            LEFT + 120.0 * k as f64,
            COLORS[k % COLORS.len()],
            LEFT + 120.0 * k as f64 + 14.0,
            escape(s.label)
        )
        .unwrap();
    }
    if let Some(t) = threshold {
        writeln!(
            out,
            r#"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-dasharray="4 3" class="threshold"/>"#,
            y(t),
            width - 16.0,
            y(t)
        )
        .unwrap();
    }
    for (i, w) in words.iter().enumerate() {
        let x = LEFT + SLOT * i as f64 + SLOT / 2.0;
        let weight = if i == end { r#" font-weight="bold""# } else { "" };
        writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="end" transform="rotate(-40 {x:.1} {:.1})"{weight}>{}</text>"#,
            base + 14.0,
            base + 14.0,
            escape(w)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn render(series: &[Series<'_>], format: PlotFormat, threshold: Option<f64>) -> Result<String> {
    match format {
        PlotFormat::Tsv => render_tsv(series),
        PlotFormat::Svg => render_svg(series, threshold),
    }
}

fn check(series: &[Series<'_>]) -> Result<()> {
    let first = series
        .first()
        .ok_or_else(|| Error::Invalid("nothing to plot".into()))?;
    for s in series {
        s.trace.validate()?;
        if s.trace.words != first.trace.words {
            return Err(Error::Invalid(format!(
                "series {} covers different words than {}",
                s.label, first.label
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(probs: &[f64]) -> TsTrace {
        TsTrace {
            dialog_id: "d".into(),
            cu_index: 1,
            words: vec!["hi".into(), "there".into()],
            probs: probs.to_vec(),
            end_index: 1,
        }
    }

    #[test]
    fn tsv_rows() {
        let t = trace(&[0.1, 0.9]);
        let out = render_tsv(&[Series { label: "p", trace: &t }]).unwrap();
        assert_eq!(out, "word\tp\nhi\t0.100000\nthere\t0.900000\n");
    }

    #[test]
    fn svg_is_deterministic_and_overlays() {
        let (a, b) = (trace(&[0.1, 0.9]), trace(&[0.6, 0.7]));
        let one = [Series { label: "base", trace: &a }];
        assert_eq!(render_svg(&one, Some(0.5)).unwrap(), render_svg(&one, Some(0.5)).unwrap());
        let two = [one[0], Series { label: "rc", trace: &b }];
        let svg = render_svg(&two, Some(0.5)).unwrap();
        assert_eq!(svg.matches(r#"class="series""#).count(), 2);
        assert_eq!(svg.matches("<title>").count(), 4);
        assert!(svg.contains(r#"class="threshold""#));
    }

    #[test]
    fn mismatched_series() {
        let a = trace(&[0.1, 0.9]);
        let mut b = trace(&[0.1, 0.9]);
        b.words[0] = "yo".into();
        assert!(render_tsv(&[Series { label: "a", trace: &a }, Series { label: "b", trace: &b }]).is_err());
        assert!(render_tsv(&[]).is_err());
    }
}
