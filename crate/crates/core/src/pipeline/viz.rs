//! SVG rendering of a design grid: one row per metric, one column per
//! timepoint, skipped cells dark.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pmdgen::Pmd;

const CELL: usize = 14;
const LABEL_WIDTH: usize = 160;
const HEADER: usize = 24;
const COLLECTED: &str = "#e5e7eb";
const SKIPPED: &str = "#1f2937";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Standalone SVG for a design. Output depends only on its arguments.
pub fn visualize_pmd(pmd: &Pmd, metric_names: &[String]) -> Result<String> {
    let (n_t, n_m) = pmd.shape();
    if metric_names.len() != n_m {
        return Err(Error::shape("metric names do not match the design width"));
    }
    let width = LABEL_WIDTH + n_t * CELL + 1;
    let height = HEADER + n_m * CELL + 1;
    let mut s = String::new();
    let w = &mut s;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .expect("string write");
    writeln!(w, r#"<rect width="{width}" height="{height}" fill="white"/>"#).expect("string write");
    for t in 0..n_t {
        let x = LABEL_WIDTH + t * CELL + CELL / 2;
        writeln!(
            w,
            r#"<text x="{x}" y="{}" font-family="monospace" font-size="10" text-anchor="middle">{t}</text>"#,
            HEADER - 8
        )
        .expect("string write");
    }
    for (m, name) in metric_names.iter().enumerate() {
        let y = HEADER + m * CELL;
        writeln!(
            w,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="10" text-anchor="end">{}</text>"#,
            LABEL_WIDTH - 6,
            y + CELL - 3,
            escape(name)
        )
        .expect("string write");
        for t in 0..n_t {
            let fill = if pmd.collects(t, m) { COLLECTED } else { SKIPPED };
            writeln!(
                w,
                r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="white"/>"#,
                LABEL_WIDTH + t * CELL
            )
            .expect("string write");
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}
