//! Static scatter plot of a 2-D projection.

use std::fmt::Write as _;

use wsp_core::evaluation::{Pca, ReprTable};

const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;

/// Points coloured by class (hue) and depth (lightness).
pub fn scatter(table: &ReprTable, pca: &Pca) -> String {
    let n = table.rows.len();
    let xs: Vec<f64> = (0..n).map(|i| pca.coords.at2(i, 0)).collect();
    let ys: Vec<f64> = (0..n).map(|i| pca.coords.row(i).get(1).copied().unwrap_or(0.0)).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (x0, xw) = range(&xs);
    let (y0, yw) = range(&ys);
    let inner = SIZE - 2.0 * MARGIN;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">
<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>
<rect x="{MARGIN}" y="{MARGIN}" width="{inner}" height="{inner}" fill="none" stroke="black"/>
<text x="{}" y="{}" font-size="12" text-anchor="middle">PC1 ({:.1}%)</text>
<text x="12" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {})">PC2 ({:.1}%)</text>"#,
        SIZE / 2.0,
        SIZE - 10.0,
        100.0 * pca.explained[0],
        SIZE / 2.0,
        SIZE / 2.0,
        100.0 * pca.explained.get(1).copied().unwrap_or(0.0),
    );
    for (i, r) in table.rows.iter().enumerate() {
        let cx = MARGIN + (xs[i] - x0) / xw * inner;
        let cy = SIZE - MARGIN - (ys[i] - y0) / yw * inner;
        let hue = match r.y_strong {
            Some(1) => 10,
            Some(_) => 215,
            None => 120,
        };
        let light = 25.0 + 50.0 * r.d;
        let _ = writeln!(
            out,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="2.5" fill="hsl({hue},70%,{light:.0}%)"/>"#
        );
    }
    out.push_str("</svg>\n");
    out
}
