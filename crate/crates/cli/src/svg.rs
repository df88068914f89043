//! Handwritten SVG output: polyline charts and a cell-grid overlay.
//! Pure text, no raster payload, and every byte is a deterministic
//! function of the inputs.

use lab_core::grid::{CellSet, GridSpec};

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

const W: f64 = 800.0;
const H: f64 = 520.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 776.0;
const TOP: f64 = 56.0;
const BOTTOM: f64 = 464.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick label: fixed-precision then trimmed, so the same value always
/// renders the same bytes.
fn fmt(v: f64) -> String {
    if !v.is_finite() {
        return "nan".into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn text(doc: &mut String, x: f64, y: f64, size: u32, anchor: &str, extra: &str, body: &str) {
    doc.push_str(&format!(
        "<text x=\"{x:.2}\" y=\"{y:.2}\" font-family=\"sans-serif\" font-size=\"{size}\" \
         text-anchor=\"{anchor}\"{extra}>{}</text>\n",
        esc(body)
    ));
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 0.5 } else { 0.1 * lo.abs() };
        (lo - pad, hi + pad)
    }
}

/// Line chart with one polyline and point markers per series, five ticks
/// per axis, and a legend. Non-finite points are dropped, not drawn.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let mut doc = String::new();
    doc.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n"
    ));
    doc.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    text(&mut doc, W / 2.0, 28.0, 18, "middle", "", title);
    if finite.is_empty() {
        text(&mut doc, W / 2.0, H / 2.0, 16, "middle", " fill=\"#777\"", "no data");
        doc.push_str("</svg>\n");
        return doc;
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &finite {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    let (x0, x1) = padded(x0, x1);
    let (y0, y1) = padded(y0, y1);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * (RIGHT - LEFT);
    let sy = |y: f64| BOTTOM - (y - y0) / (y1 - y0) * (BOTTOM - TOP);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (tx, ty) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        doc.push_str(&format!(
            "<line x1=\"{0:.2}\" y1=\"{TOP:.2}\" x2=\"{0:.2}\" y2=\"{BOTTOM:.2}\" \
             stroke=\"#e0e0e0\"/>\n",
            sx(tx)
        ));
        doc.push_str(&format!(
            "<line x1=\"{LEFT:.2}\" y1=\"{0:.2}\" x2=\"{RIGHT:.2}\" y2=\"{0:.2}\" \
             stroke=\"#e0e0e0\"/>\n",
            sy(ty)
        ));
        text(&mut doc, sx(tx), BOTTOM + 18.0, 12, "middle", "", &fmt(tx));
        text(&mut doc, LEFT - 8.0, sy(ty) + 4.0, 12, "end", "", &fmt(ty));
    }
    doc.push_str(&format!(
        "<line x1=\"{LEFT:.2}\" y1=\"{BOTTOM:.2}\" x2=\"{RIGHT:.2}\" y2=\"{BOTTOM:.2}\" \
         stroke=\"#333\"/>\n<line x1=\"{LEFT:.2}\" y1=\"{TOP:.2}\" x2=\"{LEFT:.2}\" \
         y2=\"{BOTTOM:.2}\" stroke=\"#333\"/>\n"
    ));
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        if pts.len() > 1 {
            let path: Vec<String> = pts
                .iter()
                .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
                .collect();
            doc.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" \
                 stroke-width=\"1.8\"/>\n",
                path.join(" ")
            ));
        }
        for (x, y) in &pts {
            doc.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(*x),
                sy(*y)
            ));
        }
    }
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let y = TOP + 14.0 + 18.0 * k as f64;
        doc.push_str(&format!(
            "<line x1=\"{0:.2}\" y1=\"{y:.2}\" x2=\"{1:.2}\" y2=\"{y:.2}\" \
             stroke=\"{color}\" stroke-width=\"3\"/>\n",
            RIGHT - 180.0,
            RIGHT - 152.0
        ));
        text(&mut doc, RIGHT - 146.0, y + 4.0, 12, "start", "", &s.label);
    }
    text(&mut doc, (LEFT + RIGHT) / 2.0, H - 12.0, 14, "middle", "", x_label);
    let ylx = 20.0;
    let yly = (TOP + BOTTOM) / 2.0;
    text(
        &mut doc,
        0.0,
        0.0,
        14,
        "middle",
        &format!(" transform=\"translate({ylx:.2},{yly:.2}) rotate(-90)\""),
        y_label,
    );
    doc.push_str("</svg>\n");
    doc
}

/// Maximal horizontal runs of `set` in grid row `j` (2D grids).
fn row_runs(grid: &GridSpec, set: &CellSet, j: usize) -> Vec<(usize, usize)> {
    let res0 = grid.res[0];
    let base = j * res0;
    let mut runs = Vec::new();
    let mut start = None;
    for i in 0..res0 {
        if set.contains(base + i) {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            runs.push((s, i - s));
        }
    }
    if let Some(s) = start {
        runs.push((s, res0 - s));
    }
    runs
}

/// Overlay of two cell sets over a 2D grid box: the first drawn light,
/// the second on top in red. Cells merge into per-row run rectangles.
pub fn cell_overlay(title: &str, grid: &GridSpec, under: &CellSet, over: &CellSet) -> String {
    assert_eq!(grid.dim(), 2, "overlay drawing is two-dimensional");
    let (lo, hi) = (&grid.bbox.lo, &grid.bbox.hi);
    let (dw, dh) = (hi[0] - lo[0], hi[1] - lo[1]);
    let avail_w = 680.0;
    let avail_h = 408.0;
    let scale = (avail_w / dw).min(avail_h / dh);
    let (pw, ph) = (dw * scale, dh * scale);
    let left = (W - pw) / 2.0;
    let top = 56.0;
    let height = top + ph + 40.0;
    let sx = |x: f64| left + (x - lo[0]) * scale;
    let sy = |y: f64| top + (hi[1] - y) * scale;
    let mut doc = String::new();
    doc.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height:.2}\" \
         viewBox=\"0 0 {W} {height:.2}\">\n"
    ));
    doc.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    text(&mut doc, W / 2.0, 28.0, 18, "middle", "", title);
    let (sp0, sp1) = (grid.spacing(0), grid.spacing(1));
    for (set, fill) in [(under, "#dbe7f3"), (over, "#d62728")] {
        for j in 0..grid.res[1] {
            for (i, len) in row_runs(grid, set, j) {
                let x = sx(lo[0] + i as f64 * sp0);
                let y = sy(lo[1] + (j + 1) as f64 * sp1);
                doc.push_str(&format!(
                    "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
                     fill=\"{fill}\"/>\n",
                    len as f64 * sp0 * scale + 0.25,
                    sp1 * scale + 0.25
                ));
            }
        }
    }
    doc.push_str(&format!(
        "<rect x=\"{left:.2}\" y=\"{top:.2}\" width=\"{pw:.2}\" height=\"{ph:.2}\" \
         fill=\"none\" stroke=\"#333\"/>\n"
    ));
    for (k, (label, color)) in [("domain", "#dbe7f3"), ("excluded", "#d62728")]
        .iter()
        .enumerate()
    {
        let x = left + 160.0 * k as f64;
        let y = top + ph + 24.0;
        doc.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"14\" height=\"14\" fill=\"{color}\"/>\n",
            y - 11.0
        ));
        text(&mut doc, x + 20.0, y, 13, "start", "", label);
    }
    doc.push_str("</svg>\n");
    doc
}

#[cfg(test)]
mod tests {
    use super::*;
    use lab_core::grid::GridBox;

    #[test]
    fn plots_are_byte_stable_and_skip_nan() {
        let series = vec![
            Series {
                label: "a".into(),
                points: vec![(0.0, f64::NAN), (1.0, 0.5), (2.0, 0.25)],
            },
            Series {
                label: "b".into(),
                points: vec![(1.0, 0.9), (2.0, 0.8)],
            },
        ];
        let one = line_plot("t", "k", "ratio", &series);
        let two = line_plot("t", "k", "ratio", &series);
        assert_eq!(one, two);
        assert!(one.contains("polyline"));
        assert!(!one.contains("nan\" cy"));
        assert!(one.ends_with("</svg>\n"));
    }

    #[test]
    fn empty_plot_says_no_data() {
        let doc = line_plot("t", "x", "y", &[]);
        assert!(doc.contains("no data"));
    }

    #[test]
    fn overlay_merges_runs() {
        let grid = GridSpec::square(GridBox::unit(2), 4).unwrap();
        let mut under = CellSet::new(grid.clone());
        for c in 0..16 {
            under.insert(c);
        }
        let mut over = CellSet::new(grid.clone());
        over.insert(5);
        over.insert(6);
        let doc = cell_overlay("mask", &grid, &under, &over);
        // One full-row rect per row for the domain plus one merged
        // two-cell excluded run plus the frame.
        assert_eq!(doc.matches("<rect x=").count(), 4 + 1 + 1 + 2);
    }
}
