//! PR-curve rendering: hand-written SVG plus a small PNG rasterizer, no
//! plotting dependencies.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::PrCurve;

const W: usize = 480;
const H: usize = 360;
const MARGIN: usize = 48;

fn map_point(recall: f64, precision: f64) -> (f64, f64) {
    let x = MARGIN as f64 + recall * (W - 2 * MARGIN) as f64;
    let y = (H - MARGIN) as f64 - precision * (H - 2 * MARGIN) as f64;
    (x, y)
}

/// Step path of the curve: (0 recall, first precision) then right/down steps.
fn curve_vertices(curve: &PrCurve) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    let mut prev_recall = 0.0;
    for (i, p) in curve.points.iter().enumerate() {
        if i == 0 {
            pts.push(map_point(0.0, p.precision));
        } else {
            pts.push(map_point(prev_recall, p.precision));
        }
        pts.push(map_point(p.recall, p.precision));
        prev_recall = p.recall;
    }
    pts
}

/// SVG document for one label's PR curve; the legend carries the AUC to
/// three decimals.
pub fn pr_curve_svg(curve: &PrCurve, auc: f64) -> String {
    let mut path = String::new();
    for (i, (x, y)) in curve_vertices(curve).into_iter().enumerate() {
        path.push_str(&format!("{}{x:.2},{y:.2} ", if i == 0 { "M" } else { "L" }));
    }
    let (x0, y0) = map_point(0.0, 0.0);
    let (x1, y1) = map_point(1.0, 1.0);
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<rect x=\"{x1}\" y=\"{y1}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#888\"/>\n",
            "<text x=\"{cx}\" y=\"{by}\" text-anchor=\"middle\" font-size=\"13\">recall</text>\n",
            "<text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" font-size=\"13\" ",
            "transform=\"rotate(-90 14 {cy})\">precision</text>\n",
            "<path d=\"{path}\" fill=\"none\" stroke=\"#0b62a4\" stroke-width=\"2\"/>\n",
            "<text x=\"{lx}\" y=\"{ly}\" font-size=\"13\">{label}: AUC {auc:.3}</text>\n",
            "</svg>\n"
        ),
        w = W,
        h = H,
        x1 = x0.min(x1),
        y1 = y1.min(y0),
        pw = (W - 2 * MARGIN),
        ph = (H - 2 * MARGIN),
        cx = W / 2,
        by = H - 12,
        cy = H / 2,
        path = path.trim_end(),
        lx = MARGIN + 8,
        ly = MARGIN + 18,
        label = svg_escape(&curve.label_name),
        auc = auc,
    )
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn draw_line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
    let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, image::Rgb(color));
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Rasterizes the same plot to PNG bytes.
pub fn pr_curve_png(curve: &PrCurve) -> Result<Vec<u8>> {
    let mut img = image::RgbImage::from_pixel(W as u32, H as u32, image::Rgb([255, 255, 255]));
    let (x0, y0) = map_point(0.0, 0.0);
    let (x1, y1) = map_point(1.0, 1.0);
    let frame = [136, 136, 136];
    draw_line(&mut img, (x0, y0), (x1, y0), frame);
    draw_line(&mut img, (x0, y0), (x0, y1), frame);
    draw_line(&mut img, (x1, y0), (x1, y1), frame);
    draw_line(&mut img, (x0, y1), (x1, y1), frame);
    let verts = curve_vertices(curve);
    for pair in verts.windows(2) {
        draw_line(&mut img, pair[0], pair[1], [11, 98, 164]);
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: "<memory>".into(),
            source: e,
        })?;
    Ok(bytes)
}

/// Writes `pr_<label>.svg` and `pr_<label>.png` per curve. Errors on an
/// empty curve list.
pub fn render_pr_plots(curves: &[(PrCurve, f64)], out_dir: impl AsRef<Path>) -> Result<Vec<String>> {
    if curves.is_empty() {
        return Err(Error::Eval("no curves to render".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (curve, auc) in curves {
        let slug: String = curve
            .label_name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        let svg_path = out_dir.join(format!("pr_{slug}.svg"));
        std::fs::write(&svg_path, pr_curve_svg(curve, *auc)).map_err(|e| Error::io(&svg_path, e))?;
        let png_path = out_dir.join(format!("pr_{slug}.png"));
        std::fs::write(&png_path, pr_curve_png(curve)?).map_err(|e| Error::io(&png_path, e))?;
        written.push(format!("pr_{slug}.svg"));
        written.push(format!("pr_{slug}.png"));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::precision_recall_curve;

    #[test]
    fn svg_contains_legend_with_three_decimal_auc() {
        let curve =
            precision_recall_curve(&[0.9, 0.4, 0.1], &[true, false, true], "Stripe").unwrap();
        let svg = pr_curve_svg(&curve, 0.8333333);
        assert!(svg.contains("Stripe: AUC 0.833"));
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn empty_curve_list_errors() {
        let dir = std::env::temp_dir().join("semguide_plot_test_empty");
        assert!(render_pr_plots(&[], &dir).is_err());
    }

    #[test]
    fn renders_svg_and_png_per_curve() {
        let dir = std::env::temp_dir().join("semguide_plot_test_render");
        let _ = std::fs::remove_dir_all(&dir);
        let curve = precision_recall_curve(&[0.9, 0.1], &[true, false], "Tie Dye").unwrap();
        let files = render_pr_plots(&[(curve, 1.0)], &dir).unwrap();
        assert_eq!(files.len(), 2);
        assert!(dir.join("pr_tie_dye.svg").exists());
        assert!(dir.join("pr_tie_dye.png").exists());
        let png = std::fs::read(dir.join("pr_tie_dye.png")).unwrap();
        assert_eq!(&png[1..4], b"PNG");
        let _ = std::fs::remove_dir_all(&dir);
    }
}
