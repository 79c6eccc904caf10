//! Dependency-free plot emission: PGM rasters for spatial maps and an SVG
//! polyline for loss curves.

use std::path::Path;

use crate::error::{DynafuseError, Result};
use crate::tensor::Tensor;

/// Render a [H,W] map (or anything with H*W entries) as an 8-bit ASCII
/// PGM, min-max normalized; a constant map renders as black.
pub fn pgm_from_map(data: &[f64], height: usize, width: usize) -> Result<String> {
    if data.len() != height * width || height == 0 || width == 0 {
        return Err(DynafuseError::invalid(format!(
            "{} values cannot fill a {height}x{width} raster",
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(DynafuseError::invalid("raster values must be finite"));
    }
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P2\n{width} {height}\n255\n");
    for r in 0..height {
        let row: Vec<String> = (0..width)
            .map(|c| {
                let v = data[r * width + c];
                let g = if span <= 0.0 { 0.0 } else { (v - lo) / span };
                ((g * 255.0).round() as u32).min(255).to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// Mean over channels of a [C,H,W] tensor, for raster dumps of feature
/// grids.
pub fn channel_mean(t: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    if t.shape.len() != 3 {
        return Err(DynafuseError::invalid(format!(
            "expected a [C,H,W] tensor, got shape {:?}",
            t.shape
        )));
    }
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    let mut out = vec![0.0; h * w];
    for ci in 0..c {
        for p in 0..h * w {
            out[p] += t.data[ci * h * w + p] / c as f64;
        }
    }
    Ok((out, h, w))
}

pub fn write_pgm(path: &Path, data: &[f64], height: usize, width: usize) -> Result<()> {
    let text = pgm_from_map(data, height, width)?;
    std::fs::write(path, text).map_err(|e| DynafuseError::io(path, e))
}

/// A self-contained SVG line chart of one series, with axis box and
/// min/max labels.
pub fn svg_curve(values: &[f64], title: &str) -> Result<String> {
    if values.is_empty() {
        return Err(DynafuseError::invalid("cannot plot an empty series"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DynafuseError::invalid("series values must be finite"));
    }
    let (w, h, m) = (640.0, 400.0, 40.0);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = values.len();
    let pts: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let x = if n == 1 { m } else { m + (w - 2.0 * m) * i as f64 / (n - 1) as f64 };
            let y = h - m - (h - 2.0 * m) * (v - lo) / span;
            format!("{x:.2},{y:.2}")
        })
        .collect();
    Ok(format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect x=\"{m}\" y=\"{m}\" width=\"{iw}\" height=\"{ih}\" ",
            "fill=\"none\" stroke=\"#888\"/>\n",
            "<text x=\"{m}\" y=\"24\" font-family=\"monospace\" font-size=\"14\">{title}</text>\n",
            "<text x=\"{m}\" y=\"{ylab}\" font-family=\"monospace\" font-size=\"11\">min {lo:.6} max {hi:.6}</text>\n",
            "<polyline points=\"{pts}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        m = m,
        iw = w - 2.0 * m,
        ih = h - 2.0 * m,
        ylab = h - 12.0,
        title = title,
        lo = lo,
        hi = hi,
        pts = pts.join(" ")
    ))
}

pub fn write_svg_curve(path: &Path, values: &[f64], title: &str) -> Result<()> {
    let text = svg_curve(values, title)?;
    std::fs::write(path, text).map_err(|e| DynafuseError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_range() {
        let text = pgm_from_map(&[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "P2");
        assert_eq!(lines[1], "2 2");
        assert_eq!(lines[2], "255");
        assert_eq!(lines[3], "0 128");
        assert_eq!(lines[4], "255 64");
    }

    #[test]
    fn constant_map_renders_black() {
        let text = pgm_from_map(&[3.0; 4], 2, 2).unwrap();
        assert!(text.ends_with("0 0\n0 0\n"));
    }

    #[test]
    fn wrong_cell_count_rejected() {
        assert!(pgm_from_map(&[1.0; 3], 2, 2).is_err());
        assert!(pgm_from_map(&[f64::NAN; 4], 2, 2).is_err());
    }

    #[test]
    fn channel_mean_averages() {
        let t = Tensor::from_vec(&[2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let (m, h, w) = channel_mean(&t).unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(m, vec![3.0, 5.0]);
    }

    #[test]
    fn svg_contains_polyline_and_title() {
        let text = svg_curve(&[3.0, 2.0, 1.0], "loss").unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));
        assert!(text.contains(">loss<"));
        assert!(svg_curve(&[], "x").is_err());
        assert!(svg_curve(&[f64::INFINITY], "x").is_err());
    }

    #[test]
    fn single_point_series_plots() {
        let text = svg_curve(&[1.0], "one").unwrap();
        assert!(text.contains("polyline"));
    }
}
