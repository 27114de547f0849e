//! Heatmaps of time-of-day × day matrices as SVG.
//!
//! Values are divided by the matrix maximum and mapped through a fixed
//! five-stop ramp (dark purple → blue → teal → green → yellow), quantized
//! to [`LEVELS`] steps. Masked cells are drawn in [`MASKED`]. Each row is
//! run-length merged, so night rows cost one rectangle.

use std::fmt::Write;

use nalgebra::DMatrix;

pub const LEVELS: usize = 32;
pub const MASKED: &str = "#d9d9d9";
const RAMP: [(u8, u8, u8); 5] = [
    (0x44, 0x01, 0x54),
    (0x3b, 0x52, 0x8b),
    (0x21, 0x91, 0x8c),
    (0x5e, 0xc9, 0x62),
    (0xfd, 0xe7, 0x25),
];
const WIDTH: usize = 900;
const HEIGHT: usize = 400;

/// Ramp color at `x ∈ [0, 1]`.
pub fn ramp(x: f64) -> String {
    let x = x.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let mix = |a: u8, b: u8| (f64::from(a) + f * (f64::from(b) - f64::from(a))).round() as u8;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn level(v: f64, max: f64) -> usize {
    if max > 0.0 {
        ((v / max).clamp(0.0, 1.0) * (LEVELS - 1) as f64).round() as usize
    } else {
        0
    }
}

pub fn heatmap(values: &DMatrix<f64>, mask: Option<&DMatrix<bool>>, title: &str) -> String {
    let (m, n) = values.shape();
    let max = values
        .iter()
        .enumerate()
        .filter(|(idx, _)| mask.is_none_or(|mk| mk[(idx % m, idx / m)]))
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    let palette: Vec<String> = (0..LEVELS).map(|l| ramp(l as f64 / (LEVELS - 1) as f64)).collect();
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {n} {m}\" preserveAspectRatio=\"none\" shape-rendering=\"crispEdges\">\n\
         <title>{}</title>\n",
        escape(title)
    );
    for t in 0..m {
        let mut i = 0;
        while i < n {
            let cell = |j: usize| {
                if mask.is_some_and(|mk| !mk[(t, j)]) {
                    None
                } else {
                    Some(level(values[(t, j)], max))
                }
            };
            let c = cell(i);
            let mut j = i + 1;
            while j < n && cell(j) == c {
                j += 1;
            }
            let fill = c.map_or(MASKED, |l| palette[l].as_str());
            let _ = writeln!(s, "<rect x=\"{i}\" y=\"{t}\" width=\"{}\" height=\"1\" fill=\"{fill}\"/>", j - i);
            i = j;
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), "#440154");
        assert_eq!(ramp(1.0), "#fde725");
        assert_eq!(ramp(0.5), "#21918c");
    }

    #[test]
    fn rows_are_run_length_merged() {
        let v = DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.5, 0.5]);
        let mut mask = DMatrix::from_element(2, 4, true);
        mask[(1, 3)] = false;
        let svg = heatmap(&v, Some(&mask), "a < b");
        assert_eq!(svg.matches("<rect").count(), 1 + 3);
        assert!(svg.contains("width=\"4\" height=\"1\" fill=\"#440154\""));
        assert!(svg.contains(MASKED));
        assert!(svg.contains("a &lt; b"));
    }
}
