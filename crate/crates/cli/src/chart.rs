//! Static SVG line charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Chart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    /// Plot `log10(y)`; non-positive values are dropped.
    pub log_y: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * hi.abs().max(1.0) {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

impl Chart<'_> {
    pub fn render(&self, series: &[Series]) -> String {
        let ty = |y: f64| if self.log_y { y.log10() } else { y };
        let kept: Vec<Vec<(f64, f64)>> = series
            .iter()
            .map(|s| {
                s.points
                    .iter()
                    .filter(|p| p.0.is_finite() && p.1.is_finite() && (!self.log_y || p.1 > 0.0))
                    .map(|&(x, y)| (x, ty(y)))
                    .collect()
            })
            .collect();
        let (x0, x1) = bounds(kept.iter().flatten().map(|p| p.0));
        let (y0, y1) = bounds(kept.iter().flatten().map(|p| p.1));
        let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(self.title)
        );
        let _ = writeln!(
            s,
            r#"<path d="M{m},{t} V{b} H{r}" stroke="black" fill="none"/>"#,
            m = MARGIN,
            t = MARGIN,
            b = HEIGHT - MARGIN,
            r = WIDTH - MARGIN
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let ylab = if self.log_y {
                format!("{:.3e}", 10f64.powf(yv))
            } else {
                format!("{yv:.4}")
            };
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                px(xv),
                HEIGHT - MARGIN + 16.0,
                trim(xv)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                MARGIN - 4.0,
                py(yv) + 4.0,
                ylab
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 12.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
            HEIGHT / 2.0,
            escape(self.y_label)
        );
        for (i, (points, meta)) in kept.iter().zip(series).enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            if !points.is_empty() {
                let d: Vec<String> = points
                    .iter()
                    .enumerate()
                    .map(|(j, &(x, y))| format!("{}{:.2},{:.2}", if j == 0 { 'M' } else { 'L' }, px(x), py(y)))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<path d="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#,
                    d.join(" ")
                );
            }
            let ly = MARGIN + 4.0 + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#,
                WIDTH - MARGIN - 4.0,
                escape(&meta.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn trim(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_every_series_and_is_deterministic() {
        let chart = Chart {
            title: "loss <m>",
            x_label: "epoch",
            y_label: "loss",
            log_y: true,
        };
        let series = vec![
            Series {
                name: "train".into(),
                points: vec![(1.0, 1e-2), (2.0, 5e-3), (3.0, 0.0)],
            },
            Series {
                name: "val".into(),
                points: vec![(1.0, 2e-2), (2.0, 4e-3)],
            },
        ];
        let a = chart.render(&series);
        assert_eq!(a, chart.render(&series));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert_eq!(a.matches("<path").count(), 3);
        assert!(a.contains("loss &lt;m&gt;"));
        assert!(!a.contains("NaN") && !a.contains("inf"));
    }

    #[test]
    fn flat_and_empty_series_do_not_break_scaling() {
        let chart = Chart {
            title: "t",
            x_label: "x",
            y_label: "y",
            log_y: false,
        };
        let flat = vec![Series {
            name: "flat".into(),
            points: vec![(10.0, 2.0), (20.0, 2.0)],
        }];
        assert!(!chart.render(&flat).contains("NaN"));
        assert!(!chart.render(&[]).contains("NaN"));
    }
}
