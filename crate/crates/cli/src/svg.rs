//! Minimal self-contained SVG plots of points and curves in the complex plane.

use std::fmt::Write;

use faer::c64;

pub struct Plot {
    re: [f64; 2],
    im: [f64; 2],
    size: f64,
    body: String,
}

const MARGIN: f64 = 40.0;

impl Plot {
    /// A square canvas showing `re × im`, stretched to equal scales.
    pub fn new(re: [f64; 2], im: [f64; 2]) -> Self {
        let half = 0.5 * (re[1] - re[0]).max(im[1] - im[0]).max(1e-9);
        let (cr, ci) = (0.5 * (re[0] + re[1]), 0.5 * (im[0] + im[1]));
        Plot { re: [cr - half, cr + half], im: [ci - half, ci + half], size: 600.0, body: String::new() }
    }

    /// Bounds containing all `points` with a 10% pad.
    pub fn fitting(points: &[c64]) -> Self {
        let mut re = [-1.0f64, 1.0f64];
        let mut im = [-1.0f64, 1.0f64];
        for z in points.iter().filter(|z| z.re.is_finite() && z.im.is_finite()) {
            re = [re[0].min(z.re), re[1].max(z.re)];
            im = [im[0].min(z.im), im[1].max(z.im)];
        }
        let pad = 0.1 * (re[1] - re[0]).max(im[1] - im[0]);
        Plot::new([re[0] - pad, re[1] + pad], [im[0] - pad, im[1] + pad])
    }

    fn x(&self, re: f64) -> f64 {
        MARGIN + (re - self.re[0]) / (self.re[1] - self.re[0]) * self.size
    }

    fn y(&self, im: f64) -> f64 {
        MARGIN + (self.im[1] - im) / (self.im[1] - self.im[0]) * self.size
    }

    pub fn points(&mut self, pts: &[c64], color: &str, radius: f64) {
        for z in pts {
            let _ = writeln!(self.body, r#"<circle cx="{:.2}" cy="{:.2}" r="{radius}" fill="{color}"/>"#, self.x(z.re), self.y(z.im));
        }
    }

    pub fn rings(&mut self, pts: &[c64], color: &str, radius: f64) {
        for z in pts {
            let _ = writeln!(
                self.body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="{radius}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                self.x(z.re),
                self.y(z.im)
            );
        }
    }

    pub fn curve(&mut self, pts: &[c64], color: &str, closed: bool, dashed: bool) {
        if pts.is_empty() {
            return;
        }
        let mut d = String::new();
        for (i, z) in pts.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, self.x(z.re), self.y(z.im));
        }
        if closed {
            d.push('Z');
        }
        let dash = if dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(self.body, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, d.trim_end());
    }

    /// Filled squares of side `step` centered at `pts`.
    pub fn cells(&mut self, pts: &[c64], step: f64, color: &str) {
        let w = step / (self.re[1] - self.re[0]) * self.size;
        for z in pts {
            let _ = writeln!(
                self.body,
                r#"<rect x="{:.2}" y="{:.2}" width="{w:.2}" height="{w:.2}" fill="{color}"/>"#,
                self.x(z.re) - w / 2.0,
                self.y(z.im) - w / 2.0
            );
        }
    }

    pub fn finish(&self, title: &str) -> String {
        let total = self.size + 2.0 * MARGIN;
        let mut out = String::new();
        let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#);
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
        let _ = writeln!(
            out,
            r#"<rect x="{MARGIN}" y="{MARGIN}" width="{s}" height="{s}" fill="none" stroke="gray"/>"#,
            s = self.size
        );
        if self.re[0] < 0.0 && self.re[1] > 0.0 {
            let x = self.x(0.0);
            let _ = writeln!(out, r#"<line x1="{x:.2}" y1="{MARGIN}" x2="{x:.2}" y2="{:.2}" stroke="lightgray"/>"#, MARGIN + self.size);
        }
        if self.im[0] < 0.0 && self.im[1] > 0.0 {
            let y = self.y(0.0);
            let _ = writeln!(out, r#"<line x1="{MARGIN}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="lightgray"/>"#, MARGIN + self.size);
        }
        let bottom = MARGIN + self.size + 16.0;
        let _ = writeln!(
            out,
            r#"<text x="{MARGIN}" y="{bottom}" font-family="sans-serif" font-size="11">re [{:.2}, {:.2}]  im [{:.2}, {:.2}]</text>"#,
            self.re[0], self.re[1], self.im[0], self.im[1]
        );
        out.push_str(&self.body);
        out.push_str("</svg>\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_well_formed() {
        let pts = [c64::new(1.0, 2.0), c64::new(-3.0, 0.5)];
        let mut p = Plot::fitting(&pts);
        p.points(&pts, "black", 1.5);
        p.rings(&pts[..1], "red", 5.0);
        p.curve(&pts, "blue", true, true);
        p.cells(&pts, 0.1, "gray");
        let s = p.finish("a < b");
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<circle").count(), 3);
        assert!(s.contains("a &lt; b"));
    }
}
