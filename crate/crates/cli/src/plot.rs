//! Gradient-norm-vs-angle profile and its SVG rendering.

use std::fmt::Write;

use mracl::numcore::{l2_normalize, norm};
use mracl::similarity::{angular_sim_grad, cosine_sim_grad};
use rand::Rng;
use rand_distr::StandardNormal;

fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// One sampled angle with measured and analytic gradient norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfilePoint {
    pub phi: f64,
    pub cosine: f64,
    pub angular: f64,
}

impl ProfilePoint {
    pub fn cosine_analytic(&self) -> f64 {
        self.phi.sin()
    }
}

/// `‖∂s/∂u‖` for unit pairs at `points` angles spread over `(0, π)`.
pub fn gradient_profile<R: Rng + ?Sized>(points: usize, dim: usize, rng: &mut R) -> mracl::Result<Vec<ProfilePoint>> {
    let lo = 1e-3;
    let hi = std::f64::consts::PI - 1e-3;
    let mut out = Vec::with_capacity(points);
    for k in 0..points {
        let phi = lo + (hi - lo) * k as f64 / (points.max(2) - 1) as f64;
        let u = l2_normalize(&standard_normal(dim, rng))?.into_inner();
        let mut w = standard_normal(dim, rng);
        let proj: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
        w.iter_mut().zip(&u).for_each(|(a, b)| *a -= proj * b);
        let w = l2_normalize(&w)?.into_inner();
        let v: Vec<f64> = u.iter().zip(&w).map(|(a, b)| phi.cos() * a + phi.sin() * b).collect();
        out.push(ProfilePoint {
            phi,
            cosine: norm(&cosine_sim_grad(&u, &v)?.du),
            angular: norm(&angular_sim_grad(&u, &v)?.du),
        });
    }
    Ok(out)
}

pub fn profile_csv(points: &[ProfilePoint]) -> String {
    let mut s = String::from("phi,cosine_sampled,cosine_analytic,angular_sampled,angular_analytic\n");
    for p in points {
        let _ = writeln!(s, "{:.6},{:.9},{:.9},{:.9},1", p.phi, p.cosine, p.cosine_analytic(), p.angular);
    }
    s
}

/// Analytic curves as lines, sampled norms as dots.
pub fn profile_svg(points: &[ProfilePoint]) -> String {
    let (w, h, left, bottom, top, right) = (640.0, 400.0, 60.0, 50.0, 40.0, 130.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let y_max = 1.1;
    let x = |phi: f64| left + plot_w * phi / std::f64::consts::PI;
    let y = |v: f64| top + plot_h * (1.0 - v / y_max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, "<title>similarity gradient norm vs angle</title>");
    let _ = writeln!(s, "<desc>\n{}</desc>", profile_csv(points));
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{b}" stroke="black"/>"#,
        b = top + plot_h,
        r = left + plot_w
    );
    let curve = |f: &dyn Fn(f64) -> f64| {
        (0..=100)
            .map(|k| {
                let phi = std::f64::consts::PI * k as f64 / 100.0;
                format!("{:.2},{:.2}", x(phi), y(f(phi)))
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#c00000"/>"##, curve(&f64::sin));
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#4472c4"/>"##, curve(&|_| 1.0));
    for p in points {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#c00000"/><circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#4472c4"/>"##,
            x(p.phi),
            y(p.cosine),
            x(p.phi),
            y(p.angular)
        );
    }
    for (label, frac) in [("0", 0.0), ("π/2", 0.5), ("π", 1.0)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{label}</text>"#,
            left + frac * plot_w,
            top + plot_h + 16.0
        );
    }
    for v in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{v}</text>"#,
            left - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">angle between embeddings (rad)</text>"#,
        left + plot_w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{c:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {c:.2})">gradient norm</text>"#,
        c = top + plot_h / 2.0
    );
    let lx = left + plot_w + 12.0;
    let _ = writeln!(
        s,
        r##"<text x="{lx}" y="{:.2}" font-size="12" fill="#c00000">cosine (sin φ)</text><text x="{lx}" y="{:.2}" font-size="12" fill="#4472c4">angular (1)</text>"##,
        top + 14.0,
        top + 32.0
    );
    s.push_str("</svg>\n");
    s
}
