//! Head-averaged attention maps, their bivariate-normal summary and SVG views.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{index_of, neighbourhood_len, offset_of, SlideGrid};

/// Ridge added to every fitted covariance so one-hot maps stay drawable.
pub const COV_EPS: f64 = 1e-6;

/// Confidence level of the drawn ellipses.
pub const ELLIPSE_LEVEL: f64 = 0.9;

/// Attention over a `(2k+1)^2` offset grid, flattened like the memory
/// neighbourhood.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub k: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn new(k: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != neighbourhood_len(k) {
            return Err(Error::shape(
                "attention map",
                format!("{} weights for k = {k}", weights.len()),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("attention weights must be non-negative"));
        }
        Ok(AttentionMap { k, weights })
    }

    pub fn at(&self, x: isize, y: isize) -> f64 {
        self.weights[index_of(x, y, self.k)]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Mean over heads of `scores: [h, n]`.
pub fn head_average(scores: &[f32], heads: usize, k: usize) -> Result<AttentionMap> {
    let n = neighbourhood_len(k);
    if heads == 0 || scores.len() != heads * n {
        return Err(Error::shape(
            "head_average",
            format!("{} scores for {heads} heads, k = {k}", scores.len()),
        ));
    }
    let weights = (0..n)
        .map(|t| (0..heads).map(|h| scores[h * n + t] as f64).sum::<f64>() / heads as f64)
        .collect();
    AttentionMap::new(k, weights)
}

/// `chi^2` quantile with two degrees of freedom.
pub fn chi2_quantile_2dof(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "quantile level {alpha} not in (0, 1)"
        )));
    }
    Ok(-2.0 * (-alpha).ln_1p())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EllipseFit {
    /// Mean offset `(x, y)`.
    pub mu: [f64; 2],
    /// `[sxx, sxy, syy]`.
    pub sigma: [f64; 3],
    /// Unit eigenvectors, major axis first.
    pub axes: [[f64; 2]; 2],
    /// Half-lengths along `axes` at the drawing confidence level.
    pub half_lengths: [f64; 2],
    pub area: f64,
}

impl EllipseFit {
    pub fn eigenvalues(&self) -> [f64; 2] {
        let [a, b, c] = self.sigma;
        let mean = 0.5 * (a + c);
        let r = (0.25 * (a - c).powi(2) + b * b).sqrt();
        [mean + r, mean - r]
    }

    /// Major-axis direction in radians.
    pub fn angle(&self) -> f64 {
        self.axes[0][1].atan2(self.axes[0][0])
    }
}

/// Weighted first and second moments of the map over its offsets.
pub fn fit_gaussian(map: &AttentionMap) -> Result<EllipseFit> {
    let points: Vec<([f64; 2], f64)> = map
        .weights
        .iter()
        .enumerate()
        .map(|(t, &w)| {
            let (x, y) = offset_of(t, map.k);
            ([x as f64, y as f64], w)
        })
        .collect();
    fit_points(&points)
}

/// Moment fit of weighted points; the weights are normalized first.
pub fn fit_points(points: &[([f64; 2], f64)]) -> Result<EllipseFit> {
    let total: f64 = points.iter().map(|p| p.1).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("attention map has no weight"));
    }
    let mut mu = [0.0; 2];
    for (p, w) in points {
        mu[0] += w * p[0];
        mu[1] += w * p[1];
    }
    mu = [mu[0] / total, mu[1] / total];
    let mut s = [0.0; 3];
    for (p, w) in points {
        let (dx, dy) = (p[0] - mu[0], p[1] - mu[1]);
        s[0] += w * dx * dx;
        s[1] += w * dx * dy;
        s[2] += w * dy * dy;
    }
    let sigma = [s[0] / total + COV_EPS, s[1] / total, s[2] / total + COV_EPS];
    let chi2 = chi2_quantile_2dof(ELLIPSE_LEVEL)?;
    let mut fit = EllipseFit {
        mu,
        sigma,
        axes: [[1.0, 0.0], [0.0, 1.0]],
        half_lengths: [0.0; 2],
        area: 0.0,
    };
    let [l1, l2] = fit.eigenvalues();
    let [a, b, _] = sigma;
    let major = if b.abs() > 1e-15 {
        let v = [b, l1 - a];
        let n = v[0].hypot(v[1]);
        [v[0] / n, v[1] / n]
    } else if sigma[0] >= sigma[2] {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    fit.axes = [major, [-major[1], major[0]]];
    fit.half_lengths = [(l1.max(0.0) * chi2).sqrt(), (l2.max(0.0) * chi2).sqrt()];
    fit.area = std::f64::consts::PI * (sigma[0] * sigma[2] - b * b).max(0.0).sqrt() * chi2;
    Ok(fit)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchFit {
    pub i: usize,
    pub j: usize,
    pub fit: EllipseFit,
}

/// Fits every patch of a slide. `scores` holds one `[h, n]` block per patch
/// in `grid.positions()` order; patches without any attended neighbour are
/// skipped.
pub fn fit_slide(
    grid: &SlideGrid,
    scores: &[Vec<f32>],
    heads: usize,
    k: usize,
) -> Result<Vec<PatchFit>> {
    let positions: Vec<(usize, usize)> = grid.positions().collect();
    if positions.len() != scores.len() {
        return Err(Error::shape(
            "fit_slide",
            format!(
                "{} score blocks for {} patches",
                scores.len(),
                positions.len()
            ),
        ));
    }
    let fits: Vec<Option<PatchFit>> = positions
        .par_iter()
        .zip(scores.par_iter())
        .map(|(&(i, j), s)| {
            let map = head_average(s, heads, k)?;
            if map.sum() <= 0.0 {
                return Ok(None);
            }
            Ok(Some(PatchFit {
                i,
                j,
                fit: fit_gaussian(&map)?,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(fits.into_iter().flatten().collect())
}

pub fn write_fits_csv(mut w: impl Write, slide_id: &str, fits: &[PatchFit]) -> Result<()> {
    writeln!(w, "slide,i,j,mu_x,mu_y,sigma_xx,sigma_xy,sigma_yy,area")?;
    for p in fits {
        let f = &p.fit;
        writeln!(
            w,
            "{slide_id},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.i, p.j, f.mu[0], f.mu[1], f.sigma[0], f.sigma[1], f.sigma[2], f.area
        )?;
    }
    Ok(())
}

const NEUTRAL: [f64; 3] = [150.0, 150.0, 150.0];
const RED: [f64; 3] = [215.0, 25.0, 28.0];
const BLUE: [f64; 3] = [43.0, 100.0, 200.0];
const CLASS_FILL: [&str; 4] = ["#f2e6ee", "#c9a0c8", "#a0b8d8", "#8a5a2a"];

fn rgb(c: [f64; 3]) -> String {
    format!(
        "#{:02x}{:02x}{:02x}",
        c[0].round() as u8,
        c[1].round() as u8,
        c[2].round() as u8
    )
}

/// Colour of an ellipse whose area deviates from the slide mean by
/// `deviation`, on a ramp clipped at twice the mean absolute deviation.
pub fn area_colour(deviation: f64, mean_abs_deviation: f64) -> String {
    let t = if mean_abs_deviation > 0.0 {
        (deviation / (2.0 * mean_abs_deviation)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let target = if t >= 0.0 { RED } else { BLUE };
    let t = t.abs();
    rgb([0, 1, 2].map(|c| NEUTRAL[c] + t * (target[c] - NEUTRAL[c])))
}

/// Whole-slide view: cells shaded by the predominant predicted class, one
/// ellipse per fitted patch and an arrow for its mean shift.
pub fn render_slide_svg(
    mut w: impl Write,
    grid: &SlideGrid,
    k: usize,
    cell_classes: &[u8],
    fits: &[PatchFit],
) -> Result<()> {
    if cell_classes.len() != grid.num_patches() {
        return Err(Error::shape(
            "render_slide_svg",
            format!(
                "{} cell labels for {} patches",
                cell_classes.len(),
                grid.num_patches()
            ),
        ));
    }
    let cell = 48.0;
    // One neighbour offset maps to this many pixels inside a cell.
    let unit = cell / (2 * k + 1) as f64;
    let (width, height) = (grid.n_x as f64 * cell, grid.n_y as f64 * cell);
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#).unwrap();
    svg.push_str(r#"<defs><marker id="head" markerWidth="6" markerHeight="6" refX="5" refY="3" orient="auto"><path d="M0,0 L6,3 L0,6 z" fill="black"/></marker></defs>"#);
    svg.push('\n');
    for ((i, j), &c) in grid.positions().zip(cell_classes) {
        let fill = CLASS_FILL.get(c as usize).copied().unwrap_or("#ffffff");
        writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="{fill}" stroke="white" stroke-width="0.5"/>"#,
            i as f64 * cell,
            j as f64 * cell
        )
        .unwrap();
    }
    let mean = fits.iter().map(|p| p.fit.area).sum::<f64>() / fits.len().max(1) as f64;
    let mad =
        fits.iter().map(|p| (p.fit.area - mean).abs()).sum::<f64>() / fits.len().max(1) as f64;
    for p in fits {
        let f = &p.fit;
        let (cx, cy) = ((p.i as f64 + 0.5) * cell, (p.j as f64 + 0.5) * cell);
        let (ex, ey) = (cx + f.mu[0] * unit, cy + f.mu[1] * unit);
        writeln!(
            svg,
            r#"<ellipse class="fit" cx="{ex:.3}" cy="{ey:.3}" rx="{:.3}" ry="{:.3}" transform="rotate({:.3} {ex:.3} {ey:.3})" fill="{}" fill-opacity="0.55" stroke="black" stroke-width="0.3"/>"#,
            f.half_lengths[0] * unit,
            f.half_lengths[1] * unit,
            f.angle().to_degrees(),
            area_colour(f.area - mean, mad)
        )
        .unwrap();
        if f.mu[0].hypot(f.mu[1]) * unit > 0.5 {
            writeln!(
                svg,
                r#"<line x1="{cx:.3}" y1="{cy:.3}" x2="{ex:.3}" y2="{ey:.3}" stroke="black" stroke-width="0.8" marker-end="url(#head)"/>"#
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    w.write_all(svg.as_bytes())?;
    Ok(())
}

/// Single-patch view: every neighbourhood cell shaded by its share of the
/// largest weight, centre outlined.
pub fn render_heatmap_svg(mut w: impl Write, map: &AttentionMap) -> Result<()> {
    let side = 2 * map.k + 1;
    let cell = 32.0;
    let size = side as f64 * cell;
    let peak = map.weights.iter().cloned().fold(0.0, f64::max);
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#).unwrap();
    for (t, &v) in map.weights.iter().enumerate() {
        let (x, y) = offset_of(t, map.k);
        let rel = if peak > 0.0 { v / peak } else { 0.0 };
        let shade = rgb([255.0, 255.0 * (1.0 - rel), 255.0 * (1.0 - rel)]);
        let (px, py) = (
            (x + map.k as isize) as f64 * cell,
            (y + map.k as isize) as f64 * cell,
        );
        writeln!(
            svg,
            r#"<rect class="cell" x="{px}" y="{py}" width="{cell}" height="{cell}" fill="{shade}" stroke="grey" stroke-width="0.5"><title>({x},{y}) {v:.4}</title></rect>"#
        )
        .unwrap();
    }
    let c = map.k as f64 * cell;
    writeln!(svg, r#"<rect x="{c}" y="{c}" width="{cell}" height="{cell}" fill="none" stroke="black" stroke-width="2"/>"#).unwrap();
    svg.push_str("</svg>\n");
    w.write_all(svg.as_bytes())?;
    Ok(())
}
