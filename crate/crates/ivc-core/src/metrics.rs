//! Rate-distortion evaluation: PSNR in RGB, bits per pixel, Bjøntegaard
//! delta-rate over natural cubic splines, rate-composition reports,
//! update-sparsity analysis, CSV interchange, and SVG charts.

use crate::bitstream::Bitstream;
use crate::prior::{
    normal_cdf, spike_slab_bin_pmf, PmfTable, SpikeSlabPrior, UpdateQuantGrid,
};
use crate::tensor::Tensor;
use std::fmt;

#[derive(Debug)]
pub enum MetricsError {
    /// BD-rate needs overlapping PSNR ranges; carries both ranges.
    NoOverlap { reference: (f64, f64), test: (f64, f64) },
    TooFewPoints { label: String, points: usize },
    BadCurve(String),
    BadCsv(String),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::NoOverlap { reference, test } => write!(
                f,
                "PSNR ranges do not overlap: reference [{:.3}, {:.3}] dB vs test [{:.3}, {:.3}] dB",
                reference.0, reference.1, test.0, test.1
            ),
            MetricsError::TooFewPoints { label, points } => {
                write!(f, "curve {label:?} has {points} points; cubic spline needs at least 4")
            }
            MetricsError::BadCurve(msg) => write!(f, "bad RD curve: {msg}"),
            MetricsError::BadCsv(msg) => write!(f, "bad RD csv: {msg}"),
        }
    }
}

impl std::error::Error for MetricsError {}

// ---------------------------------------------------------------------------
// PSNR and bpp.
// ---------------------------------------------------------------------------

/// RGB PSNR between two clips in [0, 1]: per-frame MSE over all samples,
/// averaged over frames, then `10 log10(1 / MSE)`. Identical clips report
/// `f64::INFINITY`.
pub fn psnr_rgb(a: &[Tensor], b: &[Tensor]) -> f64 {
    assert_eq!(a.len(), b.len(), "clips must have equal frame counts");
    assert!(!a.is_empty());
    let mut mse_sum = 0.0f64;
    for (fa, fb) in a.iter().zip(b.iter()) {
        assert_eq!(fa.shape(), fb.shape(), "clips must have equal dimensions");
        let da = fa.data();
        let db = fb.data();
        let mut acc = 0.0f64;
        for (x, y) in da.iter().zip(db.iter()) {
            let d = (*x - *y) as f64;
            acc += d * d;
        }
        mse_sum += acc / da.len() as f64;
    }
    let mse = mse_sum / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Bits per pixel.
pub fn bpp(total_bits: f64, frames: usize, width: usize, height: usize) -> f64 {
    total_bits / (frames as f64 * width as f64 * height as f64)
}

// ---------------------------------------------------------------------------
// RD curves and BD-rate.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RDCurve {
    pub label: String,
    /// Sorted by bpp ascending on construction.
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(label: impl Into<String>, mut points: Vec<RDPoint>) -> Result<RDCurve, MetricsError> {
        let label = label.into();
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        for w in points.windows(2) {
            if w[1].bpp <= w[0].bpp {
                return Err(MetricsError::BadCurve(format!(
                    "curve {label:?}: bpp values must be strictly increasing"
                )));
            }
        }
        for p in &points {
            if !(p.bpp > 0.0) || !p.psnr.is_finite() {
                return Err(MetricsError::BadCurve(format!(
                    "curve {label:?}: bpp must be positive and psnr finite, got ({}, {})",
                    p.bpp, p.psnr
                )));
            }
        }
        Ok(RDCurve { label, points })
    }

    fn psnr_range(&self) -> (f64, f64) {
        let lo = self.points.iter().map(|p| p.psnr).fold(f64::INFINITY, f64::min);
        let hi = self.points.iter().map(|p| p.psnr).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Natural cubic spline through `(xs, ys)` with zero second derivative at the
/// ends; exposes an exact definite integral.
struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    fn fit(xs: Vec<f64>, ys: Vec<f64>) -> CubicSpline {
        let n = xs.len();
        assert!(n >= 3);
        // Thomas algorithm on the standard tridiagonal system for interior
        // second derivatives; natural boundary: m[0] = m[n-1] = 0.
        let mut sub = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut sup = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for i in 1..n - 1 {
            let h0 = xs[i] - xs[i - 1];
            let h1 = xs[i + 1] - xs[i];
            sub[i] = h0;
            diag[i] = 2.0 * (h0 + h1);
            sup[i] = h1;
            rhs[i] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            let mut cp = vec![0.0; n];
            let mut dp = vec![0.0; n];
            cp[1] = sup[1] / diag[1];
            dp[1] = rhs[1] / diag[1];
            for i in 2..n - 1 {
                let denom = diag[i] - sub[i] * cp[i - 1];
                cp[i] = sup[i] / denom;
                dp[i] = (rhs[i] - sub[i] * dp[i - 1]) / denom;
            }
            for i in (1..n - 1).rev() {
                m[i] = dp[i] - cp[i] * m[i + 1];
            }
        }
        CubicSpline { xs, ys, m }
    }

    /// Exact integral over `[a, b]`, which must lie inside the knot range.
    fn integral(&self, a: f64, b: f64) -> f64 {
        let n = self.xs.len();
        let mut total = 0.0;
        for i in 0..n - 1 {
            let x0 = self.xs[i];
            let x1 = self.xs[i + 1];
            let lo = a.max(x0);
            let hi = b.min(x1);
            if hi <= lo {
                continue;
            }
            let h = x1 - x0;
            // Segment in power form around x0: a0 + b0 t + c0 t^2 + d0 t^3.
            let a0 = self.ys[i];
            let b0 = (self.ys[i + 1] - self.ys[i]) / h - h * (2.0 * self.m[i] + self.m[i + 1]) / 6.0;
            let c0 = self.m[i] / 2.0;
            let d0 = (self.m[i + 1] - self.m[i]) / (6.0 * h);
            let anti = |t: f64| {
                a0 * t + b0 * t * t / 2.0 + c0 * t * t * t / 3.0 + d0 * t * t * t * t / 4.0
            };
            total += anti(hi - x0) - anti(lo - x0);
        }
        total
    }
}

fn rate_spline(curve: &RDCurve) -> Result<CubicSpline, MetricsError> {
    if curve.points.len() < 4 {
        return Err(MetricsError::TooFewPoints {
            label: curve.label.clone(),
            points: curve.points.len(),
        });
    }
    let mut pts: Vec<(f64, f64)> =
        curve.points.iter().map(|p| (p.psnr, p.bpp.log10())).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in pts.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(MetricsError::BadCurve(format!(
                "curve {:?}: PSNR values must be distinct for spline fitting",
                curve.label
            )));
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    Ok(CubicSpline::fit(xs, ys))
}

/// Bjøntegaard delta-rate of `test` against `reference`, in percent; negative
/// means the test codec spends fewer bits at equal quality. Fits natural
/// cubic splines of log10(bpp) as a function of PSNR and integrates their
/// difference over the intersection of PSNR ranges.
pub fn bd_rate(reference: &RDCurve, test: &RDCurve) -> Result<f64, MetricsError> {
    let ref_spline = rate_spline(reference)?;
    let test_spline = rate_spline(test)?;
    let (rlo, rhi) = reference.psnr_range();
    let (tlo, thi) = test.psnr_range();
    let lo = rlo.max(tlo);
    let hi = rhi.min(thi);
    if hi <= lo {
        return Err(MetricsError::NoOverlap { reference: (rlo, rhi), test: (tlo, thi) });
    }
    let mean_diff = (test_spline.integral(lo, hi) - ref_spline.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(mean_diff) - 1.0) * 100.0)
}

// ---------------------------------------------------------------------------
// Rate composition.
// ---------------------------------------------------------------------------

/// Where the coded bits went, by payload. Fractions are normalized over the
/// four categories and ignore fixed container overhead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateReport {
    pub model_update_bits: f64,
    pub iframe_bits: f64,
    pub pframe_flow_bits: f64,
    pub pframe_residual_bits: f64,
}

impl RateReport {
    pub fn total_bits(&self) -> f64 {
        self.model_update_bits + self.iframe_bits + self.pframe_flow_bits + self.pframe_residual_bits
    }

    /// (model_updates, iframe_latents, pframe_flow, pframe_residual).
    pub fn fractions(&self) -> [f64; 4] {
        let total = self.total_bits();
        if total == 0.0 {
            return [0.0; 4];
        }
        [
            self.model_update_bits / total,
            self.iframe_bits / total,
            self.pframe_flow_bits / total,
            self.pframe_residual_bits / total,
        ]
    }
}

/// Pure function of the parsed stream: bit counts read off section payload
/// lengths.
pub fn rate_report(stream: &Bitstream) -> RateReport {
    let model_update_bits = stream
        .update
        .as_ref()
        .map(|u| 8.0 * u.payload.len() as f64)
        .unwrap_or(0.0);
    let mut iframe_bits = 0.0;
    let mut pframe_flow_bits = 0.0;
    let mut pframe_residual_bits = 0.0;
    for frame in &stream.frames {
        let lens: Vec<f64> = frame.streams.iter().map(|s| 8.0 * s.payload.len() as f64).collect();
        if frame.is_pframe {
            pframe_flow_bits += lens[0] + lens[1];
            pframe_residual_bits += lens[2] + lens[3];
        } else {
            iframe_bits += lens[0] + lens[1];
        }
    }
    RateReport { model_update_bits, iframe_bits, pframe_flow_bits, pframe_residual_bits }
}

// ---------------------------------------------------------------------------
// Update sparsity.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct SparsityReport {
    pub zero_fraction: f64,
    /// Cross-entropy of the symbols under the spike-and-slab table, bits.
    pub bits_spike_slab: f64,
    /// Cross-entropy under a single zero-mean Gaussian of the slab's
    /// variance, discretized on the same grid, bits.
    pub bits_gaussian: f64,
    /// `(bits_gaussian - bits_spike_slab) / parameter count`.
    pub saving_per_param: f64,
}

fn gaussian_grid_pmf(grid: &UpdateQuantGrid, sigma: f64) -> PmfTable {
    let k_max = grid.max_symbol();
    let cdf = |x: f64| normal_cdf(x / sigma);
    let masses: Vec<f64> = (-k_max..=k_max)
        .map(|k| {
            let center = k as f64 * grid.t;
            let lo = if k == -k_max { 0.0 } else { cdf(center - grid.t / 2.0) };
            let hi = if k == k_max { 1.0 } else { cdf(center + grid.t / 2.0) };
            hi - lo
        })
        .collect();
    PmfTable::from_masses(&masses)
}

/// Measures how much the spike component saves over coding the same symbols
/// with the slab alone.
pub fn sparsity_report(
    symbols: &[i64],
    prior: &SpikeSlabPrior,
    grid: &UpdateQuantGrid,
) -> SparsityReport {
    assert!(!symbols.is_empty());
    let k_max = grid.max_symbol();
    let spike_slab = spike_slab_bin_pmf(grid, prior);
    let slab_only = gaussian_grid_pmf(grid, prior.sigma);
    let mut zeros = 0usize;
    let mut bits_spike_slab = 0.0;
    let mut bits_gaussian = 0.0;
    for &k in symbols {
        assert!(k.abs() <= k_max, "symbol outside the update grid");
        if k == 0 {
            zeros += 1;
        }
        let slot = (k + k_max) as usize;
        bits_spike_slab += spike_slab.bits(slot);
        bits_gaussian += slab_only.bits(slot);
    }
    SparsityReport {
        zero_fraction: zeros as f64 / symbols.len() as f64,
        bits_spike_slab,
        bits_gaussian,
        saving_per_param: (bits_gaussian - bits_spike_slab) / symbols.len() as f64,
    }
}

// ---------------------------------------------------------------------------
// CSV interchange.
// ---------------------------------------------------------------------------

/// Rows `label,bpp,psnr`, one per point.
pub fn rd_curve_to_csv(curve: &RDCurve) -> String {
    let mut out = String::from("label,bpp,psnr\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", curve.label, p.bpp, p.psnr));
    }
    out
}

/// Parses one curve from `label,bpp,psnr` rows; the header line is optional
/// and all rows must share one label.
pub fn rd_curve_from_csv(text: &str) -> Result<RDCurve, MetricsError> {
    let mut label: Option<String> = None;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == "label,bpp,psnr" {
            continue;
        }
        let mut parts = line.split(',');
        let (l, b, p) = (parts.next(), parts.next(), parts.next());
        let (l, b, p) = match (l, b, p, parts.next()) {
            (Some(l), Some(b), Some(p), None) => (l, b, p),
            _ => {
                return Err(MetricsError::BadCsv(format!(
                    "line {}: expected label,bpp,psnr",
                    lineno + 1
                )))
            }
        };
        let parse = |s: &str, what: &str| {
            s.trim().parse::<f64>().map_err(|_| {
                MetricsError::BadCsv(format!("line {}: bad {what} {s:?}", lineno + 1))
            })
        };
        match &label {
            None => label = Some(l.to_string()),
            Some(prev) if prev != l => {
                return Err(MetricsError::BadCsv(format!(
                    "line {}: mixed labels {prev:?} and {l:?} in one curve file",
                    lineno + 1
                )))
            }
            _ => {}
        }
        points.push(RDPoint { bpp: parse(b, "bpp")?, psnr: parse(p, "psnr")? });
    }
    let label = label.ok_or_else(|| MetricsError::BadCsv("no data rows".to_string()))?;
    RDCurve::new(label, points)
}

// ---------------------------------------------------------------------------
// SVG output.
// ---------------------------------------------------------------------------

const SVG_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Static line chart of RD curves: bpp on x, PSNR on y.
pub fn svg_rd_chart(curves: &[RDCurve]) -> String {
    let (w, h, margin) = (640.0, 420.0, 50.0);
    let all: Vec<RDPoint> = curves.iter().flat_map(|c| c.points.iter().copied()).collect();
    let xmin = all.iter().map(|p| p.bpp).fold(f64::INFINITY, f64::min);
    let xmax = all.iter().map(|p| p.bpp).fold(0.0, f64::max);
    let ymin = all.iter().map(|p| p.psnr).fold(f64::INFINITY, f64::min);
    let ymax = all.iter().map(|p| p.psnr).fold(f64::NEG_INFINITY, f64::max);
    let xspan = (xmax - xmin).max(1e-9);
    let yspan = (ymax - ymin).max(1e-9);
    let sx = |v: f64| margin + (v - xmin) / xspan * (w - 2.0 * margin);
    let sy = |v: f64| h - margin - (v - ymin) / yspan * (h - 2.0 * margin);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\">bits per pixel</text>\n\
         <text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {cy})\">PSNR (dB)</text>\n",
        m = margin,
        b = h - margin,
        r = w - margin,
        t = margin,
        cx = w / 2.0,
        ly = h - 10.0,
        cy = h / 2.0,
    ));
    for (i, curve) in curves.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.psnr)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        for p in &curve.points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(p.bpp),
                sy(p.psnr)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"{color}\">{}</text>\n",
            w - margin + 4.0 - 120.0,
            margin + 16.0 * (i as f64 + 1.0),
            curve.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Stacked horizontal bar of the four rate-composition fractions.
pub fn svg_rate_bars(report: &RateReport) -> String {
    let (w, h) = (640.0, 120.0);
    let fractions = report.fractions();
    let labels = ["model updates", "I-frame latents", "P-frame flow", "P-frame residual"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    let mut x = 20.0;
    let bar_w = w - 40.0;
    for (i, (f, label)) in fractions.iter().zip(labels.iter()).enumerate() {
        let seg = f * bar_w;
        svg.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"20\" width=\"{seg:.2}\" height=\"30\" fill=\"{}\"/>\n",
            SVG_COLORS[i]
        ));
        svg.push_str(&format!(
            "<text x=\"20\" y=\"{:.0}\" fill=\"{}\">{label}: {:.2}%</text>\n",
            70.0 + 14.0 * i as f64,
            SVG_COLORS[i],
            f * 100.0
        ));
        x += seg;
    }
    svg.push_str("</svg>\n");
    svg
}
