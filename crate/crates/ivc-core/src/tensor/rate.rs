//! Fused differentiable rate terms: negative log-likelihood of a value under
//! a unit-width-bin discretization of a Gaussian or logistic distribution.
//!
//! Both ops evaluate the bin integral `CDF(x + 1/2) - CDF(x - 1/2)` in f64
//! and return per-element rates in nats.

use super::{Tensor, TensorError};
use statrs::function::erf::erf;

const MASS_FLOOR: f64 = 1e-12;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() * INV_SQRT_2PI
}

/// `-ln( Phi((y - mu + 1/2)/sigma) - Phi((y - mu - 1/2)/sigma) )` elementwise.
/// Differentiable w.r.t. `y`, `mu`, and `sigma`.
pub fn gaussian_rate(y: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor, TensorError> {
    let shape = y.shape();
    if mu.shape() != shape || sigma.shape() != shape {
        return Err(TensorError::ShapeMismatch {
            op: "gaussian_rate",
            detail: format!(
                "y {shape:?}, mu {:?}, sigma {:?} must match",
                mu.shape(),
                sigma.shape()
            ),
        });
    }
    let n = y.numel();
    let mut out = vec![0.0f32; n];
    let mut gy = vec![0.0f32; n];
    let mut gmu = vec![0.0f32; n];
    let mut gsig = vec![0.0f32; n];
    {
        let yd = y.data();
        let md = mu.data();
        let sd = sigma.data();
        for i in 0..n {
            let s = sd[i] as f64;
            let a = (yd[i] as f64 - md[i] as f64 + 0.5) / s;
            let b = (yd[i] as f64 - md[i] as f64 - 0.5) / s;
            let mass = (normal_cdf(a) - normal_cdf(b)).max(MASS_FLOOR);
            out[i] = -(mass.ln()) as f32;
            let pa = normal_pdf(a);
            let pb = normal_pdf(b);
            // d(-ln m)/dy = -(pa - pb) / (s m); mu flips the sign.
            gy[i] = (-(pa - pb) / (s * mass)) as f32;
            gmu[i] = ((pa - pb) / (s * mass)) as f32;
            // dm/ds = (-a pa + b pb)/s.
            gsig[i] = ((a * pa - b * pb) / (s * mass)) as f32;
        }
    }
    Ok(Tensor::from_op(
        shape,
        out,
        vec![y.clone(), mu.clone(), sigma.clone()],
        Box::new(move |gout, parents| {
            let apply = |g: &[f32]| -> Vec<f32> {
                gout.iter().zip(g).map(|(go, gi)| go * gi).collect()
            };
            parents[0].accumulate_grad(&apply(&gy));
            parents[1].accumulate_grad(&apply(&gmu));
            parents[2].accumulate_grad(&apply(&gsig));
        }),
    ))
}

fn logistic_cdf(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rate of `z` under a per-channel discretized logistic with location `loc`
/// and scale `exp(log_scale)`; `loc`/`log_scale` have shape `(1, c, 1, 1)`
/// and broadcast over batch and space.
pub fn logistic_rate(z: &Tensor, loc: &Tensor, log_scale: &Tensor) -> Result<Tensor, TensorError> {
    let [n, c, h, w] = z.shape();
    if loc.shape() != [1, c, 1, 1] || log_scale.shape() != [1, c, 1, 1] {
        return Err(TensorError::ShapeMismatch {
            op: "logistic_rate",
            detail: format!(
                "loc {:?} / log_scale {:?} must be (1, {c}, 1, 1)",
                loc.shape(),
                log_scale.shape()
            ),
        });
    }
    let plane = h * w;
    let total = n * c * plane;
    let mut out = vec![0.0f32; total];
    let mut gz = vec![0.0f32; total];
    let mut gloc_per = vec![0.0f32; total];
    let mut gls_per = vec![0.0f32; total];
    {
        let zd = z.data();
        let ld = loc.data();
        let lsd = log_scale.data();
        for b in 0..n {
            for ch in 0..c {
                let m0 = ld[ch] as f64;
                let s = (lsd[ch] as f64).exp();
                for i in 0..plane {
                    let idx = (b * c + ch) * plane + i;
                    let a = (zd[idx] as f64 - m0 + 0.5) / s;
                    let bb = (zd[idx] as f64 - m0 - 0.5) / s;
                    let ca = logistic_cdf(a);
                    let cb = logistic_cdf(bb);
                    let mass = (ca - cb).max(MASS_FLOOR);
                    out[idx] = -(mass.ln()) as f32;
                    let da = ca * (1.0 - ca);
                    let db = cb * (1.0 - cb);
                    gz[idx] = (-(da - db) / (s * mass)) as f32;
                    gloc_per[idx] = ((da - db) / (s * mass)) as f32;
                    // d a / d log_scale = -a, so dm/dls = -a da + b db.
                    gls_per[idx] = ((a * da - bb * db) / mass) as f32;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        [n, c, h, w],
        out,
        vec![z.clone(), loc.clone(), log_scale.clone()],
        Box::new(move |gout, parents| {
            let gzv: Vec<f32> = gout.iter().zip(&gz).map(|(go, gi)| go * gi).collect();
            parents[0].accumulate_grad(&gzv);
            // Reduce the broadcast axes per channel, fixed order.
            let mut gl = vec![0.0f32; c];
            let mut gs = vec![0.0f32; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let mut al = 0.0f64;
                    let mut as_ = 0.0f64;
                    for i in 0..plane {
                        al += (gout[base + i] * gloc_per[base + i]) as f64;
                        as_ += (gout[base + i] * gls_per[base + i]) as f64;
                    }
                    gl[ch] += al as f32;
                    gs[ch] += as_ as f32;
                }
            }
            parents[1].accumulate_grad(&gl);
            parents[2].accumulate_grad(&gs);
        }),
    ))
}
