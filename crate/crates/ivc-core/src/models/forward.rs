//! Train- and eval-mode forward passes for the three autoencoders, plus the
//! shared decode-from-symbols paths and PMF-table construction used by both
//! the eval rate accounting and the entropy coder. Encoder and decoder run
//! the exact same decode functions, so reconstructions match bit for bit.
//!
//! Train mode follows the usual relaxation: rates are measured on
//! noise-perturbed latents while the distortion path uses straight-through
//! rounding. Eval mode rounds hard everywhere.

use super::blur::BLUR_SIGMAS;
use super::warp::scale_space_warp;
use super::{run_net, AutoEncoder, SsfModel, SIGMA_FLOOR};
use crate::prior::{gaussian_bin_pmf, logistic_bin_pmf, PmfTable};
use crate::tensor::{Tensor, TensorError};

const LOG2_FLOOR: f64 = 1e-12;

fn check_finite(name: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(name.to_string()))
    }
}

/// Train-mode output of one autoencoder: the synthesis result for the
/// distortion path and the differentiable rate in nats.
pub struct TrainAeOut {
    pub synthesis: Tensor,
    pub rate_nats: Tensor,
}

/// Hard-rounded symbols of one latent tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentCodes {
    pub y: Vec<i64>,
    pub y_shape: [usize; 4],
    pub z: Vec<i64>,
    pub z_shape: [usize; 4],
}

/// Eval-mode output of one autoencoder.
pub struct EvalAeOut {
    pub synthesis: Tensor,
    pub codes: LatentCodes,
    pub rate_bits: f64,
    /// Gaussian conditional parameters for the main latent, flattened.
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

fn predicted_sigma(ae: &AutoEncoder, z: &Tensor) -> Result<Tensor, TensorError> {
    Ok(run_net(&ae.h_sigma, z)?.relu().clamp_min(SIGMA_FLOOR))
}

/// One autoencoder, train mode: noisy-latent rates, straight-through
/// synthesis input.
pub fn ae_train(
    ae: &AutoEncoder,
    name: &'static str,
    x: &Tensor,
    seed: u64,
) -> Result<TrainAeOut, TensorError> {
    let y = run_net(&ae.g_a, x)?;
    let z = run_net(&ae.h_a, &y)?;
    let z_noisy = z.add_uniform_noise(seed);
    let rate_z = crate::tensor::logistic_rate(&z_noisy, &ae.prior_loc, &ae.prior_log_scale)?.sum();
    let mu = run_net(&ae.h_mu, &z_noisy)?;
    let sigma = predicted_sigma(ae, &z_noisy)?;
    let y_noisy = y.add_uniform_noise(seed.wrapping_add(1));
    let rate_y = crate::tensor::gaussian_rate(&y_noisy, &mu, &sigma)?.sum();
    let synthesis = run_net(&ae.g_s, &y.ste_round())?;
    check_finite(name, &synthesis)?;
    let rate_nats = rate_z.add(&rate_y)?;
    check_finite(name, &rate_nats)?;
    Ok(TrainAeOut { synthesis, rate_nats })
}

fn round_symbols(t: &Tensor) -> Vec<i64> {
    t.data().iter().map(|&v| v.round() as i64).collect()
}

fn symbols_to_tensor(symbols: &[i64], shape: [usize; 4]) -> Tensor {
    Tensor::new(shape, symbols.iter().map(|&k| k as f32).collect())
}

/// Decode one autoencoder's synthesis output from hard symbols. Uses only
/// receiver-side parameters; this is the path both encoder and decoder run.
pub fn decode_latents(ae: &AutoEncoder, codes: &LatentCodes) -> Result<Tensor, TensorError> {
    let y_bar = symbols_to_tensor(&codes.y, codes.y_shape);
    run_net(&ae.g_s, &y_bar)
}

/// Gaussian conditional parameters from hard hyperlatent symbols.
pub fn decode_conditional(
    ae: &AutoEncoder,
    codes: &LatentCodes,
) -> Result<(Tensor, Tensor), TensorError> {
    let z_bar = symbols_to_tensor(&codes.z, codes.z_shape);
    let mu = run_net(&ae.h_mu, &z_bar)?;
    let sigma = predicted_sigma(ae, &z_bar)?;
    Ok((mu, sigma))
}

/// One autoencoder, eval mode: hard rounding, exact bit accounting under the
/// discretized priors.
pub fn ae_eval(ae: &AutoEncoder, name: &'static str, x: &Tensor) -> Result<EvalAeOut, TensorError> {
    let y = run_net(&ae.g_a, x)?;
    let z = run_net(&ae.h_a, &y)?;
    check_finite(name, &z)?;
    let codes = LatentCodes {
        y: round_symbols(&y),
        y_shape: y.shape(),
        z: round_symbols(&z),
        z_shape: z.shape(),
    };
    let (mu, sigma) = decode_conditional(ae, &codes)?;
    check_finite(name, &sigma)?;

    let mut bits = 0.0f64;
    // Hyperlatent under the per-channel logistic prior.
    {
        let loc = ae.prior_loc.data();
        let ls = ae.prior_log_scale.data();
        let [n, c, h, w] = codes.z_shape;
        let plane = h * w;
        for b in 0..n {
            for ch in 0..c {
                let scale = (ls[ch] as f64).exp();
                for i in 0..plane {
                    let k = codes.z[(b * c + ch) * plane + i];
                    let p = logistic_bin_pmf(loc[ch] as f64, scale, k).max(LOG2_FLOOR);
                    bits -= p.log2();
                }
            }
        }
    }
    // Main latent under the Gaussian conditional.
    let mu_v = mu.to_vec();
    let sigma_v = sigma.to_vec();
    for (i, &k) in codes.y.iter().enumerate() {
        let p = gaussian_bin_pmf(mu_v[i] as f64, sigma_v[i] as f64, k).max(LOG2_FLOOR);
        bits -= p.log2();
    }

    let synthesis = decode_latents(ae, &codes)?;
    check_finite(name, &synthesis)?;
    Ok(EvalAeOut { synthesis, codes, rate_bits: bits, mu: mu_v, sigma: sigma_v })
}

/// Maps the raw flow synthesis output to a warp field: channels 0-1 pass
/// through as (dx, dy), channel 2 is squashed to the blur-scale range.
pub fn flow_field(raw: &Tensor) -> Result<Tensor, TensorError> {
    let dxdy = raw.narrow_channels(0, 2)?;
    let s = raw
        .narrow_channels(2, 1)?
        .sigmoid()
        .mul_scalar((BLUR_SIGMAS.len() - 1) as f32);
    Tensor::concat_channels(&[dxdy, s])
}

pub struct TrainFrameOut {
    pub recon: Tensor,
    pub rate_nats: Tensor,
}

/// I-frame, train mode.
pub fn iframe_train(model: &SsfModel, frame: &Tensor, seed: u64) -> Result<TrainFrameOut, TensorError> {
    let out = ae_train(&model.iframe, "iframe", frame, seed)?;
    Ok(TrainFrameOut { recon: out.synthesis, rate_nats: out.rate_nats })
}

/// P-frame, train mode: flow over (frame, reference), scale-space warp, then
/// a coded residual.
pub fn pframe_train(
    model: &SsfModel,
    prev_recon: &Tensor,
    frame: &Tensor,
    seed: u64,
) -> Result<TrainFrameOut, TensorError> {
    let flow_in = Tensor::concat_channels(&[frame.clone(), prev_recon.clone()])?;
    let flow_out = ae_train(&model.flow, "flow", &flow_in, seed)?;
    let field = flow_field(&flow_out.synthesis)?;
    let warped = scale_space_warp(prev_recon, &field)?;
    let res_in = frame.sub(&warped)?;
    let res_out = ae_train(&model.residual, "residual", &res_in, seed.wrapping_add(2))?;
    let recon = warped.add(&res_out.synthesis)?;
    let rate_nats = flow_out.rate_nats.add(&res_out.rate_nats)?;
    Ok(TrainFrameOut { recon, rate_nats })
}

pub struct EvalIFrameOut {
    pub recon: Tensor,
    pub ae: EvalAeOut,
}

/// I-frame, eval mode.
pub fn iframe_eval(model: &SsfModel, frame: &Tensor) -> Result<EvalIFrameOut, TensorError> {
    let ae = ae_eval(&model.iframe, "iframe", frame)?;
    Ok(EvalIFrameOut { recon: ae.synthesis.clone(), ae })
}

pub struct EvalPFrameOut {
    pub recon: Tensor,
    pub flow: EvalAeOut,
    pub residual: EvalAeOut,
    pub rate_bits: f64,
}

/// P-frame, eval mode. The reconstruction is assembled exactly as the decoder
/// will: from hard symbols through receiver-side nets only.
pub fn pframe_eval(
    model: &SsfModel,
    prev_recon: &Tensor,
    frame: &Tensor,
) -> Result<EvalPFrameOut, TensorError> {
    let flow_in = Tensor::concat_channels(&[frame.clone(), prev_recon.clone()])?;
    let flow = ae_eval(&model.flow, "flow", &flow_in)?;
    let field = flow_field(&flow.synthesis)?;
    let warped = scale_space_warp(prev_recon, &field)?;
    let res_in = frame.sub(&warped)?;
    let residual = ae_eval(&model.residual, "residual", &res_in)?;
    let recon = warped.add(&residual.synthesis)?;
    let rate_bits = flow.rate_bits + residual.rate_bits;
    Ok(EvalPFrameOut { recon, flow, residual, rate_bits })
}

/// Decoder-side P-frame reconstruction from symbols and the previous
/// reconstruction.
pub fn decode_pframe(
    model: &SsfModel,
    prev_recon: &Tensor,
    flow_codes: &LatentCodes,
    residual_codes: &LatentCodes,
) -> Result<Tensor, TensorError> {
    let field = flow_field(&decode_latents(&model.flow, flow_codes)?)?;
    let warped = scale_space_warp(prev_recon, &field)?;
    let r_hat = decode_latents(&model.residual, residual_codes)?;
    warped.add(&r_hat)
}

/// Decoder-side I-frame reconstruction from symbols.
pub fn decode_iframe(model: &SsfModel, codes: &LatentCodes) -> Result<Tensor, TensorError> {
    decode_latents(&model.iframe, codes)
}

/// Smallest q with `Phi(q / sigma) >= 1 - 2^-16`, by bisection.
fn gaussian_quantile(sigma: f64) -> f64 {
    let target = 1.0 - 2f64.powi(-16);
    let cdf = |x: f64| 0.5 * (1.0 + statrs::function::erf::erf(x / (sigma * std::f64::consts::SQRT_2)));
    let mut lo = 0.0;
    let mut hi = 40.0 * sigma.max(1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Per-tensor escape threshold for the main latent: the extreme quantile at
/// the largest predicted scale, plus the half-bin slack from mean centering.
pub fn y_tail_bound(sigma: &[f32]) -> i64 {
    let sigma_max = sigma.iter().cloned().fold(SIGMA_FLOOR, f32::max) as f64;
    (gaussian_quantile(sigma_max) + 0.5).ceil().max(1.0) as i64
}

/// Escape threshold for the hyperlatent under its logistic prior.
pub fn z_tail_bound(log_scale: &[f32]) -> i64 {
    let scale_max = log_scale.iter().cloned().fold(f32::MIN, f32::max) as f64;
    let scale = scale_max.exp();
    // Logistic quantile: scale * ln((1 - eps) / eps) at eps = 2^-16.
    let q = scale * ((1.0 - 2f64.powi(-16)) / 2f64.powi(-16)).ln();
    (q + 0.5).ceil().max(1.0) as i64
}

/// Builds per-element escape tables for the main latent: symbols are coded
/// relative to `round(mu)`, slots cover `[-tail_bound, tail_bound]` plus a
/// final escape slot carrying the residual tail mass.
pub fn y_escape_tables(mu: &[f32], sigma: &[f32], tail_bound: i64) -> Vec<PmfTable> {
    mu.iter()
        .zip(sigma.iter())
        .map(|(&m, &s)| {
            let center = (m as f64).round();
            let mut masses: Vec<f64> = (-tail_bound..=tail_bound)
                .map(|j| gaussian_bin_pmf(m as f64 - center, s as f64, j))
                .collect();
            let in_range: f64 = masses.iter().sum();
            masses.push((1.0 - in_range).max(LOG2_FLOOR));
            PmfTable::from_masses(&masses)
        })
        .collect()
}

/// Same construction per channel for the hyperlatent logistic prior.
pub fn z_escape_tables(
    loc: &[f32],
    log_scale: &[f32],
    z_shape: [usize; 4],
    tail_bound: i64,
) -> Vec<PmfTable> {
    let [n, c, h, w] = z_shape;
    let per_channel: Vec<PmfTable> = (0..c)
        .map(|ch| {
            let center = (loc[ch] as f64).round();
            let scale = (log_scale[ch] as f64).exp();
            let mut masses: Vec<f64> = (-tail_bound..=tail_bound)
                .map(|j| logistic_bin_pmf(loc[ch] as f64 - center, scale, j))
                .collect();
            let in_range: f64 = masses.iter().sum();
            masses.push((1.0 - in_range).max(LOG2_FLOOR));
            PmfTable::from_masses(&masses)
        })
        .collect();
    let plane = h * w;
    let mut tables = Vec::with_capacity(n * c * plane);
    for _b in 0..n {
        for ch in 0..c {
            for _ in 0..plane {
                tables.push(per_channel[ch].clone());
            }
        }
    }
    tables
}

/// Centers raw symbols for escape coding: `k - round(center_i)`.
pub fn center_y_symbols(symbols: &[i64], mu: &[f32]) -> Vec<i64> {
    symbols
        .iter()
        .zip(mu.iter())
        .map(|(&k, &m)| k - (m as f64).round() as i64)
        .collect()
}

pub fn uncenter_y_symbols(centered: &[i64], mu: &[f32]) -> Vec<i64> {
    centered
        .iter()
        .zip(mu.iter())
        .map(|(&j, &m)| j + (m as f64).round() as i64)
        .collect()
}

pub fn center_z_symbols(symbols: &[i64], loc: &[f32], z_shape: [usize; 4]) -> Vec<i64> {
    let [n, c, h, w] = z_shape;
    let plane = h * w;
    let mut out = Vec::with_capacity(symbols.len());
    for b in 0..n {
        for ch in 0..c {
            let center = (loc[ch] as f64).round() as i64;
            for i in 0..plane {
                out.push(symbols[(b * c + ch) * plane + i] - center);
            }
        }
    }
    out
}

pub fn uncenter_z_symbols(centered: &[i64], loc: &[f32], z_shape: [usize; 4]) -> Vec<i64> {
    let [n, c, h, w] = z_shape;
    let plane = h * w;
    let mut out = Vec::with_capacity(centered.len());
    for b in 0..n {
        for ch in 0..c {
            let center = (loc[ch] as f64).round() as i64;
            for i in 0..plane {
                out.push(centered[(b * c + ch) * plane + i] + center);
            }
        }
    }
    out
}
