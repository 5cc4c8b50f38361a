//! Spike-and-slab prior over decoder-parameter updates, the fixed quantization
//! grid with tail clipping, and the integer PMF tables consumed by the range
//! coder.
//!
//! The update prior is a two-component zero-mean Gaussian mixture: a wide slab
//! that prices genuine updates and a narrow spike that makes zero updates
//! nearly free. Updates are quantized onto a fixed grid of odd bin count so
//! zero has its own center bin; the grid is the smallest one covering all but
//! an `epsilon` sliver of prior mass, and the two extreme bins absorb the
//! clipped tails.

use crate::tensor::{Tensor, TensorError};
use statrs::function::erf::erf;

/// Total frequency of every coder PMF. 16-bit so `range/total` stays exact in
/// the 32-bit range coder.
pub const CODER_TOTAL: u32 = 1 << 16;

const INV_SQRT_2PI: f64 = 0.3989422804014327;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64, sigma: f64) -> f64 {
    (INV_SQRT_2PI / sigma) * (-0.5 * (x / sigma) * (x / sigma)).exp()
}

/// Two-component zero-mean Gaussian mixture: wide slab of std `sigma`, narrow
/// spike of std `s`, spike weighted `alpha` times the slab.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpikeSlabPrior {
    pub sigma: f64,
    pub s: f64,
    pub alpha: f64,
}

impl SpikeSlabPrior {
    pub fn new(sigma: f64, s: f64, alpha: f64) -> SpikeSlabPrior {
        assert!(0.0 < s && s < sigma, "need 0 < s < sigma, got s={s}, sigma={sigma}");
        assert!(alpha > 0.0, "need alpha > 0, got {alpha}");
        SpikeSlabPrior { sigma, s, alpha }
    }

    /// Mixture density at `delta`.
    pub fn density(&self, delta: f64) -> f64 {
        (normal_pdf(delta, self.sigma) + self.alpha * normal_pdf(delta, self.s))
            / (1.0 + self.alpha)
    }

    /// Mixture CDF at `x`.
    pub fn cdf(&self, x: f64) -> f64 {
        (normal_cdf(x / self.sigma) + self.alpha * normal_cdf(x / self.s)) / (1.0 + self.alpha)
    }

    /// Two-sided mass on `[-h, h]`.
    pub fn central_mass(&self, h: f64) -> f64 {
        self.cdf(h) - self.cdf(-h)
    }
}

/// Fixed quantization grid for updates: odd `n_bins` bins of width `t`
/// centered on multiples of `t`, covering at least `1 - epsilon` of the prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateQuantGrid {
    pub t: f64,
    pub epsilon: f64,
    pub n_bins: usize,
}

impl UpdateQuantGrid {
    /// Largest symbol magnitude, `(n_bins - 1) / 2`.
    pub fn max_symbol(&self) -> i64 {
        (self.n_bins as i64 - 1) / 2
    }

    /// Half-width of the covered interval, `n_bins * t / 2`.
    pub fn half_width(&self) -> f64 {
        self.n_bins as f64 * self.t / 2.0
    }
}

/// Smallest odd bin count whose covered interval holds mass `>= 1 - epsilon`.
pub fn build_update_grid(prior: &SpikeSlabPrior, t: f64, epsilon: f64) -> UpdateQuantGrid {
    assert!(t > 0.0, "bin width must be positive, got {t}");
    assert!(0.0 < epsilon && epsilon < 1.0, "epsilon must be in (0, 1), got {epsilon}");
    let target = 1.0 - epsilon;
    let mass_at = |n_bins: u64| prior.central_mass(n_bins as f64 * t / 2.0);
    if mass_at(1) >= target {
        return UpdateQuantGrid { t, epsilon, n_bins: 1 };
    }
    // Bracket by doubling over odd counts, then bisect on the odd index
    // m where n_bins = 2m + 1 (mass is monotone in the half-width).
    let mut hi_m: u64 = 1;
    while mass_at(2 * hi_m + 1) < target {
        hi_m *= 2;
    }
    let mut lo_m: u64 = hi_m / 2; // known insufficient (or 0 for the 1-bin case)
    while hi_m - lo_m > 1 {
        let mid = (lo_m + hi_m) / 2;
        if mass_at(2 * mid + 1) >= target {
            hi_m = mid;
        } else {
            lo_m = mid;
        }
    }
    UpdateQuantGrid { t, epsilon, n_bins: (2 * hi_m + 1) as usize }
}

/// Integer-frequency PMF over `len` symbols summing exactly to [`CODER_TOTAL`].
/// Every symbol keeps frequency at least 1 so it stays codable.
#[derive(Clone, Debug, PartialEq)]
pub struct PmfTable {
    freqs: Vec<u32>,
    /// Exclusive prefix sums plus a final total entry; `cum.len() == len + 1`.
    cum: Vec<u32>,
}

impl PmfTable {
    /// Quantizes real-valued masses to integer frequencies: floor-at-1 for
    /// every symbol, then largest-remainder apportionment of what is left.
    pub fn from_masses(masses: &[f64]) -> PmfTable {
        let len = masses.len();
        assert!(len >= 1, "PMF needs at least one symbol");
        assert!(
            (len as u32) <= CODER_TOTAL,
            "too many symbols ({len}) for coder total {CODER_TOTAL}"
        );
        let sum: f64 = masses.iter().sum();
        assert!(sum > 0.0 && sum.is_finite(), "masses must sum to a positive finite value");
        let budget = CODER_TOTAL - len as u32; // 1 reserved per symbol up front
        let mut freqs = vec![1u32; len];
        // Ideal extra share per symbol, split into floor + remainder.
        let mut assigned: u32 = 0;
        let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(len);
        for (i, &m) in masses.iter().enumerate() {
            let ideal = (m.max(0.0) / sum) * budget as f64;
            let fl = ideal.floor() as u32;
            freqs[i] += fl;
            assigned += fl;
            remainders.push((ideal - fl as f64, i));
        }
        // Hand out the remaining units to the largest remainders; ties break
        // on the lower index for determinism.
        remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut left = budget - assigned;
        let mut ri = 0;
        while left > 0 {
            freqs[remainders[ri % len].1] += 1;
            ri += 1;
            left -= 1;
        }
        PmfTable::from_freqs(freqs)
    }

    /// Builds directly from integer frequencies; they must already sum to the
    /// coder total with no zeros.
    pub fn from_freqs(freqs: Vec<u32>) -> PmfTable {
        assert!(freqs.iter().all(|&f| f >= 1), "zero-frequency symbol");
        let total: u64 = freqs.iter().map(|&f| f as u64).sum();
        assert_eq!(total, CODER_TOTAL as u64, "frequencies must sum to {CODER_TOTAL}");
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        for &f in &freqs {
            cum.push(acc);
            acc += f;
        }
        cum.push(acc);
        PmfTable { freqs, cum }
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn freq(&self, symbol: usize) -> u32 {
        self.freqs[symbol]
    }

    /// Exclusive cumulative frequency below `symbol`.
    pub fn cum_low(&self, symbol: usize) -> u32 {
        self.cum[symbol]
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    /// Symbol whose cumulative span contains `target` (< CODER_TOTAL).
    pub fn lookup(&self, target: u32) -> usize {
        debug_assert!(target < CODER_TOTAL);
        // cum is sorted; partition_point finds the first cum[i+1] > target.
        self.cum[1..].partition_point(|&c| c <= target)
    }

    /// Ideal code length of `symbol` in bits.
    pub fn bits(&self, symbol: usize) -> f64 {
        -((self.freqs[symbol] as f64 / CODER_TOTAL as f64).log2())
    }
}

/// Per-bin masses of the update prior on the grid, tails absorbed into the
/// extreme bins, quantized to coder precision. Symbol index `i` stands for
/// grid position `i - max_symbol`.
pub fn spike_slab_bin_pmf(grid: &UpdateQuantGrid, prior: &SpikeSlabPrior) -> PmfTable {
    let k_max = grid.max_symbol();
    let mut masses = Vec::with_capacity(grid.n_bins);
    for k in -k_max..=k_max {
        let center = k as f64 * grid.t;
        let lo = if k == -k_max { f64::NEG_INFINITY } else { center - grid.t / 2.0 };
        let hi = if k == k_max { f64::INFINITY } else { center + grid.t / 2.0 };
        let lo_cdf = if lo.is_finite() { prior.cdf(lo) } else { 0.0 };
        let hi_cdf = if hi.is_finite() { prior.cdf(hi) } else { 1.0 };
        masses.push(hi_cdf - lo_cdf);
    }
    PmfTable::from_masses(&masses)
}

/// Raw (real-valued) per-bin masses before coder quantization, same indexing
/// as [`spike_slab_bin_pmf`].
pub fn spike_slab_bin_masses(grid: &UpdateQuantGrid, prior: &SpikeSlabPrior) -> Vec<f64> {
    let k_max = grid.max_symbol();
    (-k_max..=k_max)
        .map(|k| {
            let center = k as f64 * grid.t;
            let lo = if k == -k_max { 0.0 } else { prior.cdf(center - grid.t / 2.0) };
            let hi = if k == k_max { 1.0 } else { prior.cdf(center + grid.t / 2.0) };
            hi - lo
        })
        .collect()
}

/// `clamp(round(delta / t), -k_max, k_max)` per element.
pub fn quantize_updates(delta: &[f32], grid: &UpdateQuantGrid) -> Vec<i64> {
    let k_max = grid.max_symbol();
    delta
        .iter()
        .map(|&d| {
            let k = (d as f64 / grid.t).round() as i64;
            k.clamp(-k_max, k_max)
        })
        .collect()
}

/// Inverse of [`quantize_updates`]: symbol times bin width.
pub fn dequantize_updates(symbols: &[i64], grid: &UpdateQuantGrid) -> Vec<f32> {
    symbols.iter().map(|&k| (k as f64 * grid.t) as f32).collect()
}

/// Discretized Gaussian bin mass `Phi((k + 1/2 - mu)/sigma) - Phi((k - 1/2 - mu)/sigma)`.
pub fn gaussian_bin_pmf(mu: f64, sigma: f64, k: i64) -> f64 {
    let a = (k as f64 + 0.5 - mu) / sigma;
    let b = (k as f64 - 0.5 - mu) / sigma;
    normal_cdf(a) - normal_cdf(b)
}

/// Discretized logistic bin mass with location `loc` and scale `scale`.
pub fn logistic_bin_pmf(loc: f64, scale: f64, k: i64) -> f64 {
    let cdf = |x: f64| 1.0 / (1.0 + (-x).exp());
    cdf((k as f64 + 0.5 - loc) / scale) - cdf((k as f64 - 0.5 - loc) / scale)
}

/// Differentiable `sum_j -ln(density(delta_j))` over the unquantized updates.
/// Returns a scalar tensor wired into `delta`'s graph.
pub fn update_rate_term(delta: &Tensor, prior: &SpikeSlabPrior) -> Result<Tensor, TensorError> {
    let p = *prior;
    let n = delta.numel();
    let mut total = 0.0f64;
    let mut grads = vec![0.0f32; n];
    {
        let d = delta.data();
        for i in 0..n {
            let x = d[i] as f64;
            let slab = normal_pdf(x, p.sigma);
            let spike = normal_pdf(x, p.s);
            let dens = (slab + p.alpha * spike) / (1.0 + p.alpha);
            if !(dens > 0.0 && dens.is_finite()) {
                return Err(TensorError::NonFinite("update_rate_term".to_string()));
            }
            total -= dens.ln();
            // d(-ln dens)/dx = -dens'/dens with dens' = (slab' + a spike')/(1+a)
            // and N'(x; s) = -x/s^2 N(x; s).
            let dprime =
                (-x / (p.sigma * p.sigma) * slab - p.alpha * x / (p.s * p.s) * spike)
                    / (1.0 + p.alpha);
            grads[i] = (-dprime / dens) as f32;
        }
    }
    Ok(Tensor::from_op(
        [1, 1, 1, 1],
        vec![total as f32],
        vec![delta.clone()],
        Box::new(move |gout, parents| {
            let g = gout[0];
            let scaled: Vec<f32> = grads.iter().map(|&gi| gi * g).collect();
            parents[0].accumulate_grad(&scaled);
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn paper_prior() -> SpikeSlabPrior {
        SpikeSlabPrior::new(0.05, 0.001 / 6.0, 100.0)
    }

    #[test]
    fn density_at_zero() {
        // (1/(1+a)) * (phi(0; 0.05) + 100 * phi(0; 1/6000)).
        let d = paper_prior().density(0.0);
        assert!((d - 2369.06).abs() < 1.0, "density(0) = {d}");
    }

    #[test]
    fn density_is_even() {
        let p = paper_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x: f64 = rng.gen_range(-0.2..0.2);
            assert_eq!(p.density(x), p.density(-x));
        }
    }

    #[test]
    fn density_integrates_to_one() {
        // Simpson quadrature oracle, dense near the spike, coarse in the slab.
        let p = paper_prior();
        let simpson = |a: f64, b: f64, n: usize| -> f64 {
            let h = (b - a) / n as f64;
            let mut acc = p.density(a) + p.density(b);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * p.density(a + i as f64 * h);
            }
            acc * h / 3.0
        };
        let mass = simpson(-0.002, 0.002, 40_000) + 2.0 * simpson(0.002, 1.0, 40_000);
        assert!((mass - 1.0).abs() < 1e-6, "integral = {mass}");
    }

    #[test]
    fn grid_matches_cdf_bisection_oracle() {
        // Independent closed-form oracle: with the spike fully inside any
        // plausible grid, mass(h) = (2 Phi(h/sigma) - 1 + alpha)/(1 + alpha),
        // so the threshold half-width solves Phi(h/sigma) = 1 - 101 * eps / 2
        // rescaled: 2 Phi - 1 = 1 - 101 eps, eps = 2^-8.
        let p = paper_prior();
        let grid = build_update_grid(&p, 0.001, 2f64.powi(-8));
        assert_eq!(grid.n_bins % 2, 1);
        assert!(p.central_mass(grid.half_width()) >= 1.0 - grid.epsilon);
        // One grid step smaller must fall short.
        let shrunk = (grid.n_bins - 2) as f64 * grid.t / 2.0;
        assert!(p.central_mass(shrunk) < 1.0 - grid.epsilon);
        assert_eq!(grid.n_bins, 87);
        assert_eq!(grid.max_symbol(), 43);
    }

    #[test]
    fn grid_epsilon_near_one_is_single_bin() {
        let grid = build_update_grid(&paper_prior(), 0.001, 0.999_999);
        assert_eq!(grid.n_bins, 1);
    }

    #[test]
    fn center_bin_mass_and_bits() {
        let p = paper_prior();
        let grid = build_update_grid(&p, 0.001, 2f64.powi(-8));
        let masses = spike_slab_bin_masses(&grid, &p);
        let center = masses[grid.max_symbol() as usize];
        assert!((center - 0.9875).abs() < 5e-4, "center mass {center}");
        let bits = -center.log2();
        assert!((bits - 0.0182).abs() < 5e-4, "center bits {bits}");
    }

    #[test]
    fn bin_pmf_symmetry_and_tail_absorption() {
        let p = paper_prior();
        let grid = build_update_grid(&p, 0.001, 2f64.powi(-8));
        let masses = spike_slab_bin_masses(&grid, &p);
        let n = masses.len();
        for i in 0..n / 2 {
            assert!((masses[i] - masses[n - 1 - i]).abs() < 1e-15);
        }
        let total: f64 = masses.iter().sum();
        assert!((total - 1.0).abs() < 1e-12, "masses sum {total}");
        // Extreme bin holds strictly more than the plain bin integral would.
        let k = grid.max_symbol();
        let plain = p.cdf(k as f64 * grid.t + grid.t / 2.0) - p.cdf(k as f64 * grid.t - grid.t / 2.0);
        assert!(masses[n - 1] > plain);
    }

    #[test]
    fn pmf_table_exact_normalization() {
        let p = paper_prior();
        let grid = build_update_grid(&p, 0.001, 2f64.powi(-8));
        let table = spike_slab_bin_pmf(&grid, &p);
        let total: u64 = table.freqs().iter().map(|&f| f as u64).sum();
        assert_eq!(total, CODER_TOTAL as u64);
        assert!(table.freqs().iter().all(|&f| f >= 1));
        assert_eq!(table.len(), grid.n_bins);
    }

    #[test]
    fn pmf_table_lookup_inverts_cumulative() {
        let table = PmfTable::from_masses(&[0.5, 0.25, 0.2, 0.05]);
        for s in 0..table.len() {
            assert_eq!(table.lookup(table.cum_low(s)), s);
            assert_eq!(table.lookup(table.cum_low(s) + table.freq(s) - 1), s);
        }
    }

    #[test]
    fn quantize_basics() {
        let p = paper_prior();
        let grid = build_update_grid(&p, 0.001, 2f64.powi(-8));
        assert_eq!(quantize_updates(&[0.0], &grid), vec![0]);
        // Inside the grid, reconstruction error is at most t/2.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let deltas: Vec<f32> = (0..1000)
            .map(|_| rng.gen_range(-(grid.half_width() as f32)..grid.half_width() as f32))
            .filter(|d| (d.abs() as f64) < grid.max_symbol() as f64 * grid.t + grid.t / 2.0)
            .collect();
        let syms = quantize_updates(&deltas, &grid);
        let deq = dequantize_updates(&syms, &grid);
        for (d, q) in deltas.iter().zip(deq.iter()) {
            assert!((d - q).abs() as f64 <= grid.t / 2.0 + 1e-9);
        }
        // Far outside the grid clips to the extreme symbol.
        let far = (10.0 * grid.half_width()) as f32;
        assert_eq!(quantize_updates(&[far, -far], &grid), vec![grid.max_symbol(), -grid.max_symbol()]);
        // Idempotent dequantize-quantize.
        let again = quantize_updates(&deq, &grid);
        assert_eq!(again, syms);
    }

    #[test]
    fn update_rate_closed_form_at_zero() {
        let p = paper_prior();
        let m = 17;
        let delta = Tensor::param([1, 1, 1, m], vec![0.0; m]);
        let r = update_rate_term(&delta, &p).unwrap();
        let expect = m as f64 * -(p.density(0.0).ln());
        assert!((r.item() as f64 - expect).abs() < 1e-3 * expect.abs());
    }

    #[test]
    fn update_rate_gradients_match_finite_differences() {
        let p = paper_prior();
        let delta = Tensor::param([1, 1, 1, 5], vec![0.01, -0.003, 0.0005, 0.07, -0.02]);
        let loss = || update_rate_term(&delta, &p).unwrap();
        let err = gradcheck::max_rel_error(&[("delta", &delta)], &loss, 1e-5);
        assert!(err < 1e-2, "rel err {err}");
    }

    #[test]
    fn update_rate_grows_with_magnitude() {
        let p = paper_prior();
        let r = |v: f32| {
            update_rate_term(&Tensor::new([1, 1, 1, 1], vec![v]), &p).unwrap().item()
        };
        let base = r(0.0);
        for v in [0.001f32, 0.01, 0.02, 0.05, 0.1] {
            assert!(r(v) > base);
        }
        assert!(r(0.05) > r(0.01));
    }

    #[test]
    fn gaussian_bin_pmf_sums_to_one() {
        for &(mu, sigma) in &[(0.0, 0.11), (0.3, 1.0), (-2.5, 10.0), (7.0, 3.3)] {
            let total: f64 = (-1000..=1000).map(|k| gaussian_bin_pmf(mu, sigma, k)).sum();
            assert!((total - 1.0).abs() < 1e-9, "mu {mu} sigma {sigma}: {total}");
        }
    }

    #[test]
    fn gaussian_bin_pmf_symmetry_about_mean() {
        let p0 = gaussian_bin_pmf(0.5, 2.0, 0);
        let p1 = gaussian_bin_pmf(0.5, 2.0, 1);
        assert!((p0 - p1).abs() < 1e-15);
        // Flat limit: mass of any unit bin approaches width / (sigma sqrt(2 pi)).
        let flat = gaussian_bin_pmf(0.0, 1000.0, 0);
        assert!((flat - 1.0 / (1000.0 * (2.0 * std::f64::consts::PI).sqrt())).abs() < 1e-9);
    }

    #[test]
    fn logistic_bin_pmf_sums_to_one() {
        let total: f64 = (-2000..=2000).map(|k| logistic_bin_pmf(0.7, 1.3, k)).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn spike_slab_beats_single_gaussian_on_sparse_updates() {
        // Cross-entropy of a mostly-zero symbol stream under the spike-slab
        // table vs a slab-only Gaussian discretized on the same grid.
        let p = paper_prior();
        let grid = build_update_grid(&p, 0.001, 2f64.powi(-8));
        let mix = spike_slab_bin_pmf(&grid, &p);
        let slab_only = SpikeSlabPrior::new(p.sigma, p.sigma / 2.0, 1e-12);
        let gauss = spike_slab_bin_pmf(&grid, &slab_only);
        let k_max = grid.max_symbol();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let symbols: Vec<i64> = (0..10_000)
            .map(|_| {
                if rng.gen_bool(0.6) {
                    0
                } else {
                    rng.gen_range(-k_max..=k_max)
                }
            })
            .collect();
        let bits = |table: &PmfTable| -> f64 {
            symbols.iter().map(|&k| table.bits((k + k_max) as usize)).sum()
        };
        assert!(bits(&mix) < bits(&gauss), "{} vs {}", bits(&mix), bits(&gauss));
    }

    proptest::proptest! {
        #[test]
        fn every_finite_delta_maps_to_valid_symbol(d in -1000.0f32..1000.0) {
            let p = paper_prior();
            let grid = build_update_grid(&p, 0.001, 2f64.powi(-8));
            let s = quantize_updates(&[d], &grid)[0];
            proptest::prop_assert!(s.abs() <= grid.max_symbol());
            let deq = dequantize_updates(&[s], &grid);
            let s2 = quantize_updates(&deq, &grid)[0];
            proptest::prop_assert_eq!(s, s2);
        }

        #[test]
        fn pmf_from_random_masses_is_exact(ms in proptest::collection::vec(1e-6f64..1.0, 2..64)) {
            let table = PmfTable::from_masses(&ms);
            let total: u64 = table.freqs().iter().map(|&f| f as u64).sum();
            proptest::prop_assert_eq!(total, CODER_TOTAL as u64);
            proptest::prop_assert!(table.freqs().iter().all(|&f| f >= 1));
        }
    }
}
