//! Non-central chi-squared kernels.
//!
//! Both operations expand the non-central chi-squared law as a Poisson
//! mixture of central gamma densities,
//! `p(f) = sum_j Pois(j | lambda/2) Gam(f; d/2 + j, 2)`,
//! and evaluate the mixture over a window of Poisson indices centred on the
//! mode. Inside the window each regularized incomplete gamma run is evaluated
//! once at one end and advanced with a recurrence that only adds positive
//! quantities: `Q` upward in the shape, `P` downward.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Poisson mass that may be left outside the summation window.
pub const POISSON_TAIL_TOL: f64 = 1e-12;

/// Hard cap on series terms (window width and incomplete-gamma iterations).
pub const MAX_SERIES_TERMS: usize = 1_000_000;

const EPS: f64 = 1e-16;
const FPMIN: f64 = 1e-300;

/// Non-central chi-squared distribution with `dof` degrees of freedom and
/// non-centrality `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NcChiSq {
    dof: u32,
    noncentrality: f64,
}

impl NcChiSq {
    pub fn new(dof: u32, noncentrality: f64) -> Result<Self> {
        if dof == 0 {
            return Err(Error::InvalidParameter(
                "non-central chi-squared needs dof >= 1".into(),
            ));
        }
        if !(noncentrality >= 0.0) || !noncentrality.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-centrality must be finite and >= 0, got {noncentrality}"
            )));
        }
        Ok(Self { dof, noncentrality })
    }

    pub fn central(dof: u32) -> Result<Self> {
        Self::new(dof, 0.0)
    }

    pub fn dof(&self) -> u32 {
        self.dof
    }

    pub fn noncentrality(&self) -> f64 {
        self.noncentrality
    }

    fn half_dof(&self) -> f64 {
        0.5 * f64::from(self.dof)
    }
}

/// Index window `[lo, hi]` of a Poisson(mean) law holding at least
/// `1 - POISSON_TAIL_TOL` of the mass. `mass` is the total of the
/// renormalized window weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PoissonWindow {
    pub lo: usize,
    pub hi: usize,
    pub ln_weight_lo: f64,
    pub ln_weight_hi: f64,
    pub mass: f64,
    pub mean: f64,
}

#[cfg(test)]
fn ln_poisson(j: usize, mean: f64) -> f64 {
    if mean == 0.0 {
        return if j == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let jf = j as f64;
    jf * mean.ln() - mean - ln_gamma(jf + 1.0)
}

/// Expands from the mode until geometric bounds on both excluded tails sum
/// below `POISSON_TAIL_TOL` relative to the enclosed mass. The bounds are
/// ratios of weights, so they do not inherit the rounding of `ln Gamma` at
/// large indices; the returned weights are renormalized over the window.
pub(crate) fn poisson_window(mean: f64) -> Result<PoissonWindow> {
    if mean == 0.0 {
        return Ok(PoissonWindow {
            lo: 0,
            hi: 0,
            ln_weight_lo: 0.0,
            ln_weight_hi: 0.0,
            mass: 1.0,
            mean,
        });
    }
    let centre = mean.floor() as usize;
    // weights relative to the centre weight
    let mut lo = centre;
    let mut hi = centre;
    let mut mass = 1.0;
    let mut w_lo = 1.0;
    let mut w_hi = 1.0;
    let mut w_left = if centre > 0 { centre as f64 / mean } else { 0.0 };
    let mut w_right = mean / (centre as f64 + 1.0);
    let tail_bound = |lo: usize, hi: usize, w_left: f64, w_right: f64| {
        let left = if lo == 0 {
            0.0
        } else {
            let ratio = (lo as f64 - 1.0) / mean;
            if ratio < 1.0 {
                w_left / (1.0 - ratio)
            } else {
                f64::INFINITY
            }
        };
        let ratio = mean / (hi as f64 + 2.0);
        let right = if ratio < 1.0 {
            w_right / (1.0 - ratio)
        } else {
            f64::INFINITY
        };
        left + right
    };
    while tail_bound(lo, hi, w_left, w_right) >= POISSON_TAIL_TOL * mass {
        if hi - lo >= MAX_SERIES_TERMS {
            return Err(Error::NumericalFailure(format!(
                "Poisson window for mean {mean} exceeded {MAX_SERIES_TERMS} terms"
            )));
        }
        if lo > 0 && w_left >= w_right {
            mass += w_left;
            lo -= 1;
            w_lo = w_left;
            w_left = if lo > 0 { w_left * lo as f64 / mean } else { 0.0 };
        } else {
            mass += w_right;
            hi += 1;
            w_hi = w_right;
            w_right *= mean / (hi as f64 + 1.0);
        }
    }
    Ok(PoissonWindow {
        lo,
        hi,
        ln_weight_lo: w_lo.ln() - mass.ln(),
        ln_weight_hi: w_hi.ln() - mass.ln(),
        mass: 1.0,
        mean,
    })
}

/// `(ln P(a, x), ln Q(a, x))` for the regularized incomplete gamma functions.
///
/// Series for `x < a + 1`, Lentz continued fraction otherwise; the
/// complement is taken with `ln_1p` on the side where it is not small.
pub fn ln_gamma_regularized(a: f64, x: f64) -> Result<(f64, f64)> {
    if !(a > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "incomplete gamma shape must be > 0, got {a}"
        )));
    }
    if x <= 0.0 {
        return Ok((f64::NEG_INFINITY, 0.0));
    }
    if x < a + 1.0 {
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        let mut converged = false;
        for _ in 0..MAX_SERIES_TERMS {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * EPS {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NumericalFailure(format!(
                "incomplete gamma series did not converge for a={a}, x={x}"
            )));
        }
        let ln_p = (sum.ln() - x + a * x.ln() - ln_gamma(a)).min(0.0);
        Ok((ln_p, (-ln_p.exp()).ln_1p()))
    } else {
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / FPMIN;
        let mut d = 1.0 / b;
        let mut h = d;
        let mut converged = false;
        for i in 1..MAX_SERIES_TERMS {
            let fi = i as f64;
            let an = -fi * (fi - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < FPMIN {
                d = FPMIN;
            }
            c = b + an / c;
            if c.abs() < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NumericalFailure(format!(
                "incomplete gamma continued fraction did not converge for a={a}, x={x}"
            )));
        }
        let ln_q = (-x + a * x.ln() - ln_gamma(a) + h.ln()).min(0.0);
        Ok(((-ln_q.exp()).ln_1p(), ln_q))
    }
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn lower_gamma_regularized(a: f64, x: f64) -> Result<f64> {
    Ok(ln_gamma_regularized(a, x)?.0.exp())
}

/// `ln_scale` bookkeeping for a positive running term that may leave the
/// representable range: the true value is `term * exp(ln_scale)`.
struct ScaledTerm {
    term: f64,
    ln_scale: f64,
}

impl ScaledTerm {
    const LIMIT: f64 = 690.0;

    fn from_ln(ln_value: f64) -> Self {
        let mut t = Self {
            term: 1.0,
            ln_scale: ln_value,
        };
        t.settle();
        t
    }

    fn settle(&mut self) {
        if self.ln_scale != 0.0 {
            self.ln_scale += self.term.ln();
            self.term = 1.0;
            if self.ln_scale.abs() < Self::LIMIT {
                self.term = self.ln_scale.exp();
                self.ln_scale = 0.0;
            }
        } else if self.term > 0.0 && self.term < 1e-290 {
            self.ln_scale = self.term.ln();
            self.term = 1.0;
        }
    }

    fn value(&self) -> f64 {
        if self.ln_scale == 0.0 {
            self.term
        } else {
            (self.term.ln() + self.ln_scale).exp()
        }
    }

    fn scale(&mut self, factor: f64) {
        self.term *= factor;
        self.settle();
    }
}

/// `exp(ln_prefactor) * sum_j w_j decay^(j - lo) Q(a_j, u)` over the window,
/// `a_j = a_lo + j - lo`, walking upward with
/// `Q(a + 1, u) = Q(a, u) + u^a e^{-u} / Gamma(a + 1)`.
fn upper_mixture_sum(
    win: &PoissonWindow,
    a_lo: f64,
    u: f64,
    ln_prefactor: f64,
    decay: f64,
) -> Result<f64> {
    if u <= 0.0 {
        // Q = 1 throughout
        let mut t = ScaledTerm::from_ln(win.ln_weight_lo + ln_prefactor);
        let mut sum = 0.0;
        for j in win.lo..=win.hi {
            sum += t.value();
            t.scale(win.mean / (j as f64 + 1.0) * decay);
        }
        return Ok(sum);
    }
    let (_, ln_q) = ln_gamma_regularized(a_lo, u)?;
    let ln_u = u.ln();
    // ratio = u^a e^{-u} / (Gamma(a + 1) Q(a, u))
    let mut ratio = (a_lo * ln_u - u - ln_gamma(a_lo + 1.0) - ln_q).exp();
    let mut a = a_lo;
    let mut t = ScaledTerm::from_ln(win.ln_weight_lo + ln_prefactor + ln_q);
    let mut sum = 0.0;
    for j in win.lo..=win.hi {
        sum += t.value();
        if j == win.hi {
            break;
        }
        let q_step = 1.0 + ratio;
        ratio *= u / (a + 1.0) / q_step;
        a += 1.0;
        t.scale(win.mean / (j as f64 + 1.0) * decay * q_step);
    }
    Ok(sum)
}

/// `sum_j w_j P(a_j, u)` over the window, walking downward from the top
/// with `P(a - 1, u) = P(a, u) + u^(a-1) e^{-u} / Gamma(a)`.
fn lower_mixture_sum(win: &PoissonWindow, a_hi: f64, u: f64) -> Result<f64> {
    if u <= 0.0 {
        return Ok(0.0);
    }
    let (ln_p, _) = ln_gamma_regularized(a_hi, u)?;
    let ln_u = u.ln();
    // ratio = u^(a-1) e^{-u} / (Gamma(a) P(a, u))
    let mut ratio = ((a_hi - 1.0) * ln_u - u - ln_gamma(a_hi) - ln_p).exp();
    let mut a = a_hi;
    let mut t = ScaledTerm::from_ln(win.ln_weight_hi + ln_p);
    let mut sum = 0.0;
    let mut j = win.hi;
    loop {
        sum += t.value();
        if j == win.lo {
            break;
        }
        let p_step = 1.0 + ratio;
        // next ratio: u^(a-2) e^{-u} / (Gamma(a-1) P(a-1, u))
        ratio *= (a - 1.0) / u / p_step;
        a -= 1.0;
        t.scale(j as f64 / win.mean * p_step);
        j -= 1;
    }
    Ok(sum)
}

/// `P(f <= x)` for `f ~ NcChiSq`.
pub fn ncchisq_cdf(dist: &NcChiSq, x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::InvalidParameter("ncchisq_cdf at NaN".into()));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x == f64::INFINITY {
        return Ok(1.0);
    }
    let win = poisson_window(0.5 * dist.noncentrality)?;
    Ok(mixture_cdf(&win, dist, x)?.clamp(0.0, 1.0))
}

/// Sums whichever tail is the smaller one, so neither end of the
/// distribution loses relative accuracy to cancellation.
fn mixture_cdf(win: &PoissonWindow, dist: &NcChiSq, x: f64) -> Result<f64> {
    if x <= 0.0 {
        return Ok(0.0);
    }
    let a_lo = dist.half_dof() + win.lo as f64;
    if x < dist.dof as f64 + dist.noncentrality {
        let a_hi = a_lo + (win.hi - win.lo) as f64;
        lower_mixture_sum(win, a_hi, 0.5 * x)
    } else {
        Ok(win.mass - upper_mixture_sum(win, a_lo, 0.5 * x, 0.0, 1.0)?)
    }
}

/// `E_f[min(1, exp(-rate (f - threshold)))]` for `f ~ NcChiSq`.
///
/// Below the threshold the integrand is one, giving the non-central CDF.
/// Above it the tilted density `e^{-rate f} Gam(f; k, 2)` is itself a scaled
/// gamma density, `(2 rate + 1)^{-k} Gam(f; k, 2 / (2 rate + 1))`, so each
/// Poisson component contributes an upper incomplete gamma value.
pub fn tilted_tail_expectation(dist: &NcChiSq, threshold: f64, rate: f64) -> Result<f64> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "tilt rate must be finite and >= 0, got {rate}"
        )));
    }
    if !threshold.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "tilt threshold must be finite, got {threshold}"
        )));
    }
    if rate == 0.0 {
        return Ok(1.0);
    }
    let win = poisson_window(0.5 * dist.noncentrality)?;
    let a_lo = dist.half_dof() + win.lo as f64;
    let spread = 2.0 * rate + 1.0;

    let below = mixture_cdf(&win, dist, threshold)?;
    let above = upper_mixture_sum(
        &win,
        a_lo,
        0.5 * threshold * spread,
        rate * threshold - a_lo * spread.ln(),
        1.0 / spread,
    )?;

    let value = below + above;
    if !value.is_finite() {
        return Err(Error::NumericalFailure(format!(
            "tilted expectation non-finite (dof={}, lambda={}, t={threshold}, rate={rate})",
            dist.dof, dist.noncentrality
        )));
    }
    Ok(value.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Naive Poisson-gamma sum from j = 0, with each gamma CDF evaluated
    /// independently, run until the remaining Poisson mass is negligible.
    fn brute_force_cdf(dof: u32, lambda: f64, x: f64) -> f64 {
        let mean = lambda / 2.0;
        let mut total = 0.0;
        let mut seen = 0.0;
        for j in 0..10_000usize {
            let w = ln_poisson(j, mean).exp();
            seen += w;
            total += w * lower_gamma_regularized(f64::from(dof) / 2.0 + j as f64, x / 2.0).unwrap();
            if j as f64 > mean && 1.0 - seen < 1e-17 {
                break;
            }
        }
        total
    }

    /// Composite Simpson on [lo, hi].
    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
        let n = intervals + intervals % 2;
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            let x = lo + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NcChiSq::new(0, 1.0).is_err());
        assert!(NcChiSq::new(3, -0.1).is_err());
        assert!(NcChiSq::new(3, f64::NAN).is_err());
        let d = NcChiSq::new(3, 1.0).unwrap();
        assert!(tilted_tail_expectation(&d, 1.0, -1.0).is_err());
        assert!(tilted_tail_expectation(&d, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn central_two_dof_closed_form() {
        let d = NcChiSq::central(2).unwrap();
        for i in 0..=400 {
            let x = i as f64 * 0.1;
            let got = ncchisq_cdf(&d, x).unwrap();
            let want = -(-x / 2.0).exp_m1();
            assert!((got - want).abs() < 1e-10, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn cdf_left_endpoint() {
        let d = NcChiSq::central(1).unwrap();
        assert_eq!(ncchisq_cdf(&d, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn cdf_matches_brute_force_and_monte_carlo() {
        let d = NcChiSq::new(5, 3.2).unwrap();
        let got = ncchisq_cdf(&d, 6.0).unwrap();
        let brute = brute_force_cdf(5, 3.2, 6.0);
        assert!((got - brute).abs() < 1e-12, "{got} vs {brute}");

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shift = 3.2f64.sqrt();
        let draws = 10_000_000usize;
        let mut hits = 0usize;
        for _ in 0..draws {
            let mut f = 0.0;
            for k in 0..5 {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = if k == 0 { z + shift } else { z };
                f += v * v;
            }
            if f <= 6.0 {
                hits += 1;
            }
        }
        let mc = hits as f64 / draws as f64;
        let se = (mc * (1.0 - mc) / draws as f64).sqrt();
        assert!((got - mc).abs() < 3.0 * se, "{got} vs MC {mc} (se {se})");

        // quadrature over the shifted coordinate, with the four central
        // coordinates in closed form: P(chi2_4 <= s) = 1 - e^{-s/2}(1 + s/2)
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let quad = simpson(
            |z| {
                let rest = 6.0 - (z + shift) * (z + shift);
                if rest > 0.0 {
                    phi(z) * (1.0 - (-rest / 2.0).exp() * (1.0 + rest / 2.0))
                } else {
                    0.0
                }
            },
            -shift - 6.0f64.sqrt(),
            -shift + 6.0f64.sqrt(),
            200_000,
        );
        assert!((got - quad).abs() < 1e-4, "{got} vs quadrature {quad}");
    }

    #[test]
    fn cdf_large_noncentrality() {
        // mean of ncchisq is d + lambda; CDF near the mean is roughly one half
        let d = NcChiSq::new(10, 4000.0).unwrap();
        let at_mean = ncchisq_cdf(&d, 4010.0).unwrap();
        assert!((at_mean - 0.5).abs() < 0.02, "{at_mean}");
        let brute = brute_force_cdf(10, 4000.0, 3900.0);
        let got = ncchisq_cdf(&d, 3900.0).unwrap();
        assert!((got - brute).abs() < 1e-10, "{got} vs {brute}");
    }

    #[test]
    fn poisson_window_tail_below_tolerance() {
        for &mean in &[0.0, 1e-3, 0.7, 5.0, 42.5, 1e3, 1e5] {
            let w = poisson_window(mean).unwrap();
            let inside: f64 = (w.lo..=w.hi).map(|j| ln_poisson(j, mean).exp()).sum();
            assert!(1.0 - inside < POISSON_TAIL_TOL * 10.0 || mean > 1e4, "mean {mean}");
            let lo_mass: f64 = (0..w.lo).map(|j| ln_poisson(j, mean).exp()).sum();
            assert!(lo_mass < POISSON_TAIL_TOL, "mean {mean}: lo {} mass {lo_mass:e}", w.lo);
            assert!(w.lo <= mean.floor() as usize && mean.floor() as usize <= w.hi);
        }
    }

    #[test]
    fn tilted_rate_zero_is_one() {
        let d = NcChiSq::new(7, 12.0).unwrap();
        for &t in &[-3.0, 0.0, 2.0, 100.0] {
            assert_eq!(tilted_tail_expectation(&d, t, 0.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn tilted_matches_quadrature_two_dof() {
        let d = NcChiSq::central(2).unwrap();
        let got = tilted_tail_expectation(&d, 0.0, 0.5).unwrap();
        let want = simpson(
            |f| (1.0f64).min((-0.5 * f).exp()) * 0.5 * (-f / 2.0).exp(),
            0.0,
            80.0,
            200_000,
        );
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        // closed form as a further pin: E[e^{-f/2}] = 1/2 for chi2_2
        assert!((got - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tilted_matches_quadrature_with_threshold() {
        // central chi2_4 density f e^{-f/2} / 4, threshold inside the support
        let d = NcChiSq::central(4).unwrap();
        let (t, rate) = (3.7, 0.8);
        let got = tilted_tail_expectation(&d, t, rate).unwrap();
        let want = simpson(
            |f| (1.0f64).min((-rate * (f - t)).exp()) * f * (-f / 2.0).exp() / 4.0,
            0.0,
            t,
            100_000,
        ) + simpson(
            |f| (-rate * (f - t)).exp() * f * (-f / 2.0).exp() / 4.0,
            t,
            t + 120.0,
            200_000,
        );
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn tilted_matches_monte_carlo() {
        let dof = 10;
        let lambda: f64 = 4.7;
        let (t, rate) = (3.3, 1.1);
        let d = NcChiSq::new(dof, lambda).unwrap();
        let got = tilted_tail_expectation(&d, t, rate).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shift = lambda.sqrt();
        let draws = 10_000_000usize;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let mut f = 0.0;
            for k in 0..dof {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = if k == 0 { z + shift } else { z };
                f += v * v;
            }
            let v = (1.0f64).min((-rate * (f - t)).exp());
            s += v;
            s2 += v * v;
        }
        let m = s / draws as f64;
        let se = ((s2 / draws as f64 - m * m) / draws as f64).sqrt();
        assert!((got - m).abs() < 3.0 * se, "{got} vs MC {m} (se {se})");
    }

    #[test]
    fn tilted_extreme_tail_stays_finite() {
        let d = NcChiSq::new(30, 900.0).unwrap();
        let v = tilted_tail_expectation(&d, 1100.0, 40.0).unwrap();
        let c = ncchisq_cdf(&d, 1100.0).unwrap();
        assert!(v >= c && v <= 1.0, "{v} {c}");
        // far below the bulk the tilted part is at most 1/(2 rate) of the local mass
        let v = tilted_tail_expectation(&d, 500.0, 40.0).unwrap();
        let c = ncchisq_cdf(&d, 500.0).unwrap();
        assert!(v >= c && v < 1e-6, "{v} {c}");
    }

    proptest! {
        #[test]
        fn cdf_nondecreasing(dof in 1u32..40, lambda in 0.0f64..200.0) {
            let d = NcChiSq::new(dof, lambda).unwrap();
            let mut prev = 0.0;
            let top = dof as f64 + lambda + 12.0 * (2.0 * (dof as f64 + 2.0 * lambda)).sqrt() + 20.0;
            for i in 0..200 {
                let x = i as f64 * top / 199.0;
                let c = ncchisq_cdf(&d, x).unwrap();
                prop_assert!(c >= prev - 1e-15, "x={} c={} prev={}", x, c, prev);
                prop_assert!((0.0..=1.0).contains(&c));
                prev = c;
            }
            prop_assert!(prev > 1.0 - 1e-9);
        }

        #[test]
        fn tilted_nonincreasing_in_rate(dof in 1u32..30, lambda in 0.0f64..80.0, t in 0.0f64..60.0) {
            let d = NcChiSq::new(dof, lambda).unwrap();
            let mut prev = 1.0;
            for i in 0..40 {
                let rate = i as f64 * 0.1;
                let v = tilted_tail_expectation(&d, t, rate).unwrap();
                prop_assert!(v <= prev + 1e-13, "rate={} v={} prev={}", rate, v, prev);
                prev = v;
            }
        }
    }
}
