//! Closed-form results for the batch-arrival PSJF queue, the processor
//! sharing baseline and the geometric occupancy percentile.
//!
//! Batches arrive as a Poisson process of rate `lambda`; each batch holds `B`
//! flows with i.i.d. sizes. A flow of size `x` is delayed only by flows of
//! original size below `x`, which form their own batch-arrival M/G/1 queue of
//! load `rho(x) = lambda E[B] m_1(x)`. The response of the tagged flow is a
//! residual busy period of that queue started by the work already present,
//! the smaller flows of its own batch, and `x` itself.

use crate::distributions::{batch_expectation, BatchWeight, BatchWidthLaw, Distribution};
use crate::error::{Error, Result};
use crate::quadrature::{self, Tolerance};

/// Relative tolerance of the outer (over flow size) integrals.
pub const OUTER_RTOL: f64 = 1e-8;
/// Survival level at which outer integrals stop; the rest is bounded analytically.
pub const OUTER_CUTOFF_SURVIVAL: f64 = 1e-12;

const OUTER_BREAKS: [f64; 6] = [0.5, 1e-2, 1e-4, 1e-6, 1e-9, OUTER_CUTOFF_SURVIVAL];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchModelParams {
    /// Batch arrival rate.
    pub lambda: f64,
    pub width: BatchWidthLaw,
    pub size: Distribution,
}

impl BatchModelParams {
    pub fn new(lambda: f64, width: BatchWidthLaw, size: Distribution) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!("arrival rate {lambda}")));
        }
        if size.is_atomic() {
            return Err(Error::AtomicDistribution(size.kind()));
        }
        let p = BatchModelParams {
            lambda,
            width,
            size,
        };
        let rho = p.load();
        if rho >= 1.0 {
            return Err(Error::Unstable(rho));
        }
        Ok(p)
    }

    /// Parameters whose arrival rate yields load `rho`.
    pub fn with_load(rho: f64, width: BatchWidthLaw, size: Distribution) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Unstable(rho));
        }
        Self::new(rho / (width.mean() * size.mean()), width, size)
    }

    pub fn load(&self) -> f64 {
        self.lambda * self.width.mean() * self.size.mean()
    }

    /// `E[S] = E[B] E[X]`, averaged over non-empty batches.
    pub fn mean_batch_size(&self) -> f64 {
        self.width.mean() * self.size.mean() / self.width.prob_nonempty()
    }
}

/// Every term of the conditional response time of a flow of size `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalTerms {
    pub x: f64,
    pub rho_x: f64,
    /// Expected work from smaller flows found on arrival.
    pub w_t: f64,
    /// Smaller own-batch work seen by an arbitrary flow.
    pub s_f: f64,
    /// Smaller own-batch work seen by the largest flow of its batch.
    pub s_b: f64,
    /// Density of the batch length.
    pub g: f64,
    /// Second moment of the per-batch work from flows smaller than `x`.
    pub m2_batch: f64,
    pub m1: f64,
    pub m2: f64,
}

impl ConditionalTerms {
    pub fn flow_response(&self) -> f64 {
        (self.w_t + self.s_f + self.x) / (1.0 - self.rho_x)
    }

    pub fn batch_response(&self) -> f64 {
        (self.w_t + self.s_b + self.x) / (1.0 - self.rho_x)
    }
}

/// `E[B(B-1)u^{B-2}] / E[B u^{B-1}]`, well defined as `u -> 0`.
fn own_batch_ratio(width: &BatchWidthLaw, u: f64) -> Result<f64> {
    if let BatchWidthLaw::Deterministic { width } = *width {
        return Ok(if u > 0.0 { (width as f64 - 1.0) / u } else { 0.0 });
    }
    let first = batch_expectation(width, BatchWeight::PgfFirst, u)?;
    if first <= 0.0 {
        return Ok(0.0);
    }
    Ok(batch_expectation(width, BatchWeight::PgfSecond, u)? / first)
}

struct WidthMoments {
    mean: f64,
    factorial: f64,
    second: f64,
}

fn width_moments(width: &BatchWidthLaw) -> Result<WidthMoments> {
    Ok(WidthMoments {
        mean: batch_expectation(width, BatchWeight::Mean, 1.0)?,
        factorial: batch_expectation(width, BatchWeight::Factorial, 1.0)?,
        second: batch_expectation(width, BatchWeight::SecondMoment, 1.0)?,
    })
}

fn terms_with(p: &BatchModelParams, bm: &WidthMoments, x: f64) -> Result<ConditionalTerms> {
    let (m1, m2) = p.size.truncated_moments(x)?;
    let cdf = p.size.cdf(x);
    let rho_x = p.lambda * bm.mean * m1;
    if rho_x >= 1.0 {
        return Err(Error::Unstable(rho_x));
    }
    let m2_batch = bm.factorial * m1 * m1 + bm.mean * m2;
    let w_t = p.lambda * m2_batch / (2.0 * (1.0 - rho_x));
    let s_f = (bm.second / bm.mean - 1.0) * m1;
    let s_b = own_batch_ratio(&p.width, cdf)? * m1;
    let g = if x > 0.0 {
        batch_expectation(&p.width, BatchWeight::PgfFirst, cdf)? * p.size.pdf(x)
    } else {
        0.0
    };
    Ok(ConditionalTerms {
        x,
        rho_x,
        w_t,
        s_f,
        s_b,
        g,
        m2_batch,
        m1,
        m2,
    })
}

pub fn conditional_terms(p: &BatchModelParams, x: f64) -> Result<ConditionalTerms> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::InvalidParameter(format!("work level {x}")));
    }
    terms_with(p, &width_moments(&p.width)?, x)
}

#[derive(Debug, Clone, Copy)]
enum Target {
    Flow,
    Batch,
}

fn outer_integral(p: &BatchModelParams, target: Target) -> Result<f64> {
    if p.size.is_atomic() {
        return Err(Error::AtomicDistribution(p.size.kind()));
    }
    let rho = p.load();
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    let bm = width_moments(&p.width)?;
    let failure = std::cell::RefCell::new(None);
    let eval = |x: f64| match terms_with(p, &bm, x) {
        Ok(t) => match target {
            Target::Flow => t.flow_response() * p.size.pdf(x),
            Target::Batch => t.batch_response() * t.g,
        },
        Err(e) => {
            failure.borrow_mut().get_or_insert(e);
            0.0
        }
    };

    let tol = Tolerance::relative(OUTER_RTOL);
    let mut total = 0.0;
    let mut lo = 0.0;
    for &s in &OUTER_BREAKS {
        let hi = p.size.upper_quantile(s);
        total += quadrature::integrate(eval, lo, hi, tol)?.value;
        lo = hi;
    }
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }

    // Past the cutoff, rho(x) <= rho and the own-batch terms are at most
    // their x -> infinity values; g is dominated by E[B] f.
    let x_hi = lo;
    let surv = p.size.survival(x_hi);
    let m1_hi = p.size.truncated_moment(1, x_hi)?;
    let upper_x_mass = (p.size.mean() - m1_hi).max(0.0);
    let w_inf = p.lambda * (bm.factorial * p.size.mean().powi(2) + bm.mean * p.size.raw_moment(2))
        / (2.0 * (1.0 - rho));
    let tail = match target {
        Target::Flow => {
            let s_inf = (bm.second / bm.mean - 1.0) * p.size.mean();
            ((w_inf + s_inf) * surv + upper_x_mass) / (1.0 - rho)
        }
        Target::Batch => {
            let s_inf = own_batch_ratio(&p.width, 1.0)? * p.size.mean();
            bm.mean * ((w_inf + s_inf) * surv + upper_x_mass) / (1.0 - rho)
        }
    };
    Ok(total + tail)
}

/// Mean flow completion time under per-flow PSJF.
pub fn psjf_mean_fct(p: &BatchModelParams) -> Result<f64> {
    outer_integral(p, Target::Flow)
}

/// Mean batch completion time under per-flow PSJF, over non-empty batches.
pub fn psjf_mean_bct(p: &BatchModelParams) -> Result<f64> {
    Ok(outer_integral(p, Target::Batch)? / p.width.prob_nonempty())
}

/// `E[BCT] / E[S]`.
pub fn psjf_normalized_bct(p: &BatchModelParams) -> Result<f64> {
    Ok(psjf_mean_bct(p)? / p.mean_batch_size())
}

/// Mean FCT of processor sharing normalized by the full-rate service time.
pub fn ps_open_mean_fct(rho: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Unstable(rho));
    }
    Ok(1.0 / (1.0 - rho))
}

/// `p`-th percentile of the geometric number of active flows at load `rho`.
pub fn active_count_percentile(rho: f64, p: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidParameter(format!("load {rho} must lie in (0, 1)")));
    }
    if !(p > 0.0 && p < 100.0) {
        return Err(Error::InvalidParameter(format!("percent {p} must lie in (0, 100)")));
    }
    Ok((1.0 - p / 100.0).ln() / rho.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weibull(shape: f64) -> Distribution {
        Distribution::weibull(shape, 1.0).unwrap()
    }

    #[test]
    fn singleton_batches_have_no_companions() {
        let p = BatchModelParams::with_load(
            0.6,
            BatchWidthLaw::deterministic(1).unwrap(),
            Distribution::exponential(1.0).unwrap(),
        )
        .unwrap();
        for &x in &[0.01, 0.5, 1.0, 3.0, 20.0] {
            let t = conditional_terms(&p, x).unwrap();
            assert_eq!(t.s_f, 0.0);
            assert_eq!(t.s_b, 0.0);
            assert!((t.g - p.size.pdf(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn terms_vanish_at_zero() {
        let p = BatchModelParams::with_load(
            0.8,
            BatchWidthLaw::geometric_from_one(10.0).unwrap(),
            weibull(0.4),
        )
        .unwrap();
        let t = conditional_terms(&p, 1e-12).unwrap();
        assert!(t.w_t < 1e-9 && t.rho_x < 1e-9, "{t:?}");
        let t0 = conditional_terms(&p, 0.0).unwrap();
        assert_eq!((t0.w_t, t0.rho_x), (0.0, 0.0));
    }

    #[test]
    fn corollary_terms_on_geometric_from_zero() {
        let beta = 100.0;
        for size in [weibull(3.5), weibull(0.4), Distribution::exponential(1.0).unwrap()] {
            let p = BatchModelParams::with_load(0.7, BatchWidthLaw::geometric_from_zero(beta).unwrap(), size)
                .unwrap();
            let x_hi = size.upper_quantile(1e-6);
            for k in 1..=100 {
                let x = x_hi * k as f64 / 100.0;
                let t = conditional_terms(&p, x).unwrap();
                let f = size.cdf(x);
                let s_f = 2.0 * beta * t.m1;
                let g = beta * size.pdf(x) / (1.0 + beta - beta * f).powi(2);
                let s_b = 2.0 * beta * t.m1 / (1.0 + beta - beta * f);
                let w_t = p.lambda * (2.0 * beta * beta * t.m1 * t.m1 + beta * t.m2) / (2.0 * (1.0 - t.rho_x));
                assert!((t.s_f - s_f).abs() <= 1e-10 * s_f.abs(), "s_f at {x}");
                assert!((t.g - g).abs() <= 1e-10 * g.abs(), "g at {x}");
                assert!((t.s_b - s_b).abs() <= 1e-10 * s_b.abs(), "s_b at {x}");
                assert!((t.w_t - w_t).abs() <= 1e-10 * w_t.abs(), "w_t at {x}");
            }
        }
    }

    #[test]
    fn empty_system_fct_is_mean_size() {
        let p = BatchModelParams::new(
            1e-12,
            BatchWidthLaw::deterministic(1).unwrap(),
            Distribution::exponential(2.0).unwrap(),
        )
        .unwrap();
        let v = psjf_mean_fct(&p).unwrap();
        assert!((v - 2.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn singleton_batches_bct_equals_fct() {
        for size in [weibull(3.5), weibull(0.4)] {
            let p = BatchModelParams::with_load(0.7, BatchWidthLaw::deterministic(1).unwrap(), size).unwrap();
            let f = psjf_mean_fct(&p).unwrap();
            let b = psjf_mean_bct(&p).unwrap();
            assert!((f - b).abs() < 1e-8 * f, "{f} {b}");
        }
    }

    #[test]
    fn bct_exceeds_fct_and_grows_with_load() {
        let widths = [
            BatchWidthLaw::geometric_from_one(100.0).unwrap(),
            BatchWidthLaw::geometric_from_one(5.0).unwrap(),
            BatchWidthLaw::deterministic(8).unwrap(),
            BatchWidthLaw::two_phase(5.0, 10.0).unwrap(),
        ];
        for width in widths {
            for size in [weibull(3.5), weibull(0.4), Distribution::exponential(1.0).unwrap()] {
                let mut last = 0.0;
                for &rho in &[0.2, 0.5, 0.8] {
                    let p = BatchModelParams::with_load(rho, width, size).unwrap();
                    let f = psjf_mean_fct(&p).unwrap();
                    let b = psjf_mean_bct(&p).unwrap();
                    // Size-biased sampling makes E[FCT] exceed E[BCT] when the
                    // width itself is highly variable.
                    if width.cv2() <= 1.0 {
                        assert!(b >= f, "{width:?} {size:?} {rho}: {b} < {f}");
                    }
                    assert!(b > last);
                    last = b;
                }
            }
        }
    }

    #[test]
    fn conditional_response_increases_with_size() {
        let p = BatchModelParams::with_load(0.8, BatchWidthLaw::geometric_from_one(100.0).unwrap(), weibull(0.4))
            .unwrap();
        let mut last = (0.0, 0.0);
        for k in 1..200 {
            let x = 0.05 * k as f64;
            let t = conditional_terms(&p, x).unwrap();
            let now = (t.flow_response(), t.batch_response());
            assert!(now.0 > last.0 && now.1 > last.1, "at {x}");
            last = now;
        }
    }

    #[test]
    fn finite_below_stability_boundary_and_diverging_near_it() {
        for size in [weibull(3.5), weibull(0.4)] {
            let width = BatchWidthLaw::geometric_from_one(100.0).unwrap();
            let mut last = 0.0;
            for &rho in &[0.9, 0.95, 0.99, 0.999] {
                let p = BatchModelParams::with_load(rho, width, size).unwrap();
                let b = psjf_mean_bct(&p).unwrap();
                assert!(b.is_finite() && b > last);
                last = b;
            }
            assert!(last > 20.0 * psjf_mean_bct(&BatchModelParams::with_load(0.5, width, size).unwrap()).unwrap());
        }
        assert!(matches!(
            BatchModelParams::with_load(1.0, BatchWidthLaw::deterministic(1).unwrap(), weibull(1.0)),
            Err(Error::Unstable(_))
        ));
    }

    #[test]
    fn atomic_sizes_rejected() {
        let r = BatchModelParams::new(
            0.1,
            BatchWidthLaw::deterministic(1).unwrap(),
            Distribution::deterministic(1.0).unwrap(),
        );
        assert!(matches!(r, Err(Error::AtomicDistribution(_))));
    }

    #[test]
    fn ps_baseline_values() {
        assert_eq!(ps_open_mean_fct(0.0).unwrap(), 1.0);
        assert!((ps_open_mean_fct(0.5).unwrap() - 2.0).abs() < 1e-15);
        assert!((ps_open_mean_fct(0.9).unwrap() - 10.0).abs() < 1e-12);
        assert!(ps_open_mean_fct(1.0).is_err());
    }

    #[test]
    fn occupancy_percentiles() {
        let a = active_count_percentile(0.9, 99.9).unwrap();
        assert!((a - 65.56).abs() < 0.005 && a < 66.0, "{a}");
        let b = active_count_percentile(0.5, 99.9).unwrap();
        assert!((b - 9.97).abs() < 0.005, "{b}");
        assert!(active_count_percentile(0.5, 1e-9).unwrap() < 1e-8);
        assert!(active_count_percentile(1.0, 50.0).is_err());
        assert!(active_count_percentile(0.5, 100.0).is_err());
    }
}
