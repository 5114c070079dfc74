//! Flow-size, interval and batch-width laws.
//!
//! [`Distribution`] covers the continuous (and one atomic) laws used for flow
//! sizes and inactivity intervals. [`BatchWidthLaw`] covers the discrete
//! number of flows per batch or per burst, together with the probability
//! generating function derivatives needed by the batch PSJF formulas.

use rand::Rng;
use rand_distr::{Distribution as _, Exp, Geometric, Weibull};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::quadrature::{self, Tolerance};

/// Relative tolerance for truncated moment quadrature.
pub const TRUNCATED_MOMENT_RTOL: f64 = 1e-10;

// Survival levels at which truncated-moment integrals are split. Mass past the
// last level is below double precision relevance for every supported law.
const SURVIVAL_BREAKS: [f64; 9] = [0.5, 1e-2, 1e-4, 1e-8, 1e-12, 1e-16, 1e-20, 1e-26, 1e-32];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Deterministic { value: f64 },
    Exponential { mean: f64 },
    Weibull { shape: f64, scale: f64 },
}

impl Distribution {
    pub fn deterministic(value: f64) -> Result<Self> {
        positive("deterministic value", value)?;
        Ok(Distribution::Deterministic { value })
    }

    pub fn exponential(mean: f64) -> Result<Self> {
        positive("exponential mean", mean)?;
        Ok(Distribution::Exponential { mean })
    }

    /// Weibull law with the given shape, scaled to have mean `mean`.
    pub fn weibull(shape: f64, mean: f64) -> Result<Self> {
        positive("weibull shape", shape)?;
        positive("weibull mean", mean)?;
        let scale = mean / gamma(1.0 + 1.0 / shape);
        positive("weibull scale", scale)?;
        Ok(Distribution::Weibull { shape, scale })
    }

    /// Weibull law with squared coefficient of variation `cv2` and mean `mean`.
    pub fn weibull_with_cv2(cv2: f64, mean: f64) -> Result<Self> {
        positive("weibull cv2", cv2)?;
        let (mut lo, mut hi) = (0.08_f64, 60.0_f64);
        if cv2 > weibull_cv2(lo) || cv2 < weibull_cv2(hi) {
            return Err(Error::InvalidParameter(format!(
                "weibull cv2 {cv2} outside supported range"
            )));
        }
        // cv2 is strictly decreasing in shape
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if weibull_cv2(mid) > cv2 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self::weibull((lo * hi).sqrt(), mean)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Distribution::Deterministic { .. } => "deterministic",
            Distribution::Exponential { .. } => "exponential",
            Distribution::Weibull { .. } => "weibull",
        }
    }

    pub fn is_atomic(&self) -> bool {
        matches!(self, Distribution::Deterministic { .. })
    }

    /// Returns a copy rescaled so that the mean is multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            Distribution::Deterministic { value } => Distribution::Deterministic {
                value: value * factor,
            },
            Distribution::Exponential { mean } => Distribution::Exponential {
                mean: mean * factor,
            },
            Distribution::Weibull { shape, scale } => Distribution::Weibull {
                shape,
                scale: scale * factor,
            },
        }
    }

    pub fn mean(&self) -> f64 {
        self.raw_moment(1)
    }

    /// `E[X^i]`.
    pub fn raw_moment(&self, i: u32) -> f64 {
        match *self {
            Distribution::Deterministic { value } => value.powi(i as i32),
            Distribution::Exponential { mean } => {
                (1..=i).map(f64::from).product::<f64>() * mean.powi(i as i32)
            }
            Distribution::Weibull { shape, scale } => {
                scale.powi(i as i32) * gamma(1.0 + f64::from(i) / shape)
            }
        }
    }

    pub fn cv2(&self) -> f64 {
        let m = self.mean();
        (self.raw_moment(2) / (m * m) - 1.0).max(0.0)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        1.0 - self.survival(x)
    }

    pub fn survival(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        match *self {
            Distribution::Deterministic { value } => {
                if x < value {
                    1.0
                } else {
                    0.0
                }
            }
            Distribution::Exponential { mean } => (-x / mean).exp(),
            Distribution::Weibull { shape, scale } => (-(x / scale).powf(shape)).exp(),
        }
    }

    /// Density; zero for the atomic law.
    pub fn pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match *self {
            Distribution::Deterministic { .. } => 0.0,
            Distribution::Exponential { mean } => (-x / mean).exp() / mean,
            Distribution::Weibull { shape, scale } => {
                let z = x / scale;
                let zk1 = z.powf(shape - 1.0);
                shape / scale * zk1 * (-(zk1 * z)).exp()
            }
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        self.upper_quantile(1.0 - p)
    }

    /// The point `x` with survival `P(X > x) = s`, accurate for tiny `s`.
    pub fn upper_quantile(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, 1.0);
        match *self {
            Distribution::Deterministic { value } => value,
            Distribution::Exponential { mean } => -mean * s.ln(),
            Distribution::Weibull { shape, scale } => scale * (-s.ln()).powf(1.0 / shape),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Deterministic { value } => value,
            Distribution::Exponential { mean } => {
                Exp::new(1.0 / mean).expect("validated rate").sample(rng)
            }
            Distribution::Weibull { shape, scale } => Weibull::new(scale, shape)
                .expect("validated parameters")
                .sample(rng),
        }
    }

    /// `m_i(x) = ∫_0^x t^i f(t) dt` for `i ∈ {1, 2}`.
    pub fn truncated_moment(&self, i: u32, x: f64) -> Result<f64> {
        if self.is_atomic() {
            return Err(Error::AtomicDistribution(self.kind()));
        }
        if !(1..=2).contains(&i) {
            return Err(Error::InvalidParameter(format!(
                "truncated moment order {i} (expected 1 or 2)"
            )));
        }
        if x.is_nan() || x < 0.0 {
            return Err(Error::InvalidParameter(format!("truncation point {x}")));
        }
        let integrand = |t: f64| t.powi(i as i32) * self.pdf(t);
        let tol = Tolerance::relative(TRUNCATED_MOMENT_RTOL);
        let mut total = 0.0;
        let mut lo = 0.0;
        for &s in &SURVIVAL_BREAKS {
            let hi = self.upper_quantile(s).min(x);
            if hi > lo {
                total += quadrature::integrate(integrand, lo, hi, tol)?.value;
                lo = hi;
            }
            if hi >= x {
                break;
            }
        }
        Ok(total)
    }

    /// Both truncated moments at once.
    pub fn truncated_moments(&self, x: f64) -> Result<(f64, f64)> {
        Ok((self.truncated_moment(1, x)?, self.truncated_moment(2, x)?))
    }
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be finite and > 0, got {v}")))
    }
}

fn weibull_cv2(shape: f64) -> f64 {
    let g1 = gamma(1.0 + 1.0 / shape);
    gamma(1.0 + 2.0 / shape) / (g1 * g1) - 1.0
}

/// Config record for a distribution: `{kind, mean, shape?|cv2?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistSpec {
    pub kind: String,
    #[serde(default = "unit")]
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv2: Option<f64>,
}

fn unit() -> f64 {
    1.0
}

impl DistSpec {
    pub fn build(&self) -> Result<Distribution> {
        match self.kind.as_str() {
            "deterministic" => Distribution::deterministic(self.mean),
            "exponential" => Distribution::exponential(self.mean),
            "weibull" => match (self.shape, self.cv2) {
                (Some(shape), None) => Distribution::weibull(shape, self.mean),
                (None, Some(cv2)) => Distribution::weibull_with_cv2(cv2, self.mean),
                _ => Err(Error::InvalidParameter(
                    "weibull needs exactly one of `shape` or `cv2`".into(),
                )),
            },
            other => Err(Error::InvalidParameter(format!("unknown distribution kind `{other}`"))),
        }
    }
}

impl From<&Distribution> for DistSpec {
    fn from(d: &Distribution) -> Self {
        let shape = match *d {
            Distribution::Weibull { shape, .. } => Some(shape),
            _ => None,
        };
        DistSpec {
            kind: d.kind().to_string(),
            mean: d.mean(),
            shape,
            cv2: None,
        }
    }
}

/// Discrete law of the number of flows in a batch (or in a burst).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchWidthLaw {
    Deterministic { width: u64 },
    /// Geometric on {1, 2, ...} with the given mean.
    GeometricFromOne { mean: f64 },
    /// Geometric on {0, 1, ...} with the given mean.
    GeometricFromZero { mean: f64 },
    /// Balanced-means mixture of two geometric-from-one phases that matches a
    /// requested mean and squared coefficient of variation exactly.
    TwoPhase {
        mean: f64,
        cv2: f64,
        weights: [f64; 2],
        phase_means: [f64; 2],
    },
}

/// Which expectation over `B` to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchWeight {
    /// `E[B u^{B-1}]`
    PgfFirst,
    /// `E[B(B-1) u^{B-2}]`
    PgfSecond,
    /// `E[B]`
    Mean,
    /// `E[B^2]`
    SecondMoment,
    /// `E[B(B-1)]`
    Factorial,
}

const SERIES_CAP: u64 = 10_000_000;
const SERIES_RTOL: f64 = 1e-12;

impl BatchWidthLaw {
    pub fn deterministic(width: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidParameter("batch width must be >= 1".into()));
        }
        Ok(BatchWidthLaw::Deterministic { width })
    }

    pub fn geometric_from_one(mean: f64) -> Result<Self> {
        if !(mean.is_finite() && mean >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "geometric-from-1 mean must be >= 1, got {mean}"
            )));
        }
        Ok(BatchWidthLaw::GeometricFromOne { mean })
    }

    pub fn geometric_from_zero(mean: f64) -> Result<Self> {
        positive("geometric-from-0 mean", mean)?;
        Ok(BatchWidthLaw::GeometricFromZero { mean })
    }

    /// Two geometric phases with balanced means (`w_k m_k = mean / 2`).
    ///
    /// Feasible when `cv2 >= (mean - 1) / mean`, the cv2 of a single
    /// geometric law with the same mean.
    pub fn two_phase(mean: f64, cv2: f64) -> Result<Self> {
        if !(mean.is_finite() && mean >= 1.0 && cv2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "two-phase law needs mean >= 1, got ({mean}, {cv2})"
            )));
        }
        let floor = (mean - 1.0) / mean;
        if cv2 < floor - 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "two-phase law with mean {mean} needs cv2 >= {floor}, got {cv2}"
            )));
        }
        // m1 + m2 = mean (1 + cv2) + 1 and m1 m2 = mean (m1 + m2) / 2
        let sum = mean * (1.0 + cv2) + 1.0;
        let prod = mean * sum / 2.0;
        let disc = (sum * sum - 4.0 * prod).max(0.0).sqrt();
        let hi = (sum + disc) / 2.0;
        let lo = prod / hi;
        let weights = [mean / (2.0 * hi), mean / (2.0 * lo)];
        Ok(BatchWidthLaw::TwoPhase {
            mean,
            cv2,
            weights,
            phase_means: [hi, lo],
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BatchWidthLaw::Deterministic { .. } => "deterministic",
            BatchWidthLaw::GeometricFromOne { .. } => "geometric-from-1",
            BatchWidthLaw::GeometricFromZero { .. } => "geometric-from-0",
            BatchWidthLaw::TwoPhase { .. } => "two-point",
        }
    }

    /// `P(B = b)`.
    pub fn pmf(&self, b: u64) -> f64 {
        match *self {
            BatchWidthLaw::Deterministic { width } => (b == width) as u8 as f64,
            BatchWidthLaw::GeometricFromOne { mean } => geom1_pmf(mean, b),
            BatchWidthLaw::GeometricFromZero { mean } => {
                let q = mean / (1.0 + mean);
                (1.0 - q) * q.powf(b as f64)
            }
            BatchWidthLaw::TwoPhase {
                weights,
                phase_means,
                ..
            } => weights[0] * geom1_pmf(phase_means[0], b) + weights[1] * geom1_pmf(phase_means[1], b),
        }
    }

    /// Upper bound on the ratio `P(B = b + 1) / P(B = b)` for large `b`;
    /// zero for finite support.
    fn tail_decay(&self) -> f64 {
        match *self {
            BatchWidthLaw::Deterministic { .. } => 0.0,
            BatchWidthLaw::GeometricFromOne { mean } => 1.0 - 1.0 / mean,
            BatchWidthLaw::GeometricFromZero { mean } => mean / (1.0 + mean),
            BatchWidthLaw::TwoPhase { phase_means, .. } => 1.0 - 1.0 / phase_means[0].max(phase_means[1]),
        }
    }

    fn support_max(&self) -> Option<u64> {
        match *self {
            BatchWidthLaw::Deterministic { width } => Some(width),
            _ => None,
        }
    }

    /// `P(B >= 1)`.
    pub fn prob_nonempty(&self) -> f64 {
        1.0 - self.pmf(0)
    }

    /// `E[B]` under the law itself (zero-width batches included).
    pub fn mean(&self) -> f64 {
        match *self {
            BatchWidthLaw::Deterministic { width } => width as f64,
            BatchWidthLaw::GeometricFromOne { mean }
            | BatchWidthLaw::GeometricFromZero { mean }
            | BatchWidthLaw::TwoPhase { mean, .. } => mean,
        }
    }

    /// Mean width of the batches actually emitted by [`sample`](Self::sample),
    /// which never produces empty batches.
    pub fn emitted_mean(&self) -> f64 {
        self.mean() / self.prob_nonempty()
    }

    pub fn cv2(&self) -> f64 {
        let m = self.mean();
        let second = self.plain_moment(BatchWeight::SecondMoment);
        second / (m * m) - 1.0
    }

    fn plain_moment(&self, weight: BatchWeight) -> f64 {
        batch_expectation(self, weight, 1.0).expect("moments of supported laws converge")
    }

    /// Draws a width; zero widths are rejected and redrawn.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            BatchWidthLaw::Deterministic { width } => width,
            BatchWidthLaw::GeometricFromOne { mean } => sample_geom1(mean, rng),
            BatchWidthLaw::GeometricFromZero { mean } => {
                let g = Geometric::new(1.0 / (1.0 + mean)).expect("validated mean");
                loop {
                    let b = g.sample(rng);
                    if b >= 1 {
                        return b;
                    }
                }
            }
            BatchWidthLaw::TwoPhase {
                weights,
                phase_means,
                ..
            } => {
                let phase = if rng.random::<f64>() < weights[0] { 0 } else { 1 };
                sample_geom1(phase_means[phase], rng)
            }
        }
    }
}

fn geom1_pmf(mean: f64, b: u64) -> f64 {
    if b == 0 {
        return 0.0;
    }
    let p = 1.0 / mean;
    p * (1.0 - p).powf((b - 1) as f64)
}

fn sample_geom1<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 1.0 {
        return 1;
    }
    Geometric::new(1.0 / mean).expect("validated mean").sample(rng) + 1
}

fn weight_term(weight: BatchWeight, b: u64, u: f64) -> f64 {
    let bf = b as f64;
    match weight {
        BatchWeight::PgfFirst => {
            if b == 0 {
                0.0
            } else {
                bf * u.powf((b - 1) as f64)
            }
        }
        BatchWeight::PgfSecond => {
            if b < 2 {
                0.0
            } else {
                bf * (bf - 1.0) * u.powf((b - 2) as f64)
            }
        }
        BatchWeight::Mean => bf,
        BatchWeight::SecondMoment => bf * bf,
        BatchWeight::Factorial => bf * (bf - 1.0),
    }
}

/// Expectation of the selected function of `B`, evaluated at `u ∈ [0, 1]`
/// (only the PGF-derivative weights depend on `u`).
///
/// Geometric laws use closed forms; other laws sum the series directly.
pub fn batch_expectation(law: &BatchWidthLaw, weight: BatchWeight, u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidParameter(format!("u must lie in [0, 1], got {u}")));
    }
    let u = match weight {
        BatchWeight::PgfFirst | BatchWeight::PgfSecond => u,
        _ => 1.0,
    };
    match *law {
        BatchWidthLaw::GeometricFromOne { mean } => {
            // G(u) = p u / (1 - q u)
            let p = 1.0 / mean;
            let q = 1.0 - p;
            let d = 1.0 - q * u;
            Ok(match weight {
                BatchWeight::PgfFirst | BatchWeight::Mean => p / (d * d),
                BatchWeight::PgfSecond | BatchWeight::Factorial => 2.0 * p * q / (d * d * d),
                BatchWeight::SecondMoment => (2.0 * q + p) / (p * p),
            })
        }
        BatchWidthLaw::GeometricFromZero { mean } => {
            // G(u) = 1 / (1 + mean - mean u)
            let d = 1.0 + mean - mean * u;
            Ok(match weight {
                BatchWeight::PgfFirst | BatchWeight::Mean => mean / (d * d),
                BatchWeight::PgfSecond | BatchWeight::Factorial => 2.0 * mean * mean / (d * d * d),
                BatchWeight::SecondMoment => 2.0 * mean * mean + mean,
            })
        }
        _ => batch_expectation_series(law, weight, u),
    }
}

/// Direct summation of `Σ_b w(b) P(B = b)` for any law.
///
/// Stops when a geometric bound on the remaining tail falls below `1e-12` of
/// the partial sum.
pub fn batch_expectation_series(law: &BatchWidthLaw, weight: BatchWeight, u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidParameter(format!("u must lie in [0, 1], got {u}")));
    }
    let decay = law.tail_decay()
        * match weight {
            BatchWeight::PgfFirst | BatchWeight::PgfSecond => u,
            _ => 1.0,
        };
    let max_b = law.support_max();
    let mut sum = 0.0;
    for b in 0..SERIES_CAP {
        if let Some(m) = max_b {
            if b > m {
                return Ok(sum);
            }
        }
        let term = weight_term(weight, b, u) * law.pmf(b);
        sum += term;
        if b >= 2 && max_b.is_none() {
            // Successive terms shrink by at most decay * (b + 1) / (b - 1).
            let ratio = decay * (b as f64 + 1.0) / (b as f64 - 1.0);
            if ratio < 1.0 && term * ratio / (1.0 - ratio) <= SERIES_RTOL * sum.abs() {
                return Ok(sum);
            }
            if decay == 0.0 {
                return Ok(sum);
            }
        }
    }
    Err(Error::Series(SERIES_CAP as usize))
}

/// Config record for a batch or burst width law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthSpec {
    pub kind: String,
    #[serde(default = "unit")]
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv2: Option<f64>,
}

impl WidthSpec {
    pub fn build(&self) -> Result<BatchWidthLaw> {
        match self.kind.as_str() {
            "deterministic" => {
                if self.mean.fract() != 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "deterministic width must be an integer, got {}",
                        self.mean
                    )));
                }
                BatchWidthLaw::deterministic(self.mean as u64)
            }
            "geometric-from-1" | "geometric" => BatchWidthLaw::geometric_from_one(self.mean),
            "geometric-from-0" => BatchWidthLaw::geometric_from_zero(self.mean),
            "two-point" | "hyper-geometric" => {
                let cv2 = self.cv2.ok_or_else(|| {
                    Error::InvalidParameter("two-point width law needs `cv2`".into())
                })?;
                BatchWidthLaw::two_phase(self.mean, cv2)
            }
            other => Err(Error::InvalidParameter(format!("unknown width kind `{other}`"))),
        }
    }
}

impl From<&BatchWidthLaw> for WidthSpec {
    fn from(w: &BatchWidthLaw) -> Self {
        WidthSpec {
            kind: w.kind().to_string(),
            mean: w.mean(),
            cv2: match *w {
                BatchWidthLaw::TwoPhase { cv2, .. } => Some(cv2),
                _ => None,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    // Composite Simpson's rule, used as an independent check on quadrature.
    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            let x = a + k as f64 * h;
            s += if k % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
        }
        s * h / 3.0
    }

    #[test]
    fn deterministic_sample_is_constant() {
        let d = Distribution::deterministic(1.0).unwrap();
        let mut r = rng(1);
        assert!((0..1000).all(|_| d.sample(&mut r) == 1.0));
    }

    #[test]
    fn exponential_empirical_mean() {
        let d = Distribution::exponential(1.0).unwrap();
        let mut r = rng(2);
        let n = 1_000_000;
        let mean = (0..n).map(|_| d.sample(&mut r)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn weibull_shape_04_empirical_cv2() {
        let d = Distribution::weibull(0.4, 1.0).unwrap();
        // closed form from gamma moments, computed here independently
        let k: f64 = 0.4;
        let exact = gamma(1.0 + 2.0 / k) / gamma(1.0 + 1.0 / k).powi(2) - 1.0;
        assert!((d.cv2() - exact).abs() < 1e-10);
        let mut r = rng(3);
        let n = 10_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = d.sample(&mut r);
            s1 += x;
            s2 += x * x;
        }
        let m = s1 / n as f64;
        let cv2 = (s2 / n as f64) / (m * m) - 1.0;
        assert!((8.5..=11.5).contains(&cv2), "{cv2}");
    }

    #[test]
    fn weibull_cv2_targets() {
        let a = Distribution::weibull(3.5, 1.0).unwrap().cv2();
        let b = Distribution::weibull(0.4, 1.0).unwrap().cv2();
        assert!((a - 0.1).abs() < 0.015, "{a}");
        assert!((b - 10.0).abs() < 1.5, "{b}");
        let mut last = f64::INFINITY;
        for i in 1..200 {
            let c = Distribution::weibull(0.1 * i as f64, 1.0).unwrap().cv2();
            assert!(c < last);
            last = c;
        }
        let w = Distribution::weibull_with_cv2(10.0, 2.0).unwrap();
        assert!((w.cv2() - 10.0).abs() < 1e-9 && (w.mean() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_moment_exponential() {
        let d = Distribution::exponential(1.0).unwrap();
        let full = d.truncated_moment(1, f64::INFINITY).unwrap();
        assert!((full - 1.0).abs() < 1e-12);
        let at_one = d.truncated_moment(1, 1.0).unwrap();
        let hand = 1.0 - 2.0 * (-1.0_f64).exp();
        let simpson = simpson(|t| t * (-t).exp(), 0.0, 1.0, 2000);
        assert!((at_one - hand).abs() < 1e-12, "{at_one}");
        assert!((simpson - hand).abs() < 1e-12);
        assert!((hand - 0.26424).abs() < 1e-5);
    }

    #[test]
    fn truncated_moment_weibull_median_matches_monte_carlo() {
        let d = Distribution::weibull(3.5, 1.0).unwrap();
        let median = d.quantile(0.5);
        let m2 = d.truncated_moment(2, median).unwrap();
        assert!(m2 > 0.0 && m2 < d.raw_moment(2));
        let mut r = rng(4);
        let n = 10_000_000;
        let mc = (0..n)
            .map(|_| d.sample(&mut r))
            .filter(|&x| x < median)
            .map(|x| x * x)
            .sum::<f64>()
            / n as f64;
        assert!((mc / m2 - 1.0).abs() < 0.005, "{mc} vs {m2}");
    }

    #[test]
    fn truncated_moment_rejects_atomic() {
        let d = Distribution::deterministic(1.0).unwrap();
        assert!(matches!(d.truncated_moment(1, 1.0), Err(Error::AtomicDistribution(_))));
    }

    #[test]
    fn truncated_moment_far_quantile_reaches_raw_moment() {
        let laws = [
            Distribution::exponential(1.0).unwrap(),
            Distribution::exponential(3.0).unwrap(),
            Distribution::weibull(3.5, 1.0).unwrap(),
            Distribution::weibull(0.4, 1.0).unwrap(),
            Distribution::weibull(1.7, 2.0).unwrap(),
        ];
        for d in laws {
            let x_hi = d.upper_quantile(1e-12);
            for i in 1..=2 {
                let raw = d.raw_moment(i);
                let m = d.truncated_moment(i, x_hi).unwrap();
                // Tail ∫_{x_hi}^∞ t^i f(t) dt in closed form, via the upper
                // incomplete gamma function.
                let tail = match d {
                    Distribution::Exponential { mean } => {
                        let y = x_hi / mean;
                        let poly = if i == 1 { y + 1.0 } else { y * y + 2.0 * y + 2.0 };
                        mean.powi(i as i32) * (-y).exp() * poly
                    }
                    Distribution::Weibull { shape, scale } => {
                        let y = (x_hi / scale).powf(shape);
                        let a = 1.0 + i as f64 / shape;
                        scale.powi(i as i32)
                            * gamma(a)
                            * statrs::function::gamma::gamma_ur(a, y)
                    }
                    _ => unreachable!(),
                };
                assert!(
                    ((m + tail) - raw).abs() < 1e-8 * raw,
                    "{d:?} i={i}: {m} + {tail} vs {raw}"
                );
                // The truncation itself is below 1e-8 except where the law's
                // tail mass past x_hi exceeds that (weibull shape 0.4, i = 2).
                if tail < 1e-9 * raw {
                    assert!((m - raw).abs() < 1e-8 * raw, "{d:?} i={i}");
                }
            }
        }
    }

    #[test]
    fn kolmogorov_smirnov_band() {
        let laws = [
            Distribution::exponential(1.0).unwrap(),
            Distribution::weibull(3.5, 1.0).unwrap(),
            Distribution::weibull(0.4, 1.0).unwrap(),
        ];
        for (k, d) in laws.iter().enumerate() {
            let mut r = rng(10 + k as u64);
            let n = 1_000_000;
            let mut xs: Vec<f64> = (0..n).map(|_| d.sample(&mut r)).collect();
            xs.sort_by(f64::total_cmp);
            let mut ks: f64 = 0.0;
            for (j, &x) in xs.iter().enumerate() {
                let c = d.cdf(x);
                ks = ks
                    .max((c - j as f64 / n as f64).abs())
                    .max(((j + 1) as f64 / n as f64 - c).abs());
            }
            // 99% critical value of the Kolmogorov distribution
            assert!(ks < 1.628 / (n as f64).sqrt(), "{d:?}: D = {ks}");
        }
    }

    #[test]
    fn geometric_from_zero_pgf_matches_closed_form() {
        let beta = 7.5;
        let law = BatchWidthLaw::geometric_from_zero(beta).unwrap();
        for &u in &[0.0, 0.2, 0.5, 0.9, 1.0] {
            let v = batch_expectation(&law, BatchWeight::PgfFirst, u).unwrap();
            let expect = beta / (1.0 + beta - beta * u).powi(2);
            assert!((v - expect).abs() < 1e-14);
            let s = batch_expectation_series(&law, BatchWeight::PgfFirst, u).unwrap();
            assert!((s - expect).abs() < 1e-10 * expect.max(1e-300), "{s} {expect}");
        }
        let factor = batch_expectation(&law, BatchWeight::SecondMoment, 1.0).unwrap() / beta - 1.0;
        assert!((factor - 2.0 * beta).abs() < 1e-12);
    }

    #[test]
    fn geometric_from_one_series_matches_closed_form() {
        let law = BatchWidthLaw::geometric_from_one(100.0).unwrap();
        let series = batch_expectation_series(&law, BatchWeight::PgfFirst, 0.5).unwrap();
        let p = 0.01;
        let closed = p / (1.0 - (1.0 - p) * 0.5_f64).powi(2);
        assert!((series - closed).abs() < 1e-12 * closed, "{series} {closed}");
        for w in [
            BatchWeight::PgfSecond,
            BatchWeight::Mean,
            BatchWeight::SecondMoment,
            BatchWeight::Factorial,
        ] {
            for &u in &[0.3, 0.99, 1.0] {
                let a = batch_expectation(&law, w, u).unwrap();
                let b = batch_expectation_series(&law, w, u).unwrap();
                assert!((a - b).abs() < 1e-10 * a, "{w:?} {u}: {a} {b}");
            }
        }
    }

    #[test]
    fn unit_argument_gives_mean_width() {
        let laws = [
            BatchWidthLaw::deterministic(4).unwrap(),
            BatchWidthLaw::geometric_from_one(100.0).unwrap(),
            BatchWidthLaw::geometric_from_zero(3.0).unwrap(),
            BatchWidthLaw::two_phase(5.0, 10.0).unwrap(),
        ];
        for law in laws {
            let v = batch_expectation(&law, BatchWeight::PgfFirst, 1.0).unwrap();
            assert!((v - law.mean()).abs() < 1e-9 * law.mean(), "{law:?}: {v}");
        }
    }

    #[test]
    fn two_phase_hits_mean_and_cv2_exactly() {
        let law = BatchWidthLaw::two_phase(5.0, 10.0).unwrap();
        let total: f64 = (0..20_000).map(|b| law.pmf(b)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((law.mean() - 5.0).abs() < 1e-12);
        let mean = batch_expectation_series(&law, BatchWeight::Mean, 1.0).unwrap();
        assert!((mean - 5.0).abs() < 1e-10, "{mean}");
        assert!((law.cv2() - 10.0).abs() < 1e-9, "{}", law.cv2());
        let mut r = rng(5);
        let n = 2_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let b = law.sample(&mut r) as f64;
            assert!(b >= 1.0);
            s1 += b;
            s2 += b * b;
        }
        let m = s1 / n as f64;
        assert!((m - 5.0).abs() < 0.05, "{m}");
        let cv2 = (s2 / n as f64) / (m * m) - 1.0;
        assert!((cv2 - 10.0).abs() < 0.5, "{cv2}");
        assert!(BatchWidthLaw::two_phase(5.0, 0.5).is_err());
    }

    #[test]
    fn geometric_from_zero_sampler_never_emits_empty() {
        let law = BatchWidthLaw::geometric_from_zero(2.0).unwrap();
        assert!((law.pmf(0) - 1.0 / 3.0).abs() < 1e-15);
        let mut r = rng(6);
        let n = 200_000;
        let mut s = 0.0;
        for _ in 0..n {
            let b = law.sample(&mut r);
            assert!(b >= 1);
            s += b as f64;
        }
        assert!((s / n as f64 - law.emitted_mean()).abs() < 0.02);
    }

    #[test]
    fn specs_round_trip() {
        let d = DistSpec { kind: "weibull".into(), mean: 1.0, shape: None, cv2: Some(0.1) }
            .build()
            .unwrap();
        assert!((d.cv2() - 0.1).abs() < 1e-9);
        let back = DistSpec::from(&d).build().unwrap();
        assert!((back.cv2() - 0.1).abs() < 1e-9);
        let json = r#"{"kind": "exponential"}"#;
        let e: DistSpec = serde_json::from_str(json).unwrap();
        assert_eq!(e.build().unwrap(), Distribution::Exponential { mean: 1.0 });
        assert!(DistSpec { kind: "weibull".into(), mean: 1.0, shape: None, cv2: None }.build().is_err());
        let w: WidthSpec = serde_json::from_str(r#"{"kind": "two-point", "mean": 5, "cv2": 10}"#).unwrap();
        assert_eq!(w.build().unwrap().kind(), "two-point");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn truncated_moments_are_monotone(shape in 0.3f64..5.0, a in 0.0f64..4.0, b in 0.0f64..4.0) {
            let d = Distribution::weibull(shape, 1.0).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for i in 1..=2 {
                let m_lo = d.truncated_moment(i, lo).unwrap();
                let m_hi = d.truncated_moment(i, hi).unwrap();
                prop_assert!(m_lo <= m_hi * (1.0 + 1e-9) + 1e-300);
                prop_assert!(m_hi <= d.raw_moment(i) * (1.0 + 1e-9));
            }
            prop_assert_eq!(d.truncated_moment(1, 0.0).unwrap(), 0.0);
        }

        #[test]
        fn pgf_first_is_nondecreasing(mean in 1.0f64..200.0, u in 0.0f64..1.0, du in 0.0f64..0.1) {
            let law = BatchWidthLaw::geometric_from_one(mean).unwrap();
            let v1 = batch_expectation(&law, BatchWeight::PgfFirst, u).unwrap();
            let v2 = batch_expectation(&law, BatchWeight::PgfFirst, (u + du).min(1.0)).unwrap();
            prop_assert!(v1 <= v2 * (1.0 + 1e-12));
        }
    }
}
