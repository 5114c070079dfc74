//! Batch-means estimation and time-weighted occupancy histograms.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub const DEFAULT_BATCHES: usize = 30;
pub const CONFIDENCE: f64 = 0.95;

/// A point estimate with its 95% confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn contains(&self, v: f64) -> bool {
        (v - self.mean).abs() <= self.half_width
    }

    /// True when the two confidence intervals do not overlap and `self` lies below.
    pub fn clearly_below(&self, other: &Estimate) -> bool {
        self.upper() < other.lower()
    }
}

/// Student-t quantile for a two-sided interval with `n - 1` degrees of freedom.
pub fn t_quantile(n: usize) -> f64 {
    if n < 2 {
        return f64::INFINITY;
    }
    StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.5 + CONFIDENCE / 2.0)
}

/// Sums accumulated over one batch-means bin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub flows: u64,
    pub fct_sum: f64,
    pub size_sum: f64,
    pub batches: u64,
    pub bct_sum: f64,
    pub batch_size_sum: f64,
}

impl Bin {
    fn add(&mut self, o: &Bin) {
        self.flows += o.flows;
        self.fct_sum += o.fct_sum;
        self.size_sum += o.size_sum;
        self.batches += o.batches;
        self.bct_sum += o.bct_sum;
        self.batch_size_sum += o.batch_size_sum;
    }
}

/// Per-bin accumulator; bins from several replications are pooled by
/// concatenation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchMeans {
    pub bins: Vec<Bin>,
}

impl BatchMeans {
    pub fn new(bins: usize) -> Self {
        BatchMeans {
            bins: vec![Bin::default(); bins],
        }
    }

    pub fn pool(&mut self, other: &BatchMeans) {
        self.bins.extend_from_slice(&other.bins);
    }

    pub fn total(&self) -> Bin {
        let mut t = Bin::default();
        for b in &self.bins {
            t.add(b);
        }
        t
    }

    fn estimate<F: Fn(&Bin) -> Option<f64>>(&self, overall: f64, per_bin: F) -> Estimate {
        let xs: Vec<f64> = self.bins.iter().filter_map(per_bin).collect();
        let n = xs.len();
        if n < 2 || !overall.is_finite() {
            return Estimate {
                mean: overall,
                half_width: f64::INFINITY,
            };
        }
        let m = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        Estimate {
            mean: overall,
            half_width: t_quantile(n) * (var / n as f64).sqrt(),
        }
    }

    pub fn mean_fct(&self) -> Estimate {
        let t = self.total();
        self.estimate(t.fct_sum / t.flows as f64, |b| {
            (b.flows > 0).then(|| b.fct_sum / b.flows as f64)
        })
    }

    pub fn mean_bct(&self) -> Estimate {
        let t = self.total();
        self.estimate(t.bct_sum / t.batches as f64, |b| {
            (b.batches > 0).then(|| b.bct_sum / b.batches as f64)
        })
    }

    /// `Σ FCT / Σ size`, the mean FCT in units of mean full-rate service time.
    pub fn normalized_fct(&self) -> Estimate {
        let t = self.total();
        self.estimate(t.fct_sum / t.size_sum, |b| {
            (b.flows > 0).then(|| b.fct_sum / b.size_sum)
        })
    }

    /// `Σ BCT / Σ batch size`.
    pub fn normalized_bct(&self) -> Estimate {
        let t = self.total();
        self.estimate(t.bct_sum / t.batch_size_sum, |b| {
            (b.batches > 0).then(|| b.bct_sum / b.batch_size_sum)
        })
    }
}

/// Time-weighted histogram of a nonnegative integer occupancy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub weights: Vec<f64>,
}

impl Occupancy {
    pub fn record(&mut self, level: usize, duration: f64) {
        if duration <= 0.0 {
            return;
        }
        if level >= self.weights.len() {
            self.weights.resize(level + 1, 0.0);
        }
        self.weights[level] += duration;
    }

    pub fn merge(&mut self, other: &Occupancy) {
        if other.weights.len() > self.weights.len() {
            self.weights.resize(other.weights.len(), 0.0);
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
    }

    /// Smallest level `n` with `P(N <= n) >= p / 100`.
    pub fn percentile(&self, p: f64) -> f64 {
        let total: f64 = self.weights.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let target = p / 100.0 * total;
        let mut acc = 0.0;
        for (n, w) in self.weights.iter().enumerate() {
            acc += w;
            if acc >= target {
                return n as f64;
            }
        }
        (self.weights.len() - 1) as f64
    }

    pub fn mean(&self) -> f64 {
        let total: f64 = self.weights.iter().sum();
        self.weights
            .iter()
            .enumerate()
            .map(|(n, w)| n as f64 * w)
            .sum::<f64>()
            / total
    }
}
