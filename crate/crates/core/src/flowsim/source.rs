//! Arrival processes: open batches, partly-open bursts, closed clients and
//! explicit traces.
//!
//! Partly-open and closed sources react to completions: the next flow of a
//! burst (or of a client) is scheduled an inactivity interval after the
//! previous one finishes, so the arrival process depends on the scheduler.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::OrderedFloat;
use rand::Rng;

use super::{ClassSpec, TrafficModel, TrafficSpec};
use crate::error::{Error, Result};

/// Where a flow came from, so its completion can trigger the next one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Batch,
    /// Flow of a burst with `left` more flows to follow.
    Burst { left: u64 },
    Client,
}

/// Flows that arrive together.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalGroup {
    pub time: f64,
    pub class: usize,
    pub sizes: Vec<f64>,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pending {
    /// Poisson batch (open) or burst (partly-open) arrival of a class.
    Poisson(usize),
    BurstNext { class: usize, left: u64 },
    ClientWake(usize),
    Trace(usize),
}

/// Rate and interval parameters of one class after load calibration.
#[derive(Debug, Clone)]
pub struct CalibratedClass {
    pub spec: ClassSpec,
    /// Poisson rate of batches or bursts (open models).
    pub rate: f64,
}

pub struct Arrivals {
    model: TrafficModel,
    classes: Vec<CalibratedClass>,
    calendar: BinaryHeap<Reverse<(OrderedFloat<f64>, u64, PendingKey)>>,
    seq: u64,
    trace: Vec<ArrivalGroup>,
}

// BinaryHeap needs Ord on the payload; order is fully decided by (time, seq).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PendingKey(Pending);
impl PartialOrd for PendingKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for PendingKey {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

/// Mean emitted widths times mean sizes: offered work per batch/burst.
fn work_per_arrival(c: &ClassSpec) -> f64 {
    c.width.emitted_mean() * c.size.mean()
}

impl Arrivals {
    pub fn new<R: Rng + ?Sized>(spec: &TrafficSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let classes: Vec<CalibratedClass> = match spec.model {
            TrafficModel::OpenBatch | TrafficModel::PartlyOpen => spec
                .classes
                .iter()
                .map(|c| CalibratedClass {
                    spec: c.clone(),
                    rate: spec.load * c.share / work_per_arrival(c),
                })
                .collect(),
            TrafficModel::Closed => {
                let ratio = closed_ratio_for_utilization(spec.total_clients(), spec.load)?;
                spec.classes
                    .iter()
                    .map(|c| {
                        // think mean = E[size] / ratio, same ratio for every class
                        let mut spec = c.clone();
                        let target = c.size.mean() / ratio;
                        spec.think = c.think.scaled(target / c.think.mean());
                        CalibratedClass { spec, rate: 0.0 }
                    })
                    .collect()
            }
        };
        let mut a = Arrivals {
            model: spec.model,
            classes,
            calendar: BinaryHeap::new(),
            seq: 0,
            trace: Vec::new(),
        };
        for c in 0..a.classes.len() {
            match a.model {
                TrafficModel::OpenBatch | TrafficModel::PartlyOpen => {
                    let t = a.exp(c, 0.0, rng);
                    a.push(t, Pending::Poisson(c));
                }
                TrafficModel::Closed => {
                    for _ in 0..a.classes[c].spec.clients {
                        let t = a.classes[c].spec.think.sample(rng);
                        a.push(t, Pending::ClientWake(c));
                    }
                }
            }
        }
        Ok(a)
    }

    /// Replays a fixed list of arrival groups; completions trigger nothing.
    pub fn from_trace(mut trace: Vec<ArrivalGroup>) -> Self {
        trace.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut a = Arrivals {
            model: TrafficModel::OpenBatch,
            classes: Vec::new(),
            calendar: BinaryHeap::new(),
            seq: 0,
            trace: Vec::new(),
        };
        for (i, g) in trace.iter().enumerate() {
            a.push(g.time, Pending::Trace(i));
        }
        a.trace = trace;
        a
    }

    pub fn classes(&self) -> &[CalibratedClass] {
        &self.classes
    }

    fn push(&mut self, t: f64, p: Pending) {
        self.calendar.push(Reverse((OrderedFloat(t), self.seq, PendingKey(p))));
        self.seq += 1;
    }

    fn exp<R: Rng + ?Sized>(&self, class: usize, now: f64, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        now - (1.0 - u).ln() / self.classes[class].rate
    }

    fn sizes<R: Rng + ?Sized>(&self, class: usize, n: u64, rng: &mut R) -> Vec<f64> {
        let d = &self.classes[class].spec.size;
        (0..n).map(|_| d.sample(rng)).collect()
    }

    pub fn next_time(&self) -> f64 {
        self.calendar
            .peek()
            .map_or(f64::INFINITY, |Reverse((t, _, _))| t.0)
    }

    /// Pops the earliest pending arrival and materializes it.
    pub fn pop<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<ArrivalGroup> {
        let Reverse((t, _, PendingKey(p))) = self.calendar.pop()?;
        let now = t.0;
        Some(match p {
            Pending::Trace(i) => self.trace[i].clone(),
            Pending::Poisson(c) => {
                let next = self.exp(c, now, rng);
                self.push(next, Pending::Poisson(c));
                let width = self.classes[c].spec.width.sample(rng);
                match self.model {
                    TrafficModel::OpenBatch => ArrivalGroup {
                        time: now,
                        class: c,
                        sizes: self.sizes(c, width, rng),
                        origin: Origin::Batch,
                    },
                    _ => ArrivalGroup {
                        time: now,
                        class: c,
                        sizes: self.sizes(c, 1, rng),
                        origin: Origin::Burst { left: width - 1 },
                    },
                }
            }
            Pending::BurstNext { class, left } => ArrivalGroup {
                time: now,
                class,
                sizes: self.sizes(class, 1, rng),
                origin: Origin::Burst { left },
            },
            Pending::ClientWake(class) => ArrivalGroup {
                time: now,
                class,
                sizes: self.sizes(class, 1, rng),
                origin: Origin::Client,
            },
        })
    }

    /// Reacts to a flow completion at `now`.
    pub fn on_departure<R: Rng + ?Sized>(&mut self, class: usize, origin: Origin, now: f64, rng: &mut R) {
        match origin {
            Origin::Batch => {}
            Origin::Burst { left } if left > 0 => {
                let t = now + self.classes[class].spec.think.sample(rng);
                self.push(t, Pending::BurstNext { class, left: left - 1 });
            }
            Origin::Burst { .. } => {}
            Origin::Client => {
                let t = now + self.classes[class].spec.think.sample(rng);
                self.push(t, Pending::ClientWake(class));
            }
        }
    }
}

/// Nominal utilization of a closed PS link shared by `clients` clients whose
/// size-to-interval ratio is `ratio`.
///
/// With equal ratios the multi-class product form collapses to the
/// single-class machine-repairman chain, `P(k) ∝ N!/(N-k)! ratio^k`.
pub fn closed_ps_utilization(clients: u64, ratio: f64) -> f64 {
    let n = clients as usize;
    // log of N!/(N-k)! ratio^k, normalized in log-space
    let mut logs = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    logs.push(0.0);
    for k in 1..=n {
        acc += ((n - k + 1) as f64).ln() + ratio.ln();
        logs.push(acc);
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    1.0 - (logs[0] - max).exp() / z
}

/// Inverts [`closed_ps_utilization`] by bisection on `log(ratio)`.
pub fn closed_ratio_for_utilization(clients: u64, utilization: f64) -> Result<f64> {
    if !(utilization > 0.0 && utilization < 1.0) || clients == 0 {
        return Err(Error::InvalidParameter(format!(
            "closed utilization {utilization} with {clients} clients"
        )));
    }
    let (mut lo, mut hi) = (-60.0_f64, 60.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if closed_ps_utilization(clients, mid.exp()) < utilization {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}
