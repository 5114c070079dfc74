//! Event-driven flow-level simulation of a unit-capacity link.
//!
//! Flows are fed by one of three traffic models (open batches, partly-open
//! bursts, closed clients) and served under SRPT, PSJF or PS, with either
//! individual flows or whole batches as the scheduling entity.

pub mod scheduler;
pub mod source;
pub mod stats;

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{BatchWidthLaw, Distribution};
use crate::error::{Error, Result};
use scheduler::{make_scheduler, Entity, FlowTicket};
use source::{ArrivalGroup, Arrivals, Origin};
use stats::{BatchMeans, Estimate, Occupancy, DEFAULT_BATCHES};

pub use source::{closed_ps_utilization, closed_ratio_for_utilization};

/// Smallest horizon accepted by [`run`].
pub const MIN_HORIZON: u64 = 100_000;
pub const WARMUP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Srpt,
    Psjf,
    Ps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerFlow,
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Discipline {
    granularity: Granularity,
    policy: Policy,
}

impl Discipline {
    pub fn new(granularity: Granularity, policy: Policy) -> Result<Self> {
        if granularity == Granularity::PerBatch && policy == Policy::Psjf {
            return Err(Error::InvalidParameter("per-batch PSJF is not supported".into()));
        }
        Ok(Discipline { granularity, policy })
    }

    pub const fn per_flow(policy: Policy) -> Self {
        Discipline {
            granularity: Granularity::PerFlow,
            policy,
        }
    }

    pub fn per_batch(policy: Policy) -> Result<Self> {
        Self::new(Granularity::PerBatch, policy)
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }
}

impl fmt::Display for Discipline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = match self.granularity {
            Granularity::PerFlow => "per-flow",
            Granularity::PerBatch => "per-batch",
        };
        let p = match self.policy {
            Policy::Srpt => "srpt",
            Policy::Psjf => "psjf",
            Policy::Ps => "ps",
        };
        write!(f, "{g}-{p}")
    }
}

impl FromStr for Discipline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let (g, p) = s
            .rsplit_once('-')
            .ok_or_else(|| Error::Parse(format!("discipline `{s}`")))?;
        let granularity = match g {
            "per-flow" | "flow" => Granularity::PerFlow,
            "per-batch" | "batch" => Granularity::PerBatch,
            _ => return Err(Error::Parse(format!("granularity in `{s}`"))),
        };
        let policy = match p {
            "srpt" => Policy::Srpt,
            "psjf" => Policy::Psjf,
            "ps" => Policy::Ps,
            _ => return Err(Error::Parse(format!("policy in `{s}`"))),
        };
        Discipline::new(granularity, policy)
    }
}

impl TryFrom<String> for Discipline {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Discipline> for String {
    fn from(d: Discipline) -> String {
        d.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrafficModel {
    OpenBatch,
    PartlyOpen,
    Closed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub size: Distribution,
    /// Batch width (open) or burst length (partly-open); unused when closed.
    pub width: BatchWidthLaw,
    /// Inactivity interval between flows of a burst or of a client.
    pub think: Distribution,
    /// Fraction of the offered load (open and partly-open).
    pub share: f64,
    /// Population (closed).
    pub clients: u64,
}

impl ClassSpec {
    /// A class of single flows arriving as a Poisson process.
    pub fn single_flows(size: Distribution, share: f64) -> Self {
        ClassSpec {
            size,
            width: BatchWidthLaw::Deterministic { width: 1 },
            think: Distribution::Exponential { mean: 1.0 },
            share,
            clients: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSpec {
    pub model: TrafficModel,
    pub classes: Vec<ClassSpec>,
    /// Offered load (open, partly-open) or nominal PS utilization (closed).
    pub load: f64,
}

impl TrafficSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidParameter("traffic has no classes".into()));
        }
        match self.model {
            TrafficModel::OpenBatch | TrafficModel::PartlyOpen => {
                if !(self.load >= 0.0 && self.load < 1.0) {
                    return Err(Error::Unstable(self.load));
                }
                let shares: f64 = self.classes.iter().map(|c| c.share).sum();
                if (shares - 1.0).abs() > 1e-9 || self.classes.iter().any(|c| c.share < 0.0) {
                    return Err(Error::InvalidParameter(format!("class shares sum to {shares}")));
                }
            }
            TrafficModel::Closed => {
                if self.classes.iter().any(|c| c.clients == 0) {
                    return Err(Error::InvalidParameter("closed classes need >= 1 client".into()));
                }
                if !(self.load > 0.0 && self.load < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "closed utilization {} must lie in (0, 1)",
                        self.load
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_clients(&self) -> u64 {
        self.classes.iter().map(|c| c.clients).sum()
    }

    pub fn with_load(&self, load: f64) -> Self {
        TrafficSpec {
            load,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Arrival,
    Departure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    pub entity_id: u64,
    pub flow_id: u64,
    pub class: usize,
    /// Work left in the entity after the event.
    pub remaining_work: f64,
}

pub fn write_event_log<W: Write>(mut w: W, events: &[EventRecord]) -> Result<()> {
    writeln!(w, "time,event-kind,entity-id,class,remaining-work")?;
    for e in events {
        let kind = match e.kind {
            EventKind::Arrival => "arrival",
            EventKind::Departure => "departure",
        };
        writeln!(
            w,
            "{},{},{},{},{}",
            crate::experiments::fmt_float(e.time),
            kind,
            e.entity_id,
            e.class,
            crate::experiments::fmt_float(e.remaining_work)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Completed flows after which the run stops.
    pub horizon: u64,
    pub warmup_fraction: f64,
    pub bins: usize,
    pub record_events: bool,
    /// Verifies busy-iff-work at every event (O(n) per event).
    pub check_invariants: bool,
}

impl RunOptions {
    pub fn new(horizon: u64) -> Self {
        RunOptions {
            horizon,
            warmup_fraction: WARMUP_FRACTION,
            bins: DEFAULT_BATCHES,
            record_events: false,
            check_invariants: false,
        }
    }
}

/// Flow and work bookkeeping at the end of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Conservation {
    pub arrived_flows: u64,
    pub completed_flows: u64,
    pub in_flight_flows: u64,
    pub arrived_work: f64,
    pub served_work: f64,
    pub residual_work: f64,
}

impl Conservation {
    /// `arrived - served - residual`, zero up to rounding.
    pub fn work_imbalance(&self) -> f64 {
        self.arrived_work - self.served_work - self.residual_work
    }

    fn add(&mut self, o: &Conservation) {
        self.arrived_flows += o.arrived_flows;
        self.completed_flows += o.completed_flows;
        self.in_flight_flows += o.in_flight_flows;
        self.arrived_work += o.arrived_work;
        self.served_work += o.served_work;
        self.residual_work += o.residual_work;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub mean_fct: Estimate,
    pub mean_bct: Estimate,
    pub normalized_fct: Estimate,
    pub normalized_bct: Estimate,
    /// 99.9th percentile of the time-weighted number of active entities.
    pub p999_active: f64,
    pub mean_active: f64,
    pub completed_flows: u64,
    pub completed_batches: u64,
}

impl ClassReport {
    fn from_parts(bm: &BatchMeans, occ: &Occupancy) -> Self {
        let t = bm.total();
        ClassReport {
            mean_fct: bm.mean_fct(),
            mean_bct: bm.mean_bct(),
            normalized_fct: bm.normalized_fct(),
            normalized_bct: bm.normalized_bct(),
            p999_active: occ.percentile(99.9),
            mean_active: occ.mean(),
            completed_flows: t.flows,
            completed_batches: t.batches,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub discipline: Discipline,
    pub seeds: Vec<u64>,
    pub horizon: u64,
    pub overall: ClassReport,
    pub classes: Vec<ClassReport>,
    /// Busy fraction after warm-up.
    pub utilization: f64,
    pub conservation: Conservation,
}

/// Raw accumulators of one replication, poolable across seeds.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub discipline: Discipline,
    pub seed: u64,
    pub horizon: u64,
    pub overall: BatchMeans,
    pub classes: Vec<BatchMeans>,
    pub occupancy: Occupancy,
    pub class_occupancy: Vec<Occupancy>,
    pub measured_time: f64,
    pub measured_busy: f64,
    pub conservation: Conservation,
    pub events: Vec<EventRecord>,
}

impl SimOutcome {
    pub fn report(&self) -> SimReport {
        pool(std::slice::from_ref(self)).expect("single outcome pools")
    }
}

/// Pools replications of the same configuration by concatenating their
/// batch-means bins.
pub fn pool(outcomes: &[SimOutcome]) -> Result<SimReport> {
    let first = outcomes
        .first()
        .ok_or_else(|| Error::InvalidParameter("nothing to pool".into()))?;
    let mut overall = BatchMeans::default();
    let mut classes = vec![BatchMeans::default(); first.classes.len()];
    let mut occ = Occupancy::default();
    let mut class_occ = vec![Occupancy::default(); first.classes.len()];
    let mut cons = Conservation::default();
    let (mut time, mut busy) = (0.0, 0.0);
    for o in outcomes {
        if o.discipline != first.discipline || o.classes.len() != classes.len() {
            return Err(Error::InvalidParameter("pooling mismatched runs".into()));
        }
        overall.pool(&o.overall);
        for (c, bm) in classes.iter_mut().zip(&o.classes) {
            c.pool(bm);
        }
        occ.merge(&o.occupancy);
        for (c, h) in class_occ.iter_mut().zip(&o.class_occupancy) {
            c.merge(h);
        }
        cons.add(&o.conservation);
        time += o.measured_time;
        busy += o.measured_busy;
    }
    Ok(SimReport {
        discipline: first.discipline,
        seeds: outcomes.iter().map(|o| o.seed).collect(),
        horizon: first.horizon,
        overall: ClassReport::from_parts(&overall, &occ),
        classes: classes
            .iter()
            .zip(&class_occ)
            .map(|(b, h)| ClassReport::from_parts(b, h))
            .collect(),
        utilization: if time > 0.0 { busy / time } else { 0.0 },
        conservation: cons,
    })
}

/// Runs one replication of `spec` under `disc` until `horizon` flows complete.
pub fn run(spec: &TrafficSpec, disc: Discipline, horizon: u64, seed: u64) -> Result<SimReport> {
    if horizon < MIN_HORIZON {
        return Err(Error::InvalidParameter(format!(
            "horizon {horizon} below the minimum of {MIN_HORIZON} flows"
        )));
    }
    Ok(run_with(spec, disc, seed, &RunOptions::new(horizon))?.report())
}

pub fn run_with(spec: &TrafficSpec, disc: Discipline, seed: u64, opts: &RunOptions) -> Result<SimOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arrivals = Arrivals::new(spec, &mut rng)?;
    Engine::new(disc, spec.classes.len(), seed, opts).run(arrivals, &mut rng)
}

/// Replays an explicit arrival trace; the run ends when the trace is drained
/// or `opts.horizon` flows complete.
pub fn run_trace(trace: Vec<ArrivalGroup>, disc: Discipline, opts: &RunOptions) -> Result<SimOutcome> {
    let classes = trace.iter().map(|g| g.class + 1).max().unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Engine::new(disc, classes, 0, opts).run(Arrivals::from_trace(trace), &mut rng)
}

struct BatchTrack {
    arrival: f64,
    left: usize,
    size: f64,
    class: usize,
    origin: Origin,
}

struct Engine<'a> {
    disc: Discipline,
    classes: usize,
    seed: u64,
    opts: &'a RunOptions,
}

impl<'a> Engine<'a> {
    fn new(disc: Discipline, classes: usize, seed: u64, opts: &'a RunOptions) -> Self {
        Engine {
            disc,
            classes,
            seed,
            opts,
        }
    }

    fn run(&self, mut arrivals: Arrivals, rng: &mut ChaCha8Rng) -> Result<SimOutcome> {
        let opts = self.opts;
        let bins = opts.bins.max(1);
        let warm = (opts.horizon as f64 * opts.warmup_fraction).round() as u64;
        let measured = (opts.horizon - warm).max(1);

        let mut sched = make_scheduler(self.disc.policy);
        let mut overall = BatchMeans::new(bins);
        let mut per_class = vec![BatchMeans::new(bins); self.classes];
        let mut occ = Occupancy::default();
        let mut class_occ = vec![Occupancy::default(); self.classes];
        let mut class_active = vec![0usize; self.classes];
        let mut batches: HashMap<u64, BatchTrack> = HashMap::new();
        let mut events = Vec::new();
        let mut cons = Conservation::default();

        let (mut next_flow, mut next_batch, mut next_entity) = (0u64, 0u64, 0u64);
        let mut now = 0.0_f64;
        let mut measure_start = if warm == 0 { Some(0.0) } else { None };
        let mut measured_busy = 0.0;

        while cons.completed_flows < opts.horizon {
            let t_arr = arrivals.next_time();
            let t_dep = sched.next_departure().unwrap_or(f64::INFINITY);
            let t = t_arr.min(t_dep);
            if t.is_infinite() {
                break;
            }
            if t.is_nan() || t < now - 1e-9 * now.abs().max(1.0) {
                return Err(Error::Corrupted(format!(
                    "next event at {t} precedes clock {now} (arrival {t_arr}, departure {t_dep})"
                )));
            }
            let t = t.max(now);
            let dt = t - now;
            let active = sched.active_entities();
            if active > 0 {
                cons.served_work += dt;
            }
            if measure_start.is_some() {
                occ.record(active, dt);
                for (c, &n) in class_active.iter().enumerate() {
                    class_occ[c].record(n, dt);
                }
                if active > 0 {
                    measured_busy += dt;
                }
            }
            sched.advance(t);
            now = t;

            if t_dep <= t_arr {
                let d = sched
                    .depart()
                    .ok_or_else(|| Error::Corrupted("departure from empty scheduler".into()))?;
                cons.completed_flows += 1;
                let flow = &d.flow;
                let class = flow.class;
                if d.entity_done {
                    class_active[class] -= 1;
                }
                let in_window = cons.completed_flows > warm;
                let bin = if in_window {
                    ((cons.completed_flows - warm - 1) as usize * bins / measured as usize).min(bins - 1)
                } else {
                    0
                };
                if in_window {
                    let fct = now - flow.arrival;
                    for bm in [&mut overall, &mut per_class[class]] {
                        let b = &mut bm.bins[bin];
                        b.flows += 1;
                        b.fct_sum += fct;
                        b.size_sum += flow.size;
                    }
                }
                let track = batches
                    .get_mut(&flow.batch_id)
                    .ok_or_else(|| Error::Corrupted(format!("unknown batch {}", flow.batch_id)))?;
                track.left -= 1;
                let origin = track.origin;
                if track.left == 0 {
                    let track = batches.remove(&flow.batch_id).expect("present");
                    if in_window {
                        let bct = now - track.arrival;
                        for bm in [&mut overall, &mut per_class[track.class]] {
                            let b = &mut bm.bins[bin];
                            b.batches += 1;
                            b.bct_sum += bct;
                            b.batch_size_sum += track.size;
                        }
                    }
                }
                if cons.completed_flows == warm && measure_start.is_none() {
                    measure_start = Some(now);
                }
                if opts.record_events {
                    events.push(EventRecord {
                        time: now,
                        kind: EventKind::Departure,
                        entity_id: d.entity_id,
                        flow_id: flow.flow_id,
                        class,
                        remaining_work: d.entity_remaining,
                    });
                }
                arrivals.on_departure(class, origin, now, rng);
            } else {
                let g = arrivals
                    .pop(rng)
                    .ok_or_else(|| Error::Corrupted("arrival calendar empty".into()))?;
                self.admit(
                    g,
                    now,
                    &mut *sched,
                    &mut batches,
                    &mut class_active,
                    &mut cons,
                    &mut events,
                    (&mut next_flow, &mut next_batch, &mut next_entity),
                );
            }

            if opts.check_invariants {
                let w = sched.remaining_work();
                if (sched.active_entities() > 0) != (w > 0.0) {
                    return Err(Error::Corrupted(format!(
                        "{} active entities with remaining work {w}",
                        sched.active_entities()
                    )));
                }
            }
        }

        cons.in_flight_flows = sched.active_flows() as u64;
        cons.residual_work = sched.remaining_work();
        let start = measure_start.unwrap_or(now);
        Ok(SimOutcome {
            discipline: self.disc,
            seed: self.seed,
            horizon: opts.horizon,
            overall,
            classes: per_class,
            occupancy: occ,
            class_occupancy: class_occ,
            measured_time: now - start,
            measured_busy,
            conservation: cons,
            events,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn admit(
        &self,
        g: ArrivalGroup,
        now: f64,
        sched: &mut dyn scheduler::Scheduler,
        batches: &mut HashMap<u64, BatchTrack>,
        class_active: &mut [usize],
        cons: &mut Conservation,
        events: &mut Vec<EventRecord>,
        ids: (&mut u64, &mut u64, &mut u64),
    ) {
        let (next_flow, next_batch, next_entity) = ids;
        let batch_id = *next_batch;
        *next_batch += 1;
        let size: f64 = g.sizes.iter().sum();
        batches.insert(
            batch_id,
            BatchTrack {
                arrival: now,
                left: g.sizes.len(),
                size,
                class: g.class,
                origin: g.origin,
            },
        );
        cons.arrived_flows += g.sizes.len() as u64;
        cons.arrived_work += size;
        let tickets: Vec<FlowTicket> = g
            .sizes
            .iter()
            .map(|&s| {
                let t = FlowTicket {
                    flow_id: *next_flow,
                    batch_id,
                    class: g.class,
                    size: s,
                    arrival: now,
                };
                *next_flow += 1;
                t
            })
            .collect();
        let entities: Vec<Entity> = match self.disc.granularity {
            Granularity::PerFlow => tickets
                .into_iter()
                .map(|t| {
                    let e = Entity::new(*next_entity, g.class, vec![t]);
                    *next_entity += 1;
                    e
                })
                .collect(),
            Granularity::PerBatch => {
                let e = Entity::new(*next_entity, g.class, tickets);
                *next_entity += 1;
                vec![e]
            }
        };
        for e in entities {
            class_active[g.class] += 1;
            if self.opts.record_events {
                events.push(EventRecord {
                    time: now,
                    kind: EventKind::Arrival,
                    entity_id: e.id,
                    flow_id: e.flows[0].flow_id,
                    class: g.class,
                    remaining_work: e.total,
                });
            }
            sched.admit(e);
        }
    }
}
