//! Virtual fair scheduling: per-flow virtual queues drained round robin from
//! a shared credit, with packets dropped once a flow's virtual queue exceeds
//! a threshold.
//!
//! [`VfsState`] is the switch-side state machine. [`run_fig6`] drives it with
//! line-rate large flows plus single-packet flows and measures completion
//! times and active-list occupancy.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowsim::stats::{BatchMeans, Estimate, Occupancy, DEFAULT_BATCHES};

pub const PACKET_BYTES: f64 = 1500.0;
/// 10 Gb/s in bytes per second.
pub const DEFAULT_CAPACITY: f64 = 1.25e9;
pub const DEFAULT_THETA_PACKETS: f64 = 5.0;
pub const LARGE_FLOW_PACKETS: u64 = 3000;
/// Share of the byte load carried by large flows.
pub const LARGE_SHARE: f64 = 0.8;

/// How credit accrued between arrivals is accounted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CreditPolicy {
    /// Credit grows by `C (t_n - t_{n-1})` unconditionally, so capacity
    /// left idle while no flow is active is banked for later.
    Literal,
    /// Accrued credit is capped at the virtual backlog present before the
    /// arrival: capacity beyond it would have gone unused by a fluid server.
    CapAtBacklog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VfsConfig {
    /// Bytes per second.
    pub capacity: f64,
    /// Bytes.
    pub theta: f64,
    pub credit_policy: CreditPolicy,
}

impl Default for VfsConfig {
    fn default() -> Self {
        VfsConfig {
            capacity: DEFAULT_CAPACITY,
            theta: DEFAULT_THETA_PACKETS * PACKET_BYTES,
            credit_policy: CreditPolicy::CapAtBacklog,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketEvent {
    pub time: f64,
    pub flow: u64,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Accept,
    Drop,
}

#[derive(Debug, Clone)]
pub struct VfsState {
    config: VfsConfig,
    table: FxHashMap<u64, f64>,
    /// Front is the head of the round robin.
    active: VecDeque<u64>,
    credit: f64,
    last_arrival: f64,
    backlog: f64,
    accepted_bytes: f64,
    drained_bytes: f64,
    max_packet: f64,
}

impl VfsState {
    pub fn new(config: VfsConfig) -> Result<Self> {
        if !(config.capacity > 0.0 && config.capacity.is_finite()) || !(config.theta >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "capacity {} and threshold {}",
                config.capacity, config.theta
            )));
        }
        Ok(VfsState {
            config,
            table: FxHashMap::default(),
            active: VecDeque::new(),
            credit: 0.0,
            last_arrival: 0.0,
            backlog: 0.0,
            accepted_bytes: 0.0,
            drained_bytes: 0.0,
            max_packet: 0.0,
        })
    }

    pub fn config(&self) -> &VfsConfig {
        &self.config
    }

    pub fn credit(&self) -> f64 {
        self.credit
    }

    pub fn vq(&self, flow: u64) -> Option<f64> {
        self.table.get(&flow).copied()
    }

    pub fn active_len(&self) -> usize {
        self.active.len()
    }

    pub fn head(&self) -> Option<u64> {
        self.active.front().copied()
    }

    pub fn active_flows(&self) -> impl Iterator<Item = u64> + '_ {
        self.active.iter().copied()
    }

    /// Sum of all virtual queues.
    pub fn backlog(&self) -> f64 {
        self.backlog
    }

    pub fn accepted_bytes(&self) -> f64 {
        self.accepted_bytes
    }

    pub fn drained_bytes(&self) -> f64 {
        self.drained_bytes
    }

    pub fn on_arrival(&mut self, pkt: PacketEvent) -> Verdict {
        debug_assert!(pkt.time >= self.last_arrival, "packet times must not decrease");
        let gained = self.config.capacity * (pkt.time - self.last_arrival).max(0.0);
        self.credit += gained;
        if self.config.credit_policy == CreditPolicy::CapAtBacklog && self.credit > self.backlog {
            self.credit = self.backlog;
        }
        self.last_arrival = pkt.time;
        self.max_packet = self.max_packet.max(pkt.length);

        match self.table.get_mut(&pkt.flow) {
            Some(vq) if *vq > self.config.theta => Verdict::Drop,
            Some(vq) => {
                *vq += pkt.length;
                self.backlog += pkt.length;
                self.accepted_bytes += pkt.length;
                Verdict::Accept
            }
            None => {
                self.table.insert(pkt.flow, pkt.length);
                self.active.push_back(pkt.flow);
                self.backlog += pkt.length;
                self.accepted_bytes += pkt.length;
                Verdict::Accept
            }
        }
    }

    /// Spends credit on the head flow and steps the round robin.
    pub fn decrement_epoch(&mut self) {
        let Some(&flow) = self.active.front() else {
            return;
        };
        let vq = self.table.get_mut(&flow).expect("active flow in table");
        if self.credit < *vq {
            *vq -= self.credit;
            self.drained_bytes += self.credit;
            self.backlog -= self.credit;
            self.credit = 0.0;
            self.active.rotate_left(1);
        } else {
            // the next flow becomes head by the removal itself
            let v = *vq;
            self.credit -= v;
            self.drained_bytes += v;
            self.backlog -= v;
            self.table.remove(&flow);
            self.active.pop_front();
            if self.active.is_empty() {
                self.backlog = 0.0;
            }
        }
    }

    /// Arrival followed by the epoch at the same instant.
    pub fn process(&mut self, pkt: PacketEvent) -> Verdict {
        let v = self.on_arrival(pkt);
        self.decrement_epoch();
        v
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.table.len() != self.active.len() {
            return Err(Error::Corrupted(format!(
                "table holds {} flows, active list {}",
                self.table.len(),
                self.active.len()
            )));
        }
        if self.credit < 0.0 {
            return Err(Error::Corrupted(format!("negative credit {}", self.credit)));
        }
        let bound = self.config.theta + self.max_packet;
        for f in &self.active {
            match self.table.get(f) {
                Some(&vq) if vq > 0.0 && vq <= bound => {}
                Some(&vq) => return Err(Error::Corrupted(format!("flow {f} has vq {vq}"))),
                None => return Err(Error::Corrupted(format!("flow {f} missing from table"))),
            }
        }
        Ok(())
    }
}

/// Reads `time,flow-id,length` rows (an optional header is skipped).
pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<PacketEvent>> {
    let mut out = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(Error::Parse(format!("line {}: expected 3 columns", i + 1)));
        }
        let parsed = (cols[0].parse::<f64>(), cols[1].parse::<u64>(), cols[2].parse::<f64>());
        let (time, flow, length) = match parsed {
            (Ok(t), Ok(f), Ok(l)) => (t, f, l),
            _ if i == 0 => continue,
            _ => return Err(Error::Parse(format!("line {}: `{line}`", i + 1))),
        };
        if time < last || !(length > 0.0) {
            return Err(Error::Parse(format!("line {}: time or length out of order", i + 1)));
        }
        last = time;
        out.push(PacketEvent { time, flow, length });
    }
    Ok(out)
}

/// Feeds a trace through arrival plus epoch, checking invariants after
/// every packet.
pub fn replay(config: VfsConfig, trace: &[PacketEvent]) -> Result<Vec<Verdict>> {
    let mut s = VfsState::new(config)?;
    let mut out = Vec::with_capacity(trace.len());
    for &p in trace {
        out.push(s.process(p));
        s.check_invariants()?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig6Options {
    pub vfs: VfsConfig,
    /// Completed large flows after which the run stops.
    pub horizon: u64,
    pub warmup_fraction: f64,
    pub large_packets: u64,
    pub large_share: f64,
}

impl Default for Fig6Options {
    fn default() -> Self {
        Fig6Options {
            vfs: VfsConfig::default(),
            horizon: 20_000,
            warmup_fraction: 0.2,
            large_packets: LARGE_FLOW_PACKETS,
            large_share: LARGE_SHARE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VfsReport {
    pub load: f64,
    /// Large-flow FCT over its no-contention transfer time.
    pub normalized_fct: Estimate,
    /// 99.9th percentile of the active-list length seen by arriving flows.
    pub p999_active: f64,
    pub drop_rate: f64,
    pub theta: f64,
    pub seed: u64,
    pub large_flows: u64,
    pub packets: u64,
}

impl VfsReport {
    pub const CSV_HEADER: &'static str = "load,mean-normalized-fct,ci-half-width,p999-active-flows,drop-rate,theta,seed";

    pub fn csv_row(&self) -> String {
        use crate::experiments::fmt_float as f;
        format!(
            "{},{},{},{},{},{},{}",
            f(self.load),
            f(self.normalized_fct.mean),
            f(self.normalized_fct.half_width),
            f(self.p999_active),
            f(self.drop_rate),
            f(self.theta),
            self.seed
        )
    }
}

pub fn write_reports<W: Write>(mut w: W, reports: &[VfsReport]) -> Result<()> {
    writeln!(w, "{}", VfsReport::CSV_HEADER)?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

struct LargeFlow {
    id: u64,
    start: f64,
    accepted: u64,
    offered: u64,
    next: f64,
}

/// Raw accumulators of one validation run, poolable across seeds.
#[derive(Debug, Clone)]
pub struct Fig6Outcome {
    pub load: f64,
    pub seed: u64,
    pub theta: f64,
    pub fct: BatchMeans,
    pub occupancy: Occupancy,
    pub packets: u64,
    pub dropped: u64,
    pub large_flows: u64,
}

impl Fig6Outcome {
    pub fn pool(outcomes: &[Fig6Outcome]) -> Result<VfsReport> {
        let first = outcomes
            .first()
            .ok_or_else(|| Error::InvalidParameter("nothing to pool".into()))?;
        let mut fct = BatchMeans::default();
        let mut occ = Occupancy::default();
        let (mut packets, mut dropped, mut flows) = (0, 0, 0);
        for o in outcomes {
            fct.pool(&o.fct);
            occ.merge(&o.occupancy);
            packets += o.packets;
            dropped += o.dropped;
            flows += o.large_flows;
        }
        Ok(VfsReport {
            load: first.load,
            normalized_fct: fct.mean_fct(),
            p999_active: occ.percentile(99.9),
            drop_rate: dropped as f64 / packets.max(1) as f64,
            theta: first.theta,
            seed: first.seed,
            large_flows: flows,
            packets,
        })
    }
}

/// Packet-level validation run: Poisson line-rate large flows carrying
/// `large_share` of the bytes plus Poisson single-packet flows.
pub fn run_fig6(load: f64, seed: u64, opts: &Fig6Options) -> Result<VfsReport> {
    Fig6Outcome::pool(&[run_fig6_outcome(load, seed, opts)?])
}

pub fn run_fig6_outcome(load: f64, seed: u64, opts: &Fig6Options) -> Result<Fig6Outcome> {
    if !(load > 0.0 && load < 1.0) {
        return Err(Error::Unstable(load));
    }
    if opts.horizon == 0 || !(opts.large_share > 0.0 && opts.large_share <= 1.0) {
        return Err(Error::InvalidParameter("empty horizon or bad large-flow share".into()));
    }
    let cap = opts.vfs.capacity;
    let slot = PACKET_BYTES / cap;
    let large_bytes = opts.large_packets as f64 * PACKET_BYTES;
    let large_rate = load * opts.large_share * cap / large_bytes;
    let single_rate = load * (1.0 - opts.large_share) * cap / PACKET_BYTES;
    let ideal = opts.large_packets as f64 * slot;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = |rate: f64, rng: &mut ChaCha8Rng| {
        if rate > 0.0 {
            -(1.0 - rng.random::<f64>()).ln() / rate
        } else {
            f64::INFINITY
        }
    };
    let mut state = VfsState::new(opts.vfs)?;
    // Every large flow emits once per slot, so re-queueing near the back
    // keeps the ring sorted by next emission time.
    let mut ring: VecDeque<LargeFlow> = VecDeque::new();
    let mut next_large = exp(large_rate, &mut rng);
    let mut next_single = exp(single_rate, &mut rng);
    let mut next_id = 0u64;

    let warm = (opts.horizon as f64 * opts.warmup_fraction).round() as u64;
    let bins = DEFAULT_BATCHES;
    let measured = (opts.horizon - warm).max(1);
    let mut fct = BatchMeans::new(bins);
    let mut occupancy = Occupancy::default();
    let mut completed = 0u64;
    let (mut packets, mut dropped) = (0u64, 0u64);

    while completed < opts.horizon {
        let ring_next = ring.front().map_or(f64::INFINITY, |f| f.next);
        packets += 1;
        if next_large <= ring_next && next_large <= next_single {
            let now = next_large;
            next_large = now + exp(large_rate, &mut rng);
            if completed >= warm {
                occupancy.record(state.active_len(), 1.0);
            }
            let flow = LargeFlow {
                id: next_id,
                start: now,
                accepted: 0,
                offered: 0,
                next: now,
            };
            next_id += 1;
            // lands after every flow already due at or before `now`
            let at = ring.partition_point(|f| f.next <= now);
            ring.insert(at, flow);
            packets -= 1;
            continue;
        }
        if next_single <= ring_next {
            let now = next_single;
            next_single = now + exp(single_rate, &mut rng);
            if completed >= warm {
                occupancy.record(state.active_len(), 1.0);
            }
            let v = state.process(PacketEvent {
                time: now,
                flow: next_id,
                length: PACKET_BYTES,
            });
            next_id += 1;
            if v == Verdict::Drop {
                dropped += 1;
            }
            continue;
        }
        let mut lf = ring.pop_front().expect("ring is nonempty");
        let now = lf.next;
        let v = state.process(PacketEvent {
            time: now,
            flow: lf.id,
            length: PACKET_BYTES,
        });
        lf.offered += 1;
        match v {
            Verdict::Accept => lf.accepted += 1,
            Verdict::Drop => dropped += 1,
        }
        if lf.accepted == opts.large_packets {
            completed += 1;
            if completed > warm {
                let bin = (((completed - warm - 1) as usize) * bins / measured as usize).min(bins - 1);
                let b = &mut fct.bins[bin];
                b.flows += 1;
                b.fct_sum += (now + slot - lf.start) / ideal;
                b.size_sum += 1.0;
            }
        } else {
            // next line-rate slot, whether or not this packet got through
            lf.next = lf.start + lf.offered as f64 * slot;
            // rounding can put near-equal phases out of order by an ulp
            let mut at = ring.len();
            while at > 0 && ring[at - 1].next > lf.next {
                at -= 1;
            }
            ring.insert(at, lf);
        }
    }

    Ok(Fig6Outcome {
        load,
        seed,
        theta: opts.vfs.theta,
        fct,
        occupancy,
        packets,
        dropped,
        large_flows: completed,
    })
}

/// Geometric percentile of the number of flows in an M/G/1-PS queue.
pub fn ps_active_percentile(load: f64, p: f64) -> f64 {
    (1.0 - p / 100.0).ln() / load.ln()
}
