//! Single-link schedulers over scheduling entities.
//!
//! An [`Entity`] is what the scheduler sees: a single flow under per-flow
//! granularity, or a whole batch under per-batch granularity. A batch entity
//! serves its own flows one after another in ascending size, so each flow
//! completion is a milestone in the entity's attained service.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use super::Policy;

/// One flow carried by an entity.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTicket {
    pub flow_id: u64,
    pub batch_id: u64,
    pub class: usize,
    pub size: f64,
    pub arrival: f64,
}

#[derive(Debug, Clone)]
pub struct Entity {
    /// Admission order; ties on the scheduling key go to the smaller id.
    pub id: u64,
    pub class: usize,
    /// Flows sorted by ascending size.
    pub flows: Vec<FlowTicket>,
    pub total: f64,
    attained: f64,
    next_flow: usize,
    milestone: f64,
    // PS only: virtual time at admission.
    origin_v: f64,
}

impl Entity {
    pub fn new(id: u64, class: usize, mut flows: Vec<FlowTicket>) -> Self {
        assert!(!flows.is_empty(), "entity without flows");
        flows.sort_by(|a, b| a.size.total_cmp(&b.size).then(a.flow_id.cmp(&b.flow_id)));
        let total = flows.iter().map(|f| f.size).sum();
        let milestone = flows[0].size;
        Entity {
            id,
            class,
            flows,
            total,
            attained: 0.0,
            next_flow: 0,
            milestone,
            origin_v: 0.0,
        }
    }

    pub fn remaining(&self) -> f64 {
        (self.total - self.attained).max(0.0)
    }

    pub fn flows_left(&self) -> usize {
        self.flows.len() - self.next_flow
    }

    /// Marks the next flow finished; returns it and whether the entity is done.
    fn finish_next(&mut self) -> (FlowTicket, bool) {
        self.attained = self.milestone;
        let flow = self.flows[self.next_flow].clone();
        self.next_flow += 1;
        let done = self.next_flow == self.flows.len();
        if done {
            self.attained = self.total;
        } else {
            self.milestone += self.flows[self.next_flow].size;
        }
        (flow, done)
    }
}

/// A flow completion reported by a scheduler.
#[derive(Debug, Clone, PartialEq)]
pub struct Departure {
    pub entity_id: u64,
    pub flow: FlowTicket,
    pub entity_done: bool,
    /// Work left in the entity after this completion.
    pub entity_remaining: f64,
}

pub trait Scheduler {
    /// Adds an entity at the current time (call [`advance`](Self::advance) first).
    fn admit(&mut self, entity: Entity);
    /// Moves the clock to `now`, depleting work at the current rates.
    fn advance(&mut self, now: f64);
    /// Time of the next flow completion if nothing else arrives.
    fn next_departure(&self) -> Option<f64>;
    /// Completes the milestone due at the current time.
    fn depart(&mut self) -> Option<Departure>;
    fn active_entities(&self) -> usize;
    fn active_flows(&self) -> usize;
    fn remaining_work(&self) -> f64;
    /// Current service rate of every active entity, keyed by entity id.
    fn rates(&self) -> Vec<(u64, f64)>;
    /// Active entity count per class.
    fn class_counts(&self, classes: usize) -> Vec<usize>;
}

struct Keyed {
    key: f64,
    entity: Entity,
}

impl PartialEq for Keyed {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Keyed {}
impl PartialOrd for Keyed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Keyed {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key
            .total_cmp(&other.key)
            .then(self.entity.id.cmp(&other.entity.id))
    }
}

/// Preemptive priority service of one entity at a time: SRPT keys on
/// remaining work, PSJF on original size.
pub struct PriorityScheduler {
    policy: Policy,
    now: f64,
    current: Option<Entity>,
    waiting: BinaryHeap<Reverse<Keyed>>,
    flows: usize,
}

impl PriorityScheduler {
    pub fn new(policy: Policy) -> Self {
        assert!(matches!(policy, Policy::Srpt | Policy::Psjf));
        PriorityScheduler {
            policy,
            now: 0.0,
            current: None,
            waiting: BinaryHeap::new(),
            flows: 0,
        }
    }

    fn key(&self, e: &Entity) -> f64 {
        match self.policy {
            Policy::Srpt => e.remaining(),
            _ => e.total,
        }
    }
}

impl Scheduler for PriorityScheduler {
    fn admit(&mut self, entity: Entity) {
        self.flows += entity.flows_left();
        let key = self.key(&entity);
        match self.current.take() {
            None => self.current = Some(entity),
            Some(cur) => {
                let cur_key = self.key(&cur);
                let preempt = key.total_cmp(&cur_key).then(entity.id.cmp(&cur.id)) == Ordering::Less;
                let (serve, park, park_key) = if preempt {
                    (entity, cur, cur_key)
                } else {
                    (cur, entity, key)
                };
                self.current = Some(serve);
                self.waiting.push(Reverse(Keyed {
                    key: park_key,
                    entity: park,
                }));
            }
        }
    }

    fn advance(&mut self, now: f64) {
        if let Some(cur) = self.current.as_mut() {
            cur.attained = (cur.attained + (now - self.now)).min(cur.milestone);
        }
        self.now = now;
    }

    fn next_departure(&self) -> Option<f64> {
        self.current
            .as_ref()
            .map(|c| self.now + (c.milestone - c.attained).max(0.0))
    }

    fn depart(&mut self) -> Option<Departure> {
        let cur = self.current.as_mut()?;
        let (flow, done) = cur.finish_next();
        let entity_id = cur.id;
        let entity_remaining = cur.remaining();
        self.flows -= 1;
        if done {
            self.current = self.waiting.pop().map(|Reverse(k)| k.entity);
        }
        Some(Departure {
            entity_id,
            flow,
            entity_done: done,
            entity_remaining,
        })
    }

    fn active_entities(&self) -> usize {
        self.current.is_some() as usize + self.waiting.len()
    }

    fn active_flows(&self) -> usize {
        self.flows
    }

    fn remaining_work(&self) -> f64 {
        self.current.iter().map(Entity::remaining).sum::<f64>()
            + self.waiting.iter().map(|k| k.0.entity.remaining()).sum::<f64>()
    }

    fn rates(&self) -> Vec<(u64, f64)> {
        let mut r: Vec<(u64, f64)> = self.current.iter().map(|c| (c.id, 1.0)).collect();
        r.extend(self.waiting.iter().map(|k| (k.0.entity.id, 0.0)));
        r
    }

    fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for e in self.current.iter().chain(self.waiting.iter().map(|k| &k.0.entity)) {
            c[e.class] += 1;
        }
        c
    }
}

/// Egalitarian processor sharing with exact piecewise-linear depletion.
///
/// Every active entity receives rate `1/n`, so all attained-service values
/// grow together with a shared virtual clock `v`; an entity reaches its next
/// milestone when `v` hits `origin_v + milestone`.
pub struct PsScheduler {
    now: f64,
    v: f64,
    heap: BinaryHeap<Reverse<Keyed>>,
    flows: usize,
}

impl Default for PsScheduler {
    fn default() -> Self {
        Self::new()
    }
}

impl PsScheduler {
    pub fn new() -> Self {
        PsScheduler {
            now: 0.0,
            v: 0.0,
            heap: BinaryHeap::new(),
            flows: 0,
        }
    }
}

impl Scheduler for PsScheduler {
    fn admit(&mut self, mut entity: Entity) {
        self.flows += entity.flows_left();
        entity.origin_v = self.v - entity.attained;
        let key = entity.origin_v + entity.milestone;
        self.heap.push(Reverse(Keyed { key, entity }));
    }

    fn advance(&mut self, now: f64) {
        let n = self.heap.len();
        if n > 0 {
            self.v += (now - self.now) / n as f64;
        }
        self.now = now;
    }

    fn next_departure(&self) -> Option<f64> {
        self.heap
            .peek()
            .map(|k| self.now + (k.0.key - self.v).max(0.0) * self.heap.len() as f64)
    }

    fn depart(&mut self) -> Option<Departure> {
        let Reverse(Keyed { key, mut entity }) = self.heap.pop()?;
        self.v = self.v.max(key);
        let (flow, done) = entity.finish_next();
        self.flows -= 1;
        let dep = Departure {
            entity_id: entity.id,
            flow,
            entity_done: done,
            entity_remaining: entity.remaining(),
        };
        if !done {
            let key = entity.origin_v + entity.milestone;
            self.heap.push(Reverse(Keyed { key, entity }));
        } else if self.heap.is_empty() {
            // Restart the virtual clock whenever the system empties.
            self.v = 0.0;
        }
        Some(dep)
    }

    fn active_entities(&self) -> usize {
        self.heap.len()
    }

    fn active_flows(&self) -> usize {
        self.flows
    }

    fn remaining_work(&self) -> f64 {
        self.heap
            .iter()
            .map(|k| (k.0.entity.origin_v + k.0.entity.total - self.v).max(0.0))
            .sum()
    }

    fn rates(&self) -> Vec<(u64, f64)> {
        let n = self.heap.len() as f64;
        self.heap.iter().map(|k| (k.0.entity.id, 1.0 / n)).collect()
    }

    fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for k in &self.heap {
            c[k.0.entity.class] += 1;
        }
        c
    }
}

pub fn make_scheduler(policy: Policy) -> Box<dyn Scheduler> {
    match policy {
        Policy::Ps => Box::new(PsScheduler::new()),
        p => Box::new(PriorityScheduler::new(p)),
    }
}
