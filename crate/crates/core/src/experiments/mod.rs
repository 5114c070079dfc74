//! Experiment configs, load sweeps, replication management, CSV output and
//! the analysis-versus-simulation comparison.

pub mod presets;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{psjf_mean_bct, psjf_mean_fct, BatchModelParams};
use crate::distributions::{DistSpec, WidthSpec};
use crate::error::{Error, Result};
use crate::flowsim::stats::Estimate;
use crate::flowsim::{
    self, ClassSpec, Discipline, Granularity, Policy, RunOptions, SimOutcome, SimReport, TrafficModel,
    TrafficSpec, MIN_HORIZON,
};

pub use presets::{preset, Check, CheckOutcome, Preset, VfsPreset, PRESET_IDS};

pub const DEFAULT_REPLICATIONS: usize = 5;
pub const DEFAULT_HORIZON: u64 = 1_000_000;
pub const THREADS_ENV: &str = "QSCHED_THREADS";

pub fn default_loads() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// Ten significant digits, scientific notation.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.9e}")
    }
}

fn one() -> f64 {
    1.0
}

fn single_width() -> WidthSpec {
    WidthSpec {
        kind: "deterministic".into(),
        mean: 1.0,
        cv2: None,
    }
}

fn unit_think() -> DistSpec {
    DistSpec {
        kind: "exponential".into(),
        mean: 1.0,
        shape: None,
        cv2: None,
    }
}

fn default_replications() -> usize {
    DEFAULT_REPLICATIONS
}

fn default_horizon() -> u64 {
    DEFAULT_HORIZON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub size: DistSpec,
    /// Batch width (open) or burst length (partly-open).
    #[serde(default = "single_width")]
    pub width: WidthSpec,
    #[serde(default = "unit_think")]
    pub think: DistSpec,
    #[serde(default = "one")]
    pub share: f64,
    #[serde(default)]
    pub clients: u64,
}

impl ClassConfig {
    pub fn build(&self) -> Result<ClassSpec> {
        Ok(ClassSpec {
            size: self.size.build()?,
            width: self.width.build()?,
            think: self.think.build()?,
            share: self.share,
            clients: self.clients,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficConfig {
    pub model: TrafficModel,
    pub classes: Vec<ClassConfig>,
}

impl TrafficConfig {
    pub fn build(&self, load: f64) -> Result<TrafficSpec> {
        let spec = TrafficSpec {
            model: self.model,
            classes: self.classes.iter().map(ClassConfig::build).collect::<Result<_>>()?,
            load,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub label: String,
    pub traffic: TrafficConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenarios: Vec<Scenario>,
    pub disciplines: Vec<Discipline>,
    #[serde(default = "default_loads")]
    pub loads: Vec<f64>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    /// Base seed; per-run seeds are derived from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    /// Emit analytic rows where a formula applies.
    #[serde(default)]
    pub analysis: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() || self.disciplines.is_empty() || self.loads.is_empty() {
            return Err(Error::InvalidParameter(
                "config needs at least one scenario, discipline and load".into(),
            ));
        }
        if self.replications == 0 {
            return Err(Error::InvalidParameter("replications must be >= 1".into()));
        }
        if self.horizon < MIN_HORIZON {
            return Err(Error::InvalidParameter(format!(
                "horizon {} below the minimum of {MIN_HORIZON}",
                self.horizon
            )));
        }
        for s in &self.scenarios {
            for &l in &self.loads {
                s.traffic.build(l)?;
            }
        }
        Ok(())
    }
}

/// Independent seed for (base, scenario, load, replication). Disciplines
/// share seeds so that they see common random numbers.
pub fn derive_seed(base: u64, scenario: usize, load: usize, replication: usize) -> u64 {
    let mut z = base;
    for v in [scenario as u64, load as u64, replication as u64] {
        z = splitmix(z ^ splitmix(v.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Worker count from `QSCHED_THREADS`, if set.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.parse().ok().filter(|&n| n > 0)
}

/// Runs `f` over `jobs` on a pool capped by `QSCHED_THREADS`.
pub fn run_jobs<J, T, F>(jobs: Vec<J>, f: F) -> Result<Vec<T>>
where
    J: Send,
    T: Send,
    F: Fn(J) -> Result<T> + Sync + Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(|| jobs.into_par_iter().map(f).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowSource {
    Analysis,
    Simulation,
}

/// One CSV row. Values not produced by the source are NaN (written empty).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub figure: String,
    pub scenario: String,
    pub source: RowSource,
    pub discipline: Discipline,
    /// `all` or a 1-based class index.
    pub class: String,
    pub load: f64,
    pub mean_fct: Estimate,
    pub normalized_fct: Estimate,
    pub mean_bct: Estimate,
    pub normalized_bct: Estimate,
    pub p999_active: f64,
    pub utilization: f64,
    pub completed_flows: u64,
    pub seeds: Vec<u64>,
}

pub const CSV_HEADER: &str = "figure,scenario,source,discipline,class,load,\
mean-fct,mean-fct-hw,normalized-fct,normalized-fct-hw,\
mean-bct,mean-bct-hw,normalized-bct,normalized-bct-hw,\
p999-active,utilization,completed-flows,seeds";

const NA: Estimate = Estimate {
    mean: f64::NAN,
    half_width: f64::NAN,
};

impl ResultRow {
    pub fn csv(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            self.figure,
            self.scenario,
            match self.source {
                RowSource::Analysis => "analysis",
                RowSource::Simulation => "simulation",
            },
            self.discipline,
            self.class,
            fmt_float(self.load)
        );
        for e in [self.mean_fct, self.normalized_fct, self.mean_bct, self.normalized_bct] {
            let _ = write!(s, ",{},{}", fmt_float(e.mean), fmt_float(e.half_width));
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = write!(
            s,
            ",{},{},{},{}",
            fmt_float(self.p999_active),
            fmt_float(self.utilization),
            self.completed_flows,
            seeds.join(";")
        );
        s
    }
}

pub fn write_rows<W: Write>(mut w: W, rows: &[ResultRow]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

/// Gnuplot data blocks: one block per (scenario, source, discipline, class),
/// separated by two blank lines, columns `load value half-width`.
pub fn write_gnuplot<W: Write>(mut w: W, rows: &[ResultRow], metric: Metric) -> Result<()> {
    let mut blocks: BTreeMap<(String, RowSource, String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        blocks
            .entry((r.scenario.clone(), r.source, r.discipline.to_string(), r.class.clone()))
            .or_default()
            .push(r);
    }
    let mut first = true;
    for ((scenario, source, disc, class), mut rs) in blocks {
        let vals: Vec<(f64, Estimate)> = {
            rs.sort_by(|a, b| a.load.total_cmp(&b.load));
            rs.iter().map(|r| (r.load, metric.of(r))).collect()
        };
        if vals.iter().all(|(_, e)| e.mean.is_nan()) {
            continue;
        }
        if !first {
            writeln!(w, "\n")?;
        }
        first = false;
        writeln!(w, "# {scenario} {source:?} {disc} class={class}")?;
        for (l, e) in vals {
            let hw = if e.half_width.is_nan() { 0.0 } else { e.half_width };
            writeln!(w, "{} {} {}", fmt_float(l), fmt_float(e.mean), fmt_float(hw))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    MeanFct,
    NormalizedFct,
    MeanBct,
    NormalizedBct,
}

impl Metric {
    pub fn of(self, r: &ResultRow) -> Estimate {
        match self {
            Metric::MeanFct => r.mean_fct,
            Metric::NormalizedFct => r.normalized_fct,
            Metric::MeanBct => r.mean_bct,
            Metric::NormalizedBct => r.normalized_bct,
        }
    }
}

/// Pooled simulation reports of an experiment, keyed by
/// (scenario index, discipline, load index).
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub name: String,
    pub config: ExperimentConfig,
    pub reports: BTreeMap<(usize, String, usize), SimReport>,
    pub rows: Vec<ResultRow>,
}

impl ExperimentResult {
    pub fn report(&self, scenario: usize, disc: Discipline, load: f64) -> Option<&SimReport> {
        let li = self.config.loads.iter().position(|&l| (l - load).abs() < 1e-12)?;
        self.reports.get(&(scenario, disc.to_string(), li))
    }

    pub fn scenario_index(&self, label: &str) -> Option<usize> {
        self.config.scenarios.iter().position(|s| s.label == label)
    }

    pub fn rows_for(&self, scenario: &str, source: RowSource, disc: Discipline, class: &str) -> Vec<&ResultRow> {
        self.rows
            .iter()
            .filter(|r| r.scenario == scenario && r.source == source && r.discipline == disc && r.class == class)
            .collect()
    }
}

/// Runs every (scenario, load, discipline, replication) and pools
/// replications. Output order follows the config, not completion order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for si in 0..cfg.scenarios.len() {
        for li in 0..cfg.loads.len() {
            for (di, _) in cfg.disciplines.iter().enumerate() {
                for r in 0..cfg.replications {
                    jobs.push((si, li, di, r));
                }
            }
        }
    }
    let outcomes: Vec<((usize, usize, usize, usize), SimOutcome)> = run_jobs(jobs, |(si, li, di, r)| {
        let spec = cfg.scenarios[si].traffic.build(cfg.loads[li])?;
        let seed = derive_seed(cfg.seed, si, li, r);
        let out = flowsim::run_with(&spec, cfg.disciplines[di], seed, &RunOptions::new(cfg.horizon))?;
        Ok(((si, li, di, r), out))
    })?;
    let mut grouped: BTreeMap<(usize, usize, usize), Vec<SimOutcome>> = BTreeMap::new();
    for ((si, li, di, _), out) in outcomes {
        grouped.entry((si, li, di)).or_default().push(out);
    }
    let mut reports = BTreeMap::new();
    for ((si, li, di), outs) in &grouped {
        let rep = flowsim::pool(outs)?;
        reports.insert((*si, cfg.disciplines[*di].to_string(), *li), rep);
    }

    let mut rows = Vec::new();
    for (si, sc) in cfg.scenarios.iter().enumerate() {
        if cfg.analysis {
            rows.extend(analysis_rows(cfg, sc)?);
        }
        for &disc in &cfg.disciplines {
            for (li, &load) in cfg.loads.iter().enumerate() {
                let rep = &reports[&(si, disc.to_string(), li)];
                let mk = |class: String, c: &flowsim::ClassReport| ResultRow {
                    figure: cfg.name.clone(),
                    scenario: sc.label.clone(),
                    source: RowSource::Simulation,
                    discipline: disc,
                    class,
                    load,
                    mean_fct: c.mean_fct,
                    normalized_fct: c.normalized_fct,
                    mean_bct: c.mean_bct,
                    normalized_bct: c.normalized_bct,
                    p999_active: c.p999_active,
                    utilization: rep.utilization,
                    completed_flows: c.completed_flows,
                    seeds: rep.seeds.clone(),
                };
                rows.push(mk("all".into(), &rep.overall));
                if rep.classes.len() > 1 {
                    for (ci, c) in rep.classes.iter().enumerate() {
                        rows.push(mk((ci + 1).to_string(), c));
                    }
                }
            }
        }
    }
    Ok(ExperimentResult {
        name: cfg.name.clone(),
        config: cfg.clone(),
        reports,
        rows,
    })
}

/// Per-flow PSJF under open single-class batches with a continuous size
/// law, and PS `1/(1 - rho)` for open and partly-open traffic.
fn analysis_rows(cfg: &ExperimentConfig, sc: &Scenario) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    let t = &sc.traffic;
    let blank = |disc: Discipline, load: f64| ResultRow {
        figure: cfg.name.clone(),
        scenario: sc.label.clone(),
        source: RowSource::Analysis,
        discipline: disc,
        class: "all".into(),
        load,
        mean_fct: NA,
        normalized_fct: NA,
        mean_bct: NA,
        normalized_bct: NA,
        p999_active: f64::NAN,
        utilization: load,
        completed_flows: 0,
        seeds: Vec::new(),
    };
    let exact = |v: f64| Estimate {
        mean: v,
        half_width: 0.0,
    };
    let psjf = Discipline::per_flow(Policy::Psjf);
    if t.model == TrafficModel::OpenBatch && t.classes.len() == 1 && cfg.disciplines.contains(&psjf) {
        let c = t.classes[0].build()?;
        if !c.size.is_atomic() {
            for &load in &cfg.loads {
                let p = BatchModelParams::with_load(load, c.width, c.size)?;
                let fct = psjf_mean_fct(&p)?;
                let bct = psjf_mean_bct(&p)?;
                let mut r = blank(psjf, load);
                r.mean_fct = exact(fct);
                r.normalized_fct = exact(fct / c.size.mean());
                r.mean_bct = exact(bct);
                r.normalized_bct = exact(bct / p.mean_batch_size());
                rows.push(r);
            }
        }
    }
    let ps = Discipline::per_flow(Policy::Ps);
    if t.model != TrafficModel::Closed && cfg.disciplines.contains(&ps) {
        for &load in &cfg.loads {
            let mut r = blank(ps, load);
            r.normalized_fct = exact(1.0 / (1.0 - load));
            r.p999_active = (0.001_f64).ln() / load.ln();
            rows.push(r);
        }
    }
    Ok(rows)
}

/// One point of a series to compare.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub load: f64,
    pub value: Estimate,
}

impl SeriesPoint {
    pub fn exact(load: f64, value: f64) -> Self {
        SeriesPoint {
            load,
            value: Estimate {
                mean: value,
                half_width: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompareMode {
    /// Relative error at most the given fraction.
    Relative(f64),
    /// The analytic value lies inside the simulation's confidence interval.
    WithinCi,
    /// Simulation at most the analytic value plus its half-width.
    AtMost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointVerdict {
    pub load: f64,
    pub analysis: f64,
    pub simulation: Estimate,
    pub relative_error: f64,
    pub ci_overlap: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub points: Vec<PointVerdict>,
    pub max_relative_error: f64,
    pub pass: bool,
}

pub fn compare(analysis: &[SeriesPoint], simulation: &[SeriesPoint], mode: CompareMode) -> Result<Verdict> {
    if analysis.len() != simulation.len()
        || analysis
            .iter()
            .zip(simulation)
            .any(|(a, s)| (a.load - s.load).abs() > 1e-12)
    {
        let grid = |xs: &[SeriesPoint]| xs.iter().map(|p| p.load).collect::<Vec<_>>();
        return Err(Error::GridMismatch(format!(
            "analysis loads {:?} vs simulation loads {:?}",
            grid(analysis),
            grid(simulation)
        )));
    }
    let points: Vec<PointVerdict> = analysis
        .iter()
        .zip(simulation)
        .map(|(a, s)| {
            let av = a.value.mean;
            let sv = s.value;
            let rel = if av == sv.mean { 0.0 } else { (sv.mean - av).abs() / av.abs() };
            let overlap = (sv.mean - av).abs() <= sv.half_width + a.value.half_width;
            let pass = match mode {
                CompareMode::Relative(tol) => rel <= tol,
                CompareMode::WithinCi => overlap,
                CompareMode::AtMost => sv.mean <= av + sv.half_width,
            };
            PointVerdict {
                load: a.load,
                analysis: av,
                simulation: sv,
                relative_error: rel,
                ci_overlap: overlap,
                pass,
            }
        })
        .collect();
    Ok(Verdict {
        max_relative_error: points.iter().map(|p| p.relative_error).fold(0.0, f64::max),
        pass: points.iter().all(|p| p.pass),
        points,
    })
}

/// Short label such as `SRPT` or `batch PS`, used in check messages.
pub fn short_name(d: Discipline) -> String {
    let p = match d.policy() {
        Policy::Srpt => "SRPT",
        Policy::Psjf => "PSJF",
        Policy::Ps => "PS",
    };
    match d.granularity() {
        Granularity::PerFlow => p.to_string(),
        Granularity::PerBatch => format!("batch {p}"),
    }
}
