//! Built-in figure presets and the checks each one embeds.

use serde::{Deserialize, Serialize};

use super::{
    default_loads, derive_seed, run_jobs, short_name, ClassConfig, ExperimentConfig, ExperimentResult,
    Scenario, TrafficConfig, DEFAULT_HORIZON, DEFAULT_REPLICATIONS,
};
use crate::analysis::{psjf_mean_bct, psjf_mean_fct, BatchModelParams};
use crate::distributions::{DistSpec, WidthSpec};
use crate::error::{Error, Result};
use crate::flowsim::stats::Estimate;
use crate::flowsim::{Discipline, Policy, TrafficModel};
use crate::vfs::{self, Fig6Options, Fig6Outcome, VfsReport};

pub const PRESET_IDS: [&str; 9] = [
    "fig2a", "fig2b", "fig3a", "fig3b", "fig4a", "fig4b", "fig5a", "fig5b", "fig6",
];

/// Utilization grid of the closed-model presets, dense near saturation.
pub fn closed_loads() -> Vec<f64> {
    let mut v = default_loads();
    v.extend([0.95, 0.98, 0.99]);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "check")]
pub enum Check {
    /// PSJF analysis of E[FCT] and E[BCT] inside the per-flow PSJF
    /// simulation interval at every load.
    AnalysisWithinCi,
    /// At `load`: per-batch SRPT <= per-batch PS < per-flow SRPT and
    /// per-flow PS, and per-flow SRPT above (or below) per-flow PS, all on
    /// E[BCT] with disjoint intervals.
    BctOrdering { load: f64, srpt_above_ps: bool },
    /// Per-flow PS normalized E[FCT] within `tolerance` of `1/(1 - load)`.
    PsInverseLoad { tolerance: f64 },
    /// PS minus SRPT normalized E[FCT] at `load` decreasing along the
    /// scenario order.
    GapShrinks { load: f64 },
    /// Overall SRPT E[FCT] above PS with disjoint intervals at `load`.
    SrptWorseOverall { load: f64 },
    /// Class 2 normalized SRPT E[FCT] above the PS value at every
    /// utilization from `min_load` on.
    ClassTwoStarved { min_load: f64 },
    /// SRPT E[FCT] differs by less than `tolerance` (relative) between the
    /// first two scenarios at every load.
    SrptInsensitive { tolerance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VfsPreset {
    pub name: String,
    pub loads: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    pub options: Fig6Options,
    /// Relative tolerance on normalized E[FCT] against `1/(1 - load)`.
    pub fct_tolerance: f64,
    /// Absolute tolerance on the 99.9th percentile of the active list at
    /// the highest load in the grid.
    pub p999_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Preset {
    Flow {
        config: ExperimentConfig,
        checks: Vec<Check>,
    },
    Vfs(VfsPreset),
}

fn dist(kind: &str, mean: f64) -> DistSpec {
    DistSpec {
        kind: kind.into(),
        mean,
        shape: None,
        cv2: None,
    }
}

fn weibull_shape(shape: f64) -> DistSpec {
    DistSpec {
        shape: Some(shape),
        ..dist("weibull", 1.0)
    }
}

fn weibull_cv2(mean: f64, cv2: f64) -> DistSpec {
    DistSpec {
        cv2: Some(cv2),
        ..dist("weibull", mean)
    }
}

fn width(kind: &str, mean: f64, cv2: Option<f64>) -> WidthSpec {
    WidthSpec {
        kind: kind.into(),
        mean,
        cv2,
    }
}

fn class(size: DistSpec, w: WidthSpec, share: f64, clients: u64) -> ClassConfig {
    ClassConfig {
        size,
        width: w,
        think: dist("exponential", 1.0),
        share,
        clients,
    }
}

fn scenario(label: &str, model: TrafficModel, classes: Vec<ClassConfig>) -> Scenario {
    Scenario {
        label: label.into(),
        traffic: TrafficConfig { model, classes },
    }
}

/// Batches of 100 heavy-tailed flows decorrelate slowly at high load.
const FIG2_HORIZON: u64 = 10_000_000;

fn flow_preset(
    name: &str,
    scenarios: Vec<Scenario>,
    disciplines: Vec<Discipline>,
    loads: Vec<f64>,
    horizon: u64,
    checks: Vec<Check>,
) -> Preset {
    Preset::Flow {
        config: ExperimentConfig {
            name: name.into(),
            scenarios,
            disciplines,
            loads,
            replications: DEFAULT_REPLICATIONS,
            seed: 20_231_107,
            horizon,
            analysis: true,
            output: None,
        },
        checks,
    }
}

fn all_disciplines() -> Vec<Discipline> {
    vec![
        Discipline::per_flow(Policy::Psjf),
        Discipline::per_flow(Policy::Srpt),
        Discipline::per_flow(Policy::Ps),
        Discipline::per_batch(Policy::Srpt).expect("valid"),
        Discipline::per_batch(Policy::Ps).expect("valid"),
    ]
}

fn srpt_ps() -> Vec<Discipline> {
    vec![Discipline::per_flow(Policy::Srpt), Discipline::per_flow(Policy::Ps)]
}

/// Looks up a built-in preset.
pub fn preset(id: &str) -> Result<Preset> {
    let single = width("deterministic", 1.0, None);
    let geo100 = width("geometric-from-1", 100.0, None);
    let burst5 = width("deterministic", 5.0, None);
    let burst5v = width("two-point", 5.0, Some(10.0));
    let det1 = dist("deterministic", 1.0);
    let open = TrafficModel::OpenBatch;
    let partly = TrafficModel::PartlyOpen;
    let closed = TrafficModel::Closed;

    let fig2 = |name: &str, shape: f64, srpt_above_ps: bool| {
        flow_preset(
            name,
            vec![scenario(
                &format!("weibull-{shape}"),
                open,
                vec![class(weibull_shape(shape), geo100.clone(), 1.0, 0)],
            )],
            all_disciplines(),
            default_loads(),
            FIG2_HORIZON,
            vec![
                Check::AnalysisWithinCi,
                Check::BctOrdering {
                    load: 0.7,
                    srpt_above_ps,
                },
            ],
        )
    };
    let fig3 = |name: &str, size: DistSpec| {
        let sc = |label: &str, w: &WidthSpec| scenario(label, partly, vec![class(size.clone(), w.clone(), 1.0, 0)]);
        flow_preset(
            name,
            vec![sc("(1,0)", &single), sc("(5,0)", &burst5), sc("(5,10)", &burst5v)],
            srpt_ps(),
            default_loads(),
            DEFAULT_HORIZON,
            vec![Check::PsInverseLoad { tolerance: 0.02 }, Check::GapShrinks { load: 0.8 }],
        )
    };
    let fig4 = |name: &str, label: &str, w: &WidthSpec, extra: Vec<Check>| {
        let mut checks = vec![Check::PsInverseLoad { tolerance: 0.02 }];
        checks.extend(extra);
        flow_preset(
            name,
            vec![scenario(
                label,
                partly,
                vec![
                    class(det1.clone(), w.clone(), 0.5, 0),
                    class(dist("deterministic", 2.0), single.clone(), 0.5, 0),
                ],
            )],
            srpt_ps(),
            default_loads(),
            DEFAULT_HORIZON,
            checks,
        )
    };

    Ok(match id {
        "fig2a" => fig2("fig2a", 3.5, true),
        "fig2b" => fig2("fig2b", 0.4, false),
        "fig3a" => fig3("fig3a", det1.clone()),
        "fig3b" => fig3("fig3b", weibull_shape(0.4)),
        "fig4a" => fig4("fig4a", "burst (5,0)", &burst5, vec![]),
        "fig4b" => fig4("fig4b", "burst (5,10)", &burst5v, vec![Check::SrptWorseOverall { load: 0.9 }]),
        "fig5a" => flow_preset(
            "fig5a",
            vec![
                scenario("cv2 0.1", closed, vec![class(weibull_cv2(1.0, 0.1), single.clone(), 1.0, 100)]),
                scenario("cv2 10", closed, vec![class(weibull_cv2(1.0, 10.0), single.clone(), 1.0, 100)]),
            ],
            srpt_ps(),
            closed_loads(),
            DEFAULT_HORIZON,
            vec![Check::SrptInsensitive { tolerance: 0.1 }],
        ),
        "fig5b" => flow_preset(
            "fig5b",
            vec![scenario(
                "50+50 clients",
                closed,
                vec![
                    class(weibull_cv2(1.0, 0.1), single.clone(), 1.0, 50),
                    class(weibull_cv2(2.0, 0.1), single, 1.0, 50),
                ],
            )],
            srpt_ps(),
            closed_loads(),
            DEFAULT_HORIZON,
            vec![Check::ClassTwoStarved { min_load: 0.98 }],
        ),
        "fig6" => Preset::Vfs(VfsPreset {
            name: "fig6".into(),
            loads: default_loads(),
            replications: 1,
            seed: 20_231_107,
            options: Fig6Options::default(),
            fct_tolerance: 0.05,
            p999_tolerance: 2.0,
        }),
        other => return Err(Error::UnknownFigure(other.into())),
    })
}

impl Preset {
    pub fn name(&self) -> &str {
        match self {
            Preset::Flow { config, .. } => &config.name,
            Preset::Vfs(v) => &v.name,
        }
    }

    pub fn loads(&self) -> &[f64] {
        match self {
            Preset::Flow { config, .. } => &config.loads,
            Preset::Vfs(v) => &v.loads,
        }
    }

    pub fn with_loads(mut self, loads: Vec<f64>) -> Self {
        match &mut self {
            Preset::Flow { config, .. } => config.loads = loads,
            Preset::Vfs(v) => v.loads = loads,
        }
        self
    }

    pub fn with_replications(mut self, n: usize) -> Self {
        match &mut self {
            Preset::Flow { config, .. } => config.replications = n,
            Preset::Vfs(v) => v.replications = n,
        }
        self
    }

    /// Completed flows per run (large flows for the VFS preset).
    pub fn with_horizon(mut self, horizon: u64) -> Self {
        match &mut self {
            Preset::Flow { config, .. } => config.horizon = horizon,
            Preset::Vfs(v) => v.options.horizon = horizon,
        }
        self
    }

    pub fn with_disciplines(mut self, disciplines: Vec<Discipline>) -> Self {
        if let Preset::Flow { config, .. } = &mut self {
            config.disciplines = disciplines;
        }
        self
    }

    /// Cells of the caption table: model, size, width or burst, think,
    /// clients, disciplines, x-axis. Scenarios are separated by ` / ` and
    /// classes by ` + `.
    pub fn caption_cells(&self) -> Vec<String> {
        let cfg = match self {
            Preset::Flow { config, .. } => config,
            Preset::Vfs(v) => {
                return vec![
                    "vfs".into(),
                    format!("{} packets + 1 packet", v.options.large_packets),
                    format!("large share {}", v.options.large_share),
                    "-".into(),
                    "-".into(),
                    "vfs".into(),
                    grid_label(&v.loads),
                ];
            }
        };
        let model = match cfg.scenarios[0].traffic.model {
            TrafficModel::OpenBatch => "open-batch",
            TrafficModel::PartlyOpen => "partly-open",
            TrafficModel::Closed => "closed",
        };
        let per_scenario = |f: &dyn Fn(&ClassConfig) -> String| {
            let mut cells: Vec<String> = cfg
                .scenarios
                .iter()
                .map(|s| s.traffic.classes.iter().map(f).collect::<Vec<_>>().join(" + "))
                .collect();
            cells.dedup();
            cells.join(" / ")
        };
        let closed = cfg.scenarios[0].traffic.model == TrafficModel::Closed;
        vec![
            model.into(),
            per_scenario(&|c| describe_dist(&c.size)),
            if closed {
                "-".into()
            } else {
                per_scenario(&|c| describe_width(&c.width))
            },
            if cfg.scenarios[0].traffic.model == TrafficModel::OpenBatch {
                "-".into()
            } else {
                per_scenario(&|c| describe_dist(&c.think))
            },
            if closed {
                per_scenario(&|c| c.clients.to_string())
            } else {
                "-".into()
            },
            cfg.disciplines.iter().map(|d| short_name(*d)).collect::<Vec<_>>().join(", "),
            grid_label(&cfg.loads),
        ]
    }
}

fn grid_label(loads: &[f64]) -> String {
    loads.iter().map(|l| format!("{l}")).collect::<Vec<_>>().join(" ")
}

fn describe_dist(d: &DistSpec) -> String {
    let mut s = d.kind.clone();
    if d.mean != 1.0 || d.kind != "weibull" {
        s += &format!(" mean {}", d.mean);
    }
    if let Some(k) = d.shape {
        s += &format!(" shape {k}");
    }
    if let Some(c) = d.cv2 {
        s += &format!(" cv2 {c}");
    }
    s
}

fn describe_width(w: &WidthSpec) -> String {
    match (w.kind.as_str(), w.cv2) {
        ("deterministic", _) if w.mean == 1.0 => "single".into(),
        (k, Some(c)) => format!("{k} mean {} cv2 {c}", w.mean),
        (k, None) => format!("{k} mean {}", w.mean),
    }
}

fn point(result: &ExperimentResult, scenario: usize, disc: Discipline, load: f64) -> Option<(Estimate, Estimate, Estimate)> {
    let r = result.report(scenario, disc, load)?;
    Some((r.overall.mean_fct, r.overall.normalized_fct, r.overall.mean_bct))
}

fn has_load(result: &ExperimentResult, load: f64) -> bool {
    result.config.loads.iter().any(|&l| (l - load).abs() < 1e-12)
}

fn fmt_est(e: &Estimate) -> String {
    format!("{:.4} ± {:.4}", e.mean, e.half_width)
}

/// Evaluates `check` on `result`. Loads absent from the grid are skipped.
pub fn evaluate(check: &Check, result: &ExperimentResult) -> Result<Vec<CheckOutcome>> {
    let cfg = &result.config;
    let mut out = Vec::new();
    let psjf = Discipline::per_flow(Policy::Psjf);
    let srpt = Discipline::per_flow(Policy::Srpt);
    let ps = Discipline::per_flow(Policy::Ps);
    match check {
        Check::AnalysisWithinCi => {
            let class = cfg.scenarios[0].traffic.classes[0].build()?;
            for &load in &cfg.loads {
                let Some(rep) = result.report(0, psjf, load) else { continue };
                let p = BatchModelParams::with_load(load, class.width, class.size)?;
                let fct = psjf_mean_fct(&p)?;
                let bct = psjf_mean_bct(&p)?;
                for (what, sim, ana) in [("E[FCT]", rep.overall.mean_fct, fct), ("E[BCT]", rep.overall.mean_bct, bct)] {
                    out.push(CheckOutcome::new(
                        format!("{} PSJF {what} analysis in CI at load {load}", cfg.name),
                        sim.contains(ana),
                        format!("analysis {ana:.4}, simulation {}", fmt_est(&sim)),
                    ));
                }
            }
        }
        Check::BctOrdering { load, srpt_above_ps } => {
            if !has_load(result, *load) {
                return Ok(out);
            }
            let bsrpt = Discipline::per_batch(Policy::Srpt)?;
            let bps = Discipline::per_batch(Policy::Ps)?;
            let get = |d| point(result, 0, d, *load).map(|p| p.2);
            let (Some(fs), Some(fp), Some(bs), Some(bp)) = (get(srpt), get(ps), get(bsrpt), get(bps)) else {
                return Ok(out);
            };
            let detail = format!(
                "SRPT {}, PS {}, batch SRPT {}, batch PS {}",
                fmt_est(&fs),
                fmt_est(&fp),
                fmt_est(&bs),
                fmt_est(&bp)
            );
            let flow_order = if *srpt_above_ps { fp.clearly_below(&fs) } else { fs.clearly_below(&fp) };
            // `<=` holds unless batch SRPT is clearly above batch PS
            let batch_le = !bp.clearly_below(&bs);
            let batch_below_flow = bp.clearly_below(&fs) && bp.clearly_below(&fp) && bs.clearly_below(&fs) && bs.clearly_below(&fp);
            let rel = if *srpt_above_ps { ">" } else { "<" };
            out.push(CheckOutcome::new(
                format!("{} E[BCT] SRPT {rel} PS at load {load}", cfg.name),
                flow_order,
                detail.clone(),
            ));
            out.push(CheckOutcome::new(
                format!("{} E[BCT] batch SRPT <= batch PS < per-flow at load {load}", cfg.name),
                batch_le && batch_below_flow,
                detail,
            ));
        }
        Check::PsInverseLoad { tolerance } => {
            for (si, sc) in cfg.scenarios.iter().enumerate() {
                for &load in &cfg.loads {
                    let Some((_, n, _)) = point(result, si, ps, load) else { continue };
                    let target = 1.0 / (1.0 - load);
                    let err = (n.mean - target).abs() / target;
                    out.push(CheckOutcome::new(
                        format!("{} {} PS within {}% of 1/(1-rho) at load {load}", cfg.name, sc.label, tolerance * 100.0),
                        err <= *tolerance,
                        format!("{} vs {target:.4} (error {:.2}%)", fmt_est(&n), err * 100.0),
                    ));
                }
            }
        }
        Check::GapShrinks { load } => {
            if !has_load(result, *load) {
                return Ok(out);
            }
            let mut gaps = Vec::new();
            for si in 0..cfg.scenarios.len() {
                let (Some(s), Some(p)) = (point(result, si, srpt, *load), point(result, si, ps, *load)) else {
                    return Ok(out);
                };
                gaps.push(p.1.mean - s.1.mean);
            }
            let shrinks = gaps.windows(2).all(|w| w[1] < w[0]);
            let labels: Vec<String> = cfg
                .scenarios
                .iter()
                .zip(&gaps)
                .map(|(s, g)| format!("{} {g:.4}", s.label))
                .collect();
            out.push(CheckOutcome::new(
                format!("{} PS-SRPT gap shrinks at load {load}", cfg.name),
                shrinks,
                labels.join(", "),
            ));
        }
        Check::SrptWorseOverall { load } => {
            if let (Some(s), Some(p)) = (point(result, 0, srpt, *load), point(result, 0, ps, *load)) {
                out.push(CheckOutcome::new(
                    format!("{} overall SRPT E[FCT] > PS at load {load}", cfg.name),
                    p.0.clearly_below(&s.0),
                    format!("SRPT {}, PS {}", fmt_est(&s.0), fmt_est(&p.0)),
                ));
            }
        }
        Check::ClassTwoStarved { min_load } => {
            for &load in cfg.loads.iter().filter(|&&l| l >= *min_load) {
                let (Some(s), Some(p)) = (result.report(0, srpt, load), result.report(0, ps, load)) else {
                    continue;
                };
                let (c2, psn) = (s.classes[1].normalized_fct, p.overall.normalized_fct);
                out.push(CheckOutcome::new(
                    format!("{} class 2 SRPT normalized E[FCT] > PS at utilization {load}", cfg.name),
                    c2.mean > psn.mean,
                    format!("class 2 SRPT {}, PS {}", fmt_est(&c2), fmt_est(&psn)),
                ));
            }
        }
        Check::SrptInsensitive { tolerance } => {
            if cfg.scenarios.len() < 2 {
                return Ok(out);
            }
            for &load in &cfg.loads {
                let (Some(a), Some(b)) = (point(result, 0, srpt, load), point(result, 1, srpt, load)) else {
                    continue;
                };
                let rel = (a.0.mean - b.0.mean).abs() / a.0.mean.min(b.0.mean);
                out.push(CheckOutcome::new(
                    format!("{} SRPT E[FCT] within {}% across size laws at utilization {load}", cfg.name, tolerance * 100.0),
                    rel < *tolerance,
                    format!("{} vs {} ({:.2}%)", fmt_est(&a.0), fmt_est(&b.0), rel * 100.0),
                ));
            }
        }
    }
    Ok(out)
}

/// Runs a VFS preset: one report per load, replications pooled.
pub fn run_vfs_preset(p: &VfsPreset) -> Result<Vec<VfsReport>> {
    let mut jobs = Vec::new();
    for (li, &load) in p.loads.iter().enumerate() {
        for r in 0..p.replications.max(1) {
            jobs.push((li, load, derive_seed(p.seed, 0, li, r)));
        }
    }
    let outcomes: Vec<(usize, Fig6Outcome)> =
        run_jobs(jobs, |(li, load, seed)| Ok((li, vfs::run_fig6_outcome(load, seed, &p.options)?)))?;
    let mut reports = Vec::new();
    for li in 0..p.loads.len() {
        let group: Vec<Fig6Outcome> = outcomes.iter().filter(|(i, _)| *i == li).map(|(_, o)| o.clone()).collect();
        reports.push(Fig6Outcome::pool(&group)?);
    }
    Ok(reports)
}

pub fn evaluate_vfs(p: &VfsPreset, reports: &[VfsReport]) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for r in reports {
        let target = 1.0 / (1.0 - r.load);
        let err = (r.normalized_fct.mean - target).abs() / target;
        out.push(CheckOutcome::new(
            format!("{} normalized E[FCT] within {}% of 1/(1-rho) at load {}", p.name, p.fct_tolerance * 100.0, r.load),
            err <= p.fct_tolerance,
            format!("{} vs {target:.4} (error {:.2}%)", fmt_est(&r.normalized_fct), err * 100.0),
        ));
    }
    if let Some(r) = reports.iter().max_by(|a, b| a.load.total_cmp(&b.load)) {
        if r.load >= 0.5 {
            let target = vfs::ps_active_percentile(r.load, 99.9);
            out.push(CheckOutcome::new(
                format!("{} active-list 99.9th percentile within ±{} at load {}", p.name, p.p999_tolerance, r.load),
                (r.p999_active - target).abs() <= p.p999_tolerance,
                format!("{} vs {target:.2}", r.p999_active),
            ));
        }
    }
    out
}
