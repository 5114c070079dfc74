use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qsched::analysis::{psjf_mean_bct, psjf_mean_fct, BatchModelParams};
use qsched::distributions::{DistSpec, WidthSpec};
use qsched::experiments::presets::{evaluate, evaluate_vfs, run_vfs_preset};
use qsched::experiments::{
    default_loads, fmt_float, preset, run_experiment, write_gnuplot, write_rows, CheckOutcome, ExperimentConfig,
    Metric, Preset,
};
use qsched::vfs::{self, CreditPolicy, Fig6Options, VfsConfig, PACKET_BYTES};
use qsched::{Error, Result};

#[derive(Parser)]
#[command(name = "qsched", version, about = "Batch and burst scheduling: analysis, simulation, VFS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-flow PSJF mean FCT and BCT under batch arrivals.
    Analyze {
        #[arg(long, default_value = "weibull")]
        size: String,
        #[arg(long, default_value_t = 1.0)]
        mean: f64,
        #[arg(long)]
        shape: Option<f64>,
        #[arg(long)]
        cv2: Option<f64>,
        #[arg(long, default_value = "geometric-from-1")]
        width: String,
        #[arg(long, default_value_t = 100.0)]
        width_mean: f64,
        #[arg(long)]
        width_cv2: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        loads: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs a JSON experiment config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write gnuplot data blocks next to the CSV.
        #[arg(long)]
        gnuplot: bool,
    },
    /// Packet-level virtual fair scheduling run, or replay of a packet trace.
    Vfs {
        #[arg(long)]
        load: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Completed large flows.
        #[arg(long, default_value_t = 20_000)]
        horizon: u64,
        #[arg(long, default_value_t = vfs::DEFAULT_THETA_PACKETS)]
        theta_packets: f64,
        /// Bank idle capacity as credit (unmodified update rule).
        #[arg(long)]
        literal_credit: bool,
        /// CSV of `time,flow-id,length` rows to replay instead.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerates a figure from its built-in preset.
    Reproduce {
        figure: String,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        loads: Option<Vec<f64>>,
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        gnuplot: bool,
    },
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?))
        }
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn print_checks(outcomes: &[CheckOutcome]) -> bool {
    for c in outcomes {
        eprintln!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    outcomes.iter().all(|c| c.pass)
}

fn gnuplot_path(csv: &Path) -> PathBuf {
    csv.with_extension("dat")
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Analyze {
            size,
            mean,
            shape,
            cv2,
            width,
            width_mean,
            width_cv2,
            loads,
            out,
        } => {
            let size = DistSpec {
                kind: size,
                mean,
                shape,
                cv2,
            }
            .build()?;
            let width = WidthSpec {
                kind: width,
                mean: width_mean,
                cv2: width_cv2,
            }
            .build()?;
            let mut w = open_out(out.as_deref())?;
            writeln!(w, "load,lambda,mean-fct,mean-bct,normalized-bct")?;
            for load in loads.unwrap_or_else(default_loads) {
                let p = BatchModelParams::with_load(load, width, size)?;
                let bct = psjf_mean_bct(&p)?;
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    fmt_float(load),
                    fmt_float(p.lambda),
                    fmt_float(psjf_mean_fct(&p)?),
                    fmt_float(bct),
                    fmt_float(bct / p.mean_batch_size())
                )?;
            }
            w.flush()?;
            Ok(true)
        }
        Command::Simulate {
            config,
            seed,
            out,
            gnuplot,
        } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::Io(format!("{}: {e}", config.display())))?;
            let mut cfg = ExperimentConfig::from_json(&text)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out.or_else(|| cfg.output.clone());
            let result = run_experiment(&cfg)?;
            let mut w = open_out(out.as_deref())?;
            write_rows(&mut w, &result.rows)?;
            w.flush()?;
            if gnuplot {
                let path = out.as_deref().map_or_else(|| PathBuf::from(format!("{}.dat", cfg.name)), gnuplot_path);
                write_gnuplot(open_out(Some(&path))?, &result.rows, Metric::NormalizedFct)?;
            }
            Ok(true)
        }
        Command::Vfs {
            load,
            seed,
            horizon,
            theta_packets,
            literal_credit,
            trace,
            out,
        } => {
            let config = VfsConfig {
                theta: theta_packets * PACKET_BYTES,
                credit_policy: if literal_credit {
                    CreditPolicy::Literal
                } else {
                    CreditPolicy::CapAtBacklog
                },
                ..VfsConfig::default()
            };
            let mut w = open_out(out.as_deref())?;
            if let Some(path) = trace {
                let f = File::open(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
                let packets = vfs::read_trace(BufReader::new(f))?;
                let verdicts = vfs::replay(config, &packets)?;
                writeln!(w, "time,flow-id,length,verdict")?;
                for (p, v) in packets.iter().zip(verdicts) {
                    let v = match v {
                        vfs::Verdict::Accept => "accept",
                        vfs::Verdict::Drop => "drop",
                    };
                    writeln!(w, "{},{},{},{v}", fmt_float(p.time), p.flow, fmt_float(p.length))?;
                }
            } else {
                let load = load.ok_or_else(|| Error::InvalidParameter("--load or --trace is required".into()))?;
                let opts = Fig6Options {
                    vfs: config,
                    horizon,
                    ..Fig6Options::default()
                };
                let report = vfs::run_fig6(load, seed, &opts)?;
                vfs::write_reports(&mut w, &[report])?;
            }
            w.flush()?;
            Ok(true)
        }
        Command::Reproduce {
            figure,
            out,
            loads,
            replications,
            horizon,
            gnuplot,
        } => {
            let mut p = preset(&figure)?;
            if let Some(l) = loads {
                p = p.with_loads(l);
            }
            if let Some(n) = replications {
                p = p.with_replications(n);
            }
            if let Some(h) = horizon {
                p = p.with_horizon(h);
            }
            fs::create_dir_all(&out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
            let csv = out.join(format!("{figure}.csv"));
            match &p {
                Preset::Flow { config, checks } => {
                    let result = run_experiment(config)?;
                    let mut w = open_out(Some(&csv))?;
                    write_rows(&mut w, &result.rows)?;
                    w.flush()?;
                    if gnuplot {
                        let metric = if figure.starts_with("fig2") {
                            Metric::NormalizedBct
                        } else {
                            Metric::NormalizedFct
                        };
                        write_gnuplot(open_out(Some(&gnuplot_path(&csv)))?, &result.rows, metric)?;
                    }
                    let mut outcomes = Vec::new();
                    for c in checks {
                        outcomes.extend(evaluate(c, &result)?);
                    }
                    eprintln!("wrote {}", csv.display());
                    Ok(print_checks(&outcomes))
                }
                Preset::Vfs(v) => {
                    let reports = run_vfs_preset(v)?;
                    let mut w = open_out(Some(&csv))?;
                    write_fig6_csv(&mut w, &reports)?;
                    w.flush()?;
                    if gnuplot {
                        let mut g = open_out(Some(&gnuplot_path(&csv)))?;
                        writeln!(g, "# simulation: load fct hw p999")?;
                        for r in &reports {
                            writeln!(
                                g,
                                "{} {} {} {}",
                                fmt_float(r.load),
                                fmt_float(r.normalized_fct.mean),
                                fmt_float(r.normalized_fct.half_width),
                                fmt_float(r.p999_active)
                            )?;
                        }
                        writeln!(g, "\n\n# analysis: load 1/(1-rho) -3/log10(rho)")?;
                        for r in &reports {
                            writeln!(
                                g,
                                "{} {} {}",
                                fmt_float(r.load),
                                fmt_float(1.0 / (1.0 - r.load)),
                                fmt_float(vfs::ps_active_percentile(r.load, 99.9))
                            )?;
                        }
                    }
                    eprintln!("wrote {}", csv.display());
                    Ok(print_checks(&evaluate_vfs(v, &reports)))
                }
            }
        }
    }
}

fn write_fig6_csv<W: Write>(mut w: W, reports: &[vfs::VfsReport]) -> Result<()> {
    writeln!(w, "source,{}", vfs::VfsReport::CSV_HEADER)?;
    for r in reports {
        writeln!(w, "simulation,{}", r.csv_row())?;
    }
    for r in reports {
        writeln!(
            w,
            "analysis,{},{},0,{},,,",
            fmt_float(r.load),
            fmt_float(1.0 / (1.0 - r.load)),
            fmt_float(vfs::ps_active_percentile(r.load, 99.9))
        )?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
