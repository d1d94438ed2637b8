//! Batch laboratory for nonautonomous parabolic evolution families:
//! hypothesis checks, solves, kernels, measures, verification suites and
//! Monte Carlo cross-checks, driven by a TOML config.
//!
//! Exit codes: 0 all requested checks pass, 1 a check failed, 2 config
//! error, 3 a numerical budget was exceeded.

use anyhow::Context;
use clap::{Parser, Subcommand};
use evofam::config::{Resolved, RunConfig};
use evofam::evolution::EvolutionOperator;
use evofam::expr::parse;
use evofam::measures::MeasureError;
use evofam::oracle::cross_check;
use evofam::report::Summary;
use evofam::solver::exhaust;
use evofam::verify;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "evofam", version, about = "Nonautonomous parabolic evolution family laboratory")]
struct Cli {
    /// Path to the TOML run configuration.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path overrides, e.g. --set numerics.h=0.1 (repeatable).
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,

    /// Worker threads (default: all cores). Results are identical for any
    /// worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Monte Carlo seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the structural hypotheses and report estimated constants.
    CheckHypotheses,
    /// Run one exhausted solve from the [solve] block.
    Solve,
    /// Assemble the transition kernel over the [solve] window.
    Kernel,
    /// Gradient-estimate battery: smoothing, pointwise bounds, decay.
    Gradients,
    /// Construct the evolution system of measures and verify it.
    Measures,
    /// Space-time semigroup battery.
    Semigroup,
    /// Compare the family against the Monte Carlo engine.
    OracleCompare,
    /// Run the full verification suite.
    VerifyAll,
}

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BUDGET: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    let config_path = cli
        .config
        .clone()
        .unwrap_or_else(|| PathBuf::from("evofam.toml"));
    let text = match std::fs::read_to_string(&config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read config {}: {e}", config_path.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let config = match RunConfig::from_str_with_overrides(&text, &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut resolved = match config.resolve() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(dir) = &cli.out_dir {
        resolved.outputs.dir = dir.display().to_string();
    }
    if let Some(seed) = cli.seed {
        resolved.oracle.seed = seed;
    }
    match run(&cli.command, &resolved) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_budget_error(&e) {
                ExitCode::from(EXIT_BUDGET)
            } else {
                ExitCode::from(EXIT_CHECK_FAILED)
            }
        }
    }
}

fn is_budget_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<evofam::evolution::EvolutionError>()
            .map(|ee| matches!(ee, evofam::evolution::EvolutionError::Budget { .. }))
            .unwrap_or(false)
            || c.downcast_ref::<MeasureError>()
                .map(|me| matches!(me, MeasureError::KbNotConverged { .. }))
                .unwrap_or(false)
    })
}

fn write_artifact(res: &Resolved, name: &str, content: &str) -> anyhow::Result<()> {
    let dir = PathBuf::from(&res.outputs.dir);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn finish(res: &Resolved, summary: Summary, csv_name: &str) -> anyhow::Result<ExitCode> {
    print!("{}", summary.render_text());
    write_artifact(res, csv_name, &summary.to_csv())?;
    Ok(if summary.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    })
}

fn run(cmd: &Command, res: &Resolved) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::CheckHypotheses => {
            let (report, outcomes) = verify::verify_hypotheses(res);
            write_artifact(res, "hypotheses.csv", &report.to_csv())?;
            let mut summary = Summary::default();
            summary.extend(outcomes);
            finish(res, summary, "hypotheses_summary.csv")
        }
        Command::Solve => {
            let block = res
                .solve
                .clone()
                .context("config needs a [solve] block with f, s, t")?;
            let f = parse(&block.f, res.cf.dim())?;
            let es = res.evo.exhaust_settings();
            let out = exhaust(&res.cf, &f, block.s, block.t, &block.output_times, &es)?;
            println!(
                "exhaustion: radius {} after {} doublings, gap {:.3e}, converged: {}",
                out.radius_final, out.n_final, out.gap, out.converged
            );
            write_artifact(res, "trajectory.csv", &out.trajectory.to_csv())?;
            Ok(if out.converged {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_BUDGET)
            })
        }
        Command::Kernel => {
            let (s, t) = res
                .solve
                .as_ref()
                .map(|b| (b.s, b.t))
                .unwrap_or((0.0, 0.25));
            let op = EvolutionOperator::new(res.cf.clone(), res.evo.clone(), s, t)?;
            let k = op.kernel()?;
            let (data, meta) = k.to_csv();
            write_artifact(res, "kernel.csv", &data)?;
            write_artifact(res, "kernel_meta.csv", &meta)?;
            println!(
                "kernel: {} sources x {} cells, max defect {:.3e}, min entry {:.3e}",
                k.source_nodes.len(),
                k.grid.node_count(),
                k.max_defect(),
                k.min_entry()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradients => {
            let mut summary = Summary::default();
            summary.push(verify::verify_smoothing(res));
            summary.push(verify::verify_strong_feller(res));
            summary.extend(verify::verify_pointwise_battery(res, &[(0.0, 0.1), (0.0, 1.0)]));
            summary.push(verify::verify_decay(res));
            let margins = verify::pointwise_margin_table(res, &[(0.0, 0.1), (0.0, 1.0)]);
            write_artifact(res, "gradient_margins.csv", &margins)?;
            finish(res, summary, "gradients.csv")
        }
        Command::Measures => {
            let (system, outcomes) = verify::verify_measures(res);
            let mut summary = Summary::default();
            summary.extend(outcomes);
            if let Some(system) = &system {
                let mut measures_csv = String::new();
                for (a, mu) in &system.anchors {
                    let _ = writeln!(measures_csv, "# anchor {a}");
                    measures_csv.push_str(&mu.to_csv());
                }
                write_artifact(res, "measures.csv", &measures_csv)?;
                let mut moments = String::from("anchor,p,value\n");
                for p in [1.0, 2.0, 4.0] {
                    for (a, m) in system.moment_table(p) {
                        let _ = writeln!(moments, "{a},{p},{m}");
                    }
                }
                write_artifact(res, "moments.csv", &moments)?;
                let members: Vec<_> = system.anchors.iter().map(|(_, m)| m).collect();
                let table = evofam::measures::tightness_diagnostic(
                    &members,
                    &res.numerics.rho_ladder,
                );
                let mut tightness = String::from("rho,sup_mass_outside\n");
                for (rho, m) in &table.rows {
                    let _ = writeln!(tightness, "{rho},{m}");
                }
                write_artifact(res, "tightness.csv", &tightness)?;
                summary.push(verify::verify_asymptotics(res, system));
            }
            finish(res, summary, "measures_summary.csv")
        }
        Command::Semigroup => {
            let mut summary = Summary::default();
            summary.extend(verify::verify_semigroup(res));
            finish(res, summary, "semigroup.csv")
        }
        Command::OracleCompare => {
            let probes = verify::standard_probes(res);
            let mut evo = res.evo.clone();
            evo.strict_budget = false;
            let rep = cross_check(&res.cf, &evo, &res.oracle, &probes, 1e-2)?;
            write_artifact(res, "crosscheck.csv", &rep.to_csv())?;
            for row in &rep.rows {
                println!(
                    "[{}] {:<20} pde={:+.5} mc={:+.5} diff={:.2e} bound={:.2e}",
                    if row.pass { "PASS" } else { "FAIL" },
                    row.name,
                    row.pde,
                    row.mc,
                    row.diff,
                    row.bound
                );
            }
            Ok(if rep.all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECK_FAILED)
            })
        }
        Command::VerifyAll => {
            let summary = verify::verify_all(res);
            finish(res, summary, "summary.csv")
        }
    }
}
