use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use stablefp::experiments::{
    kernel_stage, output_dir, particle_stage, run_besov, run_full_pipeline, run_kernel_study,
    run_peano, run_peano_sweep, run_threshold_sweep, solve_stage, threshold_stage,
    ExperimentConfig, ExperimentError, PeanoReport, Summary,
};
use stablefp::grid::lp_norm;
use stablefp::{check_strong, ParameterSet};

#[derive(Parser, Debug)]
#[command(
    name = "stablefp",
    version,
    about = "Stable-driven nonlinear Fokker-Planck experiments"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: the config's `output`, else ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run even when the weak condition fails.
    #[arg(long, global = true)]
    override_thresholds: bool,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the configured density and print its norms.
    Grid,
    /// Mollifier convergence study for the configured kernel.
    Kernel,
    /// Besov norms of the configured density.
    Besov,
    /// Threshold report for one parameter set, or a sweep from the config.
    Thresholds(ThresholdArgs),
    /// Picard solve of the configured problem.
    Solve,
    /// Particle system compared against the solver.
    Particles,
    /// Perturbed Peano experiment.
    Peano,
    /// Every stage in sequence with a summary of checks.
    Pipeline,
}

#[derive(Args, Debug)]
struct ThresholdArgs {
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long, value_parser = parse_exponent, default_value = "inf")]
    p: f64,
    #[arg(long, value_parser = parse_exponent, default_value = "inf")]
    q: f64,
    #[arg(long, value_parser = parse_exponent, default_value = "inf")]
    r: f64,
    #[arg(long, default_value_t = 1)]
    d: u32,
}

fn parse_exponent(s: &str) -> Result<f64, String> {
    match s {
        "inf" | "infinity" | "Infinity" => Ok(f64::INFINITY),
        _ => s.parse::<f64>().map_err(|e| e.to_string()),
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig, ExperimentError> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("this subcommand needs --config".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
        if let Some(p) = cfg.peano.as_mut() {
            p.base.seed = seed;
        }
    }
    if g.override_thresholds {
        if let Some(s) = cfg.solver.as_mut() {
            s.override_thresholds = true;
        }
    }
    Ok(cfg)
}

fn missing(section: &str) -> ExperimentError {
    ExperimentError::Config(format!("missing {section} section"))
}

fn write_summary(summary: &Summary, out: &Path) -> Result<(), ExperimentError> {
    summary.write_csv(fs::File::create(out.join("summary.csv"))?)
}

fn print_summary(summary: &Summary) {
    for c in &summary.checks {
        println!(
            "{:<10} {:<4} {} {}",
            c.stage,
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.value
        );
    }
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    let g = &cli.global;
    match &cli.command {
        Command::Grid => {
            let cfg = load_config(g)?;
            let field = cfg
                .field
                .as_ref()
                .ok_or_else(|| missing("field"))?
                .build()?;
            let out = output_dir(&cfg, g.out.as_deref());
            fs::create_dir_all(&out)?;
            field
                .save(&out.join("field.field"))
                .map_err(|e| ExperimentError::Io(e.to_string()))?;
            let norm =
                |ell| lp_norm(&field, ell).map_err(|e| ExperimentError::Config(e.to_string()));
            println!("mass {:.12}", field.integral());
            println!("min  {:e}", field.min());
            println!(
                "L1 {:e}  L2 {:e}  Linf {:e}",
                norm(1.0)?,
                norm(2.0)?,
                norm(f64::INFINITY)?
            );
        }
        Command::Kernel => {
            let cfg = load_config(g)?;
            let study = cfg
                .kernel_study
                .as_ref()
                .ok_or_else(|| missing("kernel_study"))?;
            let out = output_dir(&cfg, g.out.as_deref());
            let table = run_kernel_study(study, &out)?;
            for (eps, d) in &table.rows {
                println!("eps {eps:<10} distance {d:e}");
            }
            if let Some(rate) = table.rate {
                println!("fitted rate {rate:.3}");
            }
        }
        Command::Besov => {
            let cfg = load_config(g)?;
            let section = cfg.besov.as_ref().ok_or_else(|| missing("besov"))?;
            let out = output_dir(&cfg, g.out.as_deref());
            fs::create_dir_all(&out)?;
            run_besov(section, fs::File::create(out.join("besov.csv"))?)?;
            print!("{}", fs::read_to_string(out.join("besov.csv"))?);
        }
        Command::Thresholds(t) => match (t.alpha, t.beta) {
            (Some(alpha), Some(beta)) => {
                let ps = ParameterSet::from_f64(alpha, beta, t.p, t.q, t.r, t.d)
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
                print!("{}", check_strong(&ps));
            }
            (None, None) => {
                let cfg = load_config(g)?;
                let sweep_cfg = cfg
                    .thresholds
                    .as_ref()
                    .ok_or_else(|| missing("thresholds"))?;
                let sweep = run_threshold_sweep(sweep_cfg)?;
                let out = output_dir(&cfg, g.out.as_deref());
                fs::create_dir_all(&out)?;
                sweep.write_csv(fs::File::create(out.join("thresholds.csv"))?)?;
                sweep.write_boundaries(fs::File::create(out.join("boundaries.csv"))?)?;
                print!("{}", sweep.region_map());
                println!("S strong, W weak only, l linear only, . none");
            }
            _ => {
                return Err(ExperimentError::Config(
                    "give both --alpha and --beta, or neither with --config".into(),
                ))
            }
        },
        Command::Solve => {
            let cfg = load_config(g)?;
            let solver = cfg.require_solver()?;
            let out = output_dir(&cfg, g.out.as_deref());
            fs::create_dir_all(&out)?;
            let mut summary = Summary::default();
            let result = threshold_stage(solver, &out, &mut summary)
                .and_then(|_| kernel_stage(solver, &out, &mut summary))
                .and_then(|_| solve_stage(solver, &out, &mut summary));
            if let Err(e) = &result {
                summary.halted = Some(e.to_string());
            }
            write_summary(&summary, &out)?;
            print_summary(&summary);
            result?;
        }
        Command::Particles => {
            let cfg = load_config(g)?;
            let solver = cfg.require_solver()?;
            let pc = cfg.particles.as_ref().ok_or_else(|| missing("particles"))?;
            let out = output_dir(&cfg, g.out.as_deref());
            fs::create_dir_all(&out)?;
            let mut summary = Summary::default();
            let result = threshold_stage(solver, &out, &mut summary)
                .and_then(|_| solve_stage(solver, &out, &mut summary))
                .and_then(|traj| particle_stage(solver, pc, cfg.seed, &traj, &out, &mut summary));
            if let Err(e) = &result {
                summary.halted = Some(e.to_string());
            }
            write_summary(&summary, &out)?;
            for (s, d) in result? {
                println!("t {s:<8} L1 {d:e}");
            }
        }
        Command::Peano => {
            let cfg = load_config(g)?;
            let section = cfg.peano.as_ref().ok_or_else(|| missing("peano"))?;
            let out = output_dir(&cfg, g.out.as_deref());
            fs::create_dir_all(&out)?;
            match &section.betas {
                Some(betas) => {
                    let sweep = run_peano_sweep(&section.base, betas)?;
                    sweep.write_csv(fs::File::create(out.join("peano_sweep.csv"))?)?;
                    for r in &sweep.rows {
                        println!(
                            "beta {:<6} spread {:.4} positive {:.3} crossing {:.3}{}",
                            r.beta,
                            r.report.spread,
                            r.report.positive_fraction,
                            r.report.crossing_fraction,
                            if r.above_threshold {
                                ""
                            } else {
                                "  (below 1 - alpha)"
                            }
                        );
                    }
                    println!("trend in beta: {}", sweep.trend);
                }
                None => match run_peano(&section.base)? {
                    PeanoReport::Deterministic(r) => {
                        let mut wr = csv::Writer::from_writer(fs::File::create(
                            out.join("peano_envelope.csv"),
                        )?);
                        wr.write_record(["time", "x", "envelope"])?;
                        for (s, x, e) in &r.samples {
                            wr.write_record([
                                format!("{s:?}"),
                                format!("{x:e}"),
                                format!("{e:e}"),
                            ])?;
                        }
                        wr.flush()?;
                        println!(
                            "x(T) {:e}  envelope {:e}  relative error {:.3e}",
                            r.x_end, r.envelope, r.relative_error
                        );
                    }
                    PeanoReport::Noisy(r) => {
                        println!(
                            "spread {:.4} positive {:.3} crossing {:.3}",
                            r.spread, r.positive_fraction, r.crossing_fraction
                        );
                        println!("quantiles {:?}", r.quantiles);
                    }
                },
            }
        }
        Command::Pipeline => {
            let cfg = load_config(g)?;
            let out = output_dir(&cfg, g.out.as_deref());
            let summary = run_full_pipeline(&cfg, &out)?;
            print_summary(&summary);
            if !summary.all_passed() {
                warn!(
                    "some checks failed; see {}",
                    out.join("summary.csv").display()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
