use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use brwre::barrier::{
    assemble_centering, estimate_p_curve, estimate_p_n, estimate_p_n_adaptive, BarrierEvent, BarrierProfile, EndInterval,
};
use brwre::brw::{simulate_hitting, simulate_until, LeapConfig, SimConfig};
use brwre::env::{load_environment, sample_environment, save_environment, EnvDistribution};
use brwre::experiments::{run_experiment, ExperimentConfig, ExperimentKind, Format};
use brwre::tilt::{centering_table, load_json, save_json, solve_tilt, CenteringTable, TiltOptions, TiltSolution};
use brwre::walker::{estimate_barrier_prob_rw, TiltedWalker};
use brwre::{Error, Result};

#[derive(Parser)]
#[command(name = "brwre", version, about = "Branching random walk in a random environment")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample an environment and write it as JSON.
    GenEnv {
        #[arg(long, default_value = "two_point:0.5,0.1,0.2")]
        dist: EnvDistribution,
        #[arg(long, allow_hyphen_values = true)]
        x_min: i64,
        #[arg(long)]
        x_max: i64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve for the annealed tilt parameter, speed and ϑ*.
    Tilt {
        #[arg(long, default_value = "two_point:0.5,0.1,0.2")]
        dist: EnvDistribution,
        #[arg(long)]
        env_samples: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the centering arrays K, W, ξ², σ² of one environment.
    Centering {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        tilt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        depth: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate p_n; prints {p_hat, se, reps, seed}.
    Pn {
        #[arg(long)]
        table: PathBuf,
        #[arg(long, default_value_t = brwre::MIN_Y0)]
        y0: i64,
        /// Defaults to the table length.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
        /// Adaptive mode: grow reps up to `max_reps` until this relative se.
        #[arg(long)]
        target_rel_se: Option<f64>,
        #[arg(long, default_value_t = 4_000_000)]
        max_reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimate p̂_k for all k and write (k, K_k, W_k, p_hat_k, m_k) as CSV.
    CenteringAssemble {
        #[arg(long)]
        table: PathBuf,
        #[arg(long, default_value_t = brwre::MIN_Y0)]
        y0: i64,
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        jensen: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the particle system until level n is hit or up to time t_end.
    Simulate {
        #[arg(long)]
        env: PathBuf,
        #[arg(long, conflicts_with = "t_end")]
        n: Option<usize>,
        #[arg(long)]
        t_end: Option<f64>,
        /// Prune window; 0 disables pruning.
        #[arg(long, default_value_t = 60)]
        prune: u32,
        #[arg(long)]
        shadow: Option<u32>,
        #[arg(long)]
        pop_cap: Option<u64>,
        /// Enable leaping for dense sites.
        #[arg(long)]
        leap: bool,
        #[arg(long, default_value_t = LeapConfig::default().dense_threshold)]
        dense_threshold: u64,
        #[arg(long, default_value_t = LeapConfig::default().dt)]
        dt: f64,
        /// Comma-separated record times for M_t and N(t, 0).
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random-walk barrier probability of a profile; prints a ProbEstimate.
    RwBarrier {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        tilt: PathBuf,
        /// BarrierProfile JSON on levels 0..=n.
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        y: f64,
        #[arg(long, allow_hyphen_values = true)]
        end_lo: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        end_hi: Option<f64>,
        #[arg(long, default_value_t = 64)]
        depth: usize,
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an annealed experiment; exit code 0 only if all checks pass.
    Experiment {
        kind: Kind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        format: Option<Fmt>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    TightnessH,
    TightnessM,
    Mt1,
    PnDecay,
    BarrierRatio,
    Prune,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fmt {
    Csv,
    Jsonl,
}

fn print_json<S: Serialize>(v: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v).map_err(|e| Error::Internal(e.to_string()))?);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Format {
        context: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Serialize)]
struct CenteringRow {
    k: usize,
    big_k: f64,
    w: f64,
    p_hat: f64,
    p_se: f64,
    m: f64,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::GenEnv {
            dist,
            x_min,
            x_max,
            seed,
            out,
        } => {
            let env = sample_environment(&dist, x_min, x_max, seed)?;
            save_environment(&env, &out)?;
        }
        Cmd::Tilt {
            dist,
            env_samples,
            depth,
            seed,
            out,
        } => {
            let d = TiltOptions::default();
            let opts = TiltOptions {
                env_samples: env_samples.unwrap_or(d.env_samples),
                depth: depth.unwrap_or(d.depth),
                seed: seed.unwrap_or(d.seed),
                ..d
            };
            let sol = solve_tilt(&dist, &opts)?;
            save_json(&sol, &out)?;
            eprintln!(
                "eta_bar = {:.10} ± {:.2e}, v0 = {:.10}, theta* = {:.10}, argmax check {}",
                sol.eta_bar,
                sol.eta_se,
                sol.v0,
                sol.theta_star,
                if sol.argmax_ok { "ok" } else { "FAILED" }
            );
            return Ok(sol.argmax_ok);
        }
        Cmd::Centering {
            env,
            tilt,
            n,
            depth,
            tol,
            out,
        } => {
            let env = load_environment(&env)?;
            let tilt: TiltSolution = load_json(&tilt)?;
            let table: CenteringTable<f64> = centering_table(&env, &tilt, n, depth, tol)?;
            save_json(&table, &out)?;
        }
        Cmd::Pn {
            table,
            y0,
            n,
            reps,
            target_rel_se,
            max_reps,
            seed,
        } => {
            let table: CenteringTable<f64> = load_json(&table)?;
            let n = n.unwrap_or(table.n);
            let est = match target_rel_se {
                Some(t) => estimate_p_n_adaptive(&table, y0, n, t, reps, max_reps, seed)?,
                None => estimate_p_n(&table, y0, n, reps, seed)?,
            };
            print_json(&est)?;
        }
        Cmd::CenteringAssemble {
            table,
            y0,
            reps,
            seed,
            jensen,
            out,
        } => {
            let table: CenteringTable<f64> = load_json(&table)?;
            let curve = estimate_p_curve(&table, y0, table.n, reps, seed)?;
            let c = assemble_centering(&table, &curve, table.theta_star, jensen)?;
            let rows: Vec<CenteringRow> = (0..=table.n)
                .map(|k| CenteringRow {
                    k,
                    big_k: table.k[k],
                    w: table.w[k],
                    p_hat: c.p_hat[k],
                    p_se: c.p_se[k],
                    m: c.m[k],
                })
                .collect();
            brwre::experiments::emit_results(&rows, Format::Csv, &out)?;
        }
        Cmd::Simulate {
            env,
            n,
            t_end,
            prune,
            shadow,
            pop_cap,
            leap,
            dense_threshold,
            dt,
            grid,
            seed,
            out,
        } => {
            let env = load_environment(&env)?;
            let cfg = SimConfig {
                prune_window: (prune > 0).then_some(prune),
                pop_cap: pop_cap.or(SimConfig::default().pop_cap),
                seed,
                shadow_window: shadow,
                leap: leap.then_some(LeapConfig { dense_threshold, dt }),
                record_grid: grid,
            };
            let rec = match (n, t_end) {
                (Some(n), _) => simulate_hitting(&env, n, &cfg)?,
                (None, Some(t)) => simulate_until(&env, t, &cfg)?,
                (None, None) => return Err(Error::InvalidParameter("give --n or --t-end".into())),
            };
            write_text(&out, &rec.to_json()?)?;
            eprintln!("status {:?}, t = {}, max level {}", rec.status, rec.t_final, rec.first_hit.len() - 1);
        }
        Cmd::RwBarrier {
            env,
            tilt,
            profile,
            y,
            end_lo,
            end_hi,
            depth,
            reps,
            seed,
        } => {
            let env = load_environment(&env)?;
            let tilt: TiltSolution = load_json(&tilt)?;
            let profile: BarrierProfile<f64> = load_json(&profile)?;
            let n = profile.n();
            let table: CenteringTable<f64> = centering_table(&env, &tilt, n, depth, 1e-10)?;
            let walker = TiltedWalker::with_eta(&env, tilt.eta_bar, n, depth, 1e-10)?;
            let end = EndInterval::new(end_lo.unwrap_or(f64::NEG_INFINITY), end_hi.unwrap_or(f64::INFINITY))?;
            let event = BarrierEvent {
                start_y: y,
                end,
                profile,
            };
            print_json(&estimate_barrier_prob_rw(&walker, &table, &event, reps, seed)?)?;
        }
        Cmd::Experiment {
            kind,
            config,
            out,
            format,
        } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(f) = format {
                cfg.format = match f {
                    Fmt::Csv => Format::Csv,
                    Fmt::Jsonl => Format::Jsonl,
                };
            }
            let kind = match kind {
                Kind::TightnessH => ExperimentKind::TightnessH,
                Kind::TightnessM => ExperimentKind::TightnessM,
                Kind::Mt1 => ExperimentKind::Mt1,
                Kind::PnDecay => ExperimentKind::PnDecay,
                Kind::BarrierRatio => ExperimentKind::BarrierRatio,
                Kind::Prune => ExperimentKind::Prune,
            };
            let result = run_experiment(kind, &cfg)?;
            for p in result.write(&out, cfg.format)? {
                eprintln!("wrote {}", p.display());
            }
            for c in result.checks() {
                let verdict = match (c.passed, c.acceptance) {
                    (true, true) => "PASS",
                    (false, true) => "FAIL",
                    (true, false) => "pass (diagnostic)",
                    (false, false) => "fail (diagnostic)",
                };
                println!("{verdict} {}: {} (bound {})", c.name, c.value, c.bound);
            }
            return Ok(result.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
