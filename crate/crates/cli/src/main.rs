use std::fs::File;
use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use swarmplan::harness::{
    circle_swap, collision_audit, density_scenario, drift_scenario, line_scenario, read_trace, run_scenario,
    scalability_sweep, t_cal_slope, write_sweep, Scenario,
};
use swarmplan::OccupancyGrid;

#[derive(Parser)]
#[command(name = "swarmplan", version, about = "Decentralized swarm trajectory planning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    CircleSwap,
    Density,
    Line,
    Drift,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write metrics and traces.
    Run {
        scenario: PathBuf,
        /// Output directory.
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Planning time against agent count in the line scenario.
    Sweep {
        /// Agent counts, ascending.
        #[arg(long, value_delimiter = ',', required = true)]
        agents: Vec<usize>,
        #[arg(long, default_value_t = 1.5)]
        spacing: f64,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output; stdout if absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Count collisions in a trace file.
    Audit {
        trace: PathBuf,
        /// Grid snapshot of the world, for obstacle collisions.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        radius: f64,
    },
    /// Print a built-in scenario as TOML.
    Preset {
        #[arg(value_enum)]
        kind: Preset,
        /// Agent count (circle swap, line) or obstacle density (density).
        #[arg(long)]
        param: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { scenario, out, seed } => {
            let mut s = Scenario::load(&scenario).with_context(|| format!("loading {}", scenario.display()))?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let result = run_scenario(&s)?;
            result.write_to(&out).with_context(|| format!("writing {}", out.display()))?;
            let m = &result.metrics;
            println!("scenario        {}", m.scenario);
            println!("simulated       {:.2} s", m.sim_time);
            println!(
                "completed       {}/{}",
                m.agents.iter().filter(|a| a.completed()).count(),
                m.agents.len()
            );
            println!("mean d_fly      {:.3} m", m.mean_d_fly());
            if let Some(t) = m.mean_t_fly() {
                println!("mean t_fly      {t:.3} s");
            }
            if let Some(v) = m.mean_velocity() {
                println!("mean velocity   {v:.3} m/s");
            }
            if let Some(d) = m.d_safe() {
                println!("d_safe          {d:.3} m");
            }
            println!("min distance    {:.3} m", m.min_euclidean_distance);
            println!(
                "t_cal           mean {:.3} ms, p90 {:.3} ms over {} plans",
                m.t_cal.mean_ms, m.t_cal.p90_ms, m.t_cal.count
            );
            println!("collisions      {}", m.collisions);
            Ok(if m.collisions > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Sweep {
            agents,
            spacing,
            duration,
            seed,
            out,
        } => {
            let rows = scalability_sweep(&agents, |n| {
                let mut s = line_scenario(n, spacing, seed);
                s.duration = duration;
                s
            })?;
            match out {
                Some(p) => write_sweep(&rows, File::create(&p).with_context(|| format!("creating {}", p.display()))?)?,
                None => write_sweep(&rows, io::stdout().lock())?,
            }
            let max = rows.iter().map(|r| r.agents).max().unwrap_or(0);
            if let (Some(a), Some(b)) = (t_cal_slope(&rows, 1, 10), t_cal_slope(&rows, 20, max.max(20))) {
                eprintln!("t_cal slope: {a:.4} ms/agent for N<=10, {b:.4} ms/agent for N>=20");
            }
            let collisions: usize = rows.iter().map(|r| r.collisions).sum();
            Ok(if collisions > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Audit { trace, world, radius } => {
            let rows = read_trace(BufReader::new(
                File::open(&trace).with_context(|| format!("opening {}", trace.display()))?,
            ))?;
            let grid = match world {
                Some(p) => Some(OccupancyGrid::read_snapshot(BufReader::new(
                    File::open(&p).with_context(|| format!("opening {}", p.display()))?,
                ))?),
                None => None,
            };
            let report = collision_audit(&rows, grid.as_ref(), radius);
            for e in &report.events {
                println!("{:?} from {:.2} s to {:.2} s, min distance {:.3} m", e.kind, e.start, e.end, e.min_distance);
            }
            println!("collisions: {}", report.count());
            Ok(if report.count() > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Preset { kind, param, seed } => {
            let count = |default: usize| -> Result<usize> {
                match param {
                    None => Ok(default),
                    Some(p) if p >= 1.0 && p.fract() == 0.0 => Ok(p as usize),
                    Some(p) => bail!("agent count must be a positive integer, got {p}"),
                }
            };
            let mut s = match kind {
                Preset::CircleSwap => circle_swap(count(8)?, 10.15),
                Preset::Density => density_scenario(param.unwrap_or(0.14), seed),
                Preset::Line => line_scenario(count(10)?, 1.5, seed),
                Preset::Drift => drift_scenario(3.0, [0.0, 0.4, 0.0]),
            };
            s.seed = seed;
            print!("{}", toml::to_string(&s)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
