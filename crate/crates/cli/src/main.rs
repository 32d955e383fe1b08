//! `texform`: crystal-plasticity texture studies and goal-driven training
//! runs from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use texform_cli::{
    cmd_distance_study, cmd_grid_gen, cmd_material_test, cmd_replay, cmd_run, exit_code_for, resolve_config, write_distance_csv, write_material_csvs, write_replay_csv,
    CliOverrides, MaterialStudyParams, Mode, Preset, RunConfig, StudyParams,
};
use texform_core::error::Error;
use texform_core::orientation_space::DEFAULT_GRID_SEED;
use texform_core::rl_agents::Ablation;

#[derive(Parser)]
#[command(
    name = "texform",
    version,
    about = "Taylor-model texture evolution: representation studies and DQN process optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the config-driven subcommands.
#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run-config file; missing fields fall back to the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scale preset (overrides the config file's preset).
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Master seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, mode: Option<Mode>, out: Option<PathBuf>) -> Result<RunConfig, Error> {
        let overrides = CliOverrides {
            mode,
            preset: self.preset,
            seed: self.seed,
            out,
            ablation: None,
            goals: Vec::new(),
        };
        resolve_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample a near-uniform orientation grid and write it as a grid file.
    GridGen {
        /// Number of orientations.
        #[arg(long)]
        j: usize,
        #[arg(long, default_value_t = DEFAULT_GRID_SEED)]
        seed: u64,
        /// Output grid file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Relative ODF distance along a constant-deformation trajectory for a
    /// grid of (J, k) histogram settings.
    DistanceStudy {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        /// Histogram bin counts to compare (default from the preset).
        #[arg(long, value_delimiter = ',')]
        j_values: Option<Vec<usize>>,
        /// Soft-assignment neighborhood sizes to compare.
        #[arg(long, value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
        /// Trajectory length in process steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Young's-modulus error of the histogram representation over textures
    /// sampled from random process rollouts.
    MaterialTest {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for samples.csv and summary.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        j_values: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
        /// Number of sampled textures.
        #[arg(long)]
        textures: Option<usize>,
    },
    /// Train an agent toward one goal texture (single) or a goal set
    /// (multi) and write the run artifact.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// single or multi (overrides the config file).
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Artifact output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reward/replay ablation: none, no-shaping, or no-augmentation.
        #[arg(long)]
        ablation: Option<String>,
        /// Goal texture file; repeat for a multi-goal set.
        #[arg(long = "goal")]
        goals: Vec<PathBuf>,
    },
    /// Re-execute a recorded best_path.txt through the environment and
    /// report the distance trace.
    Replay {
        #[command(flatten)]
        config: ConfigArgs,
        /// The best_path.txt to re-execute.
        #[arg(long)]
        path: PathBuf,
        /// Goal texture file to measure against (defaults to the config's
        /// first goal file).
        #[arg(long = "goal")]
        goals: Vec<PathBuf>,
        /// Optional CSV output of the distance trace.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GridGen { j, seed, out } => {
            let summary = cmd_grid_gen(j, seed, &out)?;
            println!(
                "grid-gen: J={} seed={} cv={:.6} -> {}",
                summary.j,
                summary.seed,
                summary.cv,
                summary.path.display()
            );
            Ok(())
        }
        Command::DistanceStudy { config, out, j_values, k_values, steps } => {
            let cfg = config.resolve(Some(Mode::DistanceStudy), None)?;
            let mut params = StudyParams::preset(cfg.preset);
            if let Some(v) = j_values {
                params.j_values = v;
            }
            if let Some(v) = k_values {
                params.k_values = v;
            }
            if let Some(v) = steps {
                params.steps = v;
            }
            let rows = cmd_distance_study(&cfg, &params)?;
            write_distance_csv(&rows, &out)?;
            println!(
                "distance-study: {} settings x {} steps -> {}",
                params.j_values.len() * params.k_values.len(),
                params.steps,
                out.display()
            );
            Ok(())
        }
        Command::MaterialTest { config, out, j_values, k_values, textures } => {
            let cfg = config.resolve(Some(Mode::MaterialTest), None)?;
            let mut params = MaterialStudyParams::preset(cfg.preset);
            if let Some(v) = j_values {
                params.j_values = v;
            }
            if let Some(v) = k_values {
                params.k_values = v;
            }
            if let Some(v) = textures {
                params.textures = v;
            }
            let report = cmd_material_test(&cfg, &params)?;
            write_material_csvs(&report, &out)?;
            println!("material-test: {} textures, MAE of E in MPa:", params.textures);
            println!("{:>8} {:>4} {:>12}", "J", "k", "MAE [MPa]");
            for row in &report.summary {
                println!("{:>8} {:>4} {:>12.2}", row.j, row.k, row.mae_mpa);
            }
            println!("tables written to {}", out.display());
            Ok(())
        }
        Command::Run { config, mode, out, ablation, goals } => {
            let ablation = match ablation.as_deref() {
                Some(text) => Some(text.parse::<Ablation>()?),
                None => None,
            };
            let overrides = CliOverrides {
                mode,
                preset: config.preset,
                seed: config.seed,
                out,
                ablation,
                goals,
            };
            let cfg = resolve_config(config.config.as_deref(), &overrides)?;
            let summary = cmd_run(&cfg)?;
            let art = &summary.artifact;
            println!(
                "run ({} / {} preset, seed {}): {} episodes in {:.1}s",
                cfg.mode,
                cfg.preset,
                cfg.seed,
                art.episodes.len(),
                summary.wall_seconds
            );
            println!(
                "best distance {:.6e} (initial {:.6e}) at episode {}, path length {}",
                art.best_distance,
                art.initial_distance,
                art.best_episode,
                art.best_path_ids.len()
            );
            if cfg.mode == Mode::Multi {
                match summary.commitment {
                    Some((goal, share)) => println!(
                        "committed goal {} ({:.0}% of greedy picks in the final fifth)",
                        goal,
                        share * 100.0
                    ),
                    None => println!("no greedy goal picks in the final fifth"),
                }
            }
            if let Some(dir) = &cfg.out {
                println!("artifact written to {}", dir.display());
            }
            Ok(())
        }
        Command::Replay { config, path, goals, out } => {
            let overrides = CliOverrides {
                mode: None,
                preset: config.preset,
                seed: config.seed,
                out: None,
                ablation: None,
                goals,
            };
            let cfg = resolve_config(config.config.as_deref(), &overrides)?;
            let summary = cmd_replay(&cfg, &path)?;
            let first = summary.distances.first().copied().unwrap_or(f64::NAN);
            let last = summary.distances.last().copied().unwrap_or(f64::NAN);
            println!(
                "replay: {} actions, initial distance {:.17e}, final distance {:.17e}",
                summary.distances.len() - 1,
                first,
                last
            );
            if let Some(csv) = out {
                write_replay_csv(&summary, &csv)?;
                println!("trace written to {}", csv.display());
            }
            Ok(())
        }
    }
}
