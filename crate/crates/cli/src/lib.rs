//! Experiment front end: run configuration with presets and partial config
//! files, the study commands behind the `texform` binary, and tidy CSV
//! export for external plotting.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use texform_core::error::{Error, Result};
use texform_core::odf_histogram::{
    build_histogram, chi_square_distance, Histogram, Texture, TextureEntry,
};
use texform_core::orientation_space::{
    grid_with_index, sample_uniform_grid, write_grid_file, OrientationGrid, Quat,
};
use texform_core::process_env::{
    ActionSpace, EnvConfig, ProcessEnv, DEFORM_STEP, INITIAL_TEXTURE_SEED, INITIAL_TEXTURE_SIZE,
};
use texform_core::rl_agents::{
    run_multi_goal, run_single_goal, AgentConfig, EpisodeRecord, GoalSet, RunArtifact,
    SelectionKind,
};
use texform_core::taylor_model::{
    apply_process_step, young_moduli, CrystalAggregate, MaterialParams, SolverOptions,
    StepOutcome,
};

// ---------------------------------------------------------------------------
// Run configuration.

/// What a run executes. The study modes reuse the same config plumbing so
/// every artifact records identical provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Single,
    Multi,
    DistanceStudy,
    MaterialTest,
    GridGen,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Mode::Single => "single",
            Mode::Multi => "multi",
            Mode::DistanceStudy => "distance-study",
            Mode::MaterialTest => "material-test",
            Mode::GridGen => "grid-gen",
        };
        write!(f, "{name}")
    }
}

/// Scale preset: `paper` reproduces the published setup, `desk` shrinks the
/// problem so full runs finish on a workstation in minutes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Preset::Paper => write!(f, "paper"),
            Preset::Desk => write!(f, "desk"),
        }
    }
}

/// Number of crystals in the desk-preset initial texture.
pub const DESK_CRYSTALS: usize = 50;
/// Episode horizon of the desk preset.
pub const DESK_HORIZON: usize = 30;
/// Training episodes of the desk preset.
pub const DESK_EPISODES: usize = 30;
/// Histogram bin count of the desk preset.
pub const DESK_BINS: usize = 256;

/// Fully resolved run configuration; the serialized form is the provenance
/// snapshot written into every artifact directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub preset: Preset,
    pub seed: u64,
    /// Goal texture files (one for single mode, the full set for multi).
    pub goal_files: Vec<PathBuf>,
    /// Crystals in the initial near-uniform texture.
    pub crystals: usize,
    /// Seed of the initial-texture orientation grid.
    pub initial_seed: u64,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub material: MaterialParams,
    pub solver: SolverOptions,
    /// Output directory. Never serialized: the snapshot must stay
    /// location-independent so rerunning it elsewhere reproduces the other
    /// artifact files bitwise.
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// The resolved defaults for a preset and mode; config files and CLI
    /// flags override individual fields on top of this.
    pub fn preset(preset: Preset, mode: Mode) -> Self {
        let mut agent = match mode {
            Mode::Multi => AgentConfig::multi_goal(),
            _ => AgentConfig::single_goal(),
        };
        let mut env = EnvConfig::default();
        let mut crystals = INITIAL_TEXTURE_SIZE;
        if preset == Preset::Desk {
            crystals = DESK_CRYSTALS;
            env.k_max = DESK_HORIZON;
            env.j = DESK_BINS;
            agent.episodes = DESK_EPISODES;
            // Desk runs see ~900 env steps, three orders of magnitude fewer
            // than paper runs, while each simulated step costs the same.
            // Gradient work is nearly free next to the simulator, so the desk
            // schedule trades exploration for training throughput: many more
            // batches per step, a fast target sync, and an epsilon that
            // anneals within the first quarter of the run so that greedy
            // rollouts start feeding deeper states into the buffer early.
            agent.batches_per_step = 8;
            agent.learning_rate = 1e-3;
            agent.eps0 = 0.5;
            agent.eps_final = 0.02;
            agent.n_eps = 8;
            agent.n_eps_goal = 8;
            agent.n_theta = 25;
            agent.warmup_steps = 32;
            agent.replay_capacity = 20_000;
        }
        RunConfig {
            mode,
            preset,
            seed: 0,
            goal_files: Vec::new(),
            crystals,
            initial_seed: INITIAL_TEXTURE_SEED,
            env,
            agent,
            material: MaterialParams::default(),
            solver: SolverOptions::default(),
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crystals == 0 {
            return Err(Error::invalid_argument("crystals must be positive"));
        }
        self.agent.validate()
    }

    /// Writes the provenance snapshot into the artifact directory.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run_config.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InternalConsistency(format!("config serialization: {e}")))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Partial config file: every field optional, unknown keys rejected with
/// their path. Nested `env`/`agent`/`material`/`solver` objects may list any
/// subset of that struct's fields.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub mode: Option<Mode>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub goal_files: Option<Vec<PathBuf>>,
    pub crystals: Option<usize>,
    pub initial_seed: Option<u64>,
    pub env: Option<serde_json::Value>,
    pub agent: Option<serde_json::Value>,
    pub material: Option<serde_json::Value>,
    pub solver: Option<serde_json::Value>,
}

/// Recursively overlays `patch` onto `base`, rejecting keys that do not
/// exist in the base object so typos surface with a precise field path.
fn merge_checked(base: &mut serde_json::Value, patch: &serde_json::Value, path: &str) -> Result<()> {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (key, value) in p {
                match b.get_mut(key) {
                    Some(slot) => merge_checked(slot, value, &format!("{path}.{key}"))?,
                    None => {
                        return Err(Error::invalid_argument(format!(
                            "unknown config field {path}.{key}"
                        )))
                    }
                }
            }
            Ok(())
        }
        (slot, value) => {
            *slot = value.clone();
            Ok(())
        }
    }
}

/// Applies a partial JSON patch to a config section.
fn merge_section<T: Serialize + serde::de::DeserializeOwned>(
    current: &T,
    patch: &serde_json::Value,
    section: &str,
) -> Result<T> {
    let mut value = serde_json::to_value(current)
        .map_err(|e| Error::InternalConsistency(format!("{section} serialization: {e}")))?;
    merge_checked(&mut value, patch, section)?;
    serde_json::from_value(value)
        .map_err(|e| Error::invalid_argument(format!("config section {section}: {e}")))
}

/// Field-level overrides from the command line; these win over the config
/// file, which wins over the preset defaults.
#[derive(Clone, Debug, Default)]
pub struct CliOverrides {
    pub mode: Option<Mode>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub ablation: Option<texform_core::rl_agents::Ablation>,
    pub goals: Vec<PathBuf>,
}

/// Resolves preset defaults, then the optional config file, then CLI flags
/// into one concrete RunConfig.
pub fn resolve_config(config_path: Option<&Path>, overrides: &CliOverrides) -> Result<RunConfig> {
    let file: RunConfigFile = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?
        }
        None => RunConfigFile::default(),
    };
    let preset = overrides.preset.or(file.preset).unwrap_or(Preset::Desk);
    let mode = overrides.mode.or(file.mode).unwrap_or(Mode::Single);
    let mut cfg = RunConfig::preset(preset, mode);
    if let Some(v) = file.seed {
        cfg.seed = v;
    }
    if let Some(v) = file.goal_files {
        cfg.goal_files = v;
    }
    if let Some(v) = file.crystals {
        cfg.crystals = v;
    }
    if let Some(v) = file.initial_seed {
        cfg.initial_seed = v;
    }
    if let Some(patch) = &file.env {
        cfg.env = merge_section(&cfg.env, patch, "env")?;
    }
    if let Some(patch) = &file.agent {
        cfg.agent = merge_section(&cfg.agent, patch, "agent")?;
    }
    if let Some(patch) = &file.material {
        cfg.material = merge_section(&cfg.material, patch, "material")?;
    }
    if let Some(patch) = &file.solver {
        cfg.solver = merge_section(&cfg.solver, patch, "solver")?;
    }
    if let Some(v) = overrides.seed {
        cfg.seed = v;
    }
    if let Some(v) = &overrides.out {
        cfg.out = Some(v.clone());
    }
    if let Some(a) = overrides.ablation {
        cfg.agent.ablation = a;
    }
    if !overrides.goals.is_empty() {
        cfg.goal_files = overrides.goals.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Exit-code taxonomy: 2 for configuration and input problems, 3 for
/// failures of the simulation or training itself.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Io { .. } | Error::Parse { .. } => 2,
        Error::InvalidState(_)
        | Error::IntegrationFailure(_)
        | Error::BalancingFailure(_)
        | Error::TrainingFailure(_)
        | Error::InternalConsistency(_) => 3,
    }
}

// ---------------------------------------------------------------------------
// Shared construction helpers.

/// The near-uniform starting texture of the configured size.
pub fn initial_texture(cfg: &RunConfig) -> Result<Texture> {
    let grid = sample_uniform_grid(cfg.crystals, cfg.initial_seed)?;
    Texture::equal_weights(&grid.points)
}

pub fn load_goal_textures(cfg: &RunConfig) -> Result<Vec<Texture>> {
    if cfg.goal_files.is_empty() {
        return Err(Error::invalid_argument(
            "no goal texture files configured (pass --goal or set goal_files)",
        ));
    }
    cfg.goal_files.iter().map(|p| Texture::read_file(p)).collect()
}

/// Builds the process environment for a run: configured initial texture, the
/// fixed default action space, and the given goal.
pub fn build_env(cfg: &RunConfig, goal: &Texture) -> Result<ProcessEnv> {
    ProcessEnv::with_initial_texture(
        cfg.env.clone(),
        initial_texture(cfg)?,
        goal,
        ActionSpace::generate_default()?,
        cfg.material.clone(),
        cfg.solver.clone(),
    )
}

// ---------------------------------------------------------------------------
// grid-gen.

pub struct GridGenSummary {
    pub j: usize,
    pub seed: u64,
    pub cv: f64,
    pub path: PathBuf,
}

/// Samples a near-uniform orientation grid and writes the grid file format.
pub fn cmd_grid_gen(j: usize, seed: u64, out: &Path) -> Result<GridGenSummary> {
    let grid = sample_uniform_grid(j, seed)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_grid_file(&grid, out)?;
    Ok(GridGenSummary { j, seed, cv: grid.cv, path: out.to_path_buf() })
}

// ---------------------------------------------------------------------------
// distance-study.

/// The (J, k) grid and trajectory length of a representation study.
#[derive(Clone, Debug)]
pub struct StudyParams {
    pub j_values: Vec<usize>,
    pub k_values: Vec<usize>,
    pub steps: usize,
}

impl StudyParams {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => StudyParams {
                j_values: vec![256, 512, 8192],
                k_values: vec![1, 3, 25],
                steps: 30,
            },
            Preset::Desk => {
                StudyParams { j_values: vec![256, 512], k_values: vec![1, 3], steps: 30 }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.j_values.is_empty() || self.k_values.is_empty() {
            return Err(Error::invalid_argument("study needs at least one J and one k"));
        }
        if self.steps == 0 {
            return Err(Error::invalid_argument("study needs at least one step"));
        }
        Ok(())
    }
}

/// One row of the distance-study CSV.
#[derive(Clone, Debug)]
pub struct DistanceRow {
    pub j: usize,
    pub k: usize,
    pub t: usize,
    pub distance: f64,
    /// d(sigma_t, sigma_K) / d(sigma_0, sigma_K).
    pub relative: f64,
}

/// Simulates the constant-deformation trajectory: `steps` process steps of
/// f = +0.02 about q = (1, 0, 0, 0) from the near-uniform texture, returning
/// the texture after every step (index 0 is the start).
pub fn constant_deformation_trajectory(cfg: &RunConfig, steps: usize) -> Result<Vec<Texture>> {
    let mut options = cfg.solver.clone();
    // The study must run its full length; the episode strain cap does not
    // apply here.
    options.strain_cap = f64::INFINITY;
    let mut agg = CrystalAggregate::from_texture(&initial_texture(cfg)?, &cfg.material)?;
    let mut textures = vec![agg.texture()?];
    for t in 1..=steps {
        match apply_process_step(
            &mut agg,
            DEFORM_STEP,
            &Quat::identity(),
            &cfg.material,
            &options,
        )? {
            StepOutcome::Applied(_) => textures.push(agg.texture()?),
            StepOutcome::StrainCapped => {
                return Err(Error::InvalidState(format!(
                    "constant-deformation trajectory hit the strain cap at step {t}"
                )))
            }
        }
    }
    Ok(textures)
}

/// Relative distance to the trajectory's final texture for every (J, k)
/// setting and every time step.
pub fn cmd_distance_study(cfg: &RunConfig, params: &StudyParams) -> Result<Vec<DistanceRow>> {
    params.validate()?;
    let textures = constant_deformation_trajectory(cfg, params.steps)?;
    let mut rows = Vec::new();
    for &j in &params.j_values {
        let (grid, index) = grid_with_index(j, cfg.env.grid_seed)?;
        for &k in &params.k_values {
            let hists: Vec<Histogram> = textures
                .iter()
                .map(|t| build_histogram(t, &grid, &index, k, cfg.env.weighting))
                .collect::<Result<_>>()?;
            let d0 = chi_square_distance(&hists[0], &hists[params.steps])?;
            if !(d0 > 0.0) {
                return Err(Error::InvalidState(format!(
                    "trajectory start and end coincide under (J={j}, k={k})"
                )));
            }
            for (t, h) in hists.iter().enumerate() {
                let d = chi_square_distance(h, &hists[params.steps])?;
                rows.push(DistanceRow { j, k, t, distance: d, relative: d / d0 });
            }
        }
    }
    Ok(rows)
}

pub fn write_distance_csv(rows: &[DistanceRow], path: &Path) -> Result<()> {
    let mut text = String::from("j,k,t,distance,relative\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{:.17e},{:.17e}\n",
            r.j, r.k, r.t, r.distance, r.relative
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// material-test.

/// Sampling plan for the histogram-representation error study.
#[derive(Clone, Debug)]
pub struct MaterialStudyParams {
    pub j_values: Vec<usize>,
    pub k_values: Vec<usize>,
    /// Number of textures sampled from random rollouts.
    pub textures: usize,
    /// Longest random rollout, in process steps.
    pub max_rollout_steps: usize,
}

impl MaterialStudyParams {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => MaterialStudyParams {
                j_values: vec![256, 512, 8192],
                k_values: vec![1, 3, 25],
                textures: 1000,
                max_rollout_steps: 10,
            },
            Preset::Desk => MaterialStudyParams {
                j_values: vec![256, 512, 8192],
                k_values: vec![3],
                textures: 200,
                max_rollout_steps: 8,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.j_values.is_empty() || self.k_values.is_empty() {
            return Err(Error::invalid_argument("study needs at least one J and one k"));
        }
        if self.textures == 0 || self.max_rollout_steps == 0 {
            return Err(Error::invalid_argument("study needs textures and rollout steps"));
        }
        Ok(())
    }
}

/// Young's moduli of one texture, original versus histogram representation.
#[derive(Clone, Debug)]
pub struct SampleRow {
    pub texture_id: usize,
    pub j: usize,
    pub k: usize,
    /// 0, 1, 2 for E_11, E_22, E_33.
    pub axis: usize,
    pub e_original: f64,
    pub e_histogram: f64,
    pub abs_error_mpa: f64,
}

#[derive(Clone, Debug)]
pub struct MaeRow {
    pub j: usize,
    pub k: usize,
    pub mae_mpa: f64,
}

pub struct MaterialTestReport {
    pub samples: Vec<SampleRow>,
    pub summary: Vec<MaeRow>,
}

/// Textures reachable by the process: random-length random-action rollouts
/// from the near-uniform start (the no-op action is excluded so every
/// rollout deforms).
pub fn sample_rollout_textures(
    cfg: &RunConfig,
    count: usize,
    max_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Texture>> {
    let initial = initial_texture(cfg)?;
    let actions = ActionSpace::generate_default()?;
    let mut textures = Vec::with_capacity(count);
    for _ in 0..count {
        let mut agg = CrystalAggregate::from_texture(&initial, &cfg.material)?;
        let steps = rng.gen_range(1..=max_steps);
        for _ in 0..steps {
            let id = rng.gen_range(1..actions.len());
            let action = actions.decode(id)?;
            match apply_process_step(
                &mut agg,
                action.f,
                &action.rotation,
                &cfg.material,
                &cfg.solver,
            )? {
                StepOutcome::Applied(_) => {}
                StepOutcome::StrainCapped => break,
            }
        }
        textures.push(agg.texture()?);
    }
    Ok(textures)
}

/// The texture a histogram stands for: bin centers weighted by bin mass.
pub fn histogram_texture(hist: &Histogram, grid: &OrientationGrid) -> Result<Texture> {
    let entries: Vec<TextureEntry> = hist
        .masses
        .iter()
        .zip(&grid.points)
        .filter(|(mass, _)| **mass > 0.0)
        .map(|(mass, q)| TextureEntry { orientation: *q, volume: *mass })
        .collect();
    Texture::new(entries)
}

/// For each sampled texture and (J, k): Young's moduli of the original and
/// of its histogram representation, plus the mean absolute error in MPa.
pub fn cmd_material_test(
    cfg: &RunConfig,
    params: &MaterialStudyParams,
) -> Result<MaterialTestReport> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let textures = sample_rollout_textures(cfg, params.textures, params.max_rollout_steps, &mut rng)?;
    let originals: Vec<[f64; 3]> = textures
        .iter()
        .map(|t| young_moduli(t, &cfg.material))
        .collect::<Result<_>>()?;
    let mut samples = Vec::new();
    let mut summary = Vec::new();
    for &j in &params.j_values {
        let (grid, index) = grid_with_index(j, cfg.env.grid_seed)?;
        for &k in &params.k_values {
            let mut abs_sum = 0.0;
            let mut abs_count = 0usize;
            for (texture_id, texture) in textures.iter().enumerate() {
                let hist = build_histogram(texture, &grid, &index, k, cfg.env.weighting)?;
                let represented = histogram_texture(&hist, &grid)?;
                let e_hist = young_moduli(&represented, &cfg.material)?;
                for axis in 0..3 {
                    let abs_error_mpa = (originals[texture_id][axis] - e_hist[axis]).abs() * 1e3;
                    abs_sum += abs_error_mpa;
                    abs_count += 1;
                    samples.push(SampleRow {
                        texture_id,
                        j,
                        k,
                        axis,
                        e_original: originals[texture_id][axis],
                        e_histogram: e_hist[axis],
                        abs_error_mpa,
                    });
                }
            }
            summary.push(MaeRow { j, k, mae_mpa: abs_sum / abs_count as f64 });
        }
    }
    Ok(MaterialTestReport { samples, summary })
}

pub fn write_material_csvs(report: &MaterialTestReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples_path = dir.join("samples.csv");
    let mut text =
        String::from("texture_id,j,k,axis,e_original_gpa,e_histogram_gpa,abs_error_mpa\n");
    for r in &report.samples {
        text.push_str(&format!(
            "{},{},{},{},{:.17e},{:.17e},{:.17e}\n",
            r.texture_id, r.j, r.k, r.axis, r.e_original, r.e_histogram, r.abs_error_mpa
        ));
    }
    std::fs::write(&samples_path, text).map_err(|e| Error::io(&samples_path, e))?;
    let summary_path = dir.join("summary.csv");
    let mut text = String::from("j,k,mae_mpa\n");
    for r in &report.summary {
        text.push_str(&format!("{},{},{:.17e}\n", r.j, r.k, r.mae_mpa));
    }
    std::fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))
}

// ---------------------------------------------------------------------------
// run.

pub struct RunSummary {
    pub mode: Mode,
    pub artifact: RunArtifact,
    pub wall_seconds: f64,
    /// Multi mode: goal with the most greedy picks in the final fifth of the
    /// episodes, with the fraction of those picks it received.
    pub commitment: Option<(usize, f64)>,
}

/// The goal receiving the most greedy picks over the final `window` fraction
/// of episodes, with its share of those picks. None when the window holds no
/// greedy selections.
pub fn commitment(episodes: &[EpisodeRecord], window: f64, n_goals: usize) -> Option<(usize, f64)> {
    if episodes.is_empty() || n_goals == 0 {
        return None;
    }
    let start = episodes.len() - (episodes.len() as f64 * window).ceil() as usize;
    let mut picks = vec![0usize; n_goals];
    let mut total = 0usize;
    for rec in &episodes[start..] {
        if rec.selection == SelectionKind::Greedy {
            picks[rec.goal_id] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return None;
    }
    let best = (0..n_goals).max_by_key(|&g| picks[g]).unwrap_or(0);
    Some((best, picks[best] as f64 / total as f64))
}

/// Dispatches a training run: builds the environment from the config, loads
/// the goal textures, writes the provenance snapshot, and runs the single-
/// or multi-goal loop.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary> {
    let start = Instant::now();
    let goals = load_goal_textures(cfg)?;
    if let Some(out) = &cfg.out {
        cfg.write_snapshot(out)?;
    }
    let artifact = match cfg.mode {
        Mode::Single => {
            if goals.len() != 1 {
                return Err(Error::invalid_argument(format!(
                    "single mode takes exactly one goal file, got {}",
                    goals.len()
                )));
            }
            let mut env = build_env(cfg, &goals[0])?;
            run_single_goal(&mut env, &cfg.agent, cfg.seed, cfg.out.as_deref())?
        }
        Mode::Multi => {
            let mut env = build_env(cfg, &goals[0])?;
            let specs = goals.iter().map(|t| env.encode_goal(t)).collect::<Result<Vec<_>>>()?;
            let goal_set = GoalSet::new(specs)?;
            run_multi_goal(&mut env, &goal_set, &cfg.agent, cfg.seed, cfg.out.as_deref())?
        }
        other => {
            return Err(Error::invalid_argument(format!(
                "mode {other} is not a training run; use its dedicated subcommand"
            )))
        }
    };
    let commitment = match cfg.mode {
        Mode::Multi => commitment(&artifact.episodes, 0.2, goals.len()),
        _ => None,
    };
    Ok(RunSummary {
        mode: cfg.mode,
        artifact,
        wall_seconds: start.elapsed().as_secs_f64(),
        commitment,
    })
}

// ---------------------------------------------------------------------------
// replay.

pub struct ReplaySummary {
    /// d(state t, goal) for t = 0..=steps.
    pub distances: Vec<f64>,
}

/// Parses a best_path.txt: one `f w x y z` line per action.
pub fn read_best_path(path: &Path) -> Result<Vec<(f64, Quat)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 5 {
            return Err(Error::parse(
                path,
                format!("line {}: expected `f w x y z`, got {} fields", lineno + 1, vals.len()),
            ));
        }
        entries.push((vals[0], Quat { w: vals[1], x: vals[2], y: vals[3], z: vals[4] }));
    }
    Ok(entries)
}

/// Re-executes a recorded best path through a freshly built environment
/// against the first configured goal, returning the distance after every
/// step.
pub fn cmd_replay(cfg: &RunConfig, path: &Path) -> Result<ReplaySummary> {
    let goals = load_goal_textures(cfg)?;
    let mut env = build_env(cfg, &goals[0])?;
    let entries = read_best_path(path)?;
    let mut ids = Vec::with_capacity(entries.len());
    for (i, (f, q)) in entries.iter().enumerate() {
        let id = env.action_space().find_action_id(*f, q).ok_or_else(|| {
            Error::invalid_argument(format!(
                "path entry {} does not match any action of the default action grid",
                i + 1
            ))
        })?;
        ids.push(id);
    }
    env.reset()?;
    let mut distances = vec![env.distance()];
    for (i, &id) in ids.iter().enumerate() {
        let tr = env.step(id)?;
        distances.push(tr.raw_distance);
        if tr.done && i + 1 < ids.len() {
            return Err(Error::InvalidState(format!(
                "replay terminated ({}) after {} of {} actions",
                tr.terminal_reason.map(|r| r.to_string()).unwrap_or_default(),
                i + 1,
                ids.len()
            )));
        }
    }
    Ok(ReplaySummary { distances })
}

pub fn write_replay_csv(summary: &ReplaySummary, path: &Path) -> Result<()> {
    let mut text = String::from("t,distance\n");
    for (t, d) in summary.distances.iter().enumerate() {
        text.push_str(&format!("{t},{d:.17e}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
