//! MDP wrapper around the polycrystal simulator: a discrete action space of
//! rotated compression steps, GSH state featurization, episode lifecycle, and
//! potential-based shaped rewards derived from the histogram distance.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsh_features::{gsh_features, FEATURE_DIM};
use crate::odf_histogram::{build_histogram, chi_square_masses, Histogram, Texture, Weighting};
use crate::orientation_space::{
    grid_with_index, sample_uniform_grid, OrientationGrid, Quat, SymNnIndex, DEFAULT_GRID_SEED,
};
use crate::taylor_model::{
    apply_process_step, CrystalAggregate, MaterialParams, SolverOptions, StepOutcome,
};

/// Number of rotations in the action set O_100.
pub const ACTION_GRID_SIZE: usize = 100;

/// Seed for the action rotation grid. Fixed and documented so the id to
/// (f, q) mapping is reproducible across runs and machines.
pub const ACTION_GRID_SEED: u64 = 17;

/// Deformation magnitude of the non-trivial actions.
pub const DEFORM_STEP: f64 = 0.02;

/// Number of equally weighted orientations in the initial texture.
pub const INITIAL_TEXTURE_SIZE: usize = 250;

/// Seed for the near-uniform initial texture grid. Fixed: resets are
/// deterministic, agent-side randomness is seeded separately.
pub const INITIAL_TEXTURE_SEED: u64 = 23;

/// State feature dimension: GSH coefficients plus normalized time and
/// equivalent strain.
pub const STATE_DIM: usize = FEATURE_DIM + 2;

/// Guard added to distances before inversion so potentials stay finite when a
/// texture lands exactly on the target histogram.
pub const POTENTIAL_EPS: f64 = 1e-12;

/// Inverse distance used for both the sparse reward and the potential.
pub fn inverse_distance(d: f64) -> f64 {
    1.0 / (d + POTENTIAL_EPS)
}

// ---------------------------------------------------------------------------
// Configuration.

/// Environment configuration. Serialized with the documented key names, so
/// run artifacts stay self-describing.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EnvConfig {
    /// Maximal episode length.
    #[serde(rename = "K")]
    pub k_max: usize,
    /// Histogram bin count.
    #[serde(rename = "J")]
    pub j: usize,
    /// Soft-assignment neighborhood size.
    pub k: usize,
    /// Soft-assignment weighting variant.
    pub weighting: Weighting,
    /// Discount factor.
    pub gamma: f64,
    /// Seed of the histogram support grid.
    pub grid_seed: u64,
    /// Equivalent-strain cap terminating episodes.
    pub strain_cap: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            k_max: 100,
            j: 512,
            k: 3,
            weighting: Weighting::Inverse,
            gamma: 1.0,
            grid_seed: DEFAULT_GRID_SEED,
            strain_cap: 0.70,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::invalid_argument("K must be positive"));
        }
        if self.j == 0 || self.k == 0 || self.k > self.j {
            return Err(Error::invalid_argument("need 1 <= k <= J"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid_argument("gamma must lie in [0, 1]"));
        }
        if !(self.strain_cap > 0.0) {
            return Err(Error::invalid_argument("strain cap must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("EnvConfig serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: EnvConfig = serde_json::from_str(text)
            .map_err(|e| Error::invalid_argument(format!("bad environment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Action space.

/// A decoded process action: deformation magnitude and loading direction.
/// `f = 0` with the identity rotation is the no-op.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcessAction {
    pub f: f64,
    pub rotation: Quat,
}

/// Discrete action set: every rotation in O_100 paired with both deformation
/// signs, plus one no-op. Ids are stable: 0 is the no-op, 1..=n pair the
/// rotations with +f, n+1..=2n with -f.
#[derive(Clone, Debug)]
pub struct ActionSpace {
    pub rotations: Arc<OrientationGrid>,
}

impl ActionSpace {
    pub const NO_OP_ID: usize = 0;

    /// Builds the documented default set from O_100.
    pub fn generate_default() -> Result<Self> {
        let grid = sample_uniform_grid(ACTION_GRID_SIZE, ACTION_GRID_SEED)?;
        Ok(ActionSpace { rotations: Arc::new(grid) })
    }

    pub fn from_grid(rotations: Arc<OrientationGrid>) -> Result<Self> {
        if rotations.points.is_empty() {
            return Err(Error::invalid_argument("action rotation grid is empty"));
        }
        Ok(ActionSpace { rotations })
    }

    pub fn len(&self) -> usize {
        2 * self.rotations.points.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn decode(&self, id: usize) -> Result<ProcessAction> {
        let n = self.rotations.points.len();
        if id == Self::NO_OP_ID {
            return Ok(ProcessAction { f: 0.0, rotation: Quat::identity() });
        }
        if id <= n {
            return Ok(ProcessAction { f: DEFORM_STEP, rotation: self.rotations.points[id - 1] });
        }
        if id <= 2 * n {
            return Ok(ProcessAction {
                f: -DEFORM_STEP,
                rotation: self.rotations.points[id - 1 - n],
            });
        }
        Err(Error::invalid_argument(format!("action id {id} out of range 0..{}", 2 * n)))
    }

    /// Inverse of [`decode`](Self::decode) by exact float match, used when
    /// replaying recorded paths whose components round-trip bitwise.
    pub fn find_action_id(&self, f: f64, rotation: &Quat) -> Option<usize> {
        if f == 0.0 {
            return Some(Self::NO_OP_ID);
        }
        let n = self.rotations.points.len();
        let offset = if f == DEFORM_STEP {
            0
        } else if f == -DEFORM_STEP {
            n
        } else {
            return None;
        };
        let q = rotation.as_array();
        self.rotations
            .points
            .iter()
            .position(|p| p.as_array() == q)
            .map(|i| offset + i + 1)
    }

    /// Writes the full id to (f, q) table: `id,f,qw,qx,qy,qz`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,f,qw,qx,qy,qz\n");
        for id in 0..self.len() {
            let a = self.decode(id)?;
            let q = a.rotation.as_array();
            out.push_str(&format!(
                "{id},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                a.f, q[0], q[1], q[2], q[3]
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Goals.

/// A target texture prepared for reward evaluation: its feature vector for
/// goal conditioning and its histogram for the distance.
#[derive(Clone, Debug)]
pub struct RewardSpec {
    pub features: [f64; FEATURE_DIM],
    pub histogram: Histogram,
}

impl RewardSpec {
    pub fn new(
        texture: &Texture,
        grid: &OrientationGrid,
        index: &SymNnIndex,
        k: usize,
        weighting: Weighting,
    ) -> Result<Self> {
        Ok(RewardSpec {
            features: gsh_features(texture),
            histogram: build_histogram(texture, grid, index, k, weighting)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Episode state.

/// Observable state: 42 GSH reals, then t/K, then the equivalent strain.
#[derive(Clone, Debug)]
pub struct EnvState {
    pub features: [f64; STATE_DIM],
    pub t: usize,
}

/// Why an episode ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminalReason {
    /// t reached K.
    Horizon,
    /// The next step would cross the equivalent-strain cap; the action is
    /// rejected and the pre-step microstructure becomes the terminal one.
    StrainCap,
    /// The constitutive solver failed; the episode is aborted at the pre-step
    /// microstructure.
    SimFailure,
}

impl std::fmt::Display for TerminalReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TerminalReason::Horizon => write!(f, "horizon"),
            TerminalReason::StrainCap => write!(f, "strain_cap"),
            TerminalReason::SimFailure => write!(f, "sim_failure"),
        }
    }
}

/// One environment transition with everything agents and logs consume.
#[derive(Clone, Debug)]
pub struct Transition {
    pub state: EnvState,
    pub shaped_reward: f64,
    /// Sparse reward: inverse terminal distance on the final transition,
    /// zero elsewhere.
    pub raw_reward: f64,
    /// Distance of the post-step microstructure to the goal.
    pub raw_distance: f64,
    /// Potential of the post-step state; zero at terminals.
    pub potential: f64,
    pub done: bool,
    pub terminal_reason: Option<TerminalReason>,
}

/// The near-uniform 250-orientation starting texture. Fixed grid: resets are
/// deterministic and agent seeds influence only action selection.
pub fn default_initial_texture() -> Result<Texture> {
    let grid = sample_uniform_grid(INITIAL_TEXTURE_SIZE, INITIAL_TEXTURE_SEED)?;
    Texture::equal_weights(&grid.points)
}

/// The process environment. One instance is a single episodic MDP; create
/// independent instances for concurrent evaluation sweeps.
pub struct ProcessEnv {
    config: EnvConfig,
    params: MaterialParams,
    options: SolverOptions,
    actions: ActionSpace,
    hist_grid: Arc<OrientationGrid>,
    hist_index: Arc<SymNnIndex>,
    goal: RewardSpec,
    initial: Texture,
    agg: CrystalAggregate,
    hist: Histogram,
    features: [f64; STATE_DIM],
    distance: f64,
    t: usize,
    done: bool,
}

impl ProcessEnv {
    /// Environment over the default 250-orientation initial texture.
    pub fn new(
        config: EnvConfig,
        goal_texture: &Texture,
        actions: ActionSpace,
        params: MaterialParams,
        options: SolverOptions,
    ) -> Result<Self> {
        let initial = default_initial_texture()?;
        Self::with_initial_texture(config, initial, goal_texture, actions, params, options)
    }

    /// Environment over a caller-supplied initial texture (reduced-size
    /// presets and tests).
    pub fn with_initial_texture(
        config: EnvConfig,
        initial: Texture,
        goal_texture: &Texture,
        actions: ActionSpace,
        params: MaterialParams,
        mut options: SolverOptions,
    ) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        options.strain_cap = config.strain_cap;
        let (hist_grid, hist_index) = grid_with_index(config.j, config.grid_seed)?;
        let goal = RewardSpec::new(
            goal_texture,
            &hist_grid,
            &hist_index,
            config.k,
            config.weighting,
        )?;
        let agg = CrystalAggregate::from_texture(&initial, &params)?;
        let mut env = ProcessEnv {
            config,
            params,
            options,
            actions,
            hist_grid,
            hist_index,
            goal,
            initial,
            agg,
            hist: Histogram { masses: Vec::new(), j: 0, grid_seed: 0 },
            features: [0.0; STATE_DIM],
            distance: 0.0,
            t: 0,
            done: false,
        };
        env.refresh_microstructure()?;
        env.refresh_time_feature();
        Ok(env)
    }

    /// Starts a fresh episode on the fixed initial texture.
    pub fn reset(&mut self) -> Result<EnvState> {
        self.agg = CrystalAggregate::from_texture(&self.initial, &self.params)?;
        self.t = 0;
        self.done = false;
        self.refresh_microstructure()?;
        self.refresh_time_feature();
        Ok(self.state())
    }

    /// Recomputes features, histogram, and goal distance from the aggregate.
    fn refresh_microstructure(&mut self) -> Result<()> {
        let texture = self.agg.texture()?;
        let feats = gsh_features(&texture);
        self.features[..FEATURE_DIM].copy_from_slice(&feats);
        self.features[FEATURE_DIM + 1] = self.agg.eq_strain;
        self.hist = build_histogram(
            &texture,
            &self.hist_grid,
            &self.hist_index,
            self.config.k,
            self.config.weighting,
        )?;
        self.distance = chi_square_masses(&self.hist.masses, &self.goal.histogram.masses);
        Ok(())
    }

    fn refresh_time_feature(&mut self) {
        self.features[FEATURE_DIM] = self.t as f64 / self.config.k_max as f64;
    }

    pub fn state(&self) -> EnvState {
        EnvState { features: self.features, t: self.t }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.done
    }

    /// Current distance to the episode goal.
    pub fn distance(&self) -> f64 {
        self.distance
    }

    /// Distance of the current microstructure to an arbitrary prepared goal.
    pub fn distance_to(&self, goal: &RewardSpec) -> f64 {
        chi_square_masses(&self.hist.masses, &goal.histogram.masses)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.actions
    }

    pub fn goal(&self) -> &RewardSpec {
        &self.goal
    }

    /// Swaps the episode goal (multi-goal selection between episodes).
    pub fn set_goal(&mut self, goal: RewardSpec) {
        self.goal = goal;
        self.distance = chi_square_masses(&self.hist.masses, &self.goal.histogram.masses);
    }

    pub fn aggregate(&self) -> &CrystalAggregate {
        &self.agg
    }

    pub fn texture(&self) -> Result<Texture> {
        self.agg.texture()
    }

    /// Prepares a goal on this environment's histogram support.
    pub fn encode_goal(&self, texture: &Texture) -> Result<RewardSpec> {
        RewardSpec::new(
            texture,
            &self.hist_grid,
            &self.hist_index,
            self.config.k,
            self.config.weighting,
        )
    }

    /// Applies one action. No-ops freeze the microstructure and advance time;
    /// deformation steps run the balanced Taylor step. Either the horizon,
    /// the strain cap, or a solver failure terminates the episode, and the
    /// terminal potential is always zero.
    pub fn step(&mut self, action_id: usize) -> Result<Transition> {
        if self.done {
            return Err(Error::InvalidState("episode is done; reset the environment".into()));
        }
        let action = self.actions.decode(action_id)?;
        let phi_before = inverse_distance(self.distance);
        let mut reason: Option<TerminalReason> = None;
        if action.f != 0.0 {
            match apply_process_step(
                &mut self.agg,
                action.f,
                &action.rotation,
                &self.params,
                &self.options,
            ) {
                Ok(StepOutcome::Applied(_)) => {
                    self.refresh_microstructure()?;
                }
                Ok(StepOutcome::StrainCapped) => {
                    reason = Some(TerminalReason::StrainCap);
                }
                Err(e) if e.is_simulation_failure() => {
                    reason = Some(TerminalReason::SimFailure);
                }
                Err(e) => return Err(e),
            }
        }
        self.t += 1;
        self.refresh_time_feature();
        if reason.is_none() && self.t >= self.config.k_max {
            reason = Some(TerminalReason::Horizon);
        }
        let terminal = reason.is_some();
        let raw_reward = if terminal { inverse_distance(self.distance) } else { 0.0 };
        let potential = if terminal { 0.0 } else { inverse_distance(self.distance) };
        let shaped_reward = raw_reward + self.config.gamma * potential - phi_before;
        self.done = terminal;
        Ok(Transition {
            state: self.state(),
            shaped_reward,
            raw_reward,
            raw_distance: self.distance,
            potential,
            done: terminal,
            terminal_reason: reason,
        })
    }
}

// ---------------------------------------------------------------------------
// Episode logging.

/// Append-only episode log in the documented CSV layout:
/// `episode,t,action_id,f,qw,qx,qy,qz,raw_distance,shaped_reward,eq_strain,terminal_reason`.
pub struct EpisodeCsv {
    w: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl EpisodeCsv {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(
            b"episode,t,action_id,f,qw,qx,qy,qz,raw_distance,shaped_reward,eq_strain,terminal_reason\n",
        )
        .map_err(|e| Error::io(path, e))?;
        Ok(EpisodeCsv { w, path: path.to_path_buf() })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn append(
        &mut self,
        episode: usize,
        t: usize,
        action_id: usize,
        action: &ProcessAction,
        raw_distance: f64,
        shaped_reward: f64,
        eq_strain: f64,
        terminal_reason: Option<TerminalReason>,
    ) -> Result<()> {
        let q = action.rotation.as_array();
        let reason = terminal_reason.map(|r| r.to_string()).unwrap_or_default();
        writeln!(
            self.w,
            "{episode},{t},{action_id},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{reason}",
            action.f, q[0], q[1], q[2], q[3], raw_distance, shaped_reward, eq_strain
        )
        .map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

// ---------------------------------------------------------------------------
// Shaping-invariance oracle. A small exact tabular MDP model used to verify,
// independently of the simulator, that potential-based shaping with zero
// terminal potential leaves optimal argmax sets unchanged.

/// Deterministic finite-horizon tabular MDP in layered (DAG) form.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// next_state[s][a]; terminal states self-loop.
    pub next_state: Vec<Vec<usize>>,
    /// reward[s][a]; zero out of terminal states.
    pub reward: Vec<Vec<f64>>,
    pub terminal: Vec<bool>,
    pub gamma: f64,
}

/// Random layered MDP: `layers x width` states, the last layer terminal,
/// every action jumping to a random state of the next layer with a uniform
/// reward in [-1, 1].
pub fn random_layered_mdp(
    layers: usize,
    width: usize,
    n_actions: usize,
    gamma: f64,
    seed: u64,
) -> TabularMdp {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n_states = layers * width;
    let mut next_state = vec![vec![0usize; n_actions]; n_states];
    let mut reward = vec![vec![0.0f64; n_actions]; n_states];
    let mut terminal = vec![false; n_states];
    for layer in 0..layers {
        for w in 0..width {
            let s = layer * width + w;
            if layer + 1 == layers {
                terminal[s] = true;
                for a in 0..n_actions {
                    next_state[s][a] = s;
                }
                continue;
            }
            for a in 0..n_actions {
                let target = (layer + 1) * width + rng.gen_range(0..width);
                next_state[s][a] = target;
                reward[s][a] = rng.gen_range(-1.0..1.0);
            }
        }
    }
    TabularMdp { n_states, n_actions, next_state, reward, terminal, gamma }
}

/// Random potential with the required zero at terminals.
pub fn random_potential(mdp: &TabularMdp, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..mdp.n_states)
        .map(|s| if mdp.terminal[s] { 0.0 } else { rng.gen_range(-1.0..1.0) })
        .collect()
}

/// The shaped variant: R'(s,a) = R(s,a) + gamma phi(s') - phi(s).
pub fn shaped_mdp(mdp: &TabularMdp, phi: &[f64]) -> TabularMdp {
    let mut out = mdp.clone();
    for s in 0..mdp.n_states {
        if mdp.terminal[s] {
            continue;
        }
        for a in 0..mdp.n_actions {
            let sp = mdp.next_state[s][a];
            out.reward[s][a] = mdp.reward[s][a] + mdp.gamma * phi[sp] - phi[s];
        }
    }
    out
}

/// Optimal Q by value iteration; terminal states pin V = 0.
pub fn optimal_q(mdp: &TabularMdp) -> Vec<Vec<f64>> {
    let mut v = vec![0.0f64; mdp.n_states];
    for _ in 0..10_000 {
        let mut max_change = 0.0f64;
        for s in 0..mdp.n_states {
            if mdp.terminal[s] {
                continue;
            }
            let best = (0..mdp.n_actions)
                .map(|a| mdp.reward[s][a] + mdp.gamma * v[mdp.next_state[s][a]])
                .fold(f64::NEG_INFINITY, f64::max);
            max_change = max_change.max((best - v[s]).abs());
            v[s] = best;
        }
        if max_change < 1e-14 {
            break;
        }
    }
    (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| {
                    if mdp.terminal[s] {
                        0.0
                    } else {
                        mdp.reward[s][a] + mdp.gamma * v[mdp.next_state[s][a]]
                    }
                })
                .collect()
        })
        .collect()
}

/// Argmax sets per state, with ties kept at relative tolerance.
pub fn greedy_argmax_sets(q: &[Vec<f64>], tol: f64) -> Vec<Vec<usize>> {
    q.iter()
        .map(|row| {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let cut = tol * best.abs().max(1.0);
            row.iter()
                .enumerate()
                .filter(|(_, &v)| best - v <= cut)
                .map(|(a, _)| a)
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taylor_model::REFERENCE_STRAIN_RATE;

    fn test_params() -> MaterialParams {
        MaterialParams::default()
    }

    /// Small, fast environment: 8-crystal start, coarse histogram.
    fn small_env(k_max: usize, strain_cap: f64, goal: &Texture) -> ProcessEnv {
        let config = EnvConfig {
            k_max,
            j: 64,
            k: 3,
            strain_cap,
            ..EnvConfig::default()
        };
        let initial =
            Texture::equal_weights(&sample_uniform_grid(8, 5).unwrap().points).unwrap();
        let actions = ActionSpace::from_grid(Arc::new(sample_uniform_grid(4, 6).unwrap()))
            .unwrap();
        ProcessEnv::with_initial_texture(
            config,
            initial,
            goal,
            actions,
            test_params(),
            SolverOptions::default(),
        )
        .unwrap()
    }

    fn some_goal() -> Texture {
        // A mildly textured goal so distances are nonzero but finite.
        let base = sample_uniform_grid(8, 9).unwrap();
        Texture::equal_weights(&base.points).unwrap()
    }

    #[test]
    fn action_space_has_stable_ids() {
        let actions = ActionSpace::generate_default().unwrap();
        assert_eq!(actions.len(), 201);
        let no_op = actions.decode(ActionSpace::NO_OP_ID).unwrap();
        assert_eq!(no_op.f, 0.0);
        assert_eq!(no_op.rotation.as_array(), Quat::identity().as_array());
        for id in 1..=100 {
            let a = actions.decode(id).unwrap();
            assert_eq!(a.f, DEFORM_STEP);
            let b = actions.decode(id + 100).unwrap();
            assert_eq!(b.f, -DEFORM_STEP);
            assert_eq!(a.rotation.as_array(), b.rotation.as_array());
        }
        assert!(actions.decode(201).is_err());
        // The mapping is a pure function of the documented seed.
        let again = ActionSpace::generate_default().unwrap();
        for id in 0..actions.len() {
            assert_eq!(
                actions.decode(id).unwrap().rotation.as_array(),
                again.decode(id).unwrap().rotation.as_array()
            );
        }
    }

    #[test]
    fn reset_is_deterministic_with_zero_strain_and_time() {
        let goal = some_goal();
        let mut env = small_env(10, 0.70, &goal);
        let s0 = env.reset().unwrap();
        assert_eq!(s0.t, 0);
        assert_eq!(s0.features[FEATURE_DIM], 0.0);
        assert_eq!(s0.features[FEATURE_DIM + 1], 0.0);
        env.step(1).unwrap();
        let s1 = env.reset().unwrap();
        for i in 0..STATE_DIM {
            assert_eq!(s0.features[i].to_bits(), s1.features[i].to_bits());
        }
    }

    #[test]
    fn goal_encoding_of_grey_texture_is_near_zero() {
        let grey = default_initial_texture().unwrap();
        let feats = crate::gsh_features::encode_goal(&grey);
        let max = feats.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max < 0.06, "uniform texture features should be near zero, got {max}");
    }

    #[test]
    fn no_op_freezes_microstructure_and_pays_zero() {
        let goal = some_goal();
        let mut env = small_env(3, 0.70, &goal);
        let s0 = env.state();
        let tr = env.step(ActionSpace::NO_OP_ID).unwrap();
        assert_eq!(tr.shaped_reward, 0.0);
        assert_eq!(tr.raw_reward, 0.0);
        assert!(!tr.done);
        for i in 0..FEATURE_DIM {
            assert_eq!(tr.state.features[i].to_bits(), s0.features[i].to_bits());
        }
        assert_eq!(tr.state.t, 1);
        // Two more no-ops exhaust the horizon; the last pays the sparse
        // reward and zeroes the potential, so the shaped reward is still 0.
        env.step(ActionSpace::NO_OP_ID).unwrap();
        let last = env.step(ActionSpace::NO_OP_ID).unwrap();
        assert!(last.done);
        assert_eq!(last.terminal_reason, Some(TerminalReason::Horizon));
        assert_eq!(last.shaped_reward, 0.0);
        assert!(last.raw_reward > 0.0);
        assert_eq!(last.potential, 0.0);
        assert!(env.step(ActionSpace::NO_OP_ID).is_err());
    }

    #[test]
    fn telescoping_holds_and_raw_reward_fires_once() {
        let goal = some_goal();
        let mut env = small_env(4, 0.70, &goal);
        let d0 = env.distance();
        let mut shaped_sum = 0.0;
        let mut raw_nonzero = 0usize;
        let mut last = None;
        for action in [1usize, 3, 0, 2] {
            let tr = env.step(action).unwrap();
            shaped_sum += tr.shaped_reward;
            if tr.raw_reward != 0.0 {
                raw_nonzero += 1;
            }
            last = Some(tr);
        }
        let last = last.unwrap();
        assert!(last.done);
        assert_eq!(raw_nonzero, 1);
        let expected = inverse_distance(last.raw_distance) - inverse_distance(d0);
        assert!(
            (shaped_sum - expected).abs() < 1e-9,
            "telescoped {shaped_sum} vs {expected}"
        );
    }

    #[test]
    fn strain_cap_rejects_the_step_and_terminates() {
        let goal = some_goal();
        // One f = 0.02 step adds about 0.0198 equivalent strain; a cap of
        // 0.03 admits one step and rejects the second.
        let mut env = small_env(50, 0.03, &goal);
        let first = env.step(1).unwrap();
        assert!(!first.done);
        let before = env.state();
        let d_before = env.distance();
        let second = env.step(2).unwrap();
        assert!(second.done);
        assert_eq!(second.terminal_reason, Some(TerminalReason::StrainCap));
        assert_eq!(second.raw_distance.to_bits(), d_before.to_bits());
        for i in 0..FEATURE_DIM {
            assert_eq!(second.state.features[i].to_bits(), before.features[i].to_bits());
        }
        assert!(env.step(1).is_err());
    }

    #[test]
    fn config_json_uses_documented_keys() {
        let cfg = EnvConfig::default();
        let text = cfg.to_json();
        for key in ["\"K\"", "\"J\"", "\"k\"", "\"weighting\"", "\"gamma\"", "\"grid_seed\"", "\"strain_cap\""] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
        let back = EnvConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(EnvConfig::from_json("{\"K\":0}").is_err());
    }

    #[test]
    fn dt_matches_reference_strain_rate() {
        // |f| / rate = 20 s for the standard magnitude; documents the pairing
        // between DEFORM_STEP and the simulator's reference rate.
        assert_eq!(DEFORM_STEP / REFERENCE_STRAIN_RATE, 20.0);
    }

    #[test]
    fn shaping_leaves_optimal_argmax_sets_unchanged() {
        for seed in 0..20u64 {
            let gamma = if seed % 2 == 0 { 1.0 } else { 0.95 };
            let mdp = random_layered_mdp(5, 4, 4, gamma, seed);
            let phi = random_potential(&mdp, seed ^ 0xabcd);
            let shaped = shaped_mdp(&mdp, &phi);
            let q0 = optimal_q(&mdp);
            let q1 = optimal_q(&shaped);
            let g0 = greedy_argmax_sets(&q0, 1e-9);
            let g1 = greedy_argmax_sets(&q1, 1e-9);
            assert_eq!(g0, g1, "argmax sets diverged for seed {seed}");
            // The Q functions themselves differ by exactly phi per state.
            for s in 0..mdp.n_states {
                if mdp.terminal[s] {
                    continue;
                }
                for a in 0..mdp.n_actions {
                    let diff = q0[s][a] - q1[s][a];
                    assert!((diff - phi[s]).abs() < 1e-10);
                }
            }
        }
    }
}
