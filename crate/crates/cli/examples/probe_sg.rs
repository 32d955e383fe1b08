//! Scratch probe: desk single-goal run with aggressive training throughput.
use texform_cli::*;
fn main() {
    let mut cfg = RunConfig::preset(Preset::Desk, Mode::Single);
    cfg.goal_files = vec!["fixtures/goals/desk_single.txt".into()];
    cfg.agent.batches_per_step = 8;
    cfg.agent.n_theta = 25;
    cfg.agent.warmup_steps = 32;
    cfg.agent.learning_rate = 1e-3;
    cfg.agent.eps0 = 0.5;
    cfg.agent.eps_final = 0.02;
    cfg.agent.n_eps = 8;
    let goals = load_goal_textures(&cfg).unwrap();
    let mut env = build_env(&cfg, &goals[0]).unwrap();
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let t0 = std::time::Instant::now();
    let art = texform_core::rl_agents::run_single_goal(&mut env, &cfg.agent, seed, None).unwrap();
    println!("seed {seed}: initial {:.4} best {:.4} ratio {:.3} ep {} path {} in {:?}",
        art.initial_distance, art.best_distance,
        art.best_distance / art.initial_distance,
        art.best_episode, art.best_path_ids.len(), t0.elapsed());
    let mut running = f64::INFINITY;
    for rec in &art.episodes {
        running = running.min(rec.best_distance);
        print!("{:.3} ", running);
    }
    println!();
}
