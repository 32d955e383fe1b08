//! Regenerates the shipped fixture files: goal textures produced by known
//! action sequences from the desk-scale uniform start, three sharp far
//! goals for the commitment study, and the orientation-grid files used by
//! the browser demo.
//!
//! Run from the repository root:
//!     cargo run --release -p texform-cli --example make_fixtures

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use texform_cli::{initial_texture, Mode, Preset, RunConfig};
use texform_core::error::Result;
use texform_core::odf_histogram::{build_histogram, chi_square_masses, Texture, Weighting};
use texform_core::orientation_space::{grid_with_index, sample_uniform_grid, write_grid_file};
use texform_core::process_env::{ActionSpace, ACTION_GRID_SEED, ACTION_GRID_SIZE};
use texform_core::taylor_model::{apply_process_step, young_moduli, CrystalAggregate, StepOutcome};

/// Pairwise goal distance floor of the diversity filter.
const MIN_PAIRWISE: f64 = 1.2;
/// Minimal distance of every goal from the uniform start.
const MIN_FROM_GREY: f64 = 0.75;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

/// Applies `steps` repetitions of one seeded stretch action (f = +0.02
/// about a fixed rotation) and returns the final texture with the id
/// sequence. A constant direction sharpens the texture far faster than a
/// random walk, whose steps largely cancel.
fn rollout(cfg: &RunConfig, seed: u64, steps: usize) -> Result<(Texture, Vec<usize>)> {
    let actions = ActionSpace::generate_default()?;
    let mut agg = CrystalAggregate::from_texture(&initial_texture(cfg)?, &cfg.material)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = rng.gen_range(1..=ACTION_GRID_SIZE);
    let action = actions.decode(id)?;
    for _ in 0..steps {
        match apply_process_step(&mut agg, action.f, &action.rotation, &cfg.material, &cfg.solver)? {
            StepOutcome::Applied(_) => {}
            StepOutcome::StrainCapped => panic!("rollout hit the strain cap"),
        }
    }
    Ok((agg.texture()?, vec![id; steps]))
}

fn write_goal(path: &Path, texture: &Texture, header: &str) -> Result<()> {
    let mut text = String::new();
    for line in header.lines() {
        writeln!(text, "# {line}").unwrap();
    }
    let tmp = path.with_extension("tmp");
    texture.write_file(&tmp)?;
    let body = std::fs::read_to_string(&tmp).unwrap();
    std::fs::remove_file(&tmp).unwrap();
    std::fs::write(path, text + &body).unwrap();
    Ok(())
}

fn ids_line(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

fn main() -> Result<()> {
    let root = repo_root();
    let goals_dir = root.join("fixtures/goals");
    let grids_dir = root.join("fixtures/grids");
    std::fs::create_dir_all(&goals_dir).unwrap();
    std::fs::create_dir_all(&grids_dir).unwrap();

    let cfg = RunConfig::preset(Preset::Desk, Mode::Single);
    let (grid, index) = grid_with_index(cfg.env.j, cfg.env.grid_seed)?;
    let grey = initial_texture(&cfg)?;
    let grey_hist = build_histogram(&grey, &grid, &index, cfg.env.k, Weighting::Inverse)?;
    let dist = |a: &Texture, b_hist: &texform_core::odf_histogram::Histogram| -> Result<f64> {
        let h = build_histogram(a, &grid, &index, cfg.env.k, Weighting::Inverse)?;
        Ok(chi_square_masses(&h.masses, &b_hist.masses))
    };

    // Single-goal target: a known 10-step action sequence, so a zero
    // distance is achievable within the 30-step horizon.
    let (single, single_ids) = rollout(&cfg, 101, 10)?;
    let d_single = dist(&single, &grey_hist)?;
    write_goal(
        &goals_dir.join("desk_single.txt"),
        &single,
        &format!(
            "single-goal desk target: 10 process steps from the 50-crystal uniform start\n\
             rollout seed 101, action ids: {}\n\
             d(grey, goal) = {:.6} at (J={}, k={})",
            ids_line(&single_ids),
            d_single,
            cfg.env.j,
            cfg.env.k
        ),
    )?;
    println!("desk_single: d(grey) = {d_single:.4}, E = {:?}", young_moduli(&single, &cfg.material)?);

    // Commitment-study set: one goal reachable by construction, three sharp
    // three-orientation textures no 30-step process can reach from a
    // 50-crystal uniform start.
    let (reachable, reachable_ids) = rollout(&cfg, 102, 25)?;
    let far: Vec<Texture> = [211u64, 212, 213]
        .iter()
        .map(|&s| Texture::equal_weights(&sample_uniform_grid(3, s).unwrap().points).unwrap())
        .collect();
    let mut set = vec![("desk_multi_reachable.txt", reachable.clone())];
    for (name, tex) in
        [("desk_multi_far_a.txt", &far[0]), ("desk_multi_far_b.txt", &far[1]), ("desk_multi_far_c.txt", &far[2])]
    {
        set.push((name, tex.clone()));
    }

    // Diversity filter: pairwise distance and distance from grey.
    let hists: Vec<_> = set
        .iter()
        .map(|(_, t)| build_histogram(t, &grid, &index, cfg.env.k, Weighting::Inverse))
        .collect::<Result<_>>()?;
    for (i, (name, tex)) in set.iter().enumerate() {
        let d_grey = chi_square_masses(&hists[i].masses, &grey_hist.masses);
        println!(
            "{name}: d(grey) = {d_grey:.4}, E = {:?}",
            young_moduli(tex, &cfg.material)?
        );
        assert!(d_grey > MIN_FROM_GREY, "{name}: d(grey) = {d_grey} <= {MIN_FROM_GREY}");
        for (j, (other, _)) in set.iter().enumerate().skip(i + 1) {
            let d = chi_square_masses(&hists[i].masses, &hists[j].masses);
            println!("  d({name}, {other}) = {d:.4}");
            assert!(d > MIN_PAIRWISE, "d({name}, {other}) = {d} <= {MIN_PAIRWISE}");
        }
    }
    write_goal(
        &goals_dir.join("desk_multi_reachable.txt"),
        &reachable,
        &format!(
            "commitment-study reachable goal: 25 process steps from the uniform start\n\
             constant-action rollout seed 102, action ids: {}",
            ids_line(&reachable_ids)
        ),
    )?;
    for (i, name) in ["desk_multi_far_a.txt", "desk_multi_far_b.txt", "desk_multi_far_c.txt"]
        .iter()
        .enumerate()
    {
        write_goal(
            &goals_dir.join(name),
            &far[i],
            &format!(
                "commitment-study far goal: three equally weighted orientations (grid seed {})\n\
                 not reachable from a 50-crystal uniform start within the 30-step horizon",
                211 + i as u64
            ),
        )?;
    }

    // Grid files for the browser demo: the default action-rotation grid and
    // the desk histogram support.
    let action_grid = sample_uniform_grid(ACTION_GRID_SIZE, ACTION_GRID_SEED)?;
    write_grid_file(&action_grid, &grids_dir.join("action_100_17.grid"))?;
    let hist_grid = sample_uniform_grid(cfg.env.j, cfg.env.grid_seed)?;
    write_grid_file(&hist_grid, &grids_dir.join("hist_256_7.grid"))?;
    println!(
        "grids: action J={} cv={:.4}, hist J={} cv={:.4}",
        action_grid.j, action_grid.cv, hist_grid.j, hist_grid.cv
    );
    println!("fixtures written under {}", root.join("fixtures").display());
    Ok(())
}
