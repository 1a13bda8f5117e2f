//! Duality-free solution: sweep the stopping problems over a level grid,
//! assemble the increasing process c^y, and compare the implied plan with the
//! primal optimizer on a random tree.
//!
//! Usage: cargo run --release --example envelope_route -- [seed] [y]

use drawdown_lab::envelope::{alternative_solution, build_envelope_process, LevelGridOptions};
use drawdown_lab::random::{random_tree, RandomTreeSpec};
use drawdown_lab::utility::UtilityField;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> drawdown_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let y: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tree, z) = random_tree(
        &mut rng,
        &RandomTreeSpec {
            min_depth: 3,
            max_depth: 4,
            ..Default::default()
        },
    );
    let log = UtilityField::log();
    let opts = LevelGridOptions::default();

    let sweep = build_envelope_process(&tree, &z, &log, y, &opts)?;
    println!(
        "{} nodes, {} levels, η = {:.2e}",
        tree.len(),
        sweep.levels.len(),
        sweep.eta
    );
    println!(
        "envelope relation: excess {:.2e}, equality gap {:.2e}",
        sweep.envelope.max_excess, sweep.envelope.max_equality_gap
    );
    for (leaf, path) in tree.leaves().zip(sweep.paths(&tree)?).take(4) {
        println!("leaf {leaf}: c^y knots {:?}", path.knots());
    }

    for q in [0.0, 0.5] {
        let alt = alternative_solution(&tree, &z, &log, y, q, &opts)?;
        println!(
            "q = {q}: budget x = {:.6}, sup |c - primal| = {:.2e}, agrees {}",
            alt.x, alt.primal_gap, alt.agrees
        );
    }
    Ok(())
}
