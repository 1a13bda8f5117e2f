//! Chronological ordering on a random tree: the tail test, its stopping-rule
//! enumeration cross-check, the λ-ordering, and the mass shift that attains
//! the supremum of `<c, δ̃>` over `δ̃ ≼_λ δ`.
//!
//! Usage: cargo run --example chronological_ordering -- [seed]

use drawdown_lab::random::{random_process, random_tree, RandomTreeSpec};
use drawdown_lab::tree::NodeProcess;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> drawdown_lab::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(7);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tree, _) = random_tree(
        &mut rng,
        &RandomTreeSpec {
            min_depth: 3,
            max_depth: 3,
            ..Default::default()
        },
    );
    println!("tree with {} nodes over {} cells", tree.len(), tree.cells());

    let d = random_process(&mut rng, &tree, 0.0, 1.0);
    let dt = NodeProcess::from_fn(&tree, |u| d[u] * rng.random_range(0.3..1.05));
    let fast = tree.chron_leq(&dt, &d, 1e-12)?;
    let slow = tree.stopping_enumeration_check(&dt, &d)?;
    println!(
        "δ̃ ≼ δ: tails {} (worst residual {:.3e} at node {}), enumeration {}",
        fast.holds, fast.worst_residual, fast.worst_node, slow
    );
    for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
        println!(
            "  ≼_{lambda:<4}: {}",
            tree.chron_leq_lambda(&dt, &d, lambda, 1e-12)?.holds
        );
    }

    let c = NodeProcess::from_fn(&tree, |_| f64::from(rng.random_range(0..3u8)));
    let lambda = 0.5;
    println!("\nc = {:?}, λ = {lambda}", c.0);
    for window in (1..=tree.cells()).rev() {
        let r = tree.important_lemma_check(&c, &d, lambda, window)?;
        println!(
            "window {window}: <c ∨ λc̄, δ> = {:.6}, attained {:.6}, gap {:.3e}, member {}",
            r.lhs, r.achieved, r.gap, r.member
        );
    }
    Ok(())
}
