//! A floored problem solved by lifting the unfloored optimizer: the floor
//! price curve π(x) and the budget match against the direct primal solve.
//!
//! Usage: cargo run --example floor_match -- [x] [q] [lambda]

use drawdown_lab::complete::{expected_utility, floor_lift_at, match_floor_budget};
use drawdown_lab::primal::solve_primal_tree;
use drawdown_lab::tree::TreeModel;
use drawdown_lab::utility::UtilityField;

fn main() -> drawdown_lab::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<f64>().ok());
    let x = args.next().flatten().unwrap_or(10.5);
    let q = args.next().flatten().unwrap_or(5.0);
    let lambda = args.next().flatten().unwrap_or(1.0);
    let (tree, z) = TreeModel::worked_example();
    let log = UtilityField::log();
    let floor_cost = z.alpha(&tree) * lambda * q;

    println!("floor cost αλq = {floor_cost}");
    for i in 0..10 {
        let xi = 16.0 * 0.8f64.powi(i);
        println!(
            "  π({xi:>12.6}) = {:.9}",
            floor_lift_at(&tree, &z, &log, xi, q, lambda)?.price
        );
    }
    let m = match_floor_budget(&tree, &z, &log, x, q, lambda)?;
    let direct = solve_primal_tree(&tree, &z, &log, x, q, lambda)?;
    println!(
        "target x = {x}: unfloored budget {:.9} after {} bisections",
        m.lift.x, m.iterations
    );
    println!("lifted plan   {:?}", m.lift.c.0);
    println!("primal plan   {:?}", direct.c);
    println!(
        "utility       lifted {:.12}, primal {:.12}",
        expected_utility(&tree, &log, &m.lift.c),
        direct.u_hat
    );
    Ok(())
}
