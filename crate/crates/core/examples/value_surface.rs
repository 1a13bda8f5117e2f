//! Value function u(x, q) over a budget/floor grid with its concavity,
//! monotonicity and conjugacy diagnostics.
//!
//! Usage: cargo run --example value_surface -- [lambda]

use drawdown_lab::primal::value_surface;
use drawdown_lab::tree::TreeModel;
use drawdown_lab::utility::UtilityField;

fn main() -> drawdown_lab::Result<()> {
    let lambda = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(0.5);
    let (tree, z) = TreeModel::worked_example();
    let xs: Vec<f64> = (0..8).map(|i| 4.0 + i as f64).collect();
    let qs = [0.0, 1.0, 2.0, 3.0, 3.5];
    let s = value_surface(&tree, &z, &UtilityField::log(), &xs, &qs, lambda)?;

    print!("{:>6}", "x \\ q");
    qs.iter().for_each(|q| print!("{q:>10.2}"));
    println!();
    for (i, x) in xs.iter().enumerate() {
        print!("{x:>6.1}");
        for j in 0..qs.len() {
            print!("{:>10.5}", s.points[i][j].u);
        }
        println!();
    }
    println!("α = {}, λ = {lambda}", s.alpha);
    println!("concavity violation     {:.2e}", s.concavity_violation);
    println!("monotonicity violation  {:.2e}", s.monotonicity_violation);
    println!("conjugacy gap           {:.2e}", s.conjugacy_gap);
    println!("inside the cone         {}", s.in_l_star);
    Ok(())
}
