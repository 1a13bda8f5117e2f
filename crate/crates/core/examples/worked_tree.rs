//! The one-period binary tree solved by the primal oracle and certified by
//! the dual: plan (3, 3, 7), multiplier 2/7, and the regime of every node.
//!
//! Usage: cargo run --example worked_tree

use drawdown_lab::primal::{certify_duality, solve_primal_tree};
use drawdown_lab::tree::{NodeProcess, TreeModel};
use drawdown_lab::utility::UtilityField;

fn main() -> drawdown_lab::Result<()> {
    let (tree, z) = TreeModel::worked_example();
    let sol = solve_primal_tree(&tree, &z, &UtilityField::log(), 7.0, 0.0, 1.0)?;
    let cert = certify_duality(&sol, &tree, &z, 1e-8)?;

    println!("plan             {:?}", sol.c);
    println!("multiplier y     {:.12} (2/7 = {:.12})", sol.y, 2.0 / 7.0);
    println!("expected utility {:.12}", sol.u_hat);
    for u in 0..tree.len() {
        println!(
            "node {u}: Z = {:.2}, c = {:.6}, δ̂ = {:.6}, yZ = {:.6}, regime {}",
            z.values()[u],
            sol.c[u],
            cert.delta_hat[u],
            cert.y_z[u],
            cert.regions.labels[u].as_str()
        );
    }
    let tail_hat = tree.optional_projection(&NodeProcess(cert.delta_hat.clone()))?;
    let tail_yz = tree.optional_projection(&NodeProcess(cert.y_z.clone()))?;
    println!(
        "root tails       δ̂: {:.12}, yZ: {:.12}",
        tail_hat[0], tail_yz[0]
    );
    println!("Fenchel gap      {:.2e}", cert.fenchel_gap);
    println!("<ĉ, δ̂>           {:.12}", cert.pairing);
    println!(
        "certificate      {}",
        if cert.valid { "valid" } else { "INVALID" }
    );
    Ok(())
}
