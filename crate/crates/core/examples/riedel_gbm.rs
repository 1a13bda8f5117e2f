//! Ratchet-optimal consumption in a geometric Brownian market with
//! exponential discounting, by Monte Carlo over the closed-form plan.
//!
//! Usage: cargo run --release --example riedel_gbm -- [paths] [budget]

use std::time::Instant;

use drawdown_lab::complete::{budget_match_riedel, KernelSpec, RiedelOptions};
use drawdown_lab::utility::UtilityField;

fn main() -> drawdown_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let paths: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20_000);
    let x: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(100.0);

    let spec = KernelSpec {
        seed: 2024,
        ..KernelSpec::gbm(0.4, 0.05, 0.1)
    };
    let utility = UtilityField::log();
    let start = Instant::now();
    let plan = budget_match_riedel(
        &spec,
        &utility,
        x,
        paths,
        &RiedelOptions {
            check_envelope: true,
            sample_paths: 3,
        },
    )?;
    let env = plan.envelope.expect("envelope checked");

    println!("paths            {paths}");
    println!(
        "horizon          {:.2} years ({} cells), tail bound {:.2e}",
        plan.truncation.t_max, plan.truncation.cells, plan.truncation.tail_bound
    );
    println!("I                {:.6} ± {:.6}", plan.i, plan.i_se);
    println!("K                {:.6e}", plan.k);
    println!("y                {:.6e}", plan.y);
    println!(
        "budget           {:.6} ± {:.6} (target {x})",
        plan.budget, plan.budget_se
    );
    println!(
        "envelope         excess {:.2e}, equality gap {:.2e} over {} increase cells",
        env.max_excess, env.max_equality_gap, env.increase_cells
    );
    if let Some(s) = &plan.sample {
        for (row, c) in s.c.rows().enumerate() {
            let at = |t: f64| c[((t / spec.dt) as usize).min(c.len() - 1)];
            println!(
                "path {row}: c(0+) = {:.4}, c(1) = {:.4}, c(10) = {:.4}, c(50) = {:.4}",
                at(0.0),
                at(1.0),
                at(10.0),
                at(50.0)
            );
        }
    }
    println!("elapsed          {:.1?}", start.elapsed());
    Ok(())
}
