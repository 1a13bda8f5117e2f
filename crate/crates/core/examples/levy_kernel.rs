//! A jump-diffusion pricing kernel: martingale check of the simulated
//! deflator and the ratchet plan under CRRA utility.
//!
//! Usage: cargo run --release --example levy_kernel -- [paths]

use drawdown_lab::complete::{
    budget_match_riedel, martingale_check, JumpLaw, KernelKind, KernelSpec, RiedelOptions,
};
use drawdown_lab::utility::UtilityField;

fn main() -> drawdown_lab::Result<()> {
    let paths = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(2000);
    let spec = KernelSpec {
        kind: KernelKind::Levy {
            theta: 0.25,
            intensity: 0.5,
            jump: JumpLaw::NegExponential { mean: 0.15 },
        },
        seed: 5,
        ..KernelSpec::gbm(0.0, 0.04, 0.08)
    };
    for p in martingale_check(&spec, paths, &[1.0, 5.0, 20.0])? {
        println!("E[Z_{:<4}] = {:.4} ± {:.4}", p.t, p.mean, p.se);
    }
    let utility = UtilityField::crra(2.0)?;
    let plan = budget_match_riedel(
        &spec,
        &utility,
        50.0,
        paths,
        &RiedelOptions {
            check_envelope: true,
            sample_paths: 1,
        },
    )?;
    println!(
        "horizon {:.1} years, K = {:.6e}, y = {:.6e}",
        plan.truncation.t_max, plan.k, plan.y
    );
    println!("budget {:.4} ± {:.4}", plan.budget, plan.budget_se);
    if let Some(env) = plan.envelope {
        println!(
            "envelope excess {:.2e}, equality gap {:.2e}",
            env.max_excess, env.max_equality_gap
        );
    }
    if let Some(s) = plan.sample {
        let row = s.c.row(0);
        println!(
            "consumption along one path: start {:.4}, after 10y {:.4}, end {:.4}",
            row[0],
            row[2520.min(row.len() - 1)],
            row[row.len() - 1]
        );
    }
    Ok(())
}
