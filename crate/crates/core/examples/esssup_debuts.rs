//! Running essential supremum of a step path, its level-set debuts, the
//! generalized-inverse round trip and the smallest drawdown-feasible lift.
//!
//! Usage: cargo run --example esssup_debuts

use drawdown_lab::esssup::{
    check_drawdown, essential_debut, running_esssup, running_esssup_inclusive, solid_hull_lift,
    DebutProfile,
};
use drawdown_lab::grid::{Clock, Horizon, PanelFrame, PathPanel, TimeGrid};

fn main() -> drawdown_lab::Result<()> {
    let grid = TimeGrid::from_durations(&[0.5, 1.0, 0.25, 1.0, 0.75, 1.5], Horizon::Finite)?;
    let frame = PanelFrame::equally_weighted(grid.clone(), Clock::lebesgue(&grid), 1)?;
    let c = PathPanel::new(frame, vec![vec![1.0, 3.0, 2.0, 5.0, 1.5, 4.0]])?;

    let bar = running_esssup(&c);
    let inclusive = running_esssup_inclusive(&c);
    let inverse = DebutProfile::new(&c).generalized_inverse(&c)?;
    println!(
        "{:>6} {:>6} {:>10} {:>10} {:>10}",
        "t", "c", "c̄(t)", "c̄(t+)", "inverse"
    );
    for k in 0..c.cells() {
        println!(
            "{:>6.2} {:>6.2} {:>10.2} {:>10.2} {:>10.2}",
            grid.left(k),
            c.get(0, k),
            bar.get(0, k),
            inclusive.get(0, k),
            inverse.get(0, k)
        );
    }
    for l in [1.0, 2.5, 4.0, 5.0, 6.0] {
        println!("debut of {{c >= {l}}}: {}", essential_debut(&c, l)[0]);
    }

    let (lambda, q) = (0.6, 1.2);
    let report = check_drawdown(&c, lambda, q);
    println!(
        "c >= {lambda}·c̄ ∨ ... with q = {q}: satisfied = {}, max violation {:.3}",
        report.passed(),
        report.max_violation
    );
    let lifted = solid_hull_lift(&c, lambda, q);
    println!("lifted path      {:?}", lifted.row(0));
    println!(
        "lift satisfies   {}",
        check_drawdown(&lifted, lambda, q).passed()
    );
    Ok(())
}
