//! Running essential supremum, essential debuts and the drawdown constraint.
//!
//! On the cell model a set has positive occupation time exactly when it
//! contains a whole cell, so the essential supremum over `[0, t_k]` is the
//! plain maximum over cells `0..k`. The running esssup evaluated on cell `k`
//! uses the prefix `0..k-1` (left-continuity, `c̄_0 = 0`).

use crate::error::Result;
use crate::grid::{IncreasingPath, PathPanel};

/// Debut times of every level set `{c >= l}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DebutProfile {
    /// Sorted distinct cell values across all scenarios, plus 0.
    pub levels: Vec<f64>,
    /// `debuts[s][j]` is the debut of `{c >= levels[j]}` on scenario `s`;
    /// `T_trunc` means never.
    pub debuts: Vec<Vec<f64>>,
}

impl DebutProfile {
    pub fn new(c: &PathPanel) -> Self {
        let mut levels: Vec<f64> = std::iter::once(0.0)
            .chain(c.rows().flat_map(|r| r.iter().copied()))
            .collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let debuts = (0..c.scenarios())
            .map(|s| levels.iter().map(|&l| debut_row(c, s, l)).collect())
            .collect();
        Self { levels, debuts }
    }

    /// Generalized inverse `c̄_t = sup{l : tau^l < t}` evaluated at every
    /// cell's left edge (sup of the empty set is 0).
    pub fn generalized_inverse(&self, c: &PathPanel) -> Result<PathPanel> {
        let grid = c.frame().grid();
        PathPanel::from_fn(c.frame().clone(), |s, k| {
            let t = grid.left(k);
            self.levels
                .iter()
                .zip(&self.debuts[s])
                .filter(|&(_, &tau)| tau < t)
                .map(|(&l, _)| l)
                .fold(0.0, f64::max)
        })
    }
}

fn debut_row(c: &PathPanel, s: usize, l: f64) -> f64 {
    let grid = c.frame().grid();
    c.row(s)
        .iter()
        .position(|&v| v >= l)
        .map_or(grid.end(), |k| grid.left(k))
}

/// Essential debut of `{c >= l}` per scenario: the left edge of the first
/// cell whose value reaches `l`, or `T_trunc` if none does.
pub fn essential_debut(c: &PathPanel, l: f64) -> Vec<f64> {
    (0..c.scenarios()).map(|s| debut_row(c, s, l)).collect()
}

/// Left-continuous running essential supremum: cell `k` carries the maximum
/// over cells `0..k-1`, cell 0 carries 0.
pub fn running_esssup(c: &PathPanel) -> PathPanel {
    prefix_max(c, false)
}

/// Running esssup just after each cell's left edge (maximum over `0..=k`).
/// This is the value of `c̄` on the interior of cell `k`.
pub fn running_esssup_inclusive(c: &PathPanel) -> PathPanel {
    prefix_max(c, true)
}

fn prefix_max(c: &PathPanel, inclusive: bool) -> PathPanel {
    let n = c.cells();
    let mut out = Vec::with_capacity(c.scenarios() * n);
    for row in c.rows() {
        let mut m = 0.0_f64;
        for &v in row {
            if inclusive {
                m = m.max(v);
                out.push(m);
            } else {
                out.push(m);
                m = m.max(v);
            }
        }
    }
    PathPanel::from_flat(c.frame().clone(), out).expect("prefix max preserves the panel invariants")
}

/// Outcome of a cellwise drawdown-constraint check.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawdownReport {
    /// `ok[s][k]` is true where `c >= lambda (c̄ ∨ q)`.
    pub ok: Vec<Vec<bool>>,
    /// Largest value of `lambda (c̄ ∨ q) - c` (non-positive when satisfied).
    pub max_violation: f64,
    /// `(scenario, cell)` of the largest violation.
    pub worst: Option<(usize, usize)>,
}

impl DrawdownReport {
    pub fn passed(&self) -> bool {
        self.ok.iter().all(|r| r.iter().all(|&b| b))
    }

    pub fn passed_within(&self, tol: f64) -> bool {
        self.max_violation <= tol
    }
}

/// Checks `c >= lambda (c̄ ∨ q)` on every scenario and cell.
pub fn check_drawdown(c: &PathPanel, lambda: f64, q: f64) -> DrawdownReport {
    let bar = running_esssup(c);
    let mut max_violation = f64::NEG_INFINITY;
    let mut worst = None;
    let ok = (0..c.scenarios())
        .map(|s| {
            (0..c.cells())
                .map(|k| {
                    let v = lambda * bar.get(s, k).max(q) - c.get(s, k);
                    if v > max_violation {
                        max_violation = v;
                        worst = Some((s, k));
                    }
                    v <= 0.0
                })
                .collect()
        })
        .collect();
    DrawdownReport {
        ok,
        max_violation,
        worst,
    }
}

/// Smallest constrained plan above `c`: `c ∨ lambda (c̄ ∨ q)`.
pub fn solid_hull_lift(c: &PathPanel, lambda: f64, q: f64) -> PathPanel {
    let bar = running_esssup(c);
    let lifted = c
        .with_values(|s, k, v| v.max(lambda * bar.get(s, k).max(q)))
        .expect("lift of a valid panel is valid");
    debug_assert!(check_drawdown(&lifted, lambda, q).passed());
    debug_assert!({
        let lb = running_esssup(&lifted);
        (0..c.scenarios())
            .all(|s| (1..c.cells()).all(|k| lb.get(s, k) == bar.get(s, k).max(lambda * q)))
    });
    lifted
}

/// Minimality of `c̄` within `C_inc`: whenever an increasing path dominates
/// `c` cellwise it also dominates `c̄`. Returns the truth value of that
/// implication for the supplied paths (knots must sit on grid edges).
pub fn minimality_check(c: &PathPanel, dominating: &[IncreasingPath]) -> Result<bool> {
    let grid = c.frame().grid();
    if dominating.len() != c.scenarios() {
        return Err(crate::error::Error::Shape(
            "one increasing path per scenario required".into(),
        ));
    }
    let bar = running_esssup(c);
    for (s, path) in dominating.iter().enumerate() {
        let cv = path.cell_values(grid)?;
        let dominates = (0..c.cells()).all(|k| c.get(s, k) <= cv[k]);
        if dominates && (0..c.cells()).any(|k| bar.get(s, k) > cv[k]) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Clock, Horizon, PanelFrame, TimeGrid};
    use proptest::prelude::*;

    fn panel(rows: Vec<Vec<f64>>, dt: f64) -> PathPanel {
        let n = rows[0].len();
        let grid = TimeGrid::uniform(n, dt, Horizon::Finite).unwrap();
        let clock = Clock::lebesgue(&grid);
        let frame = PanelFrame::equally_weighted(grid, clock, rows.len()).unwrap();
        PathPanel::new(frame, rows).unwrap()
    }

    #[test]
    fn debut_examples() {
        let c = panel(vec![vec![0.0, 2.0, 2.0, 0.0]], 0.5);
        assert_eq!(essential_debut(&c, 1.0), vec![0.5]);
        assert_eq!(essential_debut(&c, 3.0), vec![2.0]);
        assert_eq!(essential_debut(&c, 0.0), vec![0.0]);
    }

    #[test]
    fn running_esssup_examples() {
        let c = panel(vec![vec![0.0, 2.0, 2.0, 0.0]], 0.5);
        assert_eq!(running_esssup(&c).row(0), &[0.0, 0.0, 2.0, 2.0]);
        let k = panel(vec![vec![5.0; 4]], 1.0);
        assert_eq!(running_esssup(&k).row(0), &[0.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn drawdown_examples() {
        let inc = panel(vec![vec![1.0, 2.0, 2.0, 3.0]], 1.0);
        assert!(check_drawdown(&inc, 1.0, 1.0).passed());

        let c = panel(vec![vec![0.0, 2.0, 1.0, 1.0]], 1.0);
        let r = check_drawdown(&c, 1.0, 0.0);
        assert!(!r.passed());
        assert_eq!(r.worst, Some((0, 2)));
        assert_eq!(r.max_violation, 1.0);

        let wild = panel(vec![vec![3.0, 0.0, 5.0, 0.1]], 1.0);
        assert!(check_drawdown(&wild, 0.0, -1.0).passed());
    }

    #[test]
    fn lift_examples() {
        let c = panel(vec![vec![0.0, 2.0, 1.0, 0.0]], 1.0);
        assert_eq!(solid_hull_lift(&c, 1.0, 0.0).row(0), &[0.0, 2.0, 2.0, 2.0]);
        let ok = panel(vec![vec![1.0, 2.0, 2.0, 3.0]], 1.0);
        assert_eq!(solid_hull_lift(&ok, 1.0, 1.0).row(0), ok.row(0));
        let zero = panel(vec![vec![0.0; 3]], 1.0);
        assert_eq!(solid_hull_lift(&zero, 0.5, 4.0).row(0), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn minimality_examples() {
        let c = panel(vec![vec![1.0, 3.0, 0.0, 2.0]], 1.0);
        let grid = c.frame().grid().clone();
        let bar = running_esssup(&c);
        let incl = running_esssup_inclusive(&c);
        // c̄ itself on cell interiors (the inclusive prefix) dominates c
        let p = IncreasingPath::from_cells(&grid, incl.row(0)).unwrap();
        assert!(minimality_check(&c, &[p]).unwrap());
        let plus: Vec<f64> = incl.row(0).iter().map(|v| v + 1.0).collect();
        let p1 = IncreasingPath::from_cells(&grid, &plus).unwrap();
        assert!(minimality_check(&c, &[p1]).unwrap());
        assert!(bar.row(0).iter().zip(&plus).all(|(b, p)| b < p));
    }

    fn brute_esssup(row: &[f64]) -> Vec<f64> {
        // max over every cell lying entirely inside [0, t_k]
        (0..row.len())
            .map(|k| {
                (0..row.len())
                    .filter(|&j| j < k)
                    .map(|j| row[j])
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn esssup_matches_brute_force_and_inverse(
            row in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0, 2.0, 3.5]), 1..40)
        ) {
            let c = panel(vec![row.clone()], 0.25);
            let bar = running_esssup(&c);
            let brute = brute_esssup(&row);
            prop_assert_eq!(bar.row(0), brute.as_slice());
            let inv = DebutProfile::new(&c).generalized_inverse(&c).unwrap();
            prop_assert_eq!(bar.row(0), inv.row(0));
            // domination: c on cell k <= c̄ on cell k+1
            for k in 0..row.len() - 1 {
                prop_assert!(row[k] <= bar.get(0, k + 1));
            }
        }

        #[test]
        fn lift_is_idempotent(
            row in prop::collection::vec(0.0..5.0f64, 1..20),
            lambda in 0.0..=1.0f64,
            q in -1.0..4.0f64,
        ) {
            let c = panel(vec![row], 1.0);
            let once = solid_hull_lift(&c, lambda, q);
            let twice = solid_hull_lift(&once, lambda, q);
            prop_assert_eq!(once.row(0), twice.row(0));
            prop_assert!(check_drawdown(&once, lambda, q).passed());
        }

        #[test]
        fn esssup_is_monotone(
            pairs in prop::collection::vec((0.0..5.0f64, 0.0..2.0f64), 1..30)
        ) {
            let lo: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let hi: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
            let a = running_esssup(&panel(vec![lo], 1.0));
            let b = running_esssup(&panel(vec![hi], 1.0));
            prop_assert!(a.row(0).iter().zip(b.row(0)).all(|(x, y)| x <= y));
        }

        #[test]
        fn minimality_holds_for_random_dominators(
            row in prop::collection::vec(0.0..5.0f64, 1..20),
            bumps in prop::collection::vec(0.0..1.0f64, 20),
        ) {
            let c = panel(vec![row.clone()], 1.0);
            let incl = running_esssup_inclusive(&c);
            let mut acc = 0.0;
            let dom: Vec<f64> = (0..row.len()).map(|k| { acc += bumps[k]; incl.get(0, k) + acc }).collect();
            let p = IncreasingPath::from_cells(c.frame().grid(), &dom).unwrap();
            prop_assert!(minimality_check(&c, &[p]).unwrap());
        }
    }
}
