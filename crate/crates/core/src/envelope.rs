//! Ratchet optimizers on trees without duality: the level-indexed family of
//! optimal stopping problems, its inversion into the envelope plan `c^y`, and
//! the check that a non-decreasing plan satisfies the envelope relation
//!
//! ```text
//! E[∫_t U'(c) dκ | F_t] <= y E[∫_t Z dκ | F_t],   equality where c increases.
//! ```
//!
//! For a level `l`, `T_l` is the largest stopping time minimizing
//! `E ∫_T^T̂ (yZ - U'(l)) dκ`. Low levels make the integrand negative and stop
//! at once; high levels never stop. The plan is recovered as
//! `c^y(u) = sup{l : T_l <= t_u}`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Horizon, IncreasingPath, TimeGrid};
use crate::primal::{boundary_plan, solve_primal_tree, PrimalProblem};
use crate::tree::{Deflator, NodeProcess, TreeModel};
use crate::utility::UtilityField;

/// Outcome of one level's stopping problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoppingRule {
    pub level: f64,
    /// Stop at this node (given the path got here unstopped).
    pub stop_here: Vec<bool>,
    /// `T_l <= t_u`: stopped at `u` or an ancestor.
    pub stopped: Vec<bool>,
    /// Minimal expected remaining integral at each node.
    pub value: Vec<f64>,
}

impl StoppingRule {
    /// Depth at which the rule stops along the path to `leaf`; `None` means
    /// `T_l = T̂`.
    pub fn stopping_depth(&self, tree: &TreeModel, leaf: usize) -> Option<usize> {
        tree.path(leaf)
            .into_iter()
            .find(|&u| self.stop_here[u])
            .map(|u| tree.depth(u))
    }

    pub fn never_stops(&self) -> bool {
        !self.stop_here.iter().any(|&s| s)
    }

    pub fn stops_at_once(&self) -> bool {
        self.stop_here[0]
    }
}

fn check_inputs(tree: &TreeModel, z: &Deflator, utility: &UtilityField, y: f64) -> Result<()> {
    utility.validate()?;
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::InvalidInput(format!(
            "multiplier y must be positive, got {y}"
        )));
    }
    if z.values().len() != tree.len() {
        return Err(Error::Shape("deflator does not match tree".into()));
    }
    Ok(())
}

/// Snell backward induction for level `l`; ties continue (largest minimizer).
pub fn level_stopping(
    tree: &TreeModel,
    z: &Deflator,
    utility: &UtilityField,
    y: f64,
    l: f64,
) -> Result<StoppingRule> {
    check_inputs(tree, z, utility, y)?;
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::InvalidInput(format!(
            "level must be positive, got {l}"
        )));
    }
    Ok(snell(tree, z, utility, y, l))
}

fn snell(tree: &TreeModel, z: &Deflator, utility: &UtilityField, y: f64, l: f64) -> StoppingRule {
    let n = tree.len();
    let zv = z.values();
    let mut tail = vec![0.0; n];
    // Scale of the absolute tail integrals, for tie detection.
    let mut scale = vec![0.0; n];
    let mut value = vec![0.0; n];
    let mut stop_here = vec![false; n];
    for u in (0..n).rev() {
        let g = y * zv[u] - utility.marginal(tree.time(u), l);
        let mut cont = 0.0;
        let mut tail_children = 0.0;
        let mut scale_children = 0.0;
        for &c in tree.children(u) {
            let p = tree.prob(c);
            cont += p * value[c];
            tail_children += p * tail[c];
            scale_children += p * scale[c];
        }
        tail[u] = g * tree.mass(u) + tail_children;
        scale[u] = g.abs() * tree.mass(u) + scale_children;
        let stop = tail[u];
        if stop < cont - 1e-14 * scale[u] {
            stop_here[u] = true;
            value[u] = stop;
        } else {
            value[u] = cont;
        }
    }
    let mut stopped = vec![false; n];
    for u in 0..n {
        let inherited = tree.parent(u).is_some_and(|p| stopped[p]);
        stopped[u] = inherited || stop_here[u];
    }
    StoppingRule {
        level: l,
        stop_here,
        stopped,
        value,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGridOptions {
    /// Number of geometrically spaced levels.
    pub levels: usize,
    /// Multiplicative padding of the extreme first-order solutions.
    pub pad: f64,
    /// Refine each node's threshold by bisection between grid neighbours.
    pub refine: bool,
}

impl Default for LevelGridOptions {
    fn default() -> Self {
        Self {
            levels: 512,
            pad: 1.05,
            refine: true,
        }
    }
}

/// The swept family `l ↦ T_l` and the plan it encodes.
#[derive(Debug, Clone)]
pub struct LevelSweep {
    pub y: f64,
    pub levels: Vec<f64>,
    pub rules: Vec<StoppingRule>,
    /// `c^y` at every node.
    pub c: NodeProcess,
    /// Largest absolute width of the bracket left around any node value.
    pub eta: f64,
    /// Relative counterpart of `eta`.
    pub eta_rel: f64,
    pub envelope: EnvelopeReport,
}

impl LevelSweep {
    /// `c^y` as a left-continuous path per leaf, in `tree.leaves()` order.
    pub fn paths(&self, tree: &TreeModel) -> Result<Vec<IncreasingPath>> {
        let grid = TimeGrid::from_durations(tree.durations(), Horizon::Finite)?;
        tree.leaves()
            .map(|leaf| {
                let vals: Vec<f64> = tree.path(leaf).iter().map(|&u| self.c[u]).collect();
                IncreasingPath::from_cells(&grid, &vals)
            })
            .collect()
    }
}

/// Geometric levels spanning every node's unconstrained solution `I(t, yZ)`.
pub fn level_grid(
    tree: &TreeModel,
    z: &Deflator,
    utility: &UtilityField,
    y: f64,
    opts: &LevelGridOptions,
) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for u in 0..tree.len() {
        let i = utility.inverse_marginal(tree.time(u), y * z.values()[u]);
        lo = lo.min(i);
        hi = hi.max(i);
    }
    let (lo, hi) = (lo / opts.pad, hi * opts.pad);
    let m = opts.levels.max(2);
    let step = (hi / lo).ln() / (m - 1) as f64;
    (0..m).map(|i| lo * (step * i as f64).exp()).collect()
}

/// Sweeps the level grid, inverts `l ↦ T_l` nodewise and verifies the result.
pub fn build_envelope_process(
    tree: &TreeModel,
    z: &Deflator,
    utility: &UtilityField,
    y: f64,
    opts: &LevelGridOptions,
) -> Result<LevelSweep> {
    check_inputs(tree, z, utility, y)?;
    if opts.levels < 2 || !(opts.pad > 1.0) {
        return Err(Error::InvalidInput(
            "need at least two levels and pad > 1".into(),
        ));
    }
    let levels = level_grid(tree, z, utility, y, opts);
    let rules: Vec<StoppingRule> = levels
        .iter()
        .map(|&l| snell(tree, z, utility, y, l))
        .collect();
    let n = tree.len();

    for (i, pair) in rules.windows(2).enumerate() {
        if let Some(u) = (0..n).find(|&u| pair[1].stopped[u] && !pair[0].stopped[u]) {
            return Err(Error::Construction(format!(
                "stopping family not monotone between levels {} and {} at node {u}",
                levels[i],
                levels[i + 1]
            )));
        }
    }
    if let Some(u) = (0..n).find(|&u| !rules[0].stopped[u] || rules[levels.len() - 1].stopped[u]) {
        return Err(Error::Construction(format!(
            "level grid does not bracket node {u}"
        )));
    }

    let mut c = vec![0.0; n];
    let mut eta = 0.0_f64;
    let mut eta_rel = 0.0_f64;
    for u in 0..n {
        // Largest grid index still stopped at u.
        let i = rules.partition_point(|r| r.stopped[u]) - 1;
        let (mut lo, mut hi) = (levels[i], levels[i + 1]);
        if opts.refine {
            for _ in 0..200 {
                let mid = (lo * hi).sqrt();
                if !(mid > lo && mid < hi) {
                    break;
                }
                if snell(tree, z, utility, y, mid).stopped[u] {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        c[u] = lo;
        eta = eta.max(hi - lo);
        eta_rel = eta_rel.max((hi - lo) / lo);
    }
    let c = NodeProcess(c);

    let envelope = verify_envelope(tree, z, utility, y, &c)?;
    let tol = envelope_tolerance(utility, eta_rel);
    if !envelope.holds(tol) {
        return Err(Error::Resolution(format!(
            "envelope check fails (excess {:.3e}, equality gap {:.3e}) beyond tolerance {tol:.3e} at grid resolution {eta_rel:.3e}",
            envelope.max_excess, envelope.max_equality_gap
        )));
    }
    Ok(LevelSweep {
        y,
        levels,
        rules,
        c,
        eta,
        eta_rel,
        envelope,
    })
}

/// Relative tolerance for the envelope check of a plan known to relative
/// accuracy `eta_rel`: marginal utility moves by about `γ` times that.
pub fn envelope_tolerance(utility: &UtilityField, eta_rel: f64) -> f64 {
    1e-9_f64.max(4.0 * utility.gamma() * eta_rel)
}

/// Nodewise comparison of `E[∫_t U'(c) dκ]` against `y E[∫_t Z dκ]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeReport {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    /// `c` strictly rises at the node (the root counts when `c > 0`).
    pub increase: Vec<bool>,
    /// Non-decreasing along every path.
    pub monotone: bool,
    /// `max (lhs - rhs) / rhs`; positive values violate the inequality.
    pub max_excess: f64,
    /// `max |lhs - rhs| / rhs` over increase nodes.
    pub max_equality_gap: f64,
}

impl EnvelopeReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.monotone && self.max_excess <= tol && self.max_equality_gap <= tol
    }
}

pub fn verify_envelope(
    tree: &TreeModel,
    z: &Deflator,
    utility: &UtilityField,
    y: f64,
    c: &NodeProcess,
) -> Result<EnvelopeReport> {
    check_inputs(tree, z, utility, y)?;
    if c.len() != tree.len() {
        return Err(Error::Shape("plan does not match tree".into()));
    }
    let marginal = NodeProcess::from_fn(tree, |u| utility.marginal(tree.time(u), c[u]));
    let lhs = tree.optional_projection(&marginal)?.0;
    let rhs = tree.optional_projection(&z.values().scaled(y))?.0;
    let n = tree.len();
    let mut monotone = c[0] >= 0.0;
    let mut increase = vec![false; n];
    for u in 0..n {
        let before = tree.parent(u).map_or(0.0, |p| c[p]);
        monotone &= c[u] >= before;
        increase[u] = c[u] > before * (1.0 + 1e-12) && c[u] > 0.0;
    }
    let mut max_excess = f64::NEG_INFINITY;
    let mut max_equality_gap = 0.0_f64;
    for u in 0..n {
        let rel = if lhs[u].is_finite() {
            (lhs[u] - rhs[u]) / rhs[u]
        } else {
            f64::INFINITY
        };
        max_excess = max_excess.max(rel);
        if increase[u] {
            max_equality_gap = max_equality_gap.max(rel.abs());
        }
    }
    Ok(EnvelopeReport {
        lhs,
        rhs,
        increase,
        monotone,
        max_excess,
        max_equality_gap,
    })
}

/// The floored envelope plan and its agreement with the duality route.
#[derive(Debug, Clone)]
pub struct AlternativeSolution {
    pub c_y: NodeProcess,
    /// `c^y ∨ q`.
    pub c: NodeProcess,
    /// `<c, Z>`.
    pub x: f64,
    pub q: f64,
    pub eta: f64,
    /// Plan of the primal solver at `(x, q, λ = 1)`.
    pub primal: Vec<f64>,
    /// Sup-norm distance between the two plans.
    pub primal_gap: f64,
    /// `primal_gap <= max(1e-6, eta)` up to the primal solver's own accuracy.
    pub agrees: bool,
}

/// `ĉ = c^y ∨ q`, its price, and the cross-check against the primal solver.
pub fn alternative_solution(
    tree: &TreeModel,
    z: &Deflator,
    utility: &UtilityField,
    y: f64,
    q: f64,
    opts: &LevelGridOptions,
) -> Result<AlternativeSolution> {
    let sweep = build_envelope_process(tree, z, utility, y, opts)?;
    let c = sweep.c.zip_with(&NodeProcess::constant(tree, q), f64::max);
    let x = tree.pairing(&c, z.values())?;
    let primal = match solve_primal_tree(tree, z, utility, x, q, 1.0) {
        Ok(sol) => sol.c,
        Err(Error::Boundary { .. }) => {
            boundary_plan(&PrimalProblem {
                tree,
                z,
                utility,
                x,
                q,
                lambda: 1.0,
            })
            .c
        }
        Err(e) => return Err(e),
    };
    let primal_gap = c.max_abs_diff(&NodeProcess(primal.clone()));
    // The primal solver is accurate to roughly 1e-8 relative.
    let tol = 1e-6_f64.max(sweep.eta) * c.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    Ok(AlternativeSolution {
        c_y: sweep.c,
        c,
        x,
        q,
        eta: sweep.eta,
        primal,
        primal_gap,
        agrees: primal_gap <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{random_tree, RandomTreeSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn worked() -> (TreeModel, Deflator, UtilityField) {
        let (t, z) = TreeModel::worked_example();
        (t, z, UtilityField::log())
    }

    #[test]
    fn sign_extremes() {
        let (t, z, u) = worked();
        // Tiny level: U'(l) dominates, integrand negative everywhere.
        let r = level_stopping(&t, &z, &u, 2.0 / 7.0, 1e-3).unwrap();
        assert!(r.stops_at_once());
        assert!(r.stopped.iter().all(|&s| s));
        // Huge level: integrand positive, never stop.
        let r = level_stopping(&t, &z, &u, 2.0 / 7.0, 1e6).unwrap();
        assert!(r.never_stops());
        assert_eq!(r.value[0], 0.0);
    }

    #[test]
    fn zero_integrand_continues() {
        // Deterministic chain with yZ = U'(l) exactly: every choice ties.
        let t = TreeModel::chain(vec![1.0, 1.0], &[1.0, 1.0]).unwrap();
        let z = Deflator::new(&t, vec![1.0, 1.0].into()).unwrap();
        let r = level_stopping(&t, &z, &UtilityField::log(), 0.5, 2.0).unwrap();
        assert!(r.never_stops());
    }

    #[test]
    fn worked_levels_between_three_and_seven() {
        let (t, z, u) = worked();
        for l in [3.5, 5.0, 6.9] {
            let r = level_stopping(&t, &z, &u, 2.0 / 7.0, l).unwrap();
            assert_eq!(r.stopping_depth(&t, 1), None, "l = {l}");
            assert_eq!(r.stopping_depth(&t, 2), Some(1), "l = {l}");
        }
        let r = level_stopping(&t, &z, &u, 2.0 / 7.0, 2.9).unwrap();
        assert_eq!(r.stopping_depth(&t, 1), Some(0));
    }

    #[test]
    fn worked_envelope_matches_closed_form() {
        let (t, z, u) = worked();
        let s =
            build_envelope_process(&t, &z, &u, 2.0 / 7.0, &LevelGridOptions::default()).unwrap();
        for (got, want) in s.c.iter().zip([3.0, 3.0, 7.0]) {
            assert!((got - want).abs() < 1e-9, "{:?}", s.c);
        }
        let paths = s.paths(&t).unwrap();
        assert_eq!(paths[0].value(0.0), 0.0);
        assert!((paths[0].value_after(0.0) - 3.0).abs() < 1e-9);
        assert!((paths[1].value_after(1.0) - 7.0).abs() < 1e-9);
    }

    #[test]
    fn worked_envelope_report() {
        let (t, z, u) = worked();
        let rep = verify_envelope(&t, &z, &u, 2.0 / 7.0, &vec![3.0, 3.0, 7.0].into()).unwrap();
        assert!((rep.lhs[0] - 4.0 / 7.0).abs() < 1e-14);
        assert!((rep.rhs[0] - 4.0 / 7.0).abs() < 1e-14);
        assert!((rep.lhs[2] - 1.0 / 7.0).abs() < 1e-14);
        assert!((rep.lhs[1] - 1.0 / 3.0).abs() < 1e-14);
        assert!((rep.rhs[1] - 3.0 / 7.0).abs() < 1e-14);
        assert_eq!(rep.increase, vec![true, false, true]);
        assert!(rep.holds(1e-12));
    }

    #[test]
    fn detector_flags_bad_plans() {
        let (t, z, u) = worked();
        let y = 2.0 / 7.0;
        let big = verify_envelope(&t, &z, &u, y, &vec![30.0, 30.0, 70.0].into()).unwrap();
        assert!(big.max_excess < 0.0);
        assert!(!big.holds(1e-6));
        let zero = verify_envelope(&t, &z, &u, y, &NodeProcess::zeros(&t)).unwrap();
        assert!(zero.increase.iter().all(|&i| !i));
        assert!(zero.max_excess.is_infinite());
        assert!(!zero.holds(1e-6));
        let down = verify_envelope(&t, &z, &u, y, &vec![3.0, 2.0, 7.0].into()).unwrap();
        assert!(!down.monotone);
    }

    #[test]
    fn one_cell_tree_solves_scalar_foc() {
        let t = TreeModel::chain(vec![2.0], &[0.5]).unwrap();
        let z = Deflator::new(&t, vec![1.0].into()).unwrap();
        let u = UtilityField::crra(3.0).unwrap();
        let y = 0.2;
        let s = build_envelope_process(&t, &z, &u, y, &LevelGridOptions::default()).unwrap();
        let want = u.inverse_marginal(0.0, y);
        assert!((s.c[0] - want).abs() < 1e-10 * want);
    }

    #[test]
    fn coarse_grid_within_resolution_and_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = UtilityField::crra(2.0).unwrap();
        for _ in 0..10 {
            let (t, z) = random_tree(
                &mut rng,
                &RandomTreeSpec {
                    max_depth: 4,
                    ..Default::default()
                },
            );
            let fine =
                build_envelope_process(&t, &z, &u, 0.8, &LevelGridOptions::default()).unwrap();
            let other = build_envelope_process(
                &t,
                &z,
                &u,
                0.8,
                &LevelGridOptions {
                    levels: 97,
                    pad: 1.3,
                    refine: true,
                },
            )
            .unwrap();
            assert!(fine.c.max_abs_diff(&other.c) <= fine.eta + other.eta + 1e-12);
            let raw = LevelGridOptions {
                levels: 4096,
                refine: false,
                ..Default::default()
            };
            let half = LevelGridOptions {
                levels: 2048,
                ..raw
            };
            let a = build_envelope_process(&t, &z, &u, 0.8, &raw);
            let b = build_envelope_process(&t, &z, &u, 0.8, &half);
            if let (Ok(a), Ok(b)) = (a, b) {
                assert!(a.c.max_abs_diff(&b.c) <= b.eta + 1e-12);
                assert!(a.c.max_abs_diff(&fine.c) <= a.eta + 1e-12);
            }
        }
    }

    #[test]
    fn alternative_solution_examples() {
        let (t, z, u) = worked();
        let y = 2.0 / 7.0;
        let opts = LevelGridOptions::default();
        let a = alternative_solution(&t, &z, &u, y, 0.0, &opts).unwrap();
        assert!((a.x - 7.0).abs() < 1e-8);
        assert!(a.agrees, "gap {}", a.primal_gap);
        let a = alternative_solution(&t, &z, &u, y, 5.0, &opts).unwrap();
        assert!((a.x - 10.5).abs() < 1e-8);
        assert!(a.c.max_abs_diff(&vec![5.0, 5.0, 7.0].into()) < 1e-8);
        assert!(a.agrees, "gap {}", a.primal_gap);
        let a = alternative_solution(&t, &z, &u, y, 100.0, &opts).unwrap();
        assert!((a.x - 200.0).abs() < 1e-9);
        assert!(a.agrees);
    }
}
