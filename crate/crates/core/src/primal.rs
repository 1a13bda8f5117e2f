//! Concave-program oracle for the drawdown-constrained primal on trees and
//! the duality certificate that proves its output optimal.
//!
//! The drawdown constraint `c >= λ(c̄ ∨ q)` is a maximum over strict
//! ancestors, so it splits into the linear family `c_u >= λ c_a` (every
//! strict ancestor `a`; the parent suffices when `λ = 1`) plus the floor
//! `c_u >= λ q⁺`. Together with the budget `<c, Z> <= x` this is a smooth
//! separable concave program over a polyhedron, solved by a primal-dual
//! interior-point method with Mehrotra correction and finished by an
//! equality-constrained Newton polish on the detected active set.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tree::{Deflator, NodeProcess, OrderingCheck, TreeModel};
use crate::utility::UtilityField;

/// Node cap for the dense Newton system.
pub const MAX_NODES: usize = 1500;

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Target for the dual residual and the complementarity products.
    pub tolerance: f64,
    /// Residual level accepted when the iteration cap is hit.
    pub accept: f64,
    pub polish: bool,
    /// Fraction of the budget slack spent by the starting point.
    pub start_fraction: f64,
    /// Per-depth growth of the starting point (keeps ancestor slacks positive).
    pub start_growth: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-12,
            accept: 1e-8,
            polish: true,
            start_fraction: 0.5,
            start_growth: 1.1,
        }
    }
}

/// Problem data for one `(x, q, λ)` solve.
#[derive(Debug, Clone, Copy)]
pub struct PrimalProblem<'a> {
    pub tree: &'a TreeModel,
    pub z: &'a Deflator,
    pub utility: &'a UtilityField,
    pub x: f64,
    pub q: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrimalSolution {
    pub c: Vec<f64>,
    pub u_hat: f64,
    /// Budget multiplier.
    pub y: f64,
    pub x: f64,
    pub q: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub dual_residual: f64,
    pub complementarity: f64,
    pub polished: bool,
    #[serde(skip)]
    pub utility: UtilityField,
}

impl PrimalSolution {
    pub fn plan(&self) -> NodeProcess {
        NodeProcess(self.c.clone())
    }
}

#[derive(Debug, Clone, Copy)]
enum Constraint {
    /// `c_u - λ c_a >= 0`
    Ratio { u: usize, a: usize },
    /// `c_u >= level`
    Floor { u: usize },
    /// `x - Σ p c >= 0`
    Budget,
}

struct Program<'a> {
    utility: &'a UtilityField,
    price: Vec<f64>,
    weight: Vec<f64>,
    times: Vec<f64>,
    lambda: f64,
    floor: f64,
    x: f64,
    cons: Vec<Constraint>,
}

impl<'a> Program<'a> {
    fn new(p: &PrimalProblem<'a>) -> Self {
        let tree = p.tree;
        let n = tree.len();
        let mut cons = Vec::new();
        if p.lambda > 0.0 {
            for u in 1..n {
                if p.lambda >= 1.0 {
                    cons.push(Constraint::Ratio {
                        u,
                        a: tree.parent(u).unwrap(),
                    });
                } else {
                    let mut a = tree.parent(u);
                    while let Some(v) = a {
                        cons.push(Constraint::Ratio { u, a: v });
                        a = tree.parent(v);
                    }
                }
            }
        }
        for u in 0..n {
            cons.push(Constraint::Floor { u });
        }
        cons.push(Constraint::Budget);
        Self {
            utility: p.utility,
            price: (0..n).map(|u| tree.weight(u) * p.z.values()[u]).collect(),
            weight: (0..n).map(|u| tree.weight(u)).collect(),
            times: (0..n).map(|u| tree.time(u)).collect(),
            lambda: p.lambda,
            floor: p.lambda * p.q.max(0.0),
            x: p.x,
            cons,
        }
    }

    fn slack(&self, c: &[f64]) -> Vec<f64> {
        self.cons
            .iter()
            .map(|k| match *k {
                Constraint::Ratio { u, a } => c[u] - self.lambda * c[a],
                Constraint::Floor { u } => c[u] - self.floor,
                Constraint::Budget => {
                    self.x - self.price.iter().zip(c).map(|(p, v)| p * v).sum::<f64>()
                }
            })
            .collect()
    }

    /// `A v` (rows are constraint gradients).
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.cons
            .iter()
            .map(|k| match *k {
                Constraint::Ratio { u, a } => v[u] - self.lambda * v[a],
                Constraint::Floor { u } => v[u],
                Constraint::Budget => -self.price.iter().zip(v).map(|(p, x)| p * x).sum::<f64>(),
            })
            .collect()
    }

    /// `Aᵀ w`.
    fn apply_t(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.price.len()];
        for (k, &wi) in self.cons.iter().zip(w) {
            match *k {
                Constraint::Ratio { u, a } => {
                    out[u] += wi;
                    out[a] -= self.lambda * wi;
                }
                Constraint::Floor { u } => out[u] += wi,
                Constraint::Budget => {
                    for (o, p) in out.iter_mut().zip(&self.price) {
                        *o -= p * wi;
                    }
                }
            }
        }
        out
    }

    /// Gradient of `-Σ w U(t, c)`.
    fn grad(&self, c: &[f64]) -> Vec<f64> {
        (0..c.len())
            .map(|u| -self.weight[u] * self.utility.marginal(self.times[u], c[u]))
            .collect()
    }

    fn hess(&self, c: &[f64]) -> Vec<f64> {
        (0..c.len())
            .map(|u| -self.weight[u] * self.utility.curvature(self.times[u], c[u]))
            .collect()
    }

    fn objective(&self, c: &[f64]) -> f64 {
        (0..c.len())
            .map(|u| self.weight[u] * self.utility.value(self.times[u], c[u]))
            .sum()
    }

    /// `H + Aᵀ diag(d) A`.
    fn normal_matrix(&self, h: &[f64], d: &[f64]) -> DMatrix<f64> {
        let n = h.len();
        let mut m = DMatrix::<f64>::zeros(n, n);
        for u in 0..n {
            m[(u, u)] = h[u];
        }
        let l = self.lambda;
        for (k, &di) in self.cons.iter().zip(d) {
            match *k {
                Constraint::Ratio { u, a } => {
                    m[(u, u)] += di;
                    m[(a, a)] += l * l * di;
                    m[(u, a)] -= l * di;
                    m[(a, u)] -= l * di;
                }
                Constraint::Floor { u } => m[(u, u)] += di,
                Constraint::Budget => {
                    for i in 0..n {
                        let pi = self.price[i] * di;
                        for j in 0..n {
                            m[(i, j)] += pi * self.price[j];
                        }
                    }
                }
            }
        }
        m
    }

    fn row(&self, k: usize) -> Vec<(usize, f64)> {
        match self.cons[k] {
            Constraint::Ratio { u, a } => vec![(u, 1.0), (a, -self.lambda)],
            Constraint::Floor { u } => vec![(u, 1.0)],
            Constraint::Budget => self
                .price
                .iter()
                .enumerate()
                .map(|(i, p)| (i, -p))
                .collect(),
        }
    }

    fn budget_index(&self) -> usize {
        self.cons.len() - 1
    }
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Validates `(x, q)` against the cone `x > αλq⁺`.
pub fn check_cone(tree: &TreeModel, z: &Deflator, x: f64, q: f64, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!(
            "lambda must lie in [0,1], got {lambda}"
        )));
    }
    if !x.is_finite() || !q.is_finite() {
        return Err(Error::InvalidInput(
            "budget and floor must be finite".into(),
        ));
    }
    let floor_cost = z.alpha(tree) * lambda * q.max(0.0);
    let scale = 1e-12 * x.abs().max(floor_cost.abs()).max(1.0);
    if (x - floor_cost).abs() <= scale {
        return Err(Error::Boundary { x });
    }
    if x < floor_cost {
        return Err(Error::Infeasible { x, floor_cost });
    }
    Ok(())
}

/// The only admissible plan on the cone boundary: `c ≡ λq⁺`.
pub fn boundary_plan(p: &PrimalProblem) -> PrimalSolution {
    let level = p.lambda * p.q.max(0.0);
    let c = vec![level; p.tree.len()];
    let u_hat = (0..p.tree.len())
        .map(|u| p.tree.weight(u) * p.utility.value(p.tree.time(u), level))
        .sum();
    PrimalSolution {
        c,
        u_hat,
        y: f64::NAN,
        x: p.x,
        q: p.q,
        lambda: p.lambda,
        iterations: 0,
        dual_residual: 0.0,
        complementarity: 0.0,
        polished: false,
        utility: *p.utility,
    }
}

pub fn solve_primal_tree(
    tree: &TreeModel,
    z: &Deflator,
    utility: &UtilityField,
    x: f64,
    q: f64,
    lambda: f64,
) -> Result<PrimalSolution> {
    solve_primal_tree_with(
        &PrimalProblem {
            tree,
            z,
            utility,
            x,
            q,
            lambda,
        },
        &SolverOptions::default(),
    )
}

pub fn solve_primal_tree_with(p: &PrimalProblem, opts: &SolverOptions) -> Result<PrimalSolution> {
    check_cone(p.tree, p.z, p.x, p.q, p.lambda)?;
    p.utility.validate()?;
    if p.tree.len() > MAX_NODES {
        return Err(Error::Capacity(format!(
            "primal oracle supports at most {MAX_NODES} nodes, tree has {}",
            p.tree.len()
        )));
    }
    let prog = Program::new(p);
    let n = p.tree.len();
    let m = prog.cons.len();

    // strictly feasible start
    let growth: Vec<f64> = (0..n)
        .map(|u| opts.start_growth.powi(p.tree.depth(u) as i32))
        .collect();
    let spend: f64 = prog.price.iter().zip(&growth).map(|(a, b)| a * b).sum();
    let alpha: f64 = prog.price.iter().sum();
    let eps = opts.start_fraction * (p.x - alpha * prog.floor) / spend;
    let mut c: Vec<f64> = growth.iter().map(|g| prog.floor + eps * g).collect();
    let mut s = prog.slack(&c);
    let g0 = prog.grad(&c);
    let mu0 = (inf_norm(&g0) * inf_norm(&c)).max(1e-8) / m as f64;
    let mut zm: Vec<f64> = s.iter().map(|si| mu0 / si).collect();

    let mut iterations = 0;
    let mut dual_res;
    let mut comp;
    // set when the iteration stalls short of `accept`; the polish may still rescue it
    let mut failure: Option<Error> = None;
    loop {
        let g = prog.grad(&c);
        let atz = prog.apply_t(&zm);
        let rd: Vec<f64> = g.iter().zip(&atz).map(|(a, b)| a - b).collect();
        let gscale = inf_norm(&g).max(1e-300);
        dual_res = inf_norm(&rd) / gscale;
        let mu = s.iter().zip(&zm).map(|(a, b)| a * b).sum::<f64>() / m as f64;
        comp = s.iter().zip(&zm).map(|(a, b)| a * b).fold(0.0, f64::max) / gscale;
        if dual_res <= opts.tolerance && comp <= opts.tolerance {
            break;
        }
        if iterations >= opts.max_iterations {
            if dual_res > opts.accept || comp > opts.accept {
                failure = Some(Error::NonConvergence {
                    iterations,
                    dual_residual: dual_res,
                    complementarity: comp,
                });
            }
            break;
        }
        iterations += 1;

        let h = prog.hess(&c);
        let d: Vec<f64> = zm.iter().zip(&s).map(|(z, s)| z / s).collect();
        let stalled = Error::NonConvergence {
            iterations,
            dual_residual: dual_res,
            complementarity: comp,
        };
        let acceptable = dual_res <= opts.accept && comp <= opts.accept;
        let mut normal = prog.normal_matrix(&h, &d);
        let mut chol = normal.clone().cholesky();
        if chol.is_none() {
            let bump = 1e-13 * normal.diagonal().amax();
            for u in 0..n {
                normal[(u, u)] += bump;
            }
            chol = normal.cholesky();
        }
        let Some(chol) = chol else {
            if !acceptable {
                failure = Some(stalled);
            }
            break;
        };
        let direction = |target: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
            // target_i = σμ - corr_i
            let w: Vec<f64> = target.iter().zip(&s).map(|(t, s)| t / s).collect();
            let atw = prog.apply_t(&w);
            let rhs = DVector::from_iterator(n, g.iter().zip(&atw).map(|(g, a)| -g + a));
            let dc = chol.solve(&rhs);
            let dc: Vec<f64> = dc.iter().copied().collect();
            let ds = prog.apply(&dc);
            let dz: Vec<f64> = (0..m).map(|i| w[i] - zm[i] - d[i] * ds[i]).collect();
            (dc, ds, dz)
        };
        // predictor
        let (_, ds_a, dz_a) = direction(&vec![0.0; m]);
        let ap = max_step(&s, &ds_a).min(1.0);
        let ad = max_step(&zm, &dz_a).min(1.0);
        let mu_aff = (0..m)
            .map(|i| (s[i] + ap * ds_a[i]) * (zm[i] + ad * dz_a[i]))
            .sum::<f64>()
            / m as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
        // corrector
        // keep centrality until the dual residual has caught up with μ
        let mu_floor = 1e-2 * inf_norm(&rd) * inf_norm(&c);
        let mu_t = (sigma * mu).max(mu_floor.min(mu));
        let target: Vec<f64> = (0..m).map(|i| mu_t - ds_a[i] * dz_a[i]).collect();
        let (dc, ds, dz) = direction(&target);
        let step = (0.995 * max_step(&s, &ds).min(max_step(&zm, &dz))).min(1.0);
        let c_new: Vec<f64> = (0..n).map(|u| c[u] + step * dc[u]).collect();
        let s_new: Vec<f64> = (0..m).map(|i| s[i] + step * ds[i]).collect();
        let z_new: Vec<f64> = (0..m).map(|i| zm[i] + step * dz[i]).collect();
        // recomputed slacks can drift through zero once the step is tiny
        if !step.is_finite() || s_new.iter().any(|&v| v <= 0.0) || z_new.iter().any(|&v| v <= 0.0) {
            if !acceptable {
                failure = Some(stalled);
            }
            break;
        }
        c = c_new;
        s = s_new;
        zm = z_new;
    }

    let mut y = zm[prog.budget_index()];
    let mut polished = false;
    if opts.polish {
        if let Some((cp, yp, dr)) =
            polish(&prog, &c, &s, &zm).filter(|p| failure.is_none() || p.2 <= opts.accept)
        {
            failure = None;
            c = cp;
            y = yp;
            dual_res = dr;
            comp = 0.0;
            polished = true;
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(PrimalSolution {
        u_hat: prog.objective(&c),
        c,
        y,
        x: p.x,
        q: p.q,
        lambda: p.lambda,
        iterations,
        dual_residual: dual_res,
        complementarity: comp,
        polished,
        utility: *p.utility,
    })
}

/// Newton iterations on the active set `{s_i < z_i}` with the remaining
/// constraints dropped. Accepted only if the result stays feasible with
/// non-negative multipliers.
fn polish(prog: &Program, c0: &[f64], s: &[f64], z: &[f64]) -> Option<(Vec<f64>, f64, f64)> {
    let n = c0.len();
    let active: Vec<usize> = (0..s.len()).filter(|&i| s[i] < z[i]).collect();
    if !active.contains(&prog.budget_index()) {
        return None;
    }
    let k = active.len();
    let rows: Vec<Vec<(usize, f64)>> = active.iter().map(|&i| prog.row(i)).collect();
    let full_slack0 = prog.slack(c0);
    let rhs_target: Vec<f64> = active.iter().map(|&i| full_slack0[i] - s[i]).collect();
    debug_assert!(rhs_target.iter().all(|v| v.abs() < 1e-6));
    let mut c = c0.to_vec();
    let mut nu = vec![0.0; k];
    for _ in 0..30 {
        let g = prog.grad(&c);
        let h = prog.hess(&c);
        let sl = prog.slack(&c);
        let mut kkt = DMatrix::<f64>::zeros(n + k, n + k);
        let mut rhs = DVector::<f64>::zeros(n + k);
        for u in 0..n {
            kkt[(u, u)] = h[u];
            rhs[u] = -g[u];
        }
        for (r, row) in rows.iter().enumerate() {
            for &(j, a) in row {
                kkt[(n + r, j)] = a;
                kkt[(j, n + r)] = -a;
            }
            rhs[n + r] = -sl[active[r]];
        }
        let sol = kkt.lu().solve(&rhs)?;
        let dc: Vec<f64> = sol.iter().take(n).copied().collect();
        nu = sol.iter().skip(n).copied().collect();
        let mut t = 1.0;
        while c.iter().zip(&dc).any(|(c, d)| c + t * d <= 0.0) {
            t *= 0.5;
            if t < 1e-8 {
                return None;
            }
        }
        for u in 0..n {
            c[u] += t * dc[u];
        }
        if t == 1.0 && inf_norm(&dc) <= 1e-15 * inf_norm(&c).max(1.0) {
            break;
        }
    }
    let g = prog.grad(&c);
    let gscale = inf_norm(&g);
    let mut zfull = vec![0.0; s.len()];
    for (r, &i) in active.iter().enumerate() {
        zfull[i] = nu[r];
    }
    let rd: Vec<f64> = g
        .iter()
        .zip(prog.apply_t(&zfull))
        .map(|(a, b)| a - b)
        .collect();
    let dual_res = inf_norm(&rd) / gscale;
    let sl = prog.slack(&c);
    let feasible = sl.iter().all(|&v| v >= -1e-12 * inf_norm(&c).max(1.0));
    let dual_ok = nu.iter().all(|&v| v >= -1e-10 * gscale.max(1.0));
    if feasible && dual_ok && dual_res <= 1e-10 {
        Some((c, zfull[prog.budget_index()], dual_res))
    } else {
        None
    }
}

/// Region of a node in the three-regime description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    /// `yZ > U'(ĉ)`: consumption at the drawdown floor `λ c̄`.
    Min,
    /// `U'(ĉ) > yZ`: consumption at the running maximum `c̄`.
    Max,
    /// `U'(ĉ) = yZ`: unconstrained first-order condition.
    Unconstrained,
}

impl Region {
    pub fn as_str(&self) -> &'static str {
        match self {
            Region::Min => "min",
            Region::Max => "max",
            Region::Unconstrained => "unconstrained",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionReport {
    pub labels: Vec<Region>,
    /// Whether the (floored) running maximum rises at the node.
    pub increase: Vec<bool>,
    /// `|ĉ - (λc̄ ∨ I(yZ) ∧ c̄)|` per node.
    pub formula_residual: Vec<f64>,
    /// Deviation of `ĉ` from the level prescribed by its label.
    pub label_residual: Vec<f64>,
    /// `tail((δ̂ - yZ)⁺) - tail(λ(yZ - δ̂)⁺)` per node.
    pub tail_gap: Vec<f64>,
    pub max_formula_residual: f64,
    pub max_label_residual: f64,
    /// Largest positive tail gap (inequality violation).
    pub max_tail_violation: f64,
    /// Largest `|tail gap|` at increase nodes (equality violation).
    pub max_increase_gap: f64,
}

impl RegionReport {
    pub fn consistent(&self, tol: f64) -> bool {
        self.max_formula_residual <= tol
            && self.max_label_residual <= tol
            && self.max_tail_violation <= tol
            && self.max_increase_gap <= tol
    }
}

/// Labels every node and checks the three-regime conditions. With `q > 0`
/// the running maximum is the floored `c̄ ∨ q`.
pub fn verify_foc_regions(
    sol: &PrimalSolution,
    tree: &TreeModel,
    z: &Deflator,
    label_tol: f64,
) -> Result<RegionReport> {
    let c = sol.plan();
    if c.len() != tree.len() {
        return Err(Error::Shape("solution does not match tree".into()));
    }
    let u = &sol.utility;
    let lambda = sol.lambda;
    let qp = sol.q.max(0.0);
    let excl = tree.running_esssup(&c);
    let incl = tree.running_esssup_inclusive(&c);
    let n = tree.len();
    let yz: Vec<f64> = (0..n).map(|v| sol.y * z.values()[v]).collect();
    let dhat: Vec<f64> = (0..n).map(|v| u.marginal(tree.time(v), c[v])).collect();

    let mut labels = Vec::with_capacity(n);
    let mut increase = Vec::with_capacity(n);
    let mut formula_residual = Vec::with_capacity(n);
    let mut label_residual = Vec::with_capacity(n);
    for v in 0..n {
        let top = incl[v].max(qp);
        let rose = top > excl[v].max(qp) * (1.0 + 1e-12) + 1e-300 && top > 0.0;
        increase.push(rose);
        let i_yz = u.inverse_marginal(tree.time(v), yz[v]);
        let formula = (lambda * top).max(i_yz.min(top));
        let scale = top.max(1.0);
        formula_residual.push((c[v] - formula).abs() / scale);
        let band = label_tol * yz[v].max(dhat[v]);
        let (label, target) = if yz[v] - dhat[v] > band {
            (Region::Min, lambda * top)
        } else if dhat[v] - yz[v] > band {
            (Region::Max, top)
        } else {
            (Region::Unconstrained, i_yz)
        };
        labels.push(label);
        label_residual.push((c[v] - target).abs() / scale);
    }
    let pos = NodeProcess::from_fn(tree, |v| (dhat[v] - yz[v]).max(0.0));
    let neg = NodeProcess::from_fn(tree, |v| lambda * (yz[v] - dhat[v]).max(0.0));
    let tp = tree.optional_projection(&pos)?;
    let tn = tree.optional_projection(&neg)?;
    let tail_scale = tree.optional_projection(&NodeProcess(yz.clone()))?;
    let tail_gap: Vec<f64> = (0..n)
        .map(|v| (tp[v] - tn[v]) / tail_scale[v].max(1e-300))
        .collect();
    let max_tail_violation = tail_gap.iter().copied().fold(0.0, f64::max);
    let max_increase_gap = (0..n)
        .filter(|&v| increase[v])
        .map(|v| tail_gap[v].abs())
        .fold(0.0, f64::max);
    Ok(RegionReport {
        max_formula_residual: formula_residual.iter().copied().fold(0.0, f64::max),
        max_label_residual: label_residual.iter().copied().fold(0.0, f64::max),
        labels,
        increase,
        formula_residual,
        label_residual,
        tail_gap,
        max_tail_violation,
        max_increase_gap,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DualCertificate {
    pub y: f64,
    /// `r` entering the pairing identity (`0` when `q <= 0`).
    pub r_dual: f64,
    /// `E int [(δ̂ - yZ)⁺ - λ(yZ - δ̂)⁺] dκ`.
    pub r_sufficient: f64,
    pub delta_hat: Vec<f64>,
    pub y_z: Vec<f64>,
    /// `E int [V(δ̂) + ĉδ̂ - U(ĉ)] dκ`.
    pub fenchel_gap: f64,
    /// `|<ĉ, δ̂> - (xy + q r)|`.
    pub pairing_identity: f64,
    pub pairing: f64,
    /// `|u - (E int V(δ̂) dκ + xy + q r)|`.
    pub value_gap: f64,
    pub dual_value: f64,
    /// `|<ĉ, Z> - x|`.
    pub budget_gap: f64,
    pub drawdown_violation: f64,
    pub membership_residual: f64,
    pub membership: bool,
    pub regions: RegionReport,
    pub tolerance: f64,
    pub valid: bool,
}

/// Builds `δ̂ = U'(ĉ)` and checks the duality relations.
pub fn certify_duality(
    sol: &PrimalSolution,
    tree: &TreeModel,
    z: &Deflator,
    tol: f64,
) -> Result<DualCertificate> {
    let n = tree.len();
    let c = sol.plan();
    if c.len() != n {
        return Err(Error::Shape("solution does not match tree".into()));
    }
    let u = &sol.utility;
    let lambda = sol.lambda;
    let dhat = NodeProcess::from_fn(tree, |v| u.marginal(tree.time(v), c[v]));
    let yz = z.values().scaled(sol.y);
    let membership: OrderingCheck = tree.chron_leq_lambda(&dhat, &yz, lambda, 1e-8)?;
    let r_sufficient: f64 = (0..n)
        .map(|v| {
            tree.weight(v) * ((dhat[v] - yz[v]).max(0.0) - lambda * (yz[v] - dhat[v]).max(0.0))
        })
        .sum();
    let r_dual = if sol.q > 0.0 { r_sufficient } else { 0.0 };
    let qp = sol.q.max(0.0);
    let fenchel_gap: f64 = (0..n)
        .map(|v| {
            let t = tree.time(v);
            tree.weight(v) * (u.conjugate(t, dhat[v]) + c[v] * dhat[v] - u.value(t, c[v]))
        })
        .sum();
    let pairing = tree.pairing(&c, &dhat)?;
    let rhs = sol.x * sol.y + qp * r_dual;
    let dual_value: f64 = (0..n)
        .map(|v| tree.weight(v) * u.conjugate(tree.time(v), dhat[v]))
        .sum();
    let value_gap = (sol.u_hat - (dual_value + rhs)).abs();
    let budget_gap = (tree.pairing(&c, z.values())? - sol.x).abs();
    let bar = tree.running_esssup(&c);
    let drawdown_violation = (0..n)
        .map(|v| lambda * bar[v].max(sol.q) - c[v])
        .fold(0.0, f64::max);
    let regions = verify_foc_regions(sol, tree, z, 1e-7)?;
    let scale = sol.x.abs().max(1.0);
    let pairing_identity = (pairing - rhs).abs();
    let valid = fenchel_gap.abs() <= tol * scale
        && pairing_identity <= tol * scale
        && value_gap <= tol * scale.max(sol.u_hat.abs())
        && budget_gap <= tol * scale
        && drawdown_violation <= tol * scale
        && membership.holds;
    Ok(DualCertificate {
        y: sol.y,
        r_dual,
        r_sufficient,
        delta_hat: dhat.0,
        y_z: yz.0,
        fenchel_gap,
        pairing_identity,
        pairing,
        value_gap,
        dual_value,
        budget_gap,
        drawdown_violation,
        membership_residual: membership.worst_residual,
        membership: membership.holds,
        regions,
        tolerance: tol,
        valid,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SurfacePoint {
    pub x: f64,
    pub q: f64,
    pub u: f64,
    pub y: f64,
    pub r: f64,
    pub dual_value: f64,
}

/// Finite-difference subgradient interval at one grid point.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SubgradientInterval {
    pub y_lo: f64,
    pub y_hi: f64,
    pub r_lo: f64,
    pub r_hi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueSurface {
    pub xs: Vec<f64>,
    pub qs: Vec<f64>,
    pub lambda: f64,
    pub alpha: f64,
    /// `points[i][j]` solves `(xs[i], qs[j])`.
    pub points: Vec<Vec<SurfacePoint>>,
    pub subgradients: Vec<Vec<SubgradientInterval>>,
    /// Largest increase of a slope along a row or column (concavity defect).
    pub concavity_violation: f64,
    /// Whether every finite difference lies in `L*`: `y > 0`, `-αλy < r <= 0`.
    pub in_l_star: bool,
    /// `max |u_i - min_j [v_j + x_i y_j + q_i r_j]|`.
    pub conjugacy_gap: f64,
    /// Largest decrease of `u` along a row in `x`.
    pub monotonicity_violation: f64,
}

/// Solves the primal on a `(x, q)` grid and checks concavity, `L*`
/// membership of the difference quotients and conjugacy.
pub fn value_surface(
    tree: &TreeModel,
    z: &Deflator,
    utility: &UtilityField,
    xs: &[f64],
    qs: &[f64],
    lambda: f64,
) -> Result<ValueSurface> {
    let alpha = z.alpha(tree);
    let mut points = Vec::with_capacity(xs.len());
    for &x in xs {
        let mut row = Vec::with_capacity(qs.len());
        for &q in qs {
            let sol = solve_primal_tree(tree, z, utility, x, q, lambda)?;
            let cert = certify_duality(&sol, tree, z, 1e-8)?;
            row.push(SurfacePoint {
                x,
                q,
                u: sol.u_hat,
                y: sol.y,
                r: cert.r_dual,
                dual_value: cert.dual_value,
            });
        }
        points.push(row);
    }
    let (nx, nq) = (xs.len(), qs.len());
    let mut concavity_violation: f64 = 0.0;
    let mut monotonicity_violation: f64 = 0.0;
    let mut in_l_star = true;
    let ltol = 1e-7;
    let mut subgradients = Vec::with_capacity(nx);
    for i in 0..nx {
        let mut row = Vec::with_capacity(nq);
        for j in 0..nq {
            let p = &points[i][j];
            let dx = |a: usize, b: usize| (points[b][j].u - points[a][j].u) / (xs[b] - xs[a]);
            let dq = |a: usize, b: usize| (points[i][b].u - points[i][a].u) / (qs[b] - qs[a]);
            let fwd_x = (i + 1 < nx).then(|| dx(i, i + 1));
            let bwd_x = (i > 0).then(|| dx(i - 1, i));
            let fwd_q = (j + 1 < nq).then(|| dq(j, j + 1));
            let bwd_q = (j > 0).then(|| dq(j - 1, j));
            if let (Some(f), Some(b)) = (fwd_x, bwd_x) {
                concavity_violation = concavity_violation.max(f - b);
            }
            if let (Some(f), Some(b)) = (fwd_q, bwd_q) {
                concavity_violation = concavity_violation.max(f - b);
            }
            if let Some(f) = fwd_x {
                monotonicity_violation = monotonicity_violation.max(-f);
                in_l_star &= f > 0.0;
            }
            if let Some(f) = fwd_q {
                let y_max = p.y.max(points[i][j + 1].y);
                in_l_star &= f <= ltol && f > -alpha * lambda * y_max - ltol;
            }
            row.push(SubgradientInterval {
                y_lo: fwd_x.unwrap_or(f64::NAN),
                y_hi: bwd_x.unwrap_or(f64::NAN),
                r_lo: fwd_q.unwrap_or(f64::NAN),
                r_hi: bwd_q.unwrap_or(f64::NAN),
            });
        }
        subgradients.push(row);
    }
    let flat: Vec<&SurfacePoint> = points.iter().flatten().collect();
    let conjugacy_gap = flat
        .iter()
        .map(|pi| {
            let m = flat
                .iter()
                .map(|pj| pj.dual_value + pi.x * pj.y + pi.q * pj.r)
                .fold(f64::INFINITY, f64::min);
            (pi.u - m).abs()
        })
        .fold(0.0, f64::max);
    Ok(ValueSurface {
        xs: xs.to_vec(),
        qs: qs.to_vec(),
        lambda,
        alpha,
        points,
        subgradients,
        concavity_violation,
        in_l_star,
        conjugacy_gap,
        monotonicity_violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{random_tree, RandomTreeSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn worked(x: f64, q: f64, lambda: f64) -> (TreeModel, Deflator, PrimalSolution) {
        let (t, z) = TreeModel::worked_example();
        let s = solve_primal_tree(&t, &z, &UtilityField::log(), x, q, lambda).unwrap();
        (t, z, s)
    }

    #[test]
    fn single_cell() {
        let t = TreeModel::chain(vec![1.0], &[1.0]).unwrap();
        let z = Deflator::new(&t, vec![1.0].into()).unwrap();
        let s = solve_primal_tree(&t, &z, &UtilityField::log(), 5.0, 0.0, 1.0).unwrap();
        assert!((s.c[0] - 5.0).abs() < 1e-10);
        assert!((s.u_hat - 5f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn worked_tree_ratchet() {
        let (t, z, s) = worked(7.0, 0.0, 1.0);
        for (a, b) in s.c.iter().zip([3.0, 3.0, 7.0]) {
            assert!((a - b).abs() < 1e-8, "{:?}", s.c);
        }
        assert!((s.y - 2.0 / 7.0).abs() < 1e-8);
        assert!((s.u_hat - (3f64.ln() + 0.5 * 21f64.ln())).abs() < 1e-8);
        let cert = certify_duality(&s, &t, &z, 1e-8).unwrap();
        assert!(cert.valid, "{cert:?}");
        assert!((cert.pairing - 2.0).abs() < 1e-8);
        let r = &cert.regions;
        assert_eq!(
            r.labels,
            vec![Region::Max, Region::Min, Region::Unconstrained]
        );
        assert_eq!(r.increase, vec![true, false, true]);
        assert!(r.consistent(1e-7), "{r:?}");
    }

    #[test]
    fn worked_tree_unconstrained() {
        let (t, z, s) = worked(7.0, 0.0, 0.0);
        for (a, b) in s.c.iter().zip([3.5, 7.0 / 3.0, 7.0]) {
            assert!((a - b).abs() < 1e-8, "{:?}", s.c);
        }
        let cert = certify_duality(&s, &t, &z, 1e-8).unwrap();
        assert!(cert.valid);
        assert!(cert
            .regions
            .labels
            .iter()
            .all(|l| *l == Region::Unconstrained));
        assert!(cert
            .delta_hat
            .iter()
            .zip(&cert.y_z)
            .all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn worked_tree_with_floor() {
        let (t, z, s) = worked(10.5, 5.0, 1.0);
        for (a, b) in s.c.iter().zip([5.0, 5.0, 7.0]) {
            assert!((a - b).abs() < 1e-8, "{:?}", s.c);
        }
        let cert = certify_duality(&s, &t, &z, 1e-8).unwrap();
        assert!(cert.valid, "{cert:?}");
        assert!((cert.r_dual + 0.2).abs() < 1e-8);
        assert!(cert.regions.consistent(1e-7), "{:?}", cert.regions);
    }

    #[test]
    fn boundary_and_infeasible() {
        let (t, z) = TreeModel::worked_example();
        let u = UtilityField::log();
        assert!(matches!(
            solve_primal_tree(&t, &z, &u, 2.0 * 3.0, 3.0, 1.0),
            Err(Error::Boundary { .. })
        ));
        assert!(matches!(
            solve_primal_tree(&t, &z, &u, 5.0, 3.0, 1.0),
            Err(Error::Infeasible { .. })
        ));
        let b = boundary_plan(&PrimalProblem {
            tree: &t,
            z: &z,
            utility: &u,
            x: 6.0,
            q: 3.0,
            lambda: 1.0,
        });
        assert_eq!(b.c, vec![3.0; 3]);
    }

    #[test]
    fn random_trees_certify_and_start_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let crra = UtilityField::crra(2.5).unwrap().with_rates(0.2, 0.05);
        for trial in 0..20 {
            let (t, z) = random_tree(
                &mut rng,
                &RandomTreeSpec {
                    max_depth: 4,
                    ..Default::default()
                },
            );
            let u = if trial % 2 == 0 {
                UtilityField::log()
            } else {
                crra
            };
            for &lambda in &[0.0, 0.4, 1.0] {
                let q = if trial % 3 == 0 { 0.7 } else { 0.0 };
                let x = 2.0 + z.alpha(&t) * lambda * q;
                let p = PrimalProblem {
                    tree: &t,
                    z: &z,
                    utility: &u,
                    x,
                    q,
                    lambda,
                };
                let a = solve_primal_tree_with(&p, &SolverOptions::default()).unwrap();
                let b = solve_primal_tree_with(
                    &p,
                    &SolverOptions {
                        start_fraction: 0.1,
                        start_growth: 1.5,
                        ..Default::default()
                    },
                )
                .unwrap();
                let diff = a.plan().max_abs_diff(&b.plan());
                assert!(diff < 1e-6, "trial {trial} λ={lambda}: {diff}");
                let cert = certify_duality(&a, &t, &z, 1e-8).unwrap();
                assert!(cert.valid, "trial {trial} λ={lambda}: {cert:?}");
                assert!(cert.regions.consistent(1e-6), "trial {trial} λ={lambda}");
            }
        }
    }

    #[test]
    fn surface_on_worked_tree() {
        let (t, z) = TreeModel::worked_example();
        let xs = [5.0, 6.0, 7.0, 8.0, 9.0];
        let qs = [-1.0, 0.0, 1.0, 2.0];
        let s = value_surface(&t, &z, &UtilityField::log(), &xs, &qs, 1.0).unwrap();
        assert!((s.points[2][1].u - (3f64.ln() + 0.5 * 21f64.ln())).abs() < 1e-8);
        for row in &s.points {
            assert!((row[0].u - row[1].u).abs() < 1e-9);
        }
        assert!(s.concavity_violation <= 1e-9);
        assert!(s.monotonicity_violation <= 0.0);
        assert!(s.in_l_star);
        assert!(s.conjugacy_gap <= 1e-8, "{}", s.conjugacy_gap);
    }
}
