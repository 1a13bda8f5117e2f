//! Finite filtered probability spaces as non-recombining event trees.
//!
//! A node is a full history: the node at depth `k` covers cell `k`, so every
//! node-indexed vector is automatically optional and the value of a process
//! at a node's parent is automatically predictable. Nodes are stored parents
//! first; backward inductions simply walk the node vector in reverse.
//!
//! The chronological ordering is tested through optional projections of tail
//! clock integrals. Inside a cell those projections interpolate linearly
//! between node times, so comparing them at node times is exact.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Clock, Horizon, PanelFrame, PathPanel, TimeGrid};

/// Default tolerance for comparisons after floating-point accumulation.
pub const TREE_TOL: f64 = 1e-12;

/// One real value per node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeProcess(pub Vec<f64>);

impl NodeProcess {
    pub fn constant(tree: &TreeModel, v: f64) -> Self {
        Self(vec![v; tree.len()])
    }

    pub fn zeros(tree: &TreeModel) -> Self {
        Self::constant(tree, 0.0)
    }

    pub fn from_fn(tree: &TreeModel, f: impl FnMut(usize) -> f64) -> Self {
        Self((0..tree.len()).map(f).collect())
    }

    pub fn indicator(set: &[bool]) -> Self {
        Self(set.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self(self.0.iter().map(|v| a * v).collect())
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Deref for NodeProcess {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for NodeProcess {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

impl From<Vec<f64>> for NodeProcess {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Construction data for one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeSpec {
    pub parent: Option<usize>,
    /// Transition probability from the parent (ignored for the root).
    pub prob: f64,
    pub kappa_dot: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    parent: Option<usize>,
    depth: usize,
    prob: f64,
    path_prob: f64,
    kappa_dot: f64,
    children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeModel {
    nodes: Vec<Node>,
    durations: Vec<f64>,
    edges: Vec<f64>,
    clock_bound: f64,
}

impl TreeModel {
    /// Nodes must be listed parents first with the root at index 0; every
    /// leaf must sit at depth `durations.len() - 1`.
    pub fn new(durations: Vec<f64>, specs: &[NodeSpec], clock_bound: Option<f64>) -> Result<Self> {
        if durations.is_empty() {
            return Err(Error::InvalidInput("tree needs at least one cell".into()));
        }
        if let Some(d) = durations.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "cell durations must be positive, got {d}"
            )));
        }
        if specs.is_empty() || specs[0].parent.is_some() {
            return Err(Error::InvalidInput("node 0 must be the root".into()));
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            if !(s.kappa_dot > 0.0) || !s.kappa_dot.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "clock density must be strictly positive at node {i}, got {}",
                    s.kappa_dot
                )));
            }
            let (depth, prob, path_prob) = match s.parent {
                None if i == 0 => (0, 1.0, 1.0),
                None => return Err(Error::InvalidInput(format!("node {i} has no parent"))),
                Some(p) if p >= i => {
                    return Err(Error::InvalidInput(format!(
                        "node {i} lists parent {p}; parents must precede children"
                    )))
                }
                Some(p) => {
                    if !(s.prob > 0.0) || s.prob > 1.0 {
                        return Err(Error::InvalidInput(format!(
                            "transition probability at node {i} must lie in (0, 1], got {}",
                            s.prob
                        )));
                    }
                    (nodes[p].depth + 1, s.prob, nodes[p].path_prob * s.prob)
                }
            };
            if depth >= durations.len() {
                return Err(Error::InvalidInput(format!(
                    "node {i} at depth {depth} exceeds the {} cells",
                    durations.len()
                )));
            }
            if let Some(p) = s.parent {
                nodes[p].children.push(i);
            }
            nodes.push(Node {
                parent: s.parent,
                depth,
                prob,
                path_prob,
                kappa_dot: s.kappa_dot,
                children: Vec::new(),
            });
        }
        let last = durations.len() - 1;
        for (i, n) in nodes.iter().enumerate() {
            if n.children.is_empty() {
                if n.depth != last {
                    return Err(Error::InvalidInput(format!(
                        "leaf {i} at depth {} but the tree has {} cells",
                        n.depth,
                        durations.len()
                    )));
                }
            } else {
                let total: f64 = n.children.iter().map(|&c| nodes[c].prob).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "transition probabilities at node {i} sum to {total}"
                    )));
                }
            }
        }
        let mut edges = vec![0.0];
        for d in &durations {
            edges.push(edges.last().unwrap() + d);
        }
        let mut tree = Self {
            nodes,
            durations,
            edges,
            clock_bound: 0.0,
        };
        let max_kappa = tree
            .leaves()
            .map(|l| tree.path(l).iter().map(|&u| tree.mass(u)).sum::<f64>())
            .fold(0.0, f64::max);
        tree.clock_bound = match clock_bound {
            Some(a) if a < max_kappa * (1.0 - 1e-12) => {
                return Err(Error::InvalidInput(format!(
                    "clock total {max_kappa} exceeds declared bound A = {a}"
                )))
            }
            Some(a) => a,
            None => max_kappa,
        };
        Ok(tree)
    }

    /// One-period binary tree with unit cells and clock, `p = 1/2` and
    /// deflator `Z = (1, 1.5, 0.5)`.
    pub fn worked_example() -> (Self, Deflator) {
        let specs = [
            NodeSpec {
                parent: None,
                prob: 1.0,
                kappa_dot: 1.0,
            },
            NodeSpec {
                parent: Some(0),
                prob: 0.5,
                kappa_dot: 1.0,
            },
            NodeSpec {
                parent: Some(0),
                prob: 0.5,
                kappa_dot: 1.0,
            },
        ];
        let tree = Self::new(vec![1.0, 1.0], &specs, None).expect("static tree is valid");
        let z = Deflator::new(&tree, vec![1.0, 1.5, 0.5].into()).expect("static deflator is valid");
        (tree, z)
    }

    /// A single path of `cells` cells (no branching).
    pub fn chain(durations: Vec<f64>, kappa_dot: &[f64]) -> Result<Self> {
        if durations.len() != kappa_dot.len() {
            return Err(Error::Shape("one clock density per cell required".into()));
        }
        let specs: Vec<NodeSpec> = kappa_dot
            .iter()
            .enumerate()
            .map(|(i, &k)| NodeSpec {
                parent: i.checked_sub(1),
                prob: 1.0,
                kappa_dot: k,
            })
            .collect();
        Self::new(durations, &specs, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of cells.
    pub fn cells(&self) -> usize {
        self.durations.len()
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn clock_bound(&self) -> f64 {
        self.clock_bound
    }

    pub fn parent(&self, u: usize) -> Option<usize> {
        self.nodes[u].parent
    }

    pub fn children(&self, u: usize) -> &[usize] {
        &self.nodes[u].children
    }

    pub fn depth(&self, u: usize) -> usize {
        self.nodes[u].depth
    }

    /// One-step transition probability from the parent.
    pub fn prob(&self, u: usize) -> f64 {
        self.nodes[u].prob
    }

    /// Unconditional probability of the history `u`.
    pub fn path_prob(&self, u: usize) -> f64 {
        self.nodes[u].path_prob
    }

    pub fn kappa_dot(&self, u: usize) -> f64 {
        self.nodes[u].kappa_dot
    }

    /// Left edge of the cell covered by `u`.
    pub fn time(&self, u: usize) -> f64 {
        self.edges[self.depth(u)]
    }

    pub fn end(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    /// Clock mass `kappa_dot * dt` of the node's cell.
    pub fn mass(&self, u: usize) -> f64 {
        self.kappa_dot(u) * self.durations[self.depth(u)]
    }

    /// `P(u) * kappa_dot * dt`: the weight of `u` in `E int . d kappa`.
    pub fn weight(&self, u: usize) -> f64 {
        self.path_prob(u) * self.mass(u)
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&u| self.nodes[u].children.is_empty())
    }

    /// Root-to-`u` history.
    pub fn path(&self, u: usize) -> Vec<usize> {
        let mut p = vec![u];
        let mut v = u;
        while let Some(a) = self.parent(v) {
            p.push(a);
            v = a;
        }
        p.reverse();
        p
    }

    fn check_len(&self, p: &NodeProcess, what: &str) -> Result<()> {
        if p.len() != self.len() {
            return Err(Error::Shape(format!(
                "{what} has {} values for {} nodes",
                p.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// `E int c d dkappa`.
    pub fn pairing(&self, c: &NodeProcess, d: &NodeProcess) -> Result<f64> {
        self.check_len(c, "first operand")?;
        self.check_len(d, "second operand")?;
        Ok((0..self.len()).map(|u| self.weight(u) * c[u] * d[u]).sum())
    }

    /// `E[int_{t_u}^T f dkappa | u]` at every node, by backward induction.
    pub fn optional_projection(&self, f: &NodeProcess) -> Result<NodeProcess> {
        self.check_len(f, "integrand")?;
        let mut tail = vec![0.0; self.len()];
        for u in (0..self.len()).rev() {
            let cont: f64 = self
                .children(u)
                .iter()
                .map(|&c| self.prob(c) * tail[c])
                .sum();
            tail[u] = f[u] * self.mass(u) + cont;
        }
        Ok(NodeProcess(tail))
    }

    /// Left-continuous running supremum: the maximum over strict ancestors
    /// (0 at the root). Depends on the parent history only.
    pub fn running_esssup(&self, c: &NodeProcess) -> NodeProcess {
        let mut out = vec![0.0_f64; self.len()];
        for u in 1..self.len() {
            let p = self.parent(u).expect("non-root has a parent");
            out[u] = out[p].max(c[p]);
        }
        NodeProcess(out)
    }

    /// Running supremum including the node itself.
    pub fn running_esssup_inclusive(&self, c: &NodeProcess) -> NodeProcess {
        let bar = self.running_esssup(c);
        bar.zip_with(c, f64::max)
    }

    /// `delta_tilde ≼ delta`: tails of `delta_tilde` dominated by tails of
    /// `delta` at every node, within `tol` relative to the tail magnitude.
    pub fn chron_leq(&self, dt: &NodeProcess, d: &NodeProcess, tol: f64) -> Result<OrderingCheck> {
        let a = self.optional_projection(dt)?;
        let b = self.optional_projection(d)?;
        let mut worst = f64::NEG_INFINITY;
        let mut worst_node = 0;
        let mut holds = true;
        for u in 0..self.len() {
            let r = a[u] - b[u];
            if r > worst {
                worst = r;
                worst_node = u;
            }
            if r > tol * a[u].abs().max(b[u].abs()).max(1.0) {
                holds = false;
            }
        }
        Ok(OrderingCheck {
            holds,
            worst_residual: worst,
            worst_node,
        })
    }

    /// `delta_tilde ≼_lambda delta` via `(δ̃-δ)⁺ ≼ λ(δ-δ̃)⁺`.
    pub fn chron_leq_lambda(
        &self,
        dt: &NodeProcess,
        d: &NodeProcess,
        lambda: f64,
        tol: f64,
    ) -> Result<OrderingCheck> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidInput(format!(
                "lambda must lie in [0,1], got {lambda}"
            )));
        }
        self.check_len(dt, "delta_tilde")?;
        self.check_len(d, "delta")?;
        let pos = dt.zip_with(d, |a, b| (a - b).max(0.0));
        let neg = dt.zip_with(d, |a, b| lambda * (b - a).max(0.0));
        self.chron_leq(&pos, &neg, tol)
    }

    /// Exhaustive cross-check of `≼` over every stopping rule.
    ///
    /// A rule flags the nodes where it stops (the first flag on each path);
    /// `E int_T f dkappa` is then the weighted sum over nodes at or below a
    /// flag. Stopping at `T̂` is the rule with no flags.
    pub fn stopping_enumeration_check(&self, dt: &NodeProcess, d: &NodeProcess) -> Result<bool> {
        self.check_len(dt, "delta_tilde")?;
        self.check_len(d, "delta")?;
        if self.cells() > 4 || self.len() > 40 {
            return Err(Error::Capacity(format!(
                "stopping-rule enumeration supports depth <= 4 and <= 40 nodes (got {} cells, {} nodes)",
                self.cells(),
                self.len()
            )));
        }
        let covered_a: Vec<f64> = (0..self.len()).map(|u| self.weight(u) * dt[u]).collect();
        let covered_b: Vec<f64> = (0..self.len()).map(|u| self.weight(u) * d[u]).collect();
        let sub_a = self.subtree_sums(&covered_a);
        let sub_b = self.subtree_sums(&covered_b);
        let outcomes = self.rule_outcomes(0, &sub_a, &sub_b, 1 << 22)?;
        Ok(outcomes
            .iter()
            .all(|&(a, b)| a <= b + TREE_TOL * a.abs().max(b.abs()).max(1.0)))
    }

    fn subtree_sums(&self, x: &[f64]) -> Vec<f64> {
        let mut s = x.to_vec();
        for u in (1..self.len()).rev() {
            let p = self.parent(u).unwrap();
            s[p] += s[u];
        }
        s
    }

    /// All `(E int_T δ̃, E int_T δ)` pairs for rules restricted to the subtree of `u`.
    fn rule_outcomes(
        &self,
        u: usize,
        sa: &[f64],
        sb: &[f64],
        cap: usize,
    ) -> Result<Vec<(f64, f64)>> {
        // continue at u: combine independent choices below
        let mut acc = vec![(0.0, 0.0)];
        for &c in self.children(u) {
            let sub = self.rule_outcomes(c, sa, sb, cap)?;
            if acc.len().saturating_mul(sub.len()) > cap {
                return Err(Error::Capacity(
                    "too many stopping rules to enumerate".into(),
                ));
            }
            acc = acc
                .iter()
                .flat_map(|&(a, b)| sub.iter().map(move |&(x, y)| (a + x, b + y)))
                .collect();
        }
        acc.push((sa[u], sb[u]));
        Ok(acc)
    }

    /// Relocates the tail mass of `delta` onto the first `window` cells of
    /// `A` after its debut `tau_A`.
    ///
    /// Per path, `X` is the clock integral of `delta` after the window and
    /// `M` the clock mass of `window ∩ A`; the result is the optional
    /// projection of `X / M · 1_{window ∩ A}`.
    pub fn mass_shift_construction(
        &self,
        a: &[bool],
        d: &NodeProcess,
        window: usize,
    ) -> Result<NodeProcess> {
        if a.len() != self.len() {
            return Err(Error::Shape("set indicator does not match the tree".into()));
        }
        self.check_len(d, "delta")?;
        if window == 0 {
            return Err(Error::InvalidInput(
                "shift window must be at least one cell".into(),
            ));
        }
        let mut num = vec![0.0; self.len()];
        for leaf in self.leaves() {
            let path = self.path(leaf);
            let Some(first) = path.iter().position(|&u| a[u]) else {
                continue;
            };
            let win_end = (first + window).min(path.len());
            let x: f64 = path[win_end..].iter().map(|&u| d[u] * self.mass(u)).sum();
            let m: f64 = path[first..win_end]
                .iter()
                .filter(|&&u| a[u])
                .map(|&u| self.mass(u))
                .sum();
            if !(m > 0.0) {
                return Err(Error::Construction(format!(
                    "shift window after tau_A has zero clock mass on the path to leaf {leaf}"
                )));
            }
            let pl = self.path_prob(leaf);
            for &u in path[first..win_end].iter().filter(|&&u| a[u]) {
                num[u] += pl * x / m;
            }
        }
        let shifted = NodeProcess(
            num.iter()
                .enumerate()
                .map(|(u, v)| v / self.path_prob(u))
                .collect(),
        );
        let check = self.chron_leq(&shifted, d, 1e-10)?;
        if !check.holds {
            return Err(Error::Construction(format!(
                "shifted process is not chronologically below delta (residual {:.3e} at node {})",
                check.worst_residual, check.worst_node
            )));
        }
        Ok(shifted)
    }

    /// `E int_{tau_A + window} delta dkappa`, summed directly along paths.
    pub fn tail_after_debut(&self, a: &[bool], d: &NodeProcess, window: usize) -> f64 {
        self.leaves()
            .map(|leaf| {
                let path = self.path(leaf);
                match path.iter().position(|&u| a[u]) {
                    None => 0.0,
                    Some(first) => {
                        let start = (first + window).min(path.len());
                        self.path_prob(leaf)
                            * path[start..]
                                .iter()
                                .map(|&u| d[u] * self.mass(u))
                                .sum::<f64>()
                    }
                }
            })
            .sum()
    }

    /// Attains `sup_{δ̃ ≼_λ δ} <c, δ̃>` up to the shift window and compares with
    /// `<c ∨ λc̄, δ>`.
    ///
    /// `c` is split into level sets `A_j = {c = v_j}`; `δ` is attributed to
    /// the level maximizing `v_j (1_{A_j} ∨ λ 1_{(tau_{A_j}, T]})`. Each share
    /// keeps its mass on `A_j` and sends a fraction `λ` of its mass off `A_j`
    /// onto `A_j` right after the debut.
    pub fn important_lemma_check(
        &self,
        c: &NodeProcess,
        d: &NodeProcess,
        lambda: f64,
        window: usize,
    ) -> Result<LemmaReport> {
        self.check_len(c, "c")?;
        self.check_len(d, "delta")?;
        let bar = self.running_esssup(c);
        let target = c.zip_with(&bar, |v, b| v.max(lambda * b));
        let lhs = self.pairing(&target, d)?;

        let mut levels: Vec<f64> = c.iter().copied().filter(|&v| v > 0.0).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let sets: Vec<Vec<bool>> = levels
            .iter()
            .map(|&v| c.iter().map(|&x| x == v).collect())
            .collect();
        // strict-ancestor hit of A_j
        let after: Vec<Vec<bool>> = sets
            .iter()
            .map(|a| {
                let ind = NodeProcess::indicator(a);
                self.running_esssup(&ind).iter().map(|&x| x > 0.0).collect()
            })
            .collect();

        let mut tilde = NodeProcess::zeros(self);
        for u in 0..self.len() {
            let best = (0..levels.len())
                .map(|j| {
                    let v = if sets[j][u] {
                        levels[j]
                    } else if after[j][u] {
                        lambda * levels[j]
                    } else {
                        0.0
                    };
                    (j, v)
                })
                .filter(|&(_, v)| v > 0.0)
                .max_by(|x, y| x.1.total_cmp(&y.1));
            if let Some((j, _)) = best {
                if sets[j][u] {
                    tilde[u] += d[u];
                }
            }
        }
        for j in 0..levels.len() {
            // share of delta attributed to level j off its own set
            let mut off = NodeProcess::zeros(self);
            let mut any = false;
            for u in 0..self.len() {
                if sets[j][u] || !after[j][u] {
                    continue;
                }
                let vj = lambda * levels[j];
                let wins = vj > 0.0
                    && (0..levels.len()).all(|i| {
                        let v = if sets[i][u] {
                            levels[i]
                        } else if after[i][u] {
                            lambda * levels[i]
                        } else {
                            0.0
                        };
                        v < vj || (v == vj && i <= j)
                    });
                if wins {
                    off[u] = d[u];
                    any = true;
                }
            }
            if any {
                let shifted = self.mass_shift_construction(&sets[j], &off, window)?;
                for u in 0..self.len() {
                    tilde[u] += lambda * shifted[u];
                }
            }
        }
        let achieved = self.pairing(c, &tilde)?;
        let member = self.chron_leq_lambda(&tilde, d, lambda, 1e-10)?;
        Ok(LemmaReport {
            lhs,
            achieved,
            gap: lhs - achieved,
            member: member.holds,
            delta_tilde: tilde,
        })
    }

    /// `<c, Z> <= x` (complete tree market).
    pub fn admissibility(&self, c: &NodeProcess, z: &Deflator, x: f64) -> Result<bool> {
        let price = self.pairing(c, z.values())?;
        Ok(price <= x + 1e-12 * x.abs().max(1.0))
    }

    /// One equally timed scenario per leaf, weighted by leaf probability.
    pub fn scenario_frame(&self) -> Result<Arc<PanelFrame>> {
        let grid = TimeGrid::from_durations(&self.durations, Horizon::Finite)?;
        let leaves: Vec<usize> = self.leaves().collect();
        let rows = leaves
            .iter()
            .map(|&l| self.path(l).iter().map(|&u| self.kappa_dot(u)).collect())
            .collect();
        let clock = Clock::per_scenario(&grid, rows, self.clock_bound * (1.0 + 1e-12))?;
        let weights: Vec<f64> = leaves.iter().map(|&l| self.path_prob(l)).collect();
        let total: f64 = weights.iter().sum();
        PanelFrame::new(grid, clock, weights.iter().map(|w| w / total).collect())
    }

    /// Lays a node process out as a panel (one row per root-to-leaf path).
    pub fn to_panel(&self, frame: &Arc<PanelFrame>, f: &NodeProcess) -> Result<PathPanel> {
        self.check_len(f, "process")?;
        let rows = self
            .leaves()
            .map(|l| self.path(l).iter().map(|&u| f[u]).collect())
            .collect();
        PathPanel::new(frame.clone(), rows)
    }

    /// Reads a tree document; returns the model and its named processes.
    pub fn from_json_str(s: &str) -> Result<(Self, BTreeMap<String, NodeProcess>)> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let doc: TreeDocument =
            serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        doc.into_model()
    }

    pub fn to_document(&self, processes: &BTreeMap<String, NodeProcess>) -> TreeDocument {
        TreeDocument {
            schema: TREE_SCHEMA.to_string(),
            cell_durations: self.durations.clone(),
            clock_bound: Some(self.clock_bound),
            nodes: (0..self.len())
                .map(|u| NodeDoc {
                    id: u,
                    parent: self.parent(u),
                    prob: self.prob(u),
                    kappa_dot: self.kappa_dot(u),
                })
                .collect(),
            processes: processes
                .iter()
                .map(|(k, v)| (k.clone(), v.0.clone()))
                .collect(),
        }
    }
}

/// Outcome of an ordering test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderingCheck {
    pub holds: bool,
    /// Largest `tail(δ̃) - tail(δ)` over nodes.
    pub worst_residual: f64,
    pub worst_node: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    /// `<c ∨ λc̄, δ>`.
    pub lhs: f64,
    /// `<c, δ̃>` for the constructed `δ̃`.
    pub achieved: f64,
    pub gap: f64,
    /// Whether `δ̃ ≼_λ δ` was confirmed.
    pub member: bool,
    pub delta_tilde: NodeProcess,
}

/// Positive martingale with `Z_root = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Deflator(NodeProcess);

impl Deflator {
    pub fn new(tree: &TreeModel, z: NodeProcess) -> Result<Self> {
        tree.check_len(&z, "deflator")?;
        if (z[0] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "deflator must start at 1, got {}",
                z[0]
            )));
        }
        for u in 0..tree.len() {
            if !(z[u] > 0.0) || !z[u].is_finite() {
                return Err(Error::InvalidInput(format!(
                    "deflator must be positive, node {u}: {}",
                    z[u]
                )));
            }
            let ch = tree.children(u);
            if !ch.is_empty() {
                let m: f64 = ch.iter().map(|&c| tree.prob(c) * z[c]).sum();
                if (m - z[u]).abs() > 1e-12 * z[u].max(1.0) {
                    return Err(Error::InvalidInput(format!(
                        "deflator is not a martingale at node {u}: E[Z'] = {m}, Z = {}",
                        z[u]
                    )));
                }
            }
        }
        Ok(Self(z))
    }

    pub fn values(&self) -> &NodeProcess {
        &self.0
    }

    /// `alpha = E int Z dkappa`.
    pub fn alpha(&self, tree: &TreeModel) -> f64 {
        (0..tree.len()).map(|u| tree.weight(u) * self.0[u]).sum()
    }
}

pub const TREE_SCHEMA: &str = "drawdown-lab/tree@1";

/// Serialized tree: nodes parents first, ids equal to positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDocument {
    pub schema: String,
    pub cell_durations: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock_bound: Option<f64>,
    pub nodes: Vec<NodeDoc>,
    #[serde(default)]
    pub processes: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: usize,
    pub parent: Option<usize>,
    pub prob: f64,
    pub kappa_dot: f64,
}

impl TreeDocument {
    pub fn into_model(self) -> Result<(TreeModel, BTreeMap<String, NodeProcess>)> {
        if self.schema != TREE_SCHEMA {
            return Err(Error::Config {
                path: "schema".into(),
                message: format!("expected `{TREE_SCHEMA}`, found `{}`", self.schema),
            });
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Config {
                    path: format!("nodes[{i}].id"),
                    message: format!("node ids must equal their position, found {}", n.id),
                });
            }
        }
        let specs: Vec<NodeSpec> = self
            .nodes
            .iter()
            .map(|n| NodeSpec {
                parent: n.parent,
                prob: n.prob,
                kappa_dot: n.kappa_dot,
            })
            .collect();
        let tree = TreeModel::new(self.cell_durations, &specs, self.clock_bound)?;
        let mut processes = BTreeMap::new();
        for (name, v) in self.processes {
            if v.len() != tree.len() {
                return Err(Error::Config {
                    path: format!("processes.{name}"),
                    message: format!("{} values for {} nodes", v.len(), tree.len()),
                });
            }
            processes.insert(name, NodeProcess(v));
        }
        Ok((tree, processes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{random_process, random_tree, RandomTreeSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> TreeModel {
        TreeModel::chain(vec![1.0; n], &vec![1.0; n]).unwrap()
    }

    #[test]
    fn projection_on_a_chain() {
        let t = line(2);
        let p = t
            .optional_projection(&NodeProcess::constant(&t, 1.0))
            .unwrap();
        assert_eq!(p.0, vec![2.0, 1.0]);
        let z = t.optional_projection(&NodeProcess::zeros(&t)).unwrap();
        assert_eq!(z.0, vec![0.0, 0.0]);
    }

    #[test]
    fn projection_on_the_worked_tree() {
        let (t, z) = TreeModel::worked_example();
        let yz = z.values().scaled(2.0 / 7.0);
        let p = t.optional_projection(&yz).unwrap();
        assert!((p[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((p[1] - 3.0 / 7.0).abs() < 1e-15);
        assert!((p[2] - 1.0 / 7.0).abs() < 1e-15);
        assert!((z.alpha(&t) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn earlier_mass_is_chronologically_smaller() {
        let t = line(2);
        let late = NodeProcess(vec![0.0, 1.0]);
        let early = NodeProcess(vec![1.0, 0.0]);
        assert!(t.chron_leq(&early, &late, TREE_TOL).unwrap().holds);
        let rev = t.chron_leq(&late, &early, TREE_TOL).unwrap();
        assert!(!rev.holds);
        assert_eq!(rev.worst_node, 1);
        let small = NodeProcess(vec![0.0, 0.5]);
        assert!(t.chron_leq(&small, &late, TREE_TOL).unwrap().holds);
    }

    #[test]
    fn lambda_ordering_extremes() {
        let (t, z) = TreeModel::worked_example();
        let d = z.values().clone();
        for &l in &[0.0, 0.3, 1.0] {
            assert!(t.chron_leq_lambda(&d, &d, l, TREE_TOL).unwrap().holds);
        }
        let mut bump = d.clone();
        bump[2] += 0.1;
        bump[0] -= 5.0_f64.min(bump[0]);
        assert!(!t.chron_leq_lambda(&bump, &d, 0.0, TREE_TOL).unwrap().holds);
    }

    #[test]
    fn strict_inclusion_witness() {
        // δ = Z 1_{[0,T]} + δ² with T the first cell and δ² the λ₂-scaled
        // projected tail mass of Z after T, placed on [0,T].
        let (t, z) = TreeModel::worked_example();
        let l2 = 0.6;
        let tails = t.optional_projection(z.values()).unwrap();
        let after: f64 = t.children(0).iter().map(|&c| t.prob(c) * tails[c]).sum();
        let mut d = NodeProcess::zeros(&t);
        d[0] = z.values()[0] + l2 * after / t.mass(0);
        assert!(
            t.chron_leq_lambda(&d, z.values(), l2, TREE_TOL)
                .unwrap()
                .holds
        );
        assert!(
            !t.chron_leq_lambda(&d, z.values(), 0.4, TREE_TOL)
                .unwrap()
                .holds
        );
    }

    #[test]
    fn enumeration_trivial_cases_and_capacity() {
        let (t, z) = TreeModel::worked_example();
        assert!(t
            .stopping_enumeration_check(&NodeProcess::zeros(&t), z.values())
            .unwrap());
        assert!(t
            .stopping_enumeration_check(z.values(), z.values())
            .unwrap());
        let deep = line(6);
        let one = NodeProcess::constant(&deep, 1.0);
        assert!(matches!(
            deep.stopping_enumeration_check(&one, &one),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn enumeration_agrees_with_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (t, _) = random_tree(
                &mut rng,
                &RandomTreeSpec {
                    max_depth: 2,
                    ..Default::default()
                },
            );
            let d = random_process(&mut rng, &t, 0.0, 2.0);
            let dt = random_process(&mut rng, &t, 0.0, 2.0);
            let a = t.chron_leq(&dt, &d, TREE_TOL).unwrap().holds;
            let b = t.stopping_enumeration_check(&dt, &d).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ordering_is_transitive_on_shifted_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (t, _) = random_tree(
                &mut rng,
                &RandomTreeSpec {
                    max_depth: 3,
                    ..Default::default()
                },
            );
            let d = random_process(&mut rng, &t, 0.0, 2.0);
            let a: Vec<bool> = (0..t.len()).map(|_| rng.random_bool(0.5)).collect();
            let s1 = t.mass_shift_construction(&a, &d, 1).unwrap();
            let s2 = t.mass_shift_construction(&a, &s1, 1).unwrap();
            assert!(t.chron_leq(&s2, &d, 1e-10).unwrap().holds);
        }
    }

    #[test]
    fn monotone_functional_property() {
        // δ̃ ≼ δ iff <1_{(s,T]}, δ̃> <= <1_{(s,T]}, δ> for the ramps starting at
        // every node (those ramps generate C_inc on the tree).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (t, _) = random_tree(
                &mut rng,
                &RandomTreeSpec {
                    max_depth: 3,
                    ..Default::default()
                },
            );
            let d = random_process(&mut rng, &t, 0.0, 2.0);
            let dt = random_process(&mut rng, &t, 0.0, 2.0);
            let by_ramps = (0..t.len()).all(|u| {
                let below: Vec<bool> = (0..t.len()).map(|v| t.path(v).contains(&u)).collect();
                let ramp = NodeProcess::indicator(&below);
                t.pairing(&ramp, &dt).unwrap() <= t.pairing(&ramp, &d).unwrap() + 1e-12
            });
            assert_eq!(by_ramps, t.chron_leq(&dt, &d, TREE_TOL).unwrap().holds);
        }
    }

    #[test]
    fn mass_shift_examples() {
        let (t, z) = TreeModel::worked_example();
        let d = z.values().clone();
        let all = vec![true; 3];
        let s = t.mass_shift_construction(&all, &d, 1).unwrap();
        assert!((t.pairing(&NodeProcess::indicator(&all), &s).unwrap() - 1.0).abs() < 1e-15);
        let none = vec![false; 3];
        assert_eq!(
            t.mass_shift_construction(&none, &d, 1).unwrap().0,
            vec![0.0; 3]
        );
    }

    #[test]
    fn mass_shift_pairing_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (t, _) = random_tree(
                &mut rng,
                &RandomTreeSpec {
                    max_depth: 3,
                    ..Default::default()
                },
            );
            let d = random_process(&mut rng, &t, 0.0, 2.0);
            let a: Vec<bool> = (0..t.len()).map(|_| rng.random_bool(0.4)).collect();
            let ind = NodeProcess::indicator(&a);
            let bar = t.running_esssup(&ind);
            let limit = t.pairing(&bar, &d).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for w in (1..=t.cells()).rev() {
                let s = t.mass_shift_construction(&a, &d, w).unwrap();
                let p = t.pairing(&ind, &s).unwrap();
                assert!((p - t.tail_after_debut(&a, &d, w)).abs() < 1e-12);
                assert!(p >= prev - 1e-12);
                prev = p;
            }
            assert!((prev - limit).abs() < 1e-12);
        }
    }

    #[test]
    fn lemma_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t, _) = random_tree(
            &mut rng,
            &RandomTreeSpec {
                max_depth: 3,
                ..Default::default()
            },
        );
        let d = random_process(&mut rng, &t, 0.0, 2.0);
        let c = random_process(&mut rng, &t, 0.0, 3.0);
        let r = t.important_lemma_check(&c, &d, 0.0, 1).unwrap();
        assert_eq!(r.gap, 0.0);
        // increasing c, λ = 1: c ∨ c̄ = c
        let inc = t.running_esssup_inclusive(&c);
        let r = t.important_lemma_check(&inc, &d, 1.0, 1).unwrap();
        assert!(r.gap.abs() < 1e-12 && r.member);
    }

    #[test]
    fn admissibility_examples() {
        let (t, z) = TreeModel::worked_example();
        let x = 7.0;
        let alpha = z.alpha(&t);
        assert!(t
            .admissibility(&NodeProcess::constant(&t, x / alpha), &z, x)
            .unwrap());
        assert!(!t
            .admissibility(&NodeProcess::constant(&t, 2.0 * x / alpha), &z, x)
            .unwrap());
        assert!(t
            .admissibility(&NodeProcess(vec![3.0, 3.0, 7.0]), &z, x)
            .unwrap());
        assert_eq!(
            t.pairing(&NodeProcess(vec![3.0, 3.0, 7.0]), z.values())
                .unwrap(),
            7.0
        );
    }

    #[test]
    fn deflator_rejects_non_martingale() {
        let (t, _) = TreeModel::worked_example();
        assert!(Deflator::new(&t, vec![1.0, 1.5, 0.6].into()).is_err());
    }

    #[test]
    fn running_esssup_is_predictable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, _) = random_tree(&mut rng, &RandomTreeSpec::default());
        let c = random_process(&mut rng, &t, 0.0, 1.0);
        let bar = t.running_esssup(&c);
        // siblings share their running esssup
        for u in 0..t.len() {
            let ch = t.children(u);
            assert!(ch.iter().all(|&v| bar[v] == bar[ch[0]]));
        }
    }

    #[test]
    fn json_round_trip() {
        let (t, z) = TreeModel::worked_example();
        let mut procs = BTreeMap::new();
        procs.insert("Z".to_string(), z.values().clone());
        let doc = t.to_document(&procs);
        let s = serde_json::to_string(&doc).unwrap();
        let (t2, p2) = TreeModel::from_json_str(&s).unwrap();
        assert_eq!(t, t2);
        assert_eq!(p2["Z"], *z.values());
        let bad = s.replace("\"kappa_dot\":1.0", "\"kappa_dot\":\"x\"");
        match TreeModel::from_json_str(&bad) {
            Err(Error::Config { path, .. }) => assert!(path.contains("nodes")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
