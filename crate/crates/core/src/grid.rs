//! Time grids, stochastic clocks and sampled path panels.
//!
//! Every process in this module is piecewise constant on right-open cells
//! `[t_k, t_{k+1})`, so all clock integrals reduce to exact finite sums.
//! A panel is a `scenarios x cells` matrix sharing one [`PanelFrame`]
//! (grid, clock and scenario weights).

use std::sync::Arc;

use crate::error::{Error, Result};

/// Whether the model horizon is the last grid edge or an infinite horizon
/// truncated there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Horizon {
    Finite,
    TruncatedInfinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    edges: Vec<f64>,
    horizon: Horizon,
}

impl TimeGrid {
    /// `edges` must start at 0 and be strictly increasing.
    pub fn new(edges: Vec<f64>, horizon: Horizon) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidInput("a grid needs at least one cell".into()));
        }
        if edges[0] != 0.0 {
            return Err(Error::InvalidInput(format!(
                "grid must start at 0, got {}",
                edges[0]
            )));
        }
        for w in edges.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::InvalidInput(format!(
                    "grid edges must be finite and strictly increasing ({} -> {})",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { edges, horizon })
    }

    pub fn uniform(cells: usize, dt: f64, horizon: Horizon) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!(
                "cell width must be positive, got {dt}"
            )));
        }
        Self::new((0..=cells).map(|k| k as f64 * dt).collect(), horizon)
    }

    pub fn from_durations(durations: &[f64], horizon: Horizon) -> Result<Self> {
        let mut edges = Vec::with_capacity(durations.len() + 1);
        edges.push(0.0);
        let mut t = 0.0;
        for &d in durations {
            t += d;
            edges.push(t);
        }
        Self::new(edges, horizon)
    }

    pub fn cells(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn left(&self, k: usize) -> f64 {
        self.edges[k]
    }

    pub fn duration(&self, k: usize) -> f64 {
        self.edges[k + 1] - self.edges[k]
    }

    /// Last edge `T_trunc`.
    pub fn end(&self) -> f64 {
        *self.edges.last().expect("non-empty grid")
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    /// Index of the cell containing `t`, or `None` outside `[0, T_trunc)`.
    pub fn cell_of(&self, t: f64) -> Option<usize> {
        if !(t >= 0.0) || t >= self.end() {
            return None;
        }
        // partition_point gives the first edge > t.
        Some(self.edges.partition_point(|&e| e <= t) - 1)
    }
}

/// Clock density per cell, either shared by all scenarios or per scenario.
#[derive(Debug, Clone, PartialEq)]
enum Density {
    Deterministic(Vec<f64>),
    PerScenario { scenarios: usize, values: Vec<f64> },
}

/// Absolutely continuous stochastic clock `kappa_t = int_0^t kappa_dot ds`,
/// stored as a cell-average density.
#[derive(Debug, Clone, PartialEq)]
pub struct Clock {
    density: Density,
    cells: usize,
    bound: f64,
}

impl Clock {
    /// Deterministic density per cell with declared bound `A >= kappa(T_trunc)`.
    pub fn deterministic(grid: &TimeGrid, density: Vec<f64>, bound: f64) -> Result<Self> {
        if density.len() != grid.cells() {
            return Err(Error::Shape(format!(
                "clock density has {} cells, grid has {}",
                density.len(),
                grid.cells()
            )));
        }
        let clock = Self {
            density: Density::Deterministic(density),
            cells: grid.cells(),
            bound,
        };
        clock.validate(grid)?;
        Ok(clock)
    }

    /// Scenario-dependent density, `rows[s][k]`.
    pub fn per_scenario(grid: &TimeGrid, rows: Vec<Vec<f64>>, bound: f64) -> Result<Self> {
        let scenarios = rows.len();
        let mut values = Vec::with_capacity(scenarios * grid.cells());
        for row in rows {
            if row.len() != grid.cells() {
                return Err(Error::Shape(format!(
                    "clock row has {} cells, grid has {}",
                    row.len(),
                    grid.cells()
                )));
            }
            values.extend(row);
        }
        let clock = Self {
            density: Density::PerScenario { scenarios, values },
            cells: grid.cells(),
            bound,
        };
        clock.validate(grid)?;
        Ok(clock)
    }

    /// `kappa(t) = t`; bound `A = T_trunc`.
    pub fn lebesgue(grid: &TimeGrid) -> Self {
        Self {
            density: Density::Deterministic(vec![1.0; grid.cells()]),
            cells: grid.cells(),
            bound: grid.end(),
        }
    }

    /// `kappa(t) = (1 - e^{-nu t}) / nu`, bound `A = 1/nu`. Cell densities are
    /// the exact cell averages so cell masses match the continuous clock.
    pub fn exponential(grid: &TimeGrid, nu: f64) -> Result<Self> {
        if !(nu > 0.0) {
            return Err(Error::InvalidInput(format!(
                "exponential clock rate must be positive, got {nu}"
            )));
        }
        let density = (0..grid.cells())
            .map(|k| exp_cell_mass(nu, grid.left(k), grid.duration(k)) / grid.duration(k))
            .collect();
        Self::deterministic(grid, density, 1.0 / nu)
    }

    fn validate(&self, grid: &TimeGrid) -> Result<()> {
        let n = grid.cells();
        for s in 0..self.scenario_rows() {
            let mut kappa = 0.0;
            for k in 0..n {
                let d = self.density(s, k);
                if !(d > 0.0) || !d.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "clock density must be strictly positive and finite (scenario {s}, cell {k}: {d})"
                    )));
                }
                kappa += d * grid.duration(k);
            }
            if kappa > self.bound * (1.0 + 1e-12) {
                return Err(Error::InvalidInput(format!(
                    "clock total {kappa} exceeds declared bound A = {}",
                    self.bound
                )));
            }
        }
        Ok(())
    }

    fn scenario_rows(&self) -> usize {
        match &self.density {
            Density::Deterministic(_) => 1,
            Density::PerScenario { scenarios, .. } => *scenarios,
        }
    }

    /// Number of scenarios the clock is pinned to, if scenario dependent.
    pub fn scenarios(&self) -> Option<usize> {
        match &self.density {
            Density::Deterministic(_) => None,
            Density::PerScenario { scenarios, .. } => Some(*scenarios),
        }
    }

    pub fn density(&self, scenario: usize, cell: usize) -> f64 {
        match &self.density {
            Density::Deterministic(d) => d[cell],
            Density::PerScenario { values, .. } => values[scenario * self.cells + cell],
        }
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// `kappa(T_trunc)` on a scenario.
    pub fn total(&self, grid: &TimeGrid, scenario: usize) -> f64 {
        (0..grid.cells())
            .map(|k| self.density(scenario, k) * grid.duration(k))
            .sum()
    }

    /// Clock mass not covered by the grid, `A - kappa(T_trunc)`, maximized
    /// over scenarios. This is the error bar for truncated infinite horizons.
    pub fn tail_mass(&self, grid: &TimeGrid) -> f64 {
        (0..self.scenario_rows())
            .map(|s| self.bound - self.total(grid, s))
            .fold(0.0, f64::max)
    }
}

/// `int_t^{t+h} e^{-nu s} ds`, computed without cancellation.
pub fn exp_cell_mass(nu: f64, t: f64, h: f64) -> f64 {
    (-nu * t).exp() * (-(-nu * h).exp_m1()) / nu
}

/// Grid, clock and scenario weights shared by every panel of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelFrame {
    grid: TimeGrid,
    clock: Clock,
    weights: Vec<f64>,
}

impl PanelFrame {
    pub fn new(grid: TimeGrid, clock: Clock, weights: Vec<f64>) -> Result<Arc<Self>> {
        if weights.is_empty() {
            return Err(Error::InvalidInput(
                "a panel needs at least one scenario".into(),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput(
                "scenario weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "scenario weights sum to {total}, not 1"
            )));
        }
        if let Some(s) = clock.scenarios() {
            if s != weights.len() {
                return Err(Error::Shape(format!(
                    "clock has {s} scenario rows, frame has {} scenarios",
                    weights.len()
                )));
            }
        }
        if clock.cells != grid.cells() {
            return Err(Error::Shape("clock and grid cell counts differ".into()));
        }
        Ok(Arc::new(Self {
            grid,
            clock,
            weights,
        }))
    }

    /// Equally weighted scenarios.
    pub fn equally_weighted(grid: TimeGrid, clock: Clock, scenarios: usize) -> Result<Arc<Self>> {
        let w = 1.0 / scenarios as f64;
        let mut weights = vec![w; scenarios];
        // make the sum exactly representable as 1 within the 1e-12 check
        let drift: f64 = 1.0 - weights.iter().sum::<f64>();
        weights[0] += drift;
        Self::new(grid, clock, weights)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scenarios(&self) -> usize {
        self.weights.len()
    }

    pub fn cells(&self) -> usize {
        self.grid.cells()
    }

    /// `kappa_dot * dt` on one cell of one scenario.
    pub fn clock_mass(&self, scenario: usize, cell: usize) -> f64 {
        self.clock.density(scenario, cell) * self.grid.duration(cell)
    }
}

/// Non-negative piecewise-constant process sampled on a [`PanelFrame`].
#[derive(Debug, Clone)]
pub struct PathPanel {
    frame: Arc<PanelFrame>,
    values: Vec<f64>,
}

impl PathPanel {
    pub fn new(frame: Arc<PanelFrame>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != frame.scenarios() {
            return Err(Error::Shape(format!(
                "{} rows for {} scenarios",
                rows.len(),
                frame.scenarios()
            )));
        }
        let n = frame.cells();
        let mut values = Vec::with_capacity(rows.len() * n);
        for (s, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!(
                    "row {s} has {} cells, grid has {n}",
                    row.len()
                )));
            }
            values.extend(row);
        }
        Self::from_flat(frame, values)
    }

    pub fn from_flat(frame: Arc<PanelFrame>, values: Vec<f64>) -> Result<Self> {
        if values.len() != frame.scenarios() * frame.cells() {
            return Err(Error::Shape(
                "flat panel length does not match frame".into(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "panel values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self { frame, values })
    }

    pub fn from_fn(frame: Arc<PanelFrame>, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let n = frame.cells();
        let values = (0..frame.scenarios() * n)
            .map(|i| f(i / n, i % n))
            .collect();
        Self::from_flat(frame, values)
    }

    /// Same value everywhere.
    pub fn constant(frame: Arc<PanelFrame>, value: f64) -> Result<Self> {
        let len = frame.scenarios() * frame.cells();
        Self::from_flat(frame, vec![value; len])
    }

    pub fn frame(&self) -> &Arc<PanelFrame> {
        &self.frame
    }

    pub fn scenarios(&self) -> usize {
        self.frame.scenarios()
    }

    pub fn cells(&self) -> usize {
        self.frame.cells()
    }

    pub fn get(&self, scenario: usize, cell: usize) -> f64 {
        self.values[scenario * self.cells() + cell]
    }

    pub fn row(&self, scenario: usize) -> &[f64] {
        let n = self.cells();
        &self.values[scenario * n..(scenario + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.cells())
    }

    /// Replace values while keeping the frame.
    pub fn with_values(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Result<Self> {
        Self::from_fn(self.frame.clone(), |s, k| f(s, k, self.get(s, k)))
    }

    pub fn same_frame(&self, other: &PathPanel) -> bool {
        Arc::ptr_eq(&self.frame, &other.frame) || self.frame == other.frame
    }

    fn require_same_frame(&self, other: &PathPanel) -> Result<()> {
        if self.same_frame(other) {
            Ok(())
        } else {
            Err(Error::Shape(
                "panels do not share grid, clock and scenarios".into(),
            ))
        }
    }
}

/// Left-continuous non-decreasing path starting at 0.
///
/// A knot `(t, level)` means the path equals `level` on `(t, next knot]`; the
/// induced measure `dc` puts mass `level - previous level` at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncreasingPath {
    knots: Vec<(f64, f64)>,
}

impl IncreasingPath {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        let mut prev_t = f64::NEG_INFINITY;
        let mut prev_level = 0.0;
        for &(t, level) in &knots {
            if !(t >= 0.0) || !t.is_finite() || t <= prev_t {
                return Err(Error::InvalidInput(format!(
                    "knot times must be finite, non-negative and strictly increasing (got {t})"
                )));
            }
            if !(level >= prev_level) || !level.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "knot levels must be finite and non-decreasing from 0 (got {level} after {prev_level})"
                )));
            }
            prev_t = t;
            prev_level = level;
        }
        Ok(Self { knots })
    }

    pub fn zero() -> Self {
        Self { knots: Vec::new() }
    }

    /// A single jump of `size` at `t`.
    pub fn jump(t: f64, size: f64) -> Result<Self> {
        Self::new(vec![(t, size)])
    }

    /// Builds the path whose value on the interior of cell `k` is `cell_values[k]`;
    /// jumps sit on the left cell edges.
    pub fn from_cells(grid: &TimeGrid, cell_values: &[f64]) -> Result<Self> {
        if cell_values.len() != grid.cells() {
            return Err(Error::Shape("cell values do not match grid".into()));
        }
        let mut knots = Vec::new();
        let mut level = 0.0;
        for (k, &v) in cell_values.iter().enumerate() {
            if v > level {
                knots.push((grid.left(k), v));
                level = v;
            } else if v < level {
                return Err(Error::InvalidInput(format!(
                    "cell values decrease at cell {k} ({level} -> {v})"
                )));
            }
        }
        Self::new(knots)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// Left-continuous value `c_t`.
    pub fn value(&self, t: f64) -> f64 {
        let i = self.knots.partition_point(|&(tk, _)| tk < t);
        if i == 0 {
            0.0
        } else {
            self.knots[i - 1].1
        }
    }

    /// Right limit `c_{t+}`.
    pub fn value_after(&self, t: f64) -> f64 {
        let i = self.knots.partition_point(|&(tk, _)| tk <= t);
        if i == 0 {
            0.0
        } else {
            self.knots[i - 1].1
        }
    }

    /// Jump times and masses of `dc`.
    pub fn increments(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let mut prev = 0.0;
        self.knots.iter().map(move |&(t, level)| {
            let d = level - prev;
            prev = level;
            (t, d)
        })
    }

    /// Value on each cell interior. Requires every knot to sit on a grid edge.
    pub fn cell_values(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        for &(t, _) in &self.knots {
            if t < grid.end() && !grid.edges().contains(&t) {
                return Err(Error::Shape(format!("knot at {t} is not on a grid edge")));
            }
        }
        Ok((0..grid.cells())
            .map(|k| self.value_after(grid.left(k)))
            .collect())
    }
}

/// `<c, delta> = E int c delta d kappa`.
pub fn pairing(c: &PathPanel, delta: &PathPanel) -> Result<f64> {
    c.require_same_frame(delta)?;
    let frame = c.frame();
    let mut total = 0.0;
    for (s, &w) in frame.weights().iter().enumerate() {
        let row: f64 = (0..frame.cells())
            .map(|k| c.get(s, k) * delta.get(s, k) * frame.clock_mass(s, k))
            .sum();
        total += w * row;
    }
    Ok(total)
}

/// `E int D_t dc_t` with one increasing path per scenario.
pub fn stieltjes_pair(d: &PathPanel, c: &[IncreasingPath]) -> Result<f64> {
    if c.len() != d.scenarios() {
        return Err(Error::Shape(format!(
            "{} increasing paths for {} scenarios",
            c.len(),
            d.scenarios()
        )));
    }
    let grid = d.frame().grid();
    let mut total = 0.0;
    for (s, (path, &w)) in c.iter().zip(d.frame().weights()).enumerate() {
        let row: f64 = path
            .increments()
            .filter_map(|(t, mass)| grid.cell_of(t).map(|k| d.get(s, k) * mass))
            .sum();
        total += w * row;
    }
    Ok(total)
}

/// Both sides of the integration-by-parts identity
/// `E int f c dt = E int (int_s f dt) dc_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbpResidual {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Evaluates both sides of the integration-by-parts identity on independent
/// routes: the left side integrates over the merged breakpoints of `f` and
/// `c`, the right side sums knot masses against tail integrals of `f`.
pub fn ibp_check(f: &PathPanel, c: &[IncreasingPath]) -> Result<IbpResidual> {
    if c.len() != f.scenarios() {
        return Err(Error::Shape(
            "one increasing path per scenario required".into(),
        ));
    }
    let grid = f.frame().grid();
    let end = grid.end();
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for (s, (path, &w)) in c.iter().zip(f.frame().weights()).enumerate() {
        // LHS: walk the merged breakpoints.
        let mut points: Vec<f64> = grid.edges().to_vec();
        points.extend(path.knots().iter().map(|&(t, _)| t).filter(|&t| t < end));
        points.sort_by(f64::total_cmp);
        points.dedup();
        let mut row = 0.0;
        for seg in points.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let k = grid.cell_of(a).expect("segment starts inside grid");
            row += f.get(s, k) * path.value_after(a) * (b - a);
        }
        lhs += w * row;

        // RHS: tail integrals of f from each knot.
        let mut tail = vec![0.0; grid.cells() + 1];
        for k in (0..grid.cells()).rev() {
            tail[k] = tail[k + 1] + f.get(s, k) * grid.duration(k);
        }
        let tail_from = |t: f64| -> f64 {
            match grid.cell_of(t) {
                None => 0.0,
                Some(k) => f.get(s, k) * (grid.left(k + 1) - t) + tail[k + 1],
            }
        };
        let row: f64 = path.increments().map(|(t, mass)| mass * tail_from(t)).sum();
        rhs += w * row;
    }
    Ok(IbpResidual {
        lhs,
        rhs,
        residual: (lhs - rhs).abs(),
    })
}

/// `alpha = E int Z d kappa` for a single deflator.
pub fn alpha_bound(z: &PathPanel) -> f64 {
    let frame = z.frame();
    frame
        .weights()
        .iter()
        .enumerate()
        .map(|(s, &w)| {
            w * (0..frame.cells())
                .map(|k| z.get(s, k) * frame.clock_mass(s, k))
                .sum::<f64>()
        })
        .sum()
}
