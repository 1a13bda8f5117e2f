//! Complete-market plans: simulated Lévy pricing kernels, the closed-form
//! ratchet plan `ĉ_t = i(inf_{s<t} K Z_s e^{(δ-r)s})` for exponential
//! discounting, the three-regime drawdown formula on panels, and the lift of
//! unfloored optimizers to a floor `q > 0`.
//!
//! Kernel paths are simulated one at a time from per-path counter streams
//! (`seed`, stream = path index), so results do not depend on the thread
//! count and the panel never has to be held in memory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esssup::running_esssup_inclusive;
use crate::grid::{exp_cell_mass, Clock, Horizon, PanelFrame, PathPanel, TimeGrid};
use crate::primal::{check_cone, solve_primal_tree, Region};
use crate::tree::{Deflator, NodeProcess, TreeModel};
use crate::utility::UtilityField;

/// Arguments of `i` are clamped to this range; clamps are counted.
pub const CLAMP: (f64, f64) = (1e-300, 1e300);
/// Truncated tail `e^{-δT}/δ` relative to `I`.
pub const TRUNCATION_FRACTION: f64 = 1e-4;
const PILOT_PATHS: usize = 1000;

/// Law of a single log-jump of the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case", deny_unknown_fields)]
pub enum JumpLaw {
    /// `Y = -E` with `E` exponential of the given mean (downward jumps).
    NegExponential {
        mean: f64,
    },
    Normal {
        mean: f64,
        std: f64,
    },
}

impl JumpLaw {
    /// `E[e^Y]`.
    pub fn exp_moment(&self) -> f64 {
        match *self {
            JumpLaw::NegExponential { mean } => 1.0 / (1.0 + mean),
            JumpLaw::Normal { mean, std } => (mean + 0.5 * std * std).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelKind {
    /// `log Z = -θB - θ²t/2`.
    Brownian { theta: f64 },
    /// Brownian part plus compensated compound-Poisson log-jumps.
    Levy {
        #[serde(default)]
        theta: f64,
        intensity: f64,
        jump: JumpLaw,
    },
}

fn default_dt() -> f64 {
    1.0 / 252.0
}

/// Pricing kernel with exponential clock `e^{-rt}` and preference rate `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(flatten)]
    pub kind: KernelKind,
    pub rate: f64,
    pub delta_pref: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Truncation horizon; chosen by the truncation policy when absent.
    #[serde(default)]
    pub t_max: Option<f64>,
}

impl KernelSpec {
    pub fn gbm(theta: f64, rate: f64, delta_pref: f64) -> Self {
        Self {
            kind: KernelKind::Brownian { theta },
            rate,
            delta_pref,
            seed: 0,
            dt: default_dt(),
            t_max: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("time step must be positive, got {}", self.dt));
        }
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return bad(format!(
                "interest rate must be positive for the exponential clock, got {}",
                self.rate
            ));
        }
        if !self.delta_pref.is_finite() {
            return bad("preference rate must be finite".into());
        }
        if let Some(t) = self.t_max {
            if !(t > 0.0) || !t.is_finite() {
                return bad(format!(
                    "truncation horizon must be positive and finite, got {t}"
                ));
            }
        }
        let theta = match self.kind {
            KernelKind::Brownian { theta } => theta,
            KernelKind::Levy {
                theta,
                intensity,
                jump,
            } => {
                if !(intensity >= 0.0) || !intensity.is_finite() {
                    return bad(format!(
                        "jump intensity must be non-negative, got {intensity}"
                    ));
                }
                match jump {
                    JumpLaw::NegExponential { mean } if !(mean > 0.0) || !mean.is_finite() => {
                        return bad(format!(
                            "exponential jump mean must be positive, got {mean}"
                        ))
                    }
                    JumpLaw::Normal { mean, std }
                        if !mean.is_finite() || !(std >= 0.0) || !std.is_finite() =>
                    {
                        return bad("normal jump needs finite mean and std >= 0".into())
                    }
                    _ => {}
                }
                theta
            }
        };
        if !theta.is_finite() {
            return bad("market price of risk must be finite".into());
        }
        Ok(())
    }

    fn theta(&self) -> f64 {
        match self.kind {
            KernelKind::Brownian { theta } | KernelKind::Levy { theta, .. } => theta,
        }
    }

    /// No randomness at all: `Z ≡ 1`.
    pub fn is_deterministic(&self) -> bool {
        let jumps = matches!(self.kind, KernelKind::Levy { intensity, .. } if intensity > 0.0);
        self.theta() == 0.0 && !jumps
    }

    /// Per-step drift of `log Z` making `Z` a martingale.
    fn log_drift(&self) -> f64 {
        let theta = self.theta();
        let comp = match self.kind {
            KernelKind::Levy {
                intensity, jump, ..
            } => intensity * (jump.exp_moment() - 1.0),
            KernelKind::Brownian { .. } => 0.0,
        };
        (-0.5 * theta * theta - comp) * self.dt
    }
}

/// Exact-in-distribution increments of `log Z` for one path.
struct Increments {
    rng: ChaCha8Rng,
    vol: f64,
    drift: f64,
    jumps: Option<(Poisson<f64>, JumpSampler)>,
}

enum JumpSampler {
    NegExp(Exp<f64>),
    Normal(Normal<f64>),
}

impl Increments {
    fn new(spec: &KernelSpec, path: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(path);
        let jumps = match spec.kind {
            KernelKind::Levy {
                intensity, jump, ..
            } if intensity > 0.0 => {
                let count = Poisson::new(intensity * spec.dt).expect("validated intensity");
                let size = match jump {
                    JumpLaw::NegExponential { mean } => {
                        JumpSampler::NegExp(Exp::new(1.0 / mean).expect("validated mean"))
                    }
                    JumpLaw::Normal { mean, std } => {
                        JumpSampler::Normal(Normal::new(mean, std).expect("validated std"))
                    }
                };
                Some((count, size))
            }
            _ => None,
        };
        Self {
            rng,
            vol: spec.theta() * spec.dt.sqrt(),
            drift: spec.log_drift(),
            jumps,
        }
    }

    fn next(&mut self) -> f64 {
        let mut inc = self.drift;
        if self.vol != 0.0 {
            let n: f64 = self.rng.sample(StandardNormal);
            inc -= self.vol * n;
        }
        if let Some((count, size)) = &self.jumps {
            let k = count.sample(&mut self.rng) as u64;
            for _ in 0..k {
                inc += match size {
                    JumpSampler::NegExp(e) => -e.sample(&mut self.rng),
                    JumpSampler::Normal(n) => n.sample(&mut self.rng),
                };
            }
        }
        inc
    }
}

/// Horizon actually simulated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Truncation {
    pub t_max: f64,
    pub cells: usize,
    /// `e^{-δ T_max}/δ`: bound on the neglected part of `I` (integrand <= e^{-δs}).
    pub tail_bound: f64,
}

impl Truncation {
    fn new(spec: &KernelSpec, t_max: f64) -> Self {
        let cells = ((t_max / spec.dt) - 1e-9).ceil().max(1.0) as usize;
        let t_max = cells as f64 * spec.dt;
        let tail_bound = if spec.delta_pref > 0.0 {
            (-spec.delta_pref * t_max).exp() / spec.delta_pref
        } else {
            f64::INFINITY
        };
        Self {
            t_max,
            cells,
            tail_bound,
        }
    }

    fn grid(&self, spec: &KernelSpec) -> Result<TimeGrid> {
        TimeGrid::uniform(self.cells, spec.dt, Horizon::TruncatedInfinite)
    }
}

/// Horizon from the kernel spec, or the smallest `T` with `e^{-δT}/δ <= 1e-4 I`
/// using a pilot estimate of `I` (exact `I` for deterministic kernels).
pub fn truncation(spec: &KernelSpec) -> Result<Truncation> {
    spec.validate()?;
    if let Some(t) = spec.t_max {
        return Ok(Truncation::new(spec, t));
    }
    let delta = spec.delta_pref;
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(
            "the truncation policy needs a positive preference rate; set t_max explicitly".into(),
        ));
    }
    let horizon_for = |i: f64| (1.0 / (TRUNCATION_FRACTION * delta * i)).ln().max(0.0) / delta;
    let i_ref = if spec.is_deterministic() {
        deterministic_i(spec)?
    } else {
        let pilot = Truncation::new(spec, horizon_for(1e-2 / delta));
        let consts = CellConstants::new(spec, &pilot);
        let sums: Vec<f64> = (0..PILOT_PATHS)
            .into_par_iter()
            .map_init(
                || PathBuffers::new(pilot.cells),
                |buf, p| {
                    buf.fill(spec, &consts, u64::MAX - p as u64);
                    buf.m
                        .iter()
                        .zip(&consts.e_delta)
                        .map(|(m, e)| m * e)
                        .sum::<f64>()
                },
            )
            .collect();
        sums.iter().sum::<f64>() / PILOT_PATHS as f64
    };
    Ok(Truncation::new(spec, horizon_for(i_ref).max(spec.dt)))
}

/// `I = ∫ e^{-δs} min(1, e^{(δ-r)s}) ds = 1 / max(δ, r)` for `Z ≡ 1`.
pub fn deterministic_i(spec: &KernelSpec) -> Result<f64> {
    if !spec.is_deterministic() {
        return Err(Error::InvalidInput(
            "kernel is random; use estimate_i".into(),
        ));
    }
    if !(spec.delta_pref > 0.0) {
        return Err(Error::InvalidInput(
            "preference rate must be positive".into(),
        ));
    }
    Ok(1.0 / spec.delta_pref.max(spec.rate))
}

/// `∫ Z m^{-1/γ} e^{-rs} ds = 1/ρ`, `ρ = r + min(0, δ-r)/γ`, for `Z ≡ 1`.
fn deterministic_b(spec: &KernelSpec, gamma: f64) -> Result<f64> {
    let rho = spec.rate + (spec.delta_pref - spec.rate).min(0.0) / gamma;
    if !(rho > 0.0) {
        return Err(Error::InvalidInput(format!(
            "plan has infinite price: r + min(0, δ - r)/γ = {rho} <= 0"
        )));
    }
    Ok(1.0 / rho)
}

/// Per-cell constants shared by all paths.
struct CellConstants {
    /// `e^{(δ-r) t_j}`.
    growth: Vec<f64>,
    /// `∫_cell e^{-δs} ds`.
    e_delta: Vec<f64>,
    /// `∫_cell e^{-rs} ds` (clock mass).
    e_rate: Vec<f64>,
    /// `∫_{t_j}^{T_max} e^{-δs} ds`, with a trailing 0.
    tail_delta: Vec<f64>,
}

impl CellConstants {
    fn new(spec: &KernelSpec, tr: &Truncation) -> Self {
        let t = |j: usize| j as f64 * spec.dt;
        let d = spec.delta_pref;
        let e_delta: Vec<f64> = (0..tr.cells)
            .map(|j| {
                if d == 0.0 {
                    spec.dt
                } else {
                    exp_cell_mass(d, t(j), spec.dt)
                }
            })
            .collect();
        let mut tail_delta = vec![0.0; tr.cells + 1];
        for j in (0..tr.cells).rev() {
            tail_delta[j] = tail_delta[j + 1] + e_delta[j];
        }
        Self {
            growth: (0..tr.cells)
                .map(|j| ((d - spec.rate) * t(j)).exp())
                .collect(),
            e_delta,
            e_rate: (0..tr.cells)
                .map(|j| exp_cell_mass(spec.rate, t(j), spec.dt))
                .collect(),
            tail_delta,
        }
    }
}

/// One simulated path: `Z_j`, `x_j = Z_j e^{(δ-r)t_j}` and the running
/// infimum `m_j = min_{i<=j} x_i` (the value of `inf_{[0,t)}` on the
/// interior of cell `j`).
struct PathBuffers {
    z: Vec<f64>,
    x: Vec<f64>,
    m: Vec<f64>,
    scratch: Vec<f64>,
    stack: Vec<usize>,
}

impl PathBuffers {
    fn new(cells: usize) -> Self {
        Self {
            z: vec![0.0; cells],
            x: vec![0.0; cells],
            m: vec![0.0; cells],
            scratch: vec![0.0; cells + 1],
            stack: Vec::with_capacity(64),
        }
    }

    fn fill(&mut self, spec: &KernelSpec, consts: &CellConstants, path: u64) {
        let mut inc = Increments::new(spec, path);
        let mut log_z = 0.0;
        let mut m = f64::INFINITY;
        for j in 0..self.z.len() {
            if j > 0 {
                log_z += inc.next();
            }
            let z = log_z.exp();
            let x = z * consts.growth[j];
            m = m.min(x);
            self.z[j] = z;
            self.x[j] = x;
            self.m[j] = m;
        }
    }

    /// Relative comparison of `Σ_{j>=k} E_j m_j` with
    /// `Σ_{j>=k} E_j min_{k<=i<=j} x_i` at every cell `k`.
    /// Returns (largest excess, largest gap on increase cells, increase cells).
    fn envelope(&mut self, consts: &CellConstants) -> (f64, f64, usize) {
        let n = self.x.len();
        let (e, tail) = (&consts.e_delta, &consts.tail_delta);
        // Restarted sums via the next strictly smaller element.
        let restarted = &mut self.scratch;
        restarted[n] = 0.0;
        self.stack.clear();
        let mut lhs = 0.0;
        let (mut excess, mut gap, mut rises) = (f64::NEG_INFINITY, 0.0_f64, 0usize);
        for k in (0..n).rev() {
            while let Some(&top) = self.stack.last() {
                if self.x[top] >= self.x[k] {
                    self.stack.pop();
                } else {
                    break;
                }
            }
            let next = self.stack.last().copied().unwrap_or(n);
            restarted[k] = self.x[k] * (tail[k] - tail[next]) + restarted[next];
            self.stack.push(k);
            lhs += e[k] * self.m[k];
            let rel = (lhs - restarted[k]) / restarted[k];
            excess = excess.max(rel);
            if k == 0 || self.m[k] < self.m[k - 1] {
                rises += 1;
                gap = gap.max(rel.abs());
            }
        }
        (excess, gap, rises)
    }
}

fn mean_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Simulated kernel paths on the truncation grid with the exponential clock.
pub fn simulate_kernel(spec: &KernelSpec, n_paths: usize) -> Result<PathPanel> {
    let tr = truncation(spec)?;
    let frame = kernel_frame(spec, &tr, n_paths)?;
    let consts = CellConstants::new(spec, &tr);
    let rows: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map_init(
            || PathBuffers::new(tr.cells),
            |buf, p| {
                buf.fill(spec, &consts, p as u64);
                buf.z.clone()
            },
        )
        .collect();
    PathPanel::new(frame, rows)
}

fn kernel_frame(
    spec: &KernelSpec,
    tr: &Truncation,
    n_paths: usize,
) -> Result<std::sync::Arc<PanelFrame>> {
    let grid = tr.grid(spec)?;
    let clock = Clock::exponential(&grid, spec.rate)?;
    PanelFrame::equally_weighted(grid, clock, n_paths.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MartingalePoint {
    pub t: f64,
    pub mean: f64,
    pub se: f64,
}

impl MartingalePoint {
    /// `|mean - 1| <= k SE` (exact equality for a deterministic kernel).
    pub fn within(&self, k: f64) -> bool {
        (self.mean - 1.0).abs() <= k * self.se + 1e-12
    }
}

/// Sample mean and standard error of `Z_t` at each checkpoint.
pub fn martingale_check(
    spec: &KernelSpec,
    n_paths: usize,
    checkpoints: &[f64],
) -> Result<Vec<MartingalePoint>> {
    spec.validate()?;
    let steps: Vec<usize> = checkpoints
        .iter()
        .map(|t| (t / spec.dt).round() as usize)
        .collect();
    let last = steps.iter().copied().max().unwrap_or(0);
    let values: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut inc = Increments::new(spec, p as u64);
            let mut log_z = 0.0;
            let mut at = vec![0.0; steps.len()];
            for j in 0..=last {
                if j > 0 {
                    log_z += inc.next();
                }
                for (slot, &s) in at.iter_mut().zip(&steps) {
                    if s == j {
                        *slot = log_z.exp();
                    }
                }
            }
            at
        })
        .collect();
    Ok(checkpoints
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let (mean, se) = mean_se(values.iter().map(|v| v[i]));
            MartingalePoint { t, mean, se }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IEstimate {
    pub i: f64,
    pub se: f64,
    pub truncation: Truncation,
}

/// Monte Carlo estimate of `I = E ∫ e^{-δs} inf_{u<s} Z_u e^{(δ-r)u} ds` on
/// the truncated horizon.
pub fn estimate_i(spec: &KernelSpec, n_paths: usize) -> Result<IEstimate> {
    if !(spec.delta_pref > 0.0) {
        return Err(Error::InvalidInput(
            "preference rate must be positive".into(),
        ));
    }
    let tr = truncation(spec)?;
    let consts = CellConstants::new(spec, &tr);
    let sums: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map_init(
            || PathBuffers::new(tr.cells),
            |buf, p| {
                buf.fill(spec, &consts, p as u64);
                buf.m
                    .iter()
                    .zip(&consts.e_delta)
                    .map(|(m, e)| m * e)
                    .sum::<f64>()
            },
        )
        .collect();
    let (i, se) = mean_se(sums.iter().copied());
    Ok(IEstimate {
        i,
        se,
        truncation: tr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiedelOptions {
    /// Check the pathwise envelope relation on every path.
    pub check_envelope: bool,
    /// Number of leading paths kept as panels.
    pub sample_paths: usize,
}

impl Default for RiedelOptions {
    fn default() -> Self {
        Self {
            check_envelope: true,
            sample_paths: 0,
        }
    }
}

/// Pathwise envelope relation over all simulated paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeStats {
    pub paths: usize,
    /// Largest relative excess of the left side (should be <= roundoff).
    pub max_excess: f64,
    /// Largest relative gap at increase cells (should be roundoff).
    pub max_equality_gap: f64,
    pub increase_cells: usize,
}

impl EnvelopeStats {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_excess <= tol && self.max_equality_gap <= tol
    }
}

/// Path functionals that determine the plan for every multiplier at once.
///
/// For `i(η) = η^{-1/γ}` the plan `ĉ = i(K m)` has price
/// `K^{-1/γ} E Σ Z_j m_j^{-1/γ} ∫_cell e^{-rs} ds = K^{-1/γ} B`, so one pass
/// over common random numbers prices every `K`.
#[derive(Debug, Clone)]
pub struct RiedelStats {
    pub spec: KernelSpec,
    pub utility: UtilityField,
    pub n_paths: usize,
    pub truncation: Truncation,
    /// Closed form (no simulation noise, no truncation) for `Z ≡ 1`.
    pub exact: bool,
    pub i: f64,
    pub i_se: f64,
    pub b: f64,
    pub b_se: f64,
    pub envelope: Option<EnvelopeStats>,
    pub clamps: u64,
    sample_z: Vec<Vec<f64>>,
    sample_m: Vec<Vec<f64>>,
}

impl RiedelStats {
    pub fn run(
        spec: &KernelSpec,
        utility: &UtilityField,
        n_paths: usize,
        opts: &RiedelOptions,
    ) -> Result<Self> {
        utility.validate()?;
        if !(spec.delta_pref > 0.0) {
            return Err(Error::InvalidInput(
                "preference rate must be positive".into(),
            ));
        }
        if n_paths == 0 {
            return Err(Error::InvalidInput("need at least one path".into()));
        }
        let tr = truncation(spec)?;
        let consts = CellConstants::new(spec, &tr);
        let g = utility.gamma();
        let check = opts.check_envelope;
        let keep = opts.sample_paths.min(n_paths);
        struct Out {
            i: f64,
            b: f64,
            clamps: u64,
            env: (f64, f64, usize),
            trace: Option<(Vec<f64>, Vec<f64>)>,
        }
        let outs: Vec<Out> = (0..n_paths)
            .into_par_iter()
            .map_init(
                || PathBuffers::new(tr.cells),
                |buf, p| {
                    buf.fill(spec, &consts, p as u64);
                    let mut i = 0.0;
                    let mut b = 0.0;
                    let mut clamps = 0;
                    let mut last_m = f64::NAN;
                    let mut pow = 0.0;
                    for j in 0..tr.cells {
                        let m = buf.m[j];
                        i += consts.e_delta[j] * m;
                        if m != last_m {
                            let mc = m.clamp(CLAMP.0, CLAMP.1);
                            clamps += u64::from(mc != m);
                            pow = if g == 1.0 {
                                1.0 / mc
                            } else {
                                mc.powf(-1.0 / g)
                            };
                            last_m = m;
                        }
                        b += buf.z[j] * pow * consts.e_rate[j];
                    }
                    let env = if check {
                        buf.envelope(&consts)
                    } else {
                        (f64::NEG_INFINITY, 0.0, 0)
                    };
                    let trace = (p < keep).then(|| (buf.z.clone(), buf.m.clone()));
                    Out {
                        i,
                        b,
                        clamps,
                        env,
                        trace,
                    }
                },
            )
            .collect();
        let (mut i, mut i_se) = mean_se(outs.iter().map(|o| o.i));
        let (mut b, mut b_se) = mean_se(outs.iter().map(|o| o.b));
        let exact = spec.is_deterministic();
        if exact {
            i = deterministic_i(spec)?;
            b = deterministic_b(spec, g)?;
            i_se = 0.0;
            b_se = 0.0;
        }
        let envelope = check.then(|| EnvelopeStats {
            paths: n_paths,
            max_excess: outs
                .iter()
                .map(|o| o.env.0)
                .fold(f64::NEG_INFINITY, f64::max),
            max_equality_gap: outs.iter().map(|o| o.env.1).fold(0.0, f64::max),
            increase_cells: outs.iter().map(|o| o.env.2).sum(),
        });
        let clamps = outs.iter().map(|o| o.clamps).sum();
        let (sample_z, sample_m) = outs.into_iter().filter_map(|o| o.trace).unzip();
        Ok(Self {
            spec: *spec,
            utility: *utility,
            n_paths,
            truncation: tr,
            exact,
            i,
            i_se,
            b,
            b_se,
            envelope,
            clamps,
            sample_z,
            sample_m,
        })
    }

    /// `K = y / (I r)`.
    pub fn k_for_y(&self, y: f64) -> f64 {
        y / (self.i * self.spec.rate)
    }

    /// Price of the plan with constant `K`.
    pub fn budget_for_k(&self, k: f64) -> (f64, f64) {
        let s = self.utility.base_inverse(k);
        (s * self.b, s * self.b_se)
    }

    /// The plan for multiplier `y`.
    pub fn plan_for_y(&self, y: f64) -> Result<RiedelPlan> {
        if !(y > 0.0) || !y.is_finite() {
            return Err(Error::InvalidInput(format!(
                "multiplier must be positive, got {y}"
            )));
        }
        let k = self.k_for_y(y);
        let (budget, budget_se) = self.budget_for_k(k);
        let mut clamps = 0;
        let sample = if self.sample_z.is_empty() {
            None
        } else {
            let frame = kernel_frame(&self.spec, &self.truncation, self.sample_z.len())?;
            let c_rows: Vec<Vec<f64>> = self
                .sample_m
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&m| plan_value(&self.utility, k, m, &mut clamps))
                        .collect()
                })
                .collect();
            Some(RiedelSample {
                z: PathPanel::new(frame.clone(), self.sample_z.clone())?,
                running_inf: PathPanel::new(frame.clone(), self.sample_m.clone())?,
                c: PathPanel::new(frame, c_rows)?,
            })
        };
        Ok(RiedelPlan {
            k,
            y,
            i: self.i,
            i_se: self.i_se,
            budget,
            budget_se,
            truncation: self.truncation,
            exact: self.exact,
            n_paths: self.n_paths,
            envelope: self.envelope,
            clamps: self.clamps + clamps,
            sample,
        })
    }

    /// The plan whose price is `x`: `K = (B/x)^γ`, `y = K I r`.
    pub fn plan_for_budget(&self, x: f64) -> Result<RiedelPlan> {
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::InvalidInput(format!(
                "budget must be positive, got {x}"
            )));
        }
        if !(self.b > 0.0) || !self.b.is_finite() {
            return Err(Error::Bracket(format!(
                "price coefficient {} cannot be inverted (I = {}, paths = {})",
                self.b, self.i, self.n_paths
            )));
        }
        let k = (self.b / x).powf(self.utility.gamma());
        self.plan_for_y(k * self.i * self.spec.rate)
    }
}

fn plan_value(utility: &UtilityField, k: f64, m: f64, clamps: &mut u64) -> f64 {
    let arg = k * m;
    let a = arg.clamp(CLAMP.0, CLAMP.1);
    *clamps += u64::from(a != arg);
    utility.base_inverse(a)
}

/// Leading simulated paths of a plan.
#[derive(Debug, Clone)]
pub struct RiedelSample {
    pub z: PathPanel,
    /// `min_{i<=j} Z_i e^{(δ-r)t_i}` per cell.
    pub running_inf: PathPanel,
    pub c: PathPanel,
}

#[derive(Debug, Clone)]
pub struct RiedelPlan {
    pub k: f64,
    pub y: f64,
    pub i: f64,
    pub i_se: f64,
    pub budget: f64,
    pub budget_se: f64,
    pub truncation: Truncation,
    pub exact: bool,
    pub n_paths: usize,
    pub envelope: Option<EnvelopeStats>,
    pub clamps: u64,
    pub sample: Option<RiedelSample>,
}

impl RiedelPlan {
    /// `|budget - x| <= max(1e-3 x, 2 SE)`.
    pub fn matches_budget(&self, x: f64) -> bool {
        (self.budget - x).abs() <= (1e-3 * x).max(2.0 * self.budget_se)
    }
}

pub fn riedel_plan(
    spec: &KernelSpec,
    utility: &UtilityField,
    y: f64,
    n_paths: usize,
    opts: &RiedelOptions,
) -> Result<RiedelPlan> {
    RiedelStats::run(spec, utility, n_paths, opts)?.plan_for_y(y)
}

/// Plan with price `x`, priced on common random numbers.
pub fn budget_match_riedel(
    spec: &KernelSpec,
    utility: &UtilityField,
    x: f64,
    n_paths: usize,
    opts: &RiedelOptions,
) -> Result<RiedelPlan> {
    RiedelStats::run(spec, utility, n_paths, opts)?.plan_for_budget(x)
}

/// Re-simulates the paths and prices `ĉ_j = i(K m_j)` cell by cell.
/// Returns `(mean, standard error, clamps)`.
pub fn price_riedel_plan(
    spec: &KernelSpec,
    utility: &UtilityField,
    k: f64,
    n_paths: usize,
) -> Result<(f64, f64, u64)> {
    let tr = truncation(spec)?;
    let consts = CellConstants::new(spec, &tr);
    let outs: Vec<(f64, u64)> = (0..n_paths)
        .into_par_iter()
        .map_init(
            || PathBuffers::new(tr.cells),
            |buf, p| {
                buf.fill(spec, &consts, p as u64);
                let mut clamps = 0;
                let price = (0..tr.cells)
                    .map(|j| {
                        plan_value(utility, k, buf.m[j], &mut clamps) * buf.z[j] * consts.e_rate[j]
                    })
                    .sum::<f64>();
                (price, clamps)
            },
        )
        .collect();
    let (mean, se) = mean_se(outs.iter().map(|o| o.0));
    Ok((mean, se, outs.iter().map(|o| o.1).sum()))
}

/// Cellwise comparison of plans for increasing budgets on common paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneReport {
    pub budgets: Vec<f64>,
    pub ks: Vec<f64>,
    /// Cells where a larger budget consumes strictly less.
    pub violations: u64,
    /// `max |ĉ(x_n) - ĉ(x_last)| / ĉ(x_last)` for each budget.
    pub distance_to_last: Vec<f64>,
}

/// Checks `x_1 < x_2 ⇒ ĉ(x_1) <= ĉ(x_2)` on every cell of every path, and
/// measures how the plans approach the plan of the last budget.
pub fn riedel_monotonicity(
    spec: &KernelSpec,
    utility: &UtilityField,
    budgets: &[f64],
    n_paths: usize,
) -> Result<MonotoneReport> {
    let stats = RiedelStats::run(
        spec,
        utility,
        n_paths,
        &RiedelOptions {
            check_envelope: false,
            sample_paths: 0,
        },
    )?;
    let ks: Vec<f64> = budgets
        .iter()
        .map(|&x| stats.plan_for_budget(x).map(|p| p.k))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..budgets.len()).collect();
    order.sort_by(|&a, &b| budgets[a].total_cmp(&budgets[b]));
    let tr = stats.truncation;
    let consts = CellConstants::new(spec, &tr);
    let last = budgets.len().saturating_sub(1);
    let outs: Vec<(u64, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map_init(
            || PathBuffers::new(tr.cells),
            |buf, p| {
                buf.fill(spec, &consts, p as u64);
                let mut violations = 0;
                let mut dist = vec![0.0_f64; budgets.len()];
                let mut clamps = 0;
                for j in 0..tr.cells {
                    let vals: Vec<f64> = ks
                        .iter()
                        .map(|&k| plan_value(utility, k, buf.m[j], &mut clamps))
                        .collect();
                    for w in order.windows(2) {
                        if budgets[w[0]] < budgets[w[1]] && vals[w[0]] > vals[w[1]] {
                            violations += 1;
                        }
                    }
                    for (d, v) in dist.iter_mut().zip(&vals) {
                        *d = d.max((v - vals[last]).abs() / vals[last]);
                    }
                }
                (violations, dist)
            },
        )
        .collect();
    let mut distance_to_last = vec![0.0_f64; budgets.len()];
    for (_, d) in &outs {
        for (a, b) in distance_to_last.iter_mut().zip(d) {
            *a = a.max(*b);
        }
    }
    Ok(MonotoneReport {
        budgets: budgets.to_vec(),
        ks,
        violations: outs.iter().map(|o| o.0).sum(),
        distance_to_last,
    })
}

/// Cellwise residual of `c = λc̄ ∨ I(yZ) ∧ c̄` with regime labels.
#[derive(Debug, Clone)]
pub struct FormulaReport {
    pub labels: Vec<Vec<Region>>,
    /// `|c - (λc̄ ∨ I(yZ) ∧ c̄)| / max(c̄, 1)`.
    pub residual: PathPanel,
    pub max_residual: f64,
    pub worst: Option<(usize, usize)>,
}

/// Recomputes the drawdown formula from the candidate's own running supremum.
/// Regimes: `Min` where `λc̄ > I(yZ)`, `Max` where `I(yZ) > c̄`, otherwise
/// `Unconstrained`.
pub fn drawdown_formula_check(
    c: &PathPanel,
    y: f64,
    z: &PathPanel,
    lambda: f64,
    utility: &UtilityField,
) -> Result<FormulaReport> {
    if !c.same_frame(z) {
        return Err(Error::Shape("plan and deflator panels differ".into()));
    }
    if !(0.0..=1.0).contains(&lambda) || !(y > 0.0) {
        return Err(Error::InvalidInput("need lambda in [0,1] and y > 0".into()));
    }
    let top = running_esssup_inclusive(c);
    let grid = c.frame().grid().clone();
    let mut labels = vec![Vec::with_capacity(c.cells()); c.scenarios()];
    let mut max_residual = 0.0;
    let mut worst = None;
    let residual = c.with_values(|s, k, v| {
        let bar = top.get(s, k);
        let i = utility.inverse_marginal(grid.left(k), y * z.get(s, k));
        let band = 1e-9 * bar.max(i).max(1e-300);
        labels[s].push(if lambda * bar > i + band {
            Region::Min
        } else if i > bar + band {
            Region::Max
        } else {
            Region::Unconstrained
        });
        let r = (v - (lambda * bar).max(i.min(bar))).abs() / bar.max(1.0);
        if r > max_residual {
            max_residual = r;
            worst = Some((s, k));
        }
        r
    })?;
    Ok(FormulaReport {
        labels,
        residual,
        max_residual,
        worst,
    })
}

/// `E ∫ U(t, c) dκ` on a tree.
pub fn expected_utility(tree: &TreeModel, utility: &UtilityField, c: &NodeProcess) -> f64 {
    (0..tree.len())
        .map(|u| tree.weight(u) * utility.value(tree.time(u), c[u]))
        .sum()
}

/// `ĉ(x) ∨ [λq ∨ I(yZ) ∧ q]` on a tree and its price.
#[derive(Debug, Clone)]
pub struct FloorLift {
    /// Budget of the unfloored problem.
    pub x: f64,
    pub y: f64,
    pub q: f64,
    pub lambda: f64,
    pub unfloored: NodeProcess,
    pub c: NodeProcess,
    /// `π(x) = <c, Z>`.
    pub price: f64,
}

/// Lifts a given unfloored optimizer with multiplier `y`.
pub fn floor_lift_tree(
    tree: &TreeModel,
    z: &Deflator,
    utility: &UtilityField,
    c_hat: &NodeProcess,
    y: f64,
    q: f64,
    lambda: f64,
) -> Result<FloorLift> {
    if c_hat.len() != tree.len() {
        return Err(Error::Shape("plan does not match tree".into()));
    }
    let c = NodeProcess::from_fn(tree, |u| {
        let i = utility.inverse_marginal(tree.time(u), y * z.values()[u]);
        c_hat[u].max((lambda * q).max(i.min(q)))
    });
    let price = tree.pairing(&c, z.values())?;
    let x = tree.pairing(c_hat, z.values())?;
    Ok(FloorLift {
        x,
        y,
        q,
        lambda,
        unfloored: c_hat.clone(),
        c,
        price,
    })
}

/// Solves the unfloored problem at budget `x` and lifts it to the floor `q`.
pub fn floor_lift_at(
    tree: &TreeModel,
    z: &Deflator,
    utility: &UtilityField,
    x: f64,
    q: f64,
    lambda: f64,
) -> Result<FloorLift> {
    if !(q > 0.0) || !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "floor lift needs q > 0 and lambda in (0,1], got q = {q}, lambda = {lambda}"
        )));
    }
    let sol = solve_primal_tree(tree, z, utility, x, 0.0, lambda)?;
    let mut lift = floor_lift_tree(tree, z, utility, &sol.plan(), sol.y, q, lambda)?;
    lift.x = x;
    Ok(lift)
}

/// Panel counterpart of [`floor_lift_tree`]; returns the plan and its price.
pub fn floor_lift_panel(
    c_hat: &PathPanel,
    z: &PathPanel,
    utility: &UtilityField,
    y: f64,
    q: f64,
    lambda: f64,
) -> Result<(PathPanel, f64)> {
    if !c_hat.same_frame(z) {
        return Err(Error::Shape("plan and deflator panels differ".into()));
    }
    let grid = c_hat.frame().grid().clone();
    let c = c_hat.with_values(|s, k, v| {
        let i = utility.inverse_marginal(grid.left(k), y * z.get(s, k));
        v.max((lambda * q).max(i.min(q)))
    })?;
    let price = crate::grid::pairing(&c, z)?;
    Ok((c, price))
}

#[derive(Debug, Clone)]
pub struct FloorMatch {
    pub x_target: f64,
    pub lift: FloorLift,
    pub iterations: usize,
}

/// Finds the leftmost `x` with `π(x) = x_target` by bisection and returns the
/// lifted plan, the optimizer for `(x_target, q)`.
pub fn match_floor_budget(
    tree: &TreeModel,
    z: &Deflator,
    utility: &UtilityField,
    x_target: f64,
    q: f64,
    lambda: f64,
) -> Result<FloorMatch> {
    check_cone(tree, z, x_target, q, lambda)?;
    let price = |x: f64| floor_lift_at(tree, z, utility, x, q, lambda);
    // π(x) >= x, so x_target itself brackets from above.
    let mut hi = price(x_target)?;
    let mut lo_x = x_target;
    let mut iterations = 0;
    loop {
        lo_x *= 0.5;
        iterations += 1;
        if lo_x < 1e-12 * x_target {
            return Err(Error::Bracket(format!(
                "π stays above {x_target} down to x = {lo_x:.3e} (floor cost {})",
                z.alpha(tree) * lambda * q
            )));
        }
        let l = price(lo_x)?;
        if l.price < x_target {
            break;
        }
        hi = l;
    }
    let mut hi_x = hi.x;
    while hi_x - lo_x > 1e-11 * x_target {
        iterations += 1;
        let mid = 0.5 * (lo_x + hi_x);
        let m = price(mid)?;
        if m.price < x_target {
            lo_x = mid;
        } else {
            hi_x = mid;
            hi = m;
        }
    }
    Ok(FloorMatch {
        x_target,
        lift: hi,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(delta: f64, rate: f64) -> KernelSpec {
        KernelSpec {
            t_max: None,
            ..KernelSpec::gbm(0.0, rate, delta)
        }
    }

    #[test]
    fn deterministic_kernel_is_one() {
        let spec = KernelSpec {
            t_max: Some(2.0),
            ..det(0.1, 0.05)
        };
        let z = simulate_kernel(&spec, 3).unwrap();
        assert!(z.rows().all(|r| r.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn rejects_negative_intensity() {
        let spec = KernelSpec {
            kind: KernelKind::Levy {
                theta: 0.0,
                intensity: -0.1,
                jump: JumpLaw::NegExponential { mean: 1.0 },
            },
            ..KernelSpec::gbm(0.0, 0.05, 0.1)
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn martingale_small_sample() {
        let spec = KernelSpec {
            kind: KernelKind::Levy {
                theta: 0.3,
                intensity: 0.5,
                jump: JumpLaw::Normal {
                    mean: -0.1,
                    std: 0.2,
                },
            },
            seed: 11,
            ..KernelSpec::gbm(0.0, 0.05, 0.1)
        };
        for pt in martingale_check(&spec, 4000, &[1.0, 3.0]).unwrap() {
            assert!(pt.within(3.0), "{pt:?}");
        }
    }

    #[test]
    fn reproducible_from_seed() {
        let spec = KernelSpec {
            seed: 3,
            t_max: Some(1.0),
            ..KernelSpec::gbm(0.4, 0.05, 0.1)
        };
        let a = simulate_kernel(&spec, 5).unwrap();
        let b = simulate_kernel(&spec, 5).unwrap();
        assert!(a.rows().zip(b.rows()).all(|(x, y)| x == y));
        assert_ne!(a.row(0), a.row(1));
    }

    #[test]
    fn deterministic_i_by_quadrature() {
        for (d, r) in [(0.1, 0.05), (0.05, 0.1), (0.07, 0.07)] {
            let spec = det(d, r);
            let exact = deterministic_i(&spec).unwrap();
            let est = estimate_i(&spec, 2).unwrap();
            assert_eq!(est.se, 0.0);
            // Truncation tail plus first-order discretization of the running infimum.
            let tol = est.truncation.tail_bound + 2.0 * spec.dt;
            assert!(
                (est.i - exact).abs() <= tol,
                "{d} {r}: {} vs {exact}",
                est.i
            );
        }
        assert!((deterministic_i(&det(0.1, 0.05)).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn truncation_policy() {
        let spec = det(0.1, 0.1);
        let tr = truncation(&spec).unwrap();
        assert!(tr.tail_bound <= TRUNCATION_FRACTION * 10.0 * (1.0 + 1e-9));
        assert!(tr.tail_bound > TRUNCATION_FRACTION * 10.0 * 0.99);
    }

    #[test]
    fn perpetuity() {
        let spec = KernelSpec {
            t_max: Some(5.0),
            ..det(0.05, 0.05)
        };
        let u = UtilityField::log();
        let x = 40.0;
        let opts = RiedelOptions {
            check_envelope: true,
            sample_paths: 2,
        };
        let plan = budget_match_riedel(&spec, &u, x, 2, &opts).unwrap();
        assert!((plan.y - 1.0 / (x * 0.05)).abs() <= 1e-9 * plan.y);
        let s = plan.sample.unwrap();
        assert!(s
            .c
            .rows()
            .all(|r| r.iter().all(|&c| (c - x * 0.05).abs() <= 1e-9)));
        assert!(plan.envelope.unwrap().holds(1e-12));
        // Fixed multiplier: ĉ ≡ 1/y.
        let plan = riedel_plan(&spec, &u, 0.25, 1, &opts).unwrap();
        assert!((plan.k - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gbm_plan_is_monotone_and_priced() {
        let spec = KernelSpec {
            seed: 5,
            t_max: Some(20.0),
            dt: 1.0 / 52.0,
            ..KernelSpec::gbm(0.4, 0.05, 0.1)
        };
        let u = UtilityField::crra(2.0).unwrap();
        let opts = RiedelOptions {
            check_envelope: true,
            sample_paths: 20,
        };
        let plan = budget_match_riedel(&spec, &u, 10.0, 500, &opts).unwrap();
        assert!(plan.matches_budget(10.0));
        let s = plan.sample.as_ref().unwrap();
        for row in s.c.rows() {
            assert!(row.windows(2).all(|w| w[1] >= w[0]));
        }
        assert!(plan.envelope.unwrap().holds(1e-9));
        let (direct, _, _) = price_riedel_plan(&spec, &u, plan.k, 500).unwrap();
        assert!((direct - 10.0).abs() <= 1e-9 * 10.0);
        let mono = riedel_monotonicity(&spec, &u, &[5.0, 9.0, 9.9, 10.0], 50).unwrap();
        assert_eq!(mono.violations, 0);
        assert!(mono.distance_to_last[2] < mono.distance_to_last[1]);
    }

    #[test]
    fn formula_on_worked_tree() {
        let (t, z) = TreeModel::worked_example();
        let frame = t.scenario_frame().unwrap();
        let c = t.to_panel(&frame, &vec![3.0, 3.0, 7.0].into()).unwrap();
        let zp = t.to_panel(&frame, z.values()).unwrap();
        let u = UtilityField::log();
        let rep = drawdown_formula_check(&c, 2.0 / 7.0, &zp, 1.0, &u).unwrap();
        assert!(rep.max_residual <= 1e-12);
        let bent = c
            .with_values(|s, k, v| if (s, k) == (0, 1) { v - 0.5 } else { v })
            .unwrap();
        let rep = drawdown_formula_check(&bent, 2.0 / 7.0, &zp, 1.0, &u).unwrap();
        assert_eq!(rep.worst, Some((0, 1)));
        assert!(rep.max_residual > 0.1);
        // λ = 0: the unconstrained plan I(yZ).
        let free = zp.with_values(|_, _, zv| 1.0 / (2.0 / 7.0 * zv)).unwrap();
        let rep = drawdown_formula_check(&free, 2.0 / 7.0, &zp, 0.0, &u).unwrap();
        assert!(rep.max_residual <= 1e-12);
    }

    #[test]
    fn floor_lift_examples() {
        let (t, z) = TreeModel::worked_example();
        let u = UtilityField::log();
        let lift =
            floor_lift_tree(&t, &z, &u, &vec![3.0, 3.0, 7.0].into(), 2.0 / 7.0, 3.0, 1.0).unwrap();
        assert!(lift.c.max_abs_diff(&vec![3.0, 3.0, 7.0].into()) < 1e-12);
        assert!((lift.price - 7.0).abs() < 1e-12);
        let lift = floor_lift_tree(
            &t,
            &z,
            &u,
            &vec![3.0, 3.0, 7.0].into(),
            2.0 / 7.0,
            50.0,
            1.0,
        )
        .unwrap();
        assert!((lift.price - 100.0).abs() < 1e-12);
        let m = match_floor_budget(&t, &z, &u, 7.0, 3.0, 1.0).unwrap();
        assert!((m.lift.x - 7.0).abs() < 1e-6 * 7.0, "{}", m.lift.x);
        assert!(matches!(
            match_floor_budget(&t, &z, &u, 5.0, 3.0, 1.0),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn floor_match_agrees_with_primal() {
        let (t, z) = TreeModel::worked_example();
        let u = UtilityField::log();
        for (x, q, lambda) in [(10.5, 5.0, 1.0), (4.0, 3.0, 0.5), (9.0, 4.0, 0.3)] {
            let m = match_floor_budget(&t, &z, &u, x, q, lambda).unwrap();
            let direct = solve_primal_tree(&t, &z, &u, x, q, lambda).unwrap();
            let a = expected_utility(&t, &u, &m.lift.c);
            assert!(
                (a - direct.u_hat).abs() <= 1e-6 * direct.u_hat.abs().max(1.0),
                "{x} {q} {lambda}: {a} vs {}",
                direct.u_hat
            );
            assert!(m.lift.c.max_abs_diff(&direct.plan()) < 1e-5);
        }
    }

    #[test]
    fn parses_kernel_config() {
        let k: KernelSpec = toml::from_str(
            "kind = \"levy\"\ntheta = 0.2\nintensity = 0.1\nrate = 0.05\ndelta_pref = 0.1\njump = { law = \"neg-exponential\", mean = 1.0 }",
        )
        .unwrap();
        assert!(matches!(
            k.kind,
            KernelKind::Levy {
                jump: JumpLaw::NegExponential { .. },
                ..
            }
        ));
        assert_eq!(k.dt, 1.0 / 252.0);
    }
}
