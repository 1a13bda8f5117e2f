//! Scenario runner behind the `drawdown-lab` binary.
//!
//! One invocation runs one scenario: a TOML document (every block optional,
//! defaults reproduce the bundled worked tree) is parsed, validated, dispatched
//! to the library, and reported as `summary.json` plus CSV plot data in the
//! output directory. Re-running the same config and seed produces
//! byte-identical files.
//!
//! Exit codes: `0` success, `1` other failure, `2` config schema violation,
//! `3` infeasible or boundary budget, `4` failed certificate or check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::complete::{
    expected_utility, floor_lift_at, martingale_check, match_floor_budget, KernelSpec,
    RiedelOptions, RiedelStats,
};
use crate::envelope::{alternative_solution, build_envelope_process, LevelGridOptions};
use crate::error::{Error, Result};
use crate::esssup::{
    check_drawdown, running_esssup, running_esssup_inclusive, solid_hull_lift, DebutProfile,
};
use crate::grid::{Clock, Horizon, PanelFrame, PathPanel, TimeGrid};
use crate::primal::{certify_duality, solve_primal_tree, value_surface, verify_foc_regions};
use crate::random::{random_process, random_tree, RandomTreeSpec};
use crate::tree::{Deflator, TreeModel};
use crate::utility::UtilityField;

pub const SUMMARY_SCHEMA: &str = "drawdown-lab/summary@1";
/// The one-period binary tree `Z = (1, 1.5, 0.5)`, `p = 1/2`, unit clock.
pub const WORKED_TREE: &str = include_str!("../fixtures/worked_tree.json");

#[derive(Debug, Parser)]
#[command(
    name = "drawdown-lab",
    version,
    about = "Consumption under ratchet and drawdown constraints"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandName,
    /// Scenario config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `run.out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed (overrides `run.seed` and the kernel seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of Monte Carlo paths (overrides `run.paths`).
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Suppress the one-line status on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandName {
    /// Running esssup, debuts and drawdown lift on sample step paths.
    EsssupDemo,
    /// Solve the primal problem on a tree.
    TreeSolve,
    /// Solve and certify duality on a tree.
    Certify,
    /// Closed-form ratchet plan for a simulated Lévy kernel.
    Riedel,
    /// Envelope construction and the duality-free solution on a tree.
    Envelope,
    /// Solve a floored problem through the lift of the unfloored optimizer.
    FloorMatch,
    /// Value function over a grid of budgets and floors.
    ValueSurface,
    /// Run the built-in invariant suite.
    Selftest,
}

impl CommandName {
    pub fn as_str(&self) -> &'static str {
        match self {
            CommandName::EsssupDemo => "esssup-demo",
            CommandName::TreeSolve => "tree-solve",
            CommandName::Certify => "certify",
            CommandName::Riedel => "riedel",
            CommandName::Envelope => "envelope",
            CommandName::FloorMatch => "floor-match",
            CommandName::ValueSurface => "value-surface",
            CommandName::Selftest => "selftest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Must match the subcommand when present.
    #[serde(default)]
    pub command: Option<CommandName>,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default = "UtilityField::log")]
    pub utility: UtilityField,
    #[serde(default)]
    pub constraint: ConstraintBlock,
    #[serde(default)]
    pub budget: BudgetBlock,
    #[serde(default)]
    pub run: RunBlock,
    #[serde(default)]
    pub surface: SurfaceBlock,
    #[serde(default)]
    pub esssup: EsssupBlock,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            command: None,
            model: ModelBlock::default(),
            utility: UtilityField::log(),
            constraint: ConstraintBlock::default(),
            budget: BudgetBlock::default(),
            run: RunBlock::default(),
            surface: SurfaceBlock::default(),
            esssup: EsssupBlock::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    /// Tree document (JSON), relative to the config file. The bundled worked
    /// tree is used when absent.
    #[serde(default)]
    pub tree: Option<PathBuf>,
    /// Name of the deflator process inside the tree document.
    #[serde(default = "default_deflator")]
    pub deflator: String,
    /// Pricing kernel for `riedel`.
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            tree: None,
            deflator: default_deflator(),
            kernel: None,
        }
    }
}

fn default_deflator() -> String {
    "Z".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintBlock {
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default)]
    pub q: f64,
}

impl Default for ConstraintBlock {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            q: 0.0,
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Initial wealth `x` or multiplier `y`. Tree commands default to `x = 7`,
/// `riedel` to `x = 100`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetBlock {
    #[serde(default)]
    pub x: Option<f64>,
    #[serde(default)]
    pub y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Simulated paths written to `paths.csv`.
    #[serde(default = "default_sample_paths")]
    pub sample_paths: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl Default for RunBlock {
    fn default() -> Self {
        Self {
            seed: None,
            paths: default_paths(),
            sample_paths: default_sample_paths(),
            out: None,
            tolerances: Tolerances::default(),
        }
    }
}

fn default_paths() -> usize {
    10_000
}

fn default_sample_paths() -> usize {
    5
}

/// Every tolerance used by a run; echoed in `summary.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Duality certificate residuals (relative to `max(x, 1)`).
    pub certificate: f64,
    /// Band separating the three regimes.
    pub regime_band: f64,
    /// Envelope relation on simulated paths (relative).
    pub envelope: f64,
    /// Agreement of alternative routes (utility or plan sup-norm).
    pub agreement: f64,
    /// Number of levels in the envelope sweep.
    pub envelope_levels: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            certificate: 1e-8,
            regime_band: 1e-7,
            envelope: 1e-9,
            agreement: 1e-6,
            envelope_levels: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceBlock {
    pub xs: Vec<f64>,
    pub qs: Vec<f64>,
}

impl Default for SurfaceBlock {
    fn default() -> Self {
        Self {
            xs: vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0],
            qs: vec![0.0, 1.0, 2.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsssupBlock {
    #[serde(default = "one")]
    pub dt: f64,
    /// One row of cell values per path.
    pub values: Vec<Vec<f64>>,
}

impl Default for EsssupBlock {
    fn default() -> Self {
        Self {
            dt: 1.0,
            values: vec![
                vec![1.0, 3.0, 2.0, 5.0, 4.0, 4.5],
                vec![0.5, 0.2, 0.9, 0.1, 1.2, 1.0],
            ],
        }
    }
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ScenarioConfig {
    /// Parses a TOML scenario; schema violations carry the field path.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(s).map_err(|e| config_error("", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.constraint.lambda;
        if !(0.0..=1.0).contains(&l) {
            return Err(config_error(
                "constraint.lambda",
                format!("must lie in [0, 1], got {l}"),
            ));
        }
        if !self.constraint.q.is_finite() {
            return Err(config_error("constraint.q", "must be finite"));
        }
        if let Some(x) = self.budget.x {
            if !x.is_finite() {
                return Err(config_error("budget.x", "must be finite"));
            }
        }
        if let Some(y) = self.budget.y {
            if !(y > 0.0) || !y.is_finite() {
                return Err(config_error(
                    "budget.y",
                    format!("must be positive, got {y}"),
                ));
            }
        }
        if let Some(k) = &self.model.kernel {
            k.validate()
                .map_err(|e| config_error("model.kernel", e.to_string()))?;
        }
        self.utility
            .validate()
            .map_err(|e| config_error("utility", e.to_string()))?;
        if self.run.tolerances.envelope_levels < 2 {
            return Err(config_error(
                "run.tolerances.envelope_levels",
                "need at least 2 levels",
            ));
        }
        if self
            .esssup
            .values
            .iter()
            .any(|r| r.len() != self.esssup.values[0].len())
        {
            return Err(config_error(
                "esssup.values",
                "all rows need the same number of cells",
            ));
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration (after command-line overrides).
    /// The output directory is excluded: it does not affect any result.
    pub fn hash(&self) -> String {
        let mut effective = self.clone();
        effective.run.out = None;
        let bytes = serde_json::to_vec(&effective).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn seed(&self) -> u64 {
        self.run
            .seed
            .or(self.model.kernel.map(|k| k.seed))
            .unwrap_or(0)
    }
}

/// Result of one scenario before it is written to disk.
#[derive(Debug, Clone)]
pub struct Report {
    pub command: CommandName,
    pub passed: bool,
    pub results: Value,
    /// File name to CSV contents.
    pub files: BTreeMap<String, String>,
}

impl Report {
    fn new(command: CommandName, passed: bool, results: Value) -> Self {
        Self {
            command,
            passed,
            results,
            files: BTreeMap::new(),
        }
    }

    fn file(mut self, name: &str, contents: String) -> Self {
        self.files.insert(name.into(), contents);
        self
    }
}

/// Writes `summary.json` and the CSV files; IO errors are returned verbatim.
pub fn emit_report(report: &Report, cfg: &ScenarioConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let summary = json!({
        "schema": SUMMARY_SCHEMA,
        "command": report.command.as_str(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed(),
        "tolerances": cfg.run.tolerances,
        "passed": report.passed,
        "results": report.results,
    });
    let mut written = Vec::new();
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")?;
    written.push(path);
    for (name, contents) in &report.files {
        let path = dir.join(name);
        fs::write(&path, contents)?;
        written.push(path);
    }
    Ok(written)
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::Infeasible { .. } | Error::Boundary { .. } => 3,
        _ => 1,
    }
}

/// Loads the config, applies overrides, runs and reports. Returns the exit code.
pub fn main_with(cli: Cli) -> u8 {
    let quiet = cli.quiet;
    let command = cli.command;
    match load_and_run(cli) {
        Ok((report, dir)) => {
            if !quiet {
                println!(
                    "{}: {} ({})",
                    command.as_str(),
                    if report.passed { "ok" } else { "CHECK FAILED" },
                    dir.display()
                );
            }
            if report.passed {
                0
            } else {
                4
            }
        }
        Err(e) => {
            eprintln!("drawdown-lab {}: {e}", command.as_str());
            exit_code(&e)
        }
    }
}

fn load_and_run(cli: Cli) -> Result<(Report, PathBuf)> {
    let (mut cfg, base) = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            (
                ScenarioConfig::from_toml_str(&text)?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            )
        }
        None => (ScenarioConfig::default(), PathBuf::new()),
    };
    if let Some(c) = cfg.command {
        if c != cli.command {
            return Err(config_error(
                "command",
                format!(
                    "config is for `{}` but `{}` was requested",
                    c.as_str(),
                    cli.command.as_str()
                ),
            ));
        }
    }
    if let Some(s) = cli.seed {
        cfg.run.seed = Some(s);
    }
    if let Some(n) = cli.paths {
        cfg.run.paths = n;
    }
    if let Some(o) = cli.out {
        cfg.run.out = Some(o);
    }
    let dir = cfg
        .run
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("drawdown-out"));
    let report = run(cli.command, &cfg, &base)?;
    emit_report(&report, &cfg, &dir)?;
    Ok((report, dir))
}

/// Dispatches one scenario. `base` resolves relative paths in the config.
pub fn run(command: CommandName, cfg: &ScenarioConfig, base: &Path) -> Result<Report> {
    match command {
        CommandName::EsssupDemo => esssup_demo(cfg),
        CommandName::TreeSolve => tree_solve(cfg, base, false),
        CommandName::Certify => tree_solve(cfg, base, true),
        CommandName::Riedel => riedel(cfg),
        CommandName::Envelope => envelope(cfg, base),
        CommandName::FloorMatch => floor_match(cfg, base),
        CommandName::ValueSurface => surface(cfg, base),
        CommandName::Selftest => selftest(cfg),
    }
}

fn load_tree(cfg: &ScenarioConfig, base: &Path) -> Result<(TreeModel, Deflator)> {
    let text = match &cfg.model.tree {
        Some(p) => fs::read_to_string(base.join(p))?,
        None => WORKED_TREE.to_string(),
    };
    let (tree, mut processes) = TreeModel::from_json_str(&text)?;
    let name = &cfg.model.deflator;
    let z = processes.remove(name).ok_or_else(|| {
        config_error(
            "model.deflator",
            format!("tree document has no process `{name}`"),
        )
    })?;
    let z = Deflator::new(&tree, z)
        .map_err(|e| config_error(&format!("processes.{name}"), e.to_string()))?;
    Ok((tree, z))
}

fn csv_row(out: &mut String, fields: &[String]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}

fn nodes_csv(tree: &TreeModel, c: &[f64], dual: &[f64], labels: &[&str]) -> String {
    let mut s = String::from("node_id,depth,c,dual,label\n");
    for u in 0..tree.len() {
        csv_row(
            &mut s,
            &[
                u.to_string(),
                tree.depth(u).to_string(),
                c[u].to_string(),
                dual[u].to_string(),
                labels[u].to_string(),
            ],
        );
    }
    s
}

fn tree_solve(cfg: &ScenarioConfig, base: &Path, certify: bool) -> Result<Report> {
    let (tree, z) = load_tree(cfg, base)?;
    let u = &cfg.utility;
    let (x, q, lambda) = (
        cfg.budget.x.unwrap_or(7.0),
        cfg.constraint.q,
        cfg.constraint.lambda,
    );
    let tol = cfg.run.tolerances;
    let sol = solve_primal_tree(&tree, &z, u, x, q, lambda)?;
    let regions = verify_foc_regions(&sol, &tree, &z, tol.regime_band)?;
    let labels: Vec<&str> = regions.labels.iter().map(|r| r.as_str()).collect();
    let dual: Vec<f64> = (0..tree.len())
        .map(|v| u.marginal(tree.time(v), sol.c[v]))
        .collect();
    let mut results = json!({
        "x": x, "q": q, "lambda": lambda,
        "c": sol.c, "y": sol.y, "utility": sol.u_hat,
        "iterations": sol.iterations, "dual_residual": sol.dual_residual,
        "complementarity": sol.complementarity, "polished": sol.polished,
        "alpha": z.alpha(&tree),
        "regions": {
            "labels": labels, "increase": regions.increase,
            "max_formula_residual": regions.max_formula_residual,
            "max_tail_violation": regions.max_tail_violation,
            "max_increase_gap": regions.max_increase_gap,
        },
    });
    let mut passed = true;
    let command = if certify {
        let cert = certify_duality(&sol, &tree, &z, tol.certificate)?;
        passed = cert.valid;
        results["certificate"] = json!({
            "valid": cert.valid, "y": cert.y, "r": cert.r_dual, "r_sufficient": cert.r_sufficient,
            "fenchel_gap": cert.fenchel_gap, "pairing": cert.pairing,
            "pairing_identity": cert.pairing_identity, "value_gap": cert.value_gap,
            "dual_value": cert.dual_value, "budget_gap": cert.budget_gap,
            "drawdown_violation": cert.drawdown_violation,
            "membership": cert.membership, "membership_residual": cert.membership_residual,
            "root_tail_delta_hat": tree.optional_projection(&cert.delta_hat.clone().into())?[0],
            "root_tail_yz": tree.optional_projection(&cert.y_z.clone().into())?[0],
        });
        CommandName::Certify
    } else {
        CommandName::TreeSolve
    };
    Ok(Report::new(command, passed, results)
        .file("nodes.csv", nodes_csv(&tree, &sol.c, &dual, &labels)))
}

fn envelope(cfg: &ScenarioConfig, base: &Path) -> Result<Report> {
    let (tree, z) = load_tree(cfg, base)?;
    let u = &cfg.utility;
    let q = cfg.constraint.q;
    let y = match cfg.budget.y {
        Some(y) => y,
        None => solve_primal_tree(&tree, &z, u, cfg.budget.x.unwrap_or(7.0), 0.0, 1.0)?.y,
    };
    let opts = LevelGridOptions {
        levels: cfg.run.tolerances.envelope_levels,
        ..Default::default()
    };
    let sweep = build_envelope_process(&tree, &z, u, y, &opts)?;
    let alt = alternative_solution(&tree, &z, u, y, q, &opts)?;
    let mut sweep_csv = String::from("level");
    for v in 0..tree.len() {
        let _ = write!(sweep_csv, ",stopped_{v}");
    }
    sweep_csv.push('\n');
    for r in &sweep.rules {
        let mut fields = vec![r.level.to_string()];
        fields.extend(r.stopped.iter().map(|&b| u8::from(b).to_string()));
        csv_row(&mut sweep_csv, &fields);
    }
    let labels: Vec<&str> = sweep
        .envelope
        .increase
        .iter()
        .map(|&i| if i { "increase" } else { "hold" })
        .collect();
    let dual: Vec<f64> = (0..tree.len())
        .map(|v| u.marginal(tree.time(v), alt.c[v]))
        .collect();
    let passed = alt.agrees && sweep.envelope.monotone;
    let results = json!({
        "y": y, "q": q, "levels": sweep.levels.len(), "eta": sweep.eta,
        "c_y": sweep.c.0, "c": alt.c.0, "x": alt.x,
        "primal": alt.primal, "primal_gap": alt.primal_gap, "agrees": alt.agrees,
        "envelope": {
            "lhs": sweep.envelope.lhs, "rhs": sweep.envelope.rhs,
            "increase": sweep.envelope.increase,
            "max_excess": sweep.envelope.max_excess,
            "max_equality_gap": sweep.envelope.max_equality_gap,
        },
    });
    Ok(Report::new(CommandName::Envelope, passed, results)
        .file("sweep.csv", sweep_csv)
        .file("nodes.csv", nodes_csv(&tree, &alt.c, &dual, &labels)))
}

fn floor_match(cfg: &ScenarioConfig, base: &Path) -> Result<Report> {
    let (tree, z) = load_tree(cfg, base)?;
    let u = &cfg.utility;
    let (x, q, lambda) = (
        cfg.budget.x.unwrap_or(7.0),
        cfg.constraint.q,
        cfg.constraint.lambda,
    );
    if !(q > 0.0) {
        return Err(config_error("constraint.q", "floor-match needs q > 0"));
    }
    if !(lambda > 0.0) {
        return Err(config_error(
            "constraint.lambda",
            "floor-match needs lambda > 0",
        ));
    }
    let m = match_floor_budget(&tree, &z, u, x, q, lambda)?;
    let direct = solve_primal_tree(&tree, &z, u, x, q, lambda)?;
    let lifted_u = expected_utility(&tree, u, &m.lift.c);
    let gap = (lifted_u - direct.u_hat).abs() / direct.u_hat.abs().max(1.0);
    let passed = gap <= cfg.run.tolerances.agreement;
    // Price curve on a geometric grid below the matched budget.
    let floor_cost = z.alpha(&tree) * lambda * q;
    let mut curve = Vec::new();
    for i in 0..20 {
        let xi = m.lift.x * 10f64.powf(-6.0 * i as f64 / 19.0);
        let p = floor_lift_at(&tree, &z, u, xi, q, lambda)?;
        curve.push(json!({ "x": xi, "price": p.price }));
    }
    let dual: Vec<f64> = (0..tree.len())
        .map(|v| u.marginal(tree.time(v), m.lift.c[v]))
        .collect();
    let labels: Vec<&str> = (0..tree.len())
        .map(|v| {
            if m.lift.c[v] > m.lift.unfloored[v] {
                "lifted"
            } else {
                "unfloored"
            }
        })
        .collect();
    let results = json!({
        "x_target": x, "q": q, "lambda": lambda, "x_unfloored": m.lift.x, "price": m.lift.price,
        "y_unfloored": m.lift.y, "iterations": m.iterations, "c": m.lift.c.0,
        "utility": lifted_u, "primal_utility": direct.u_hat, "utility_gap": gap,
        "primal_plan_gap": m.lift.c.max_abs_diff(&direct.plan()),
        "floor_cost": floor_cost, "price_curve": curve,
    });
    Ok(Report::new(CommandName::FloorMatch, passed, results)
        .file("nodes.csv", nodes_csv(&tree, &m.lift.c, &dual, &labels)))
}

fn surface(cfg: &ScenarioConfig, base: &Path) -> Result<Report> {
    let (tree, z) = load_tree(cfg, base)?;
    let s = value_surface(
        &tree,
        &z,
        &cfg.utility,
        &cfg.surface.xs,
        &cfg.surface.qs,
        cfg.constraint.lambda,
    )?;
    let mut csv = String::from("x,q,u,y,r,dual_value\n");
    for p in s.points.iter().flatten() {
        csv_row(
            &mut csv,
            &[p.x, p.q, p.u, p.y, p.r, p.dual_value]
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>(),
        );
    }
    let tol = cfg.run.tolerances.agreement;
    let passed = s.in_l_star && s.concavity_violation <= tol && s.monotonicity_violation <= tol;
    let results = json!({
        "lambda": s.lambda, "alpha": s.alpha, "xs": s.xs, "qs": s.qs,
        "concavity_violation": s.concavity_violation, "monotonicity_violation": s.monotonicity_violation,
        "in_l_star": s.in_l_star, "conjugacy_gap": s.conjugacy_gap,
    });
    Ok(Report::new(CommandName::ValueSurface, passed, results).file("surface.csv", csv))
}

fn riedel(cfg: &ScenarioConfig) -> Result<Report> {
    let mut spec = cfg
        .model
        .kernel
        .ok_or_else(|| config_error("model.kernel", "riedel needs a kernel block"))?;
    spec.seed = cfg.seed();
    let u = &cfg.utility;
    let opts = RiedelOptions {
        check_envelope: true,
        sample_paths: cfg.run.sample_paths,
    };
    let stats = RiedelStats::run(&spec, u, cfg.run.paths, &opts)?;
    let (plan, target) = match cfg.budget.y {
        Some(y) => (stats.plan_for_y(y)?, None),
        None => {
            let x = cfg.budget.x.unwrap_or(100.0);
            (stats.plan_for_budget(x)?, Some(x))
        }
    };
    let env = plan.envelope.expect("envelope requested");
    let budget_ok = target.is_none_or(|x| plan.matches_budget(x));
    let passed = env.holds(cfg.run.tolerances.envelope) && budget_ok;
    let mut csv = String::from("path,t,Z,running_inf,c,label\n");
    if let Some(s) = &plan.sample {
        let grid = s.z.frame().grid();
        for p in 0..s.z.scenarios() {
            let (zr, mr, cr) = (s.z.row(p), s.running_inf.row(p), s.c.row(p));
            for k in 0..zr.len() {
                let label = if k == 0 || mr[k] < mr[k - 1] {
                    "increase"
                } else {
                    "hold"
                };
                csv_row(
                    &mut csv,
                    &[
                        p.to_string(),
                        grid.left(k).to_string(),
                        zr[k].to_string(),
                        mr[k].to_string(),
                        cr[k].to_string(),
                        label.to_string(),
                    ],
                );
            }
        }
    }
    let results = json!({
        "kernel": spec, "paths": plan.n_paths, "exact": plan.exact,
        "K": plan.k, "y": plan.y, "I": plan.i, "I_se": plan.i_se,
        "budget": plan.budget, "budget_se": plan.budget_se, "budget_target": target,
        "budget_matched": budget_ok, "truncation": plan.truncation,
        "envelope": env, "clamps": plan.clamps,
    });
    Ok(Report::new(CommandName::Riedel, passed, results).file("paths.csv", csv))
}

fn esssup_demo(cfg: &ScenarioConfig) -> Result<Report> {
    let b = &cfg.esssup;
    let cells = b.values.first().map_or(0, Vec::len);
    if cells == 0 {
        return Err(config_error(
            "esssup.values",
            "need at least one non-empty path",
        ));
    }
    let grid = TimeGrid::uniform(cells, b.dt, Horizon::Finite)
        .map_err(|e| config_error("esssup.dt", e.to_string()))?;
    let clock = Clock::lebesgue(&grid);
    let frame = PanelFrame::equally_weighted(grid, clock, b.values.len())?;
    let c = PathPanel::new(frame.clone(), b.values.clone())?;
    let (lambda, q) = (cfg.constraint.lambda, cfg.constraint.q);
    let bar = running_esssup(&c);
    let incl = running_esssup_inclusive(&c);
    let inverse = DebutProfile::new(&c).generalized_inverse(&c)?;
    let round_trip = bar.rows().zip(inverse.rows()).all(|(a, b)| a == b);
    let report = check_drawdown(&c, lambda, q);
    let lifted = solid_hull_lift(&c, lambda, q);
    let lifted_ok = check_drawdown(&lifted, lambda, q).passed();
    let mut csv = String::from("path,cell,t,c,esssup,esssup_inclusive,lifted,constraint_ok\n");
    let grid = frame.grid();
    for s in 0..c.scenarios() {
        for k in 0..cells {
            csv_row(
                &mut csv,
                &[
                    s.to_string(),
                    k.to_string(),
                    grid.left(k).to_string(),
                    c.get(s, k).to_string(),
                    bar.get(s, k).to_string(),
                    incl.get(s, k).to_string(),
                    lifted.get(s, k).to_string(),
                    report.ok[s][k].to_string(),
                ],
            );
        }
    }
    let results = json!({
        "lambda": lambda, "q": q, "paths": c.scenarios(), "cells": cells,
        "inverse_round_trip": round_trip, "constraint_satisfied": report.passed(),
        "max_violation": report.max_violation, "lift_satisfies_constraint": lifted_ok,
    });
    Ok(
        Report::new(CommandName::EsssupDemo, round_trip && lifted_ok, results)
            .file("paths.csv", csv),
    )
}

/// Compact invariant suite; each entry is `(name, passed, detail)`.
pub fn selftest_checks(seed: u64) -> Result<Vec<(String, bool, Value)>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log = UtilityField::log();

    // Worked tree: closed form and certificate.
    let (t, z) = TreeModel::worked_example();
    let sol = solve_primal_tree(&t, &z, &log, 7.0, 0.0, 1.0)?;
    let cert = certify_duality(&sol, &t, &z, 1e-8)?;
    let err = sol
        .c
        .iter()
        .zip([3.0, 3.0, 7.0])
        .map(|(a, b)| (a - b).abs())
        .fold((sol.y - 2.0 / 7.0).abs(), f64::max);
    out.push((
        "worked tree closed form and certificate".into(),
        err <= 1e-6 && cert.valid,
        json!({ "max_error": err, "fenchel_gap": cert.fenchel_gap }),
    ));

    // Running esssup against the brute-force prefix maximum.
    let mut mismatches = 0;
    for _ in 0..200 {
        let cells = rng.random_range(1..=32);
        let grid = TimeGrid::uniform(cells, 1.0, Horizon::Finite)?;
        let frame = PanelFrame::equally_weighted(grid.clone(), Clock::lebesgue(&grid), 1)?;
        let row: Vec<f64> = (0..cells)
            .map(|_| f64::from(rng.random_range(0..8u8)))
            .collect();
        let c = PathPanel::new(frame, vec![row.clone()])?;
        let bar = running_esssup(&c);
        for k in 0..cells {
            let brute = row[..k].iter().copied().fold(0.0, f64::max);
            mismatches += usize::from(bar.get(0, k) != brute);
        }
    }
    out.push((
        "running esssup oracle".into(),
        mismatches == 0,
        json!({ "mismatches": mismatches }),
    ));

    // Chronological ordering against stopping-time enumeration.
    let mut disagreements = 0;
    for _ in 0..30 {
        let (t, _) = random_tree(&mut rng, &RandomTreeSpec::default());
        let d = random_process(&mut rng, &t, 0.0, 1.0);
        let dt = random_process(&mut rng, &t, 0.0, 1.0);
        let fast = t.chron_leq(&dt, &d, 1e-12)?.holds;
        disagreements += usize::from(fast != t.stopping_enumeration_check(&dt, &d)?);
    }
    out.push((
        "ordering oracle".into(),
        disagreements == 0,
        json!({ "disagreements": disagreements }),
    ));

    // Envelope route against the duality route.
    let mut worst: f64 = 0.0;
    let mut all_agree = true;
    for _ in 0..8 {
        let (t, z) = random_tree(
            &mut rng,
            &RandomTreeSpec {
                max_depth: 4,
                ..Default::default()
            },
        );
        let y = rng.random_range(0.2..2.0);
        let alt = alternative_solution(&t, &z, &log, y, 0.0, &LevelGridOptions::default())?;
        worst = worst.max(alt.primal_gap);
        all_agree &= alt.agrees;
    }
    out.push((
        "envelope vs duality".into(),
        all_agree,
        json!({ "max_plan_gap": worst }),
    ));

    // Three regimes on random trees.
    let mut max_res: f64 = 0.0;
    for lambda in [0.3, 0.7, 1.0] {
        for _ in 0..4 {
            let (t, z) = random_tree(&mut rng, &RandomTreeSpec::default());
            let x = rng.random_range(1.0..10.0);
            let sol = solve_primal_tree(&t, &z, &log, x, 0.0, lambda)?;
            let r = verify_foc_regions(&sol, &t, &z, 1e-7)?;
            max_res = max_res
                .max(r.max_formula_residual)
                .max(r.max_tail_violation)
                .max(r.max_increase_gap);
        }
    }
    out.push((
        "three-regime structure".into(),
        max_res <= 1e-6,
        json!({ "max_residual": max_res }),
    ));

    // Deterministic perpetuity.
    let spec = KernelSpec {
        t_max: Some(10.0),
        ..KernelSpec::gbm(0.0, 0.05, 0.05)
    };
    let stats = RiedelStats::run(
        &spec,
        &log,
        1,
        &RiedelOptions {
            check_envelope: true,
            sample_paths: 1,
        },
    )?;
    let plan = stats.plan_for_budget(20.0)?;
    let c0 = plan.sample.as_ref().map_or(f64::NAN, |s| s.c.get(0, 0));
    let perp_err = (c0 - 1.0).abs().max((plan.y - 1.0).abs());
    out.push((
        "deterministic perpetuity".into(),
        perp_err <= 1e-9,
        json!({ "error": perp_err }),
    ));

    // Kernel martingale property.
    let spec = KernelSpec {
        seed,
        ..KernelSpec::gbm(0.4, 0.05, 0.1)
    };
    let pts = martingale_check(&spec, 4000, &[1.0])?;
    out.push((
        "kernel martingale".into(),
        pts.iter().all(|p| p.within(3.0)),
        json!({ "mean": pts[0].mean, "se": pts[0].se }),
    ));
    Ok(out)
}

fn selftest(cfg: &ScenarioConfig) -> Result<Report> {
    let checks = selftest_checks(cfg.seed())?;
    let passed = checks.iter().all(|c| c.1);
    let list: Vec<Value> = checks
        .into_iter()
        .map(|(name, ok, detail)| json!({ "name": name, "passed": ok, "detail": detail }))
        .collect();
    Ok(Report::new(
        CommandName::Selftest,
        passed,
        json!({ "checks": list }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_errors_carry_paths() {
        let err = ScenarioConfig::from_toml_str("[constraint]\nlambda = \"one\"").unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "constraint.lambda"),
            e => panic!("{e}"),
        }
        let err = ScenarioConfig::from_toml_str("[run]\npathz = 3").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        let err = ScenarioConfig::from_toml_str("[constraint]\nlambda = 1.5").unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn parses_full_document() {
        let cfg = ScenarioConfig::from_toml_str(
            r#"
command = "riedel"
[model.kernel]
kind = "brownian"
theta = 0.4
rate = 0.05
delta_pref = 0.1
[utility]
kind = "crra"
gamma = 2.0
[budget]
x = 50.0
[run]
seed = 9
paths = 100
[run.tolerances]
envelope = 1e-8
"#,
        )
        .unwrap();
        assert_eq!(cfg.command, Some(CommandName::Riedel));
        assert_eq!(cfg.seed(), 9);
        assert_eq!(cfg.run.tolerances.certificate, 1e-8);
        assert_eq!(cfg.run.tolerances.envelope, 1e-8);
    }

    #[test]
    fn certify_default_fixture() {
        let r = run(
            CommandName::Certify,
            &ScenarioConfig::default(),
            Path::new(""),
        )
        .unwrap();
        assert!(r.passed);
        assert!(r.files["nodes.csv"].starts_with("node_id,depth,c,dual,label\n"));
    }

    #[test]
    fn boundary_budget_is_exit_three() {
        let mut cfg = ScenarioConfig::default();
        cfg.constraint.q = 3.0;
        cfg.budget.x = Some(6.0);
        let err = run(CommandName::TreeSolve, &cfg, Path::new("")).unwrap_err();
        assert_eq!(exit_code(&err), 3);
    }

    #[test]
    fn hash_tracks_config() {
        let a = ScenarioConfig::default();
        let mut b = a.clone();
        b.constraint.q = 1.0;
        assert_eq!(a.hash(), ScenarioConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        b.constraint.q = 0.0;
        b.run.out = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
