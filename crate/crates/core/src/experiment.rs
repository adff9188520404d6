//! Declarative experiment configs, sweep runners and their CSV/manifest output.
//!
//! A config names an experiment kind, a circuit (a JSON circuit file or one of
//! the built-in presets) and parameter lists. [`validate_config`] fills in the
//! per-kind defaults; [`run_experiment`] evaluates every sweep point and
//! returns the output files, which [`write_outputs`] stores atomically.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::circuit::{
    build_program, compile_circuit, CompiledCircuit, DynamicCircuit, Scheme, Segment,
};
use crate::circuit_file::{BuildOptions, CircuitFile};
use crate::coefficients::{
    adaptive_coefficients, depth_ratios, mve1_overhead_as_printed, mve_program_coefficients,
    runtime_cost, sampling_overhead, taylor_coefficients, CoefficientSet,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::magnus;
use crate::mitigation::{self, asymptote_operator_bias, echo_compiled, mitigate_compiled};
use crate::presets;
use crate::shots::{run_plan, DriftSchedule, ExecutionPlan, Policy, RxxTwirled};

/// Environment variable overriding the configured output directory.
pub const OUT_DIR_ENV: &str = "LKIK_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "out";
const BUILTIN_PREFIX: &str = "builtin:";
const MAX_LAYERS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    OrderSweep,
    LayerSweep,
    DynamicDemo,
    DriftDemo,
    GiVsKik,
    CostCompare,
}

impl ExperimentKind {
    pub fn label(&self) -> &'static str {
        match self {
            ExperimentKind::OrderSweep => "order-sweep",
            ExperimentKind::LayerSweep => "layer-sweep",
            ExperimentKind::DynamicDemo => "dynamic-demo",
            ExperimentKind::DriftDemo => "drift-demo",
            ExperimentKind::GiVsKik => "gi-vs-kik",
            ExperimentKind::CostCompare => "cost-compare",
        }
    }

    fn default_circuit(&self) -> Option<&'static str> {
        match self {
            ExperimentKind::OrderSweep | ExperimentKind::LayerSweep => Some("builtin:chain"),
            ExperimentKind::DynamicDemo => Some("builtin:feedforward-chain"),
            ExperimentKind::GiVsKik => Some("builtin:swap"),
            ExperimentKind::DriftDemo | ExperimentKind::CostCompare => None,
        }
    }

    fn default_xi(&self) -> Vec<f64> {
        match self {
            ExperimentKind::OrderSweep | ExperimentKind::LayerSweep => vec![0.02],
            ExperimentKind::DynamicDemo => vec![0.1],
            ExperimentKind::GiVsKik => vec![0.05],
            ExperimentKind::DriftDemo | ExperimentKind::CostCompare => Vec::new(),
        }
    }

    fn default_layers(&self) -> Vec<usize> {
        match self {
            ExperimentKind::OrderSweep => vec![1, 2, 5, 10],
            ExperimentKind::LayerSweep => (1..=20).collect(),
            ExperimentKind::DynamicDemo => vec![10],
            ExperimentKind::GiVsKik => vec![1],
            ExperimentKind::CostCompare => vec![1, 2, 3],
            ExperimentKind::DriftDemo => Vec::new(),
        }
    }

    fn default_orders(&self) -> Vec<usize> {
        match self {
            ExperimentKind::OrderSweep | ExperimentKind::DynamicDemo => (0..=8).collect(),
            ExperimentKind::LayerSweep => vec![7],
            ExperimentKind::DriftDemo => vec![2],
            ExperimentKind::GiVsKik => vec![0, 1, 2, 3],
            ExperimentKind::CostCompare => (1..=5).collect(),
        }
    }

    fn default_schemes(&self) -> Vec<Scheme> {
        match self {
            ExperimentKind::GiVsKik => vec![Scheme::Lkik, Scheme::GateInsertion],
            _ => vec![Scheme::Lkik],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientMode {
    Taylor,
    /// Adaptive weights with `g = μ²` from the circuit echo.
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftShape {
    Abrupt,
    Ramp,
}

/// Over-rotated gate sequence whose over-rotation angle changes mid-run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    #[serde(default = "DriftConfig::default_gates")]
    pub gates: usize,
    #[serde(default = "DriftConfig::default_n_hop")]
    pub n_hop: u64,
    #[serde(default = "DriftConfig::default_rounds")]
    pub rounds: u64,
    /// Over-rotation angle at the start of the run.
    #[serde(default = "DriftConfig::default_before")]
    pub before: f64,
    /// Over-rotation angle after the switch (or at the end of a ramp).
    #[serde(default = "DriftConfig::default_after")]
    pub after: f64,
    #[serde(default = "DriftConfig::default_shape")]
    pub shape: DriftShape,
    /// Fraction of the run at which an abrupt drift happens.
    #[serde(default = "DriftConfig::default_switch")]
    pub switch_fraction: f64,
    #[serde(default = "DriftConfig::default_policies")]
    pub policies: Vec<Policy>,
}

impl DriftConfig {
    fn default_gates() -> usize {
        4
    }
    fn default_n_hop() -> u64 {
        20
    }
    fn default_rounds() -> u64 {
        200
    }
    fn default_before() -> f64 {
        0.3
    }
    fn default_after() -> f64 {
        0.5
    }
    fn default_shape() -> DriftShape {
        DriftShape::Abrupt
    }
    fn default_switch() -> f64 {
        0.5
    }
    fn default_policies() -> Vec<Policy> {
        vec![Policy::Hopping, Policy::Sequential]
    }

    /// Schedule covering exactly `total` shots.
    pub fn schedule(&self, total: u64) -> DriftSchedule {
        match self.shape {
            DriftShape::Abrupt => {
                let at = (self.switch_fraction * total as f64).round() as u64;
                DriftSchedule::abrupt(total, at, vec![self.before], vec![self.after])
            }
            DriftShape::Ramp => DriftSchedule::ramp(total, vec![self.before], vec![self.after]),
        }
    }
}

impl Default for DriftConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("drift defaults")
    }
}

/// Experiment description. Every optional field is filled by
/// [`ExperimentConfig::normalize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Base name of the output files.
    #[serde(default)]
    pub name: Option<String>,
    /// Circuit file path (relative to the config file) or `builtin:<name>`.
    #[serde(default)]
    pub circuit: Option<String>,
    /// Noise rates; every dissipator rate in the circuit is replaced.
    #[serde(default)]
    pub xi: Option<Vec<f64>>,
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub orders: Option<Vec<usize>>,
    #[serde(default)]
    pub schemes: Option<Vec<Scheme>>,
    #[serde(default)]
    pub coefficients: Option<CoefficientMode>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub drift: Option<DriftConfig>,
    #[serde(default)]
    pub output: Option<String>,
    /// Directory used to resolve relative circuit paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let (line, col) = (e.line(), e.column());
            Error::config(format!("line {line}, column {col}"), e.to_string())
        })
    }

    /// Minimal config of the given kind with everything else defaulted.
    pub fn of_kind(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            name: None,
            circuit: None,
            xi: None,
            layers: None,
            orders: None,
            schemes: None,
            coefficients: None,
            seeds: None,
            drift: None,
            output: None,
            base_dir: PathBuf::from("."),
        }
    }

    /// Fills defaults and checks every field. Idempotent.
    pub fn normalize(mut self) -> Result<Self> {
        let kind = self.kind;
        let uses_circuit = kind.default_circuit().is_some();
        let is_drift = kind == ExperimentKind::DriftDemo;
        if !uses_circuit && self.circuit.is_some() {
            return Err(Error::config(
                "circuit",
                format!("{} does not use a circuit", kind.label()),
            ));
        }
        if is_drift {
            if self.xi.is_some() || self.layers.is_some() {
                return Err(Error::config(
                    "xi",
                    "drift-demo takes its noise from `drift`",
                ));
            }
        } else if self.drift.is_some() {
            return Err(Error::config(
                "drift",
                format!("{} does not use `drift`", kind.label()),
            ));
        }
        if kind == ExperimentKind::CostCompare && self.xi.is_some() {
            return Err(Error::config(
                "xi",
                "cost-compare does not depend on the noise rate",
            ));
        }
        self.name.get_or_insert_with(|| kind.label().to_string());
        if self.circuit.is_none() {
            self.circuit = kind.default_circuit().map(str::to_string);
        }
        if self.xi.is_none() && !kind.default_xi().is_empty() {
            self.xi = Some(kind.default_xi());
        }
        if self.layers.is_none() && !kind.default_layers().is_empty() {
            self.layers = Some(kind.default_layers());
        }
        self.orders.get_or_insert_with(|| kind.default_orders());
        self.schemes.get_or_insert_with(|| kind.default_schemes());
        self.coefficients.get_or_insert(CoefficientMode::Taylor);
        if is_drift {
            self.seeds.get_or_insert_with(|| (1..=200).collect());
            self.drift.get_or_insert_with(DriftConfig::default);
        }
        self.output
            .get_or_insert_with(|| DEFAULT_OUT_DIR.to_string());
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        let name = self.name.as_deref().unwrap_or_default();
        if name.is_empty()
            || !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(Error::config(
                "name",
                format!("`{name}` is not a plain file stem"),
            ));
        }
        if let Some(xi) = &self.xi {
            if xi.is_empty() {
                return Err(Error::config("xi", "list is empty"));
            }
            if let Some((k, v)) = xi
                .iter()
                .enumerate()
                .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
            {
                return Err(Error::config(
                    format!("xi[{k}]"),
                    format!("rate {v} must be finite and non-negative"),
                ));
            }
        }
        if let Some(layers) = &self.layers {
            if layers.is_empty() {
                return Err(Error::config("layers", "list is empty"));
            }
            if let Some((k, l)) = layers
                .iter()
                .enumerate()
                .find(|(_, l)| **l == 0 || **l > MAX_LAYERS)
            {
                return Err(Error::config(
                    format!("layers[{k}]"),
                    format!("{l} is outside 1..={MAX_LAYERS}"),
                ));
            }
        }
        let orders = self.orders.as_deref().unwrap_or_default();
        if orders.is_empty() {
            return Err(Error::config("orders", "list is empty"));
        }
        let schemes = self.schemes.as_deref().unwrap_or_default();
        if schemes.is_empty() {
            return Err(Error::config("schemes", "list is empty"));
        }
        match self.kind {
            ExperimentKind::DynamicDemo => {
                if let Some(s) = schemes
                    .iter()
                    .find(|s| matches!(s, Scheme::Gkik | Scheme::Mve))
                {
                    return Err(Error::config(
                        "schemes",
                        format!("{} cannot cross mid-circuit measurements", s.label()),
                    ));
                }
            }
            ExperimentKind::DriftDemo | ExperimentKind::CostCompare => {
                if schemes != [Scheme::Lkik] {
                    return Err(Error::config(
                        "schemes",
                        format!("{} has a fixed scheme set", self.kind.label()),
                    ));
                }
            }
            _ => {}
        }
        if self.coefficients == Some(CoefficientMode::Adaptive)
            && matches!(
                self.kind,
                ExperimentKind::DriftDemo | ExperimentKind::CostCompare
            )
        {
            return Err(Error::config(
                "coefficients",
                "adaptive weights need a simulated echo",
            ));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                return Err(Error::config("seeds", "list is empty"));
            }
        }
        if let Some(d) = &self.drift {
            if d.gates == 0 || d.n_hop == 0 || d.rounds == 0 {
                return Err(Error::config(
                    "drift",
                    "gates, n_hop and rounds must be positive",
                ));
            }
            if !(0.0..=1.0).contains(&d.switch_fraction) {
                return Err(Error::config("drift.switch_fraction", "must lie in [0, 1]"));
            }
            if d.policies.is_empty() {
                return Err(Error::config("drift.policies", "list is empty"));
            }
            if !(d.before.is_finite() && d.after.is_finite()) {
                return Err(Error::config("drift", "angles must be finite"));
            }
        }
        if let Some(c) = &self.circuit {
            CircuitSource::resolve(c, &self.base_dir)?;
        }
        Ok(())
    }

    /// Output directory: explicit argument, then the environment, then the
    /// config.
    pub fn output_dir(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        PathBuf::from(self.output.as_deref().unwrap_or(DEFAULT_OUT_DIR))
    }

    /// SHA-256 of the normalized config.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }

    fn xi(&self) -> &[f64] {
        self.xi.as_deref().unwrap_or_default()
    }
    fn layers(&self) -> &[usize] {
        self.layers.as_deref().unwrap_or_default()
    }
    fn orders(&self) -> &[usize] {
        self.orders.as_deref().unwrap_or_default()
    }
    fn schemes(&self) -> &[Scheme] {
        self.schemes.as_deref().unwrap_or_default()
    }
    fn mode(&self) -> CoefficientMode {
        self.coefficients.unwrap_or(CoefficientMode::Taylor)
    }
}

/// Reads, parses and normalizes a config file.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    cfg.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    cfg.normalize()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Where circuits for a sweep come from.
#[derive(Clone, Debug)]
pub enum CircuitSource {
    Builtin(Builtin),
    File {
        path: PathBuf,
        file: CircuitFile,
        sha256: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Builtin {
    Chain,
    FeedforwardChain,
    Swap,
}

impl CircuitSource {
    pub fn resolve(spec: &str, base_dir: &Path) -> Result<Self> {
        if let Some(name) = spec.strip_prefix(BUILTIN_PREFIX) {
            let b = match name {
                "chain" => Builtin::Chain,
                "feedforward-chain" => Builtin::FeedforwardChain,
                "swap" => Builtin::Swap,
                other => {
                    return Err(Error::config(
                        "circuit",
                        format!("unknown built-in circuit `{other}`"),
                    ))
                }
            };
            return Ok(CircuitSource::Builtin(b));
        }
        let path = base_dir.join(spec);
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::config("circuit", format!("cannot read {}: {e}", path.display()))
        })?;
        let file = CircuitFile::from_json(&text)
            .map_err(|e| Error::config(format!("circuit {spec}"), e.to_string()))?;
        // Build once so malformed Pauli strings and gates surface here.
        file.build(&BuildOptions::default()).map_err(|e| match e {
            Error::Config { field, msg } => Error::config(format!("{spec}: {field}"), msg),
            other => Error::config(format!("circuit {spec}"), other.to_string()),
        })?;
        let sha256 = hex(&Sha256::digest(text.as_bytes()));
        Ok(CircuitSource::File { path, file, sha256 })
    }

    /// The circuit at noise rate `xi` split into `l` layers.
    pub fn build(&self, xi: f64, l: usize, without_measurements: bool) -> Result<DynamicCircuit> {
        match self {
            CircuitSource::Builtin(Builtin::Chain) => presets::chain_circuit(xi, l),
            CircuitSource::Builtin(Builtin::FeedforwardChain) => {
                if without_measurements {
                    presets::chain_circuit(xi, l)
                } else {
                    presets::feedforward_chain(xi, l)
                }
            }
            CircuitSource::Builtin(Builtin::Swap) => {
                let mut circ = presets::swap_circuit(xi)?;
                let slice = circ.layers[0].split_uniform(l)?.remove(0);
                circ.layers = vec![slice];
                circ.segments = vec![Segment::Layer(0); l];
                Ok(circ)
            }
            CircuitSource::File { file, .. } => file.build(&BuildOptions {
                rate: Some(xi),
                split: Some(l),
                without_measurements,
            }),
        }
    }

    pub fn sha256(&self) -> Option<&str> {
        match self {
            CircuitSource::File { sha256, .. } => Some(sha256),
            CircuitSource::Builtin(_) => None,
        }
    }
}

/// Progress notification, sent once per finished sweep point.
#[derive(Clone, Debug)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
    pub point: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ExperimentKind,
    pub name: String,
    pub version: String,
    pub config_sha256: String,
    pub circuit_sha256: Option<String>,
    pub seeds: Vec<u64>,
    pub rows: usize,
    pub csv: String,
    pub csv_sha256: String,
    pub config: ExperimentConfig,
    /// Kind-specific digest of the results.
    pub summary: serde_json::Value,
}

/// Files produced by one run, not yet written.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub name: String,
    pub csv: Vec<u8>,
    pub manifest: Manifest,
}

impl ExperimentOutput {
    pub fn csv_name(&self) -> String {
        format!("{}.csv", self.name)
    }
    pub fn manifest_name(&self) -> String {
        format!("{}.manifest.json", self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub xi: f64,
    pub layers: usize,
    pub scheme: Scheme,
    pub order: usize,
    pub unmitigated: f64,
    pub mitigated: f64,
    pub ideal: f64,
    pub delta: f64,
    pub abs_delta: f64,
    pub gamma: f64,
    pub mu: Option<f64>,
    pub asymptote: Option<f64>,
    pub asymptote_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub xi: f64,
    pub layers: usize,
    pub scheme: Scheme,
    pub order: usize,
    pub mitigated: f64,
    pub ideal: f64,
    pub delta: f64,
    pub abs_delta: f64,
    pub scaled_abs_delta: f64,
    pub asymptote_delta: f64,
    pub operator_bias: f64,
    pub bound: f64,
    pub thin_layer_prediction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicRow {
    pub variant: String,
    pub xi: f64,
    pub layers: usize,
    pub scheme: Scheme,
    pub order: usize,
    pub unmitigated: f64,
    pub mitigated: f64,
    pub ideal: f64,
    pub delta: f64,
    pub abs_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub policy: Policy,
    pub order: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub n_hop: u64,
    pub rounds: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GiRow {
    pub xi: f64,
    pub layers: usize,
    pub scheme: Scheme,
    pub order: usize,
    pub unmitigated: f64,
    pub mitigated: f64,
    pub ideal: f64,
    pub delta: f64,
    pub abs_delta: f64,
    pub gamma: f64,
    pub warnings: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub layers: usize,
    pub order: usize,
    pub method: String,
    pub entries: usize,
    pub gamma: f64,
    pub gamma2: f64,
    pub mean_depth: f64,
    pub runtime_cost: f64,
    pub gamma_as_printed: Option<f64>,
}

/// One point of the Magnus scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnusRow {
    #[serde(rename = "L")]
    pub layers: usize,
    pub xi: f64,
    pub measured_bias: f64,
    pub operator_bias: f64,
    pub bound: f64,
    pub thin_layer_prediction: f64,
}

/// Serializes rows as CSV with a header line.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Structural(format!("csv: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::Structural(format!("csv: {e}")))
}

fn coefficient_set(mode: CoefficientMode, order: usize, mu: Option<f64>) -> Result<CoefficientSet> {
    match (mode, mu) {
        (CoefficientMode::Taylor, _) => taylor_coefficients(order),
        (CoefficientMode::Adaptive, Some(mu)) => adaptive_coefficients(order, (mu * mu).min(1.0)),
        (CoefficientMode::Adaptive, None) => {
            Err(Error::Structural("adaptive weights need the echo".into()))
        }
    }
}

fn scheme_coefficients(
    scheme: Scheme,
    mode: CoefficientMode,
    order: usize,
    layers: usize,
    mu: Option<f64>,
) -> Result<CoefficientSet> {
    match scheme {
        Scheme::Mve => mve_program_coefficients(layers, order),
        _ => coefficient_set(mode, order, mu),
    }
}

struct Tracker<'a> {
    done: AtomicUsize,
    total: usize,
    report: &'a (dyn Fn(&Progress) + Sync),
}

impl Tracker<'_> {
    fn tick(&self, point: String) {
        let done = self.done.fetch_add(1, Ordering::SeqCst) + 1;
        (self.report)(&Progress {
            done,
            total: self.total,
            point,
        });
    }
}

/// Runs every point of the experiment. Deterministic given the config.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    progress: &(dyn Fn(&Progress) + Sync),
) -> Result<ExperimentOutput> {
    let cfg = cfg.clone().normalize()?;
    let source = match &cfg.circuit {
        Some(c) => Some(CircuitSource::resolve(c, &cfg.base_dir)?),
        None => None,
    };
    let (csv, rows, summary) = match cfg.kind {
        ExperimentKind::OrderSweep => {
            let rows = order_sweep(&cfg, source.as_ref().expect("circuit"), progress)?;
            let summary = serde_json::json!({ "points": rows.len() });
            (to_csv(&rows)?, rows.len(), summary)
        }
        ExperimentKind::LayerSweep => {
            let rows = layer_sweep(&cfg, source.as_ref().expect("circuit"), progress)?;
            let summary = layer_summary(&rows);
            (to_csv(&rows)?, rows.len(), summary)
        }
        ExperimentKind::DynamicDemo => {
            let rows = dynamic_demo(&cfg, source.as_ref().expect("circuit"), progress)?;
            let summary = serde_json::json!({ "points": rows.len() });
            (to_csv(&rows)?, rows.len(), summary)
        }
        ExperimentKind::DriftDemo => {
            let rows = drift_demo(&cfg, progress)?;
            let summary = serde_json::to_value(drift_summary(&rows))?;
            (to_csv(&rows)?, rows.len(), summary)
        }
        ExperimentKind::GiVsKik => {
            let rows = gi_vs_kik(&cfg, source.as_ref().expect("circuit"), progress)?;
            let summary = serde_json::json!({ "points": rows.len() });
            (to_csv(&rows)?, rows.len(), summary)
        }
        ExperimentKind::CostCompare => {
            let rows = cost_compare(&cfg)?;
            progress(&Progress {
                done: rows.len(),
                total: rows.len(),
                point: "coefficients".into(),
            });
            let summary = serde_json::json!({ "points": rows.len() });
            (to_csv(&rows)?, rows.len(), summary)
        }
    };
    let name = cfg.name.clone().expect("normalized name");
    let manifest = Manifest {
        kind: cfg.kind,
        name: name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: cfg.hash(),
        circuit_sha256: source.as_ref().and_then(|s| s.sha256().map(str::to_string)),
        seeds: cfg.seeds.clone().unwrap_or_default(),
        rows,
        csv: format!("{name}.csv"),
        csv_sha256: hex(&Sha256::digest(&csv)),
        config: cfg,
        summary,
    };
    Ok(ExperimentOutput {
        name,
        csv,
        manifest,
    })
}

/// Writes the CSV and manifest into `dir`, each through a temporary file and
/// a rename so readers never see partial output.
pub fn write_outputs(dir: &Path, out: &ExperimentOutput) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::to_vec_pretty(&out.manifest)?;
    let files = [(out.csv_name(), &out.csv), (out.manifest_name(), &manifest)];
    files
        .iter()
        .map(|(name, bytes)| write_atomic(&dir.join(name), bytes))
        .collect()
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let file = path
        .file_name()
        .ok_or_else(|| Error::Structural(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file.to_string_lossy()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(path.to_path_buf())
}

/// Cartesian product of ξ and L, the unit of parallel dispatch.
fn grid(cfg: &ExperimentConfig) -> Vec<(f64, usize)> {
    cfg.xi()
        .iter()
        .flat_map(|&x| cfg.layers().iter().map(move |&l| (x, l)))
        .collect()
}

fn point(xi: f64, l: usize) -> String {
    format!("xi={xi}, L={l}")
}

fn flatten<T>(groups: Vec<Result<Vec<T>>>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for g in groups {
        out.extend(g?);
    }
    Ok(out)
}

fn order_sweep(
    cfg: &ExperimentConfig,
    source: &CircuitSource,
    progress: &(dyn Fn(&Progress) + Sync),
) -> Result<Vec<OrderRow>> {
    let pts = grid(cfg);
    let track = Tracker {
        done: AtomicUsize::new(0),
        total: pts.len() * cfg.schemes().len(),
        report: progress,
    };
    let groups = exec::par_map(&pts, |&(xi, l)| -> Result<Vec<OrderRow>> {
        let at = point(xi, l);
        let circ = source.build(xi, l, false).map_err(|e| e.at(at.clone()))?;
        let compiled = compile_circuit(&circ).map_err(|e| e.at(at.clone()))?;
        let mu = match cfg.mode() {
            CoefficientMode::Adaptive => {
                Some(echo_compiled(&circ, &compiled).map_err(|e| e.at(at.clone()))?)
            }
            CoefficientMode::Taylor => None,
        };
        let raw = unmitigated(&circ, &compiled).map_err(|e| e.at(at.clone()))?;
        let mut rows = Vec::new();
        for &scheme in cfg.schemes() {
            let at = format!("{at}, scheme={}", scheme.label());
            let asym = match scheme {
                Scheme::Gkik => Some(mitigation::gkik_asymptote_compiled(&circ, &compiled)),
                Scheme::Lkik => Some(mitigation::lkik_asymptote_compiled(&circ, &compiled)),
                Scheme::GateInsertion | Scheme::Mve => None,
            }
            .transpose()
            .map_err(|e| e.at(at.clone()))?;
            for &m in cfg.orders() {
                let at = format!("{at}, M={m}");
                let coeffs = scheme_coefficients(scheme, cfg.mode(), m, l, mu)
                    .map_err(|e| e.at(at.clone()))?;
                let r = mitigate_compiled(&circ, &compiled, &coeffs, scheme)
                    .map_err(|e| e.at(at.clone()))?;
                let ideal = r.ideal.expect("ideal value");
                rows.push(OrderRow {
                    xi,
                    layers: l,
                    scheme,
                    order: m,
                    unmitigated: raw,
                    mitigated: r.mitigated,
                    ideal,
                    delta: r.mitigated - ideal,
                    abs_delta: (r.mitigated - ideal).abs(),
                    gamma: r.gamma,
                    mu,
                    asymptote: asym.as_ref().map(|a| a.value),
                    asymptote_delta: asym.as_ref().map(|a| a.delta),
                });
            }
            track.tick(at);
        }
        Ok(rows)
    });
    flatten(groups)
}

fn unmitigated(circ: &DynamicCircuit, compiled: &CompiledCircuit) -> Result<f64> {
    let v = crate::circuit::propagate(
        circ,
        compiled,
        crate::circuit::LayerMode::Noisy,
        &circ.initial_state.entries,
    )?;
    mitigation::value_of(circ, &v)
}

/// Asymptote bias, operator bias, bound and thin-layer prediction for one
/// layered, measurement-free circuit.
pub fn magnus_point(
    circ: &DynamicCircuit,
    compiled: &CompiledCircuit,
    xi: f64,
) -> Result<MagnusRow> {
    let asym = mitigation::lkik_asymptote_compiled(circ, compiled)?;
    let op = asym
        .superop
        .as_ref()
        .ok_or_else(|| Error::Structural("bias scan needs a measurement-free circuit".into()))?;
    Ok(MagnusRow {
        layers: circ.top_level_layers().len(),
        xi,
        measured_bias: asym.delta.abs(),
        operator_bias: asymptote_operator_bias(circ, compiled, op),
        bound: magnus::bias_bound(circ)?,
        thin_layer_prediction: magnus::thin_layer_bias_prediction(circ, compiled)?,
    })
}

/// Magnus scan over layer counts for a circuit source.
pub fn magnus_scan(source: &CircuitSource, xi: f64, layers: &[usize]) -> Result<Vec<MagnusRow>> {
    exec::try_par_map(layers, |&l| {
        let at = point(xi, l);
        let circ = source.build(xi, l, true).map_err(|e| e.at(at.clone()))?;
        let compiled = compile_circuit(&circ).map_err(|e| e.at(at.clone()))?;
        magnus_point(&circ, &compiled, xi).map_err(|e| e.at(at))
    })
}

fn layer_sweep(
    cfg: &ExperimentConfig,
    source: &CircuitSource,
    progress: &(dyn Fn(&Progress) + Sync),
) -> Result<Vec<LayerRow>> {
    let pts = grid(cfg);
    let track = Tracker {
        done: AtomicUsize::new(0),
        total: pts.len(),
        report: progress,
    };
    let groups = exec::par_map(&pts, |&(xi, l)| -> Result<Vec<LayerRow>> {
        let at = point(xi, l);
        let circ = source.build(xi, l, false).map_err(|e| e.at(at.clone()))?;
        let compiled = compile_circuit(&circ).map_err(|e| e.at(at.clone()))?;
        let mag = magnus_point(&circ, &compiled, xi).map_err(|e| e.at(at.clone()))?;
        let mu = match cfg.mode() {
            CoefficientMode::Adaptive => {
                Some(echo_compiled(&circ, &compiled).map_err(|e| e.at(at.clone()))?)
            }
            CoefficientMode::Taylor => None,
        };
        let mut rows = Vec::new();
        for &scheme in cfg.schemes() {
            for &m in cfg.orders() {
                let at = format!("{at}, scheme={}, M={m}", scheme.label());
                let coeffs = scheme_coefficients(scheme, cfg.mode(), m, l, mu)
                    .map_err(|e| e.at(at.clone()))?;
                let r = mitigate_compiled(&circ, &compiled, &coeffs, scheme)
                    .map_err(|e| e.at(at.clone()))?;
                let ideal = r.ideal.expect("ideal value");
                let delta = r.mitigated - ideal;
                rows.push(LayerRow {
                    xi,
                    layers: l,
                    scheme,
                    order: m,
                    mitigated: r.mitigated,
                    ideal,
                    delta,
                    abs_delta: delta.abs(),
                    scaled_abs_delta: delta.abs() * (l * l) as f64,
                    asymptote_delta: mag.measured_bias,
                    operator_bias: mag.operator_bias,
                    bound: mag.bound,
                    thin_layer_prediction: mag.thin_layer_prediction,
                });
            }
        }
        track.tick(at);
        Ok(rows)
    });
    flatten(groups)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

fn layer_summary(rows: &[LayerRow]) -> serde_json::Value {
    let mut groups: Vec<((u64, Scheme, usize), Vec<&LayerRow>)> = Vec::new();
    for r in rows {
        let key = (r.xi.to_bits(), r.scheme, r.order);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let fits: Vec<serde_json::Value> = groups
        .iter()
        .filter(|(_, v)| v.len() >= 2 && v.iter().all(|r| r.abs_delta > 0.0))
        .map(|((xi, scheme, order), v)| {
            let x: Vec<f64> = v.iter().map(|r| r.layers as f64).collect();
            let y: Vec<f64> = v.iter().map(|r| r.abs_delta).collect();
            serde_json::json!({
                "xi": f64::from_bits(*xi),
                "scheme": scheme,
                "order": order,
                "log_log_slope": log_log_slope(&x, &y),
            })
        })
        .collect();
    serde_json::json!({ "points": rows.len(), "fits": fits })
}

fn dynamic_demo(
    cfg: &ExperimentConfig,
    source: &CircuitSource,
    progress: &(dyn Fn(&Progress) + Sync),
) -> Result<Vec<DynamicRow>> {
    let variants = [("feedforward", false), ("unitary", true)];
    let pts: Vec<(f64, usize, &str, bool)> = grid(cfg)
        .into_iter()
        .flat_map(|(x, l)| {
            variants
                .iter()
                .map(move |&(name, plain)| (x, l, name, plain))
        })
        .collect();
    let track = Tracker {
        done: AtomicUsize::new(0),
        total: pts.len(),
        report: progress,
    };
    let groups = exec::par_map(&pts, |&(xi, l, name, plain)| -> Result<Vec<DynamicRow>> {
        let at = format!("{}, variant={name}", point(xi, l));
        let circ = source.build(xi, l, plain).map_err(|e| e.at(at.clone()))?;
        let compiled = compile_circuit(&circ).map_err(|e| e.at(at.clone()))?;
        let mu = match cfg.mode() {
            CoefficientMode::Adaptive => {
                Some(echo_compiled(&circ, &compiled).map_err(|e| e.at(at.clone()))?)
            }
            CoefficientMode::Taylor => None,
        };
        let raw = unmitigated(&circ, &compiled).map_err(|e| e.at(at.clone()))?;
        let mut rows = Vec::new();
        for &scheme in cfg.schemes() {
            for &m in cfg.orders() {
                let at = format!("{at}, scheme={}, M={m}", scheme.label());
                let coeffs = coefficient_set(cfg.mode(), m, mu).map_err(|e| e.at(at.clone()))?;
                let r = mitigate_compiled(&circ, &compiled, &coeffs, scheme)
                    .map_err(|e| e.at(at.clone()))?;
                let ideal = r.ideal.expect("ideal value");
                rows.push(DynamicRow {
                    variant: name.to_string(),
                    xi,
                    layers: l,
                    scheme,
                    order: m,
                    unmitigated: raw,
                    mitigated: r.mitigated,
                    ideal,
                    delta: r.mitigated - ideal,
                    abs_delta: (r.mitigated - ideal).abs(),
                });
            }
        }
        track.tick(at);
        Ok(rows)
    });
    flatten(groups)
}

/// Drift rows for every (policy, order, seed).
pub fn drift_rows(
    drift: &DriftConfig,
    orders: &[usize],
    seeds: &[u64],
    progress: &(dyn Fn(&Progress) + Sync),
) -> Result<Vec<DriftRow>> {
    let family = RxxTwirled::new(drift.gates)?;
    let mut pts = Vec::new();
    for &policy in &drift.policies {
        for &m in orders {
            for &seed in seeds {
                pts.push((policy, m, seed));
            }
        }
    }
    let track = Tracker {
        done: AtomicUsize::new(0),
        total: pts.len(),
        report: progress,
    };
    exec::try_par_map(&pts, |&(policy, m, seed)| {
        let at = format!("policy={}, M={m}, seed={seed}", policy.label());
        let coeffs = taylor_coefficients(m).map_err(|e| e.at(at.clone()))?;
        let plan = ExecutionPlan {
            policy,
            n_hop: drift.n_hop,
            rounds: drift.rounds,
            levels: (0..=m as u32).collect(),
            seed,
        };
        let schedule = drift.schedule(plan.total_shots());
        let r = run_plan(&family, &schedule, &plan, &coeffs).map_err(|e| e.at(at.clone()))?;
        track.tick(at);
        Ok(DriftRow {
            policy,
            order: m,
            estimate: r.estimate,
            stderr: r.stderr,
            n_hop: r.n_hop,
            rounds: r.rounds,
            seed,
        })
    })
}

fn drift_demo(
    cfg: &ExperimentConfig,
    progress: &(dyn Fn(&Progress) + Sync),
) -> Result<Vec<DriftRow>> {
    let drift = cfg.drift.clone().unwrap_or_default();
    drift_rows(
        &drift,
        cfg.orders(),
        cfg.seeds.as_deref().unwrap_or_default(),
        progress,
    )
}

/// Replicate statistics for one (policy, order) group of drift rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub policy: Policy,
    pub order: usize,
    pub replicates: usize,
    pub mean: f64,
    /// Spread of single-replicate estimates.
    pub replicate_std: f64,
    pub mean_stderr: f64,
    /// `(mean − 1) / replicate_std`.
    pub z_single: f64,
}

pub fn drift_summary(rows: &[DriftRow]) -> Vec<DriftSummary> {
    let mut keys: Vec<(Policy, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.policy, r.order)) {
            keys.push((r.policy, r.order));
        }
    }
    keys.into_iter()
        .map(|(policy, order)| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.policy == policy && r.order == order)
                .map(|r| r.estimate)
                .collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let std = var.sqrt();
            DriftSummary {
                policy,
                order,
                replicates: v.len(),
                mean,
                replicate_std: std,
                mean_stderr: std / n.sqrt(),
                z_single: if std > 0.0 {
                    (mean - 1.0) / std
                } else {
                    f64::NAN
                },
            }
        })
        .collect()
}

fn gi_vs_kik(
    cfg: &ExperimentConfig,
    source: &CircuitSource,
    progress: &(dyn Fn(&Progress) + Sync),
) -> Result<Vec<GiRow>> {
    let pts = grid(cfg);
    let track = Tracker {
        done: AtomicUsize::new(0),
        total: pts.len(),
        report: progress,
    };
    let groups = exec::par_map(&pts, |&(xi, l)| -> Result<Vec<GiRow>> {
        let at = point(xi, l);
        let circ = source.build(xi, l, false).map_err(|e| e.at(at.clone()))?;
        let compiled = compile_circuit(&circ).map_err(|e| e.at(at.clone()))?;
        let mu = match cfg.mode() {
            CoefficientMode::Adaptive => {
                Some(echo_compiled(&circ, &compiled).map_err(|e| e.at(at.clone()))?)
            }
            CoefficientMode::Taylor => None,
        };
        let raw = unmitigated(&circ, &compiled).map_err(|e| e.at(at.clone()))?;
        let mut rows = Vec::new();
        for &scheme in cfg.schemes() {
            for &m in cfg.orders() {
                let at = format!("{at}, scheme={}, M={m}", scheme.label());
                let coeffs = scheme_coefficients(scheme, cfg.mode(), m, l, mu)
                    .map_err(|e| e.at(at.clone()))?;
                let warnings = build_program(&circ, &coeffs, scheme)
                    .map_err(|e| e.at(at.clone()))?
                    .warnings;
                let r = mitigate_compiled(&circ, &compiled, &coeffs, scheme)
                    .map_err(|e| e.at(at.clone()))?;
                let ideal = r.ideal.expect("ideal value");
                rows.push(GiRow {
                    xi,
                    layers: l,
                    scheme,
                    order: m,
                    unmitigated: raw,
                    mitigated: r.mitigated,
                    ideal,
                    delta: r.mitigated - ideal,
                    abs_delta: (r.mitigated - ideal).abs(),
                    gamma: r.gamma,
                    warnings: warnings.join("; "),
                });
            }
        }
        track.tick(at);
        Ok(rows)
    });
    flatten(groups)
}

/// Sampling overhead and runtime cost of uniform (Taylor) weights against
/// per-layer multivariate weights on equal-width layers.
pub fn cost_rows(layers: &[usize], orders: &[usize]) -> Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    for &l in layers {
        let widths = vec![1.0 / l as f64; l];
        for &m in orders {
            let at = format!("L={l}, order={m}");
            let slt = taylor_coefficients(m).map_err(|e| e.at(at.clone()))?;
            let mve = mve_program_coefficients(l, m).map_err(|e| e.at(at.clone()))?;
            for (method, coeffs) in [("slt", &slt), ("mve", &mve)] {
                let depth = depth_ratios(coeffs, &widths).map_err(|e| e.at(at.clone()))?;
                let (gamma, gamma2) = sampling_overhead(coeffs);
                let cost = runtime_cost(coeffs, &depth).map_err(|e| e.at(at.clone()))?;
                rows.push(CostRow {
                    layers: l,
                    order: m,
                    method: method.to_string(),
                    entries: coeffs.entries.len(),
                    gamma,
                    gamma2,
                    mean_depth: cost / gamma2,
                    runtime_cost: cost,
                    gamma_as_printed: (method == "mve" && m == 1)
                        .then(|| mve1_overhead_as_printed(l)),
                });
            }
        }
    }
    Ok(rows)
}

fn cost_compare(cfg: &ExperimentConfig) -> Result<Vec<CostRow>> {
    cost_rows(cfg.layers(), cfg.orders())
}
