//! Layered noisy circuits, dynamic circuits and amplified programs.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coefficients::{Amplification, CoefficientSet};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{self, CMatrix, CVector, ZERO};
use crate::liouville::{self, DensityVector, Kind, Observable, SuperOperator};
use crate::pauli;

/// One piece of a piecewise-constant drive.
#[derive(Clone, Debug)]
pub struct DriveStep {
    pub duration: f64,
    pub hamiltonian: CMatrix,
}

#[derive(Clone, Debug)]
pub struct Dissipator {
    pub jump: CMatrix,
    pub rate: f64,
}

#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub label: String,
    pub duration: f64,
    pub schedule: Vec<DriveStep>,
    pub dissipators: Vec<Dissipator>,
}

const INVERSE_SUFFIX: &str = "^I";

impl LayerSpec {
    pub fn constant(
        label: impl Into<String>,
        duration: f64,
        h: CMatrix,
        dissipators: Vec<Dissipator>,
    ) -> Result<Self> {
        LayerSpec::scheduled(
            label,
            vec![DriveStep {
                duration,
                hamiltonian: h,
            }],
            dissipators,
        )
    }

    pub fn scheduled(
        label: impl Into<String>,
        schedule: Vec<DriveStep>,
        dissipators: Vec<Dissipator>,
    ) -> Result<Self> {
        let label = label.into();
        if schedule.is_empty() {
            return Err(Error::Structural(format!(
                "layer `{label}` has an empty schedule"
            )));
        }
        let dim = schedule[0].hamiltonian.nrows();
        for step in &schedule {
            if !(step.duration > 0.0) || !step.duration.is_finite() {
                return Err(Error::Structural(format!(
                    "layer `{label}` has step duration {}",
                    step.duration
                )));
            }
            if step.hamiltonian.nrows() != dim || !linalg::is_square(&step.hamiltonian) {
                return Err(Error::Dimension(format!(
                    "layer `{label}` mixes drive dimensions"
                )));
            }
        }
        for d in &dissipators {
            if d.rate < 0.0 || !d.rate.is_finite() {
                return Err(Error::NegativeRate { rate: d.rate });
            }
            if d.jump.nrows() != dim {
                return Err(Error::Dimension(format!(
                    "layer `{label}` jump operator dimension"
                )));
            }
        }
        let duration = schedule.iter().map(|s| s.duration).sum();
        Ok(LayerSpec {
            label,
            duration,
            schedule,
            dissipators,
        })
    }

    pub fn dim(&self) -> usize {
        self.schedule[0].hamiltonian.nrows()
    }

    pub fn is_noiseless(&self) -> bool {
        self.dissipators.iter().all(|d| d.rate == 0.0)
    }

    pub fn dissipator_pairs(&self) -> Vec<(CMatrix, f64)> {
        self.dissipators
            .iter()
            .map(|d| (d.jump.clone(), d.rate))
            .collect()
    }

    /// The same layer without dissipators.
    pub fn noiseless(&self) -> LayerSpec {
        LayerSpec {
            dissipators: Vec::new(),
            ..self.clone()
        }
    }

    /// Drive at time `t` within the layer.
    pub fn drive_at(&self, t: f64) -> &CMatrix {
        let mut acc = 0.0;
        for step in &self.schedule {
            acc += step.duration;
            if t < acc {
                return &step.hamiltonian;
            }
        }
        &self.schedule.last().expect("non-empty").hamiltonian
    }

    /// Slices the layer at the given relative cut points in (0, duration).
    pub fn split_at(&self, cuts: &[f64]) -> Result<Vec<LayerSpec>> {
        let mut bounds = vec![0.0];
        for &c in cuts {
            if !(c > *bounds.last().unwrap()) || c >= self.duration {
                return Err(Error::Structural(format!(
                    "cut {c} is not increasing inside (0, {})",
                    self.duration
                )));
            }
            bounds.push(c);
        }
        bounds.push(self.duration);
        let mut out = Vec::with_capacity(bounds.len() - 1);
        for (idx, w) in bounds.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let mut steps = Vec::new();
            let mut t0 = 0.0;
            for step in &self.schedule {
                let t1 = t0 + step.duration;
                let lo = a.max(t0);
                let hi = b.min(t1);
                if hi - lo > 1e-15 * self.duration.max(1.0) {
                    steps.push(DriveStep {
                        duration: hi - lo,
                        hamiltonian: step.hamiltonian.clone(),
                    });
                }
                t0 = t1;
            }
            out.push(LayerSpec::scheduled(
                format!("{}#{idx}", self.label),
                steps,
                self.dissipators.clone(),
            )?);
        }
        Ok(out)
    }

    /// `l` equal slices. Rates are kept, only the duration is divided.
    pub fn split_uniform(&self, l: usize) -> Result<Vec<LayerSpec>> {
        if l == 0 {
            return Err(Error::Structural("cannot split into zero layers".into()));
        }
        let cuts: Vec<f64> = (1..l)
            .map(|k| self.duration * k as f64 / l as f64)
            .collect();
        self.split_at(&cuts)
    }
}

/// Schedule reversed and negated; dissipators untouched.
pub fn pulse_inverse(layer: &LayerSpec) -> LayerSpec {
    let schedule = layer
        .schedule
        .iter()
        .rev()
        .map(|s| DriveStep {
            duration: s.duration,
            hamiltonian: -&s.hamiltonian,
        })
        .collect();
    let label = match layer.label.strip_suffix(INVERSE_SUFFIX) {
        Some(base) => base.to_string(),
        None => format!("{}{INVERSE_SUFFIX}", layer.label),
    };
    LayerSpec {
        label,
        duration: layer.duration,
        schedule,
        dissipators: layer.dissipators.clone(),
    }
}

/// `exp(𝓛_n Δt_n) ⋯ exp(𝓛_1 Δt_1)`.
pub fn compile_layer(layer: &LayerSpec) -> Result<SuperOperator> {
    let pairs = layer.dissipator_pairs();
    let mut acc: Option<SuperOperator> = None;
    for step in &layer.schedule {
        let gen = liouville::lindbladian(&step.hamiltonian, &pairs)?;
        let k = liouville::channel_exp(&gen, step.duration)?;
        acc = Some(match acc {
            None => k,
            Some(prev) => k.compose(&prev),
        });
    }
    Ok(acc.expect("non-empty schedule"))
}

/// `K (K_I K)^j`.
pub fn amplify_layer(layer: &LayerSpec, j: u32) -> Result<SuperOperator> {
    let k = compile_layer(layer)?;
    if j == 0 {
        return Ok(k);
    }
    let ki = compile_layer(&pulse_inverse(layer))?;
    let echo = ki.compose(&k);
    let m = linalg::matmul(&k.matrix, &linalg::matpow(&echo.matrix, j));
    Ok(SuperOperator::new(m, k.kind))
}

#[derive(Clone, Debug)]
pub struct GateInsertion {
    pub channel: SuperOperator,
    /// Set when the layer's ideal unitary is not self-inverse.
    pub flagged: bool,
}

pub const SELF_INVERSE_TOL: f64 = 1e-8;

/// `K^(2j+1)`, the gate-insertion baseline.
pub fn gate_insertion_amplify(layer: &LayerSpec, j: u32) -> Result<GateInsertion> {
    let k = compile_layer(layer)?;
    let ideal = compile_layer(&layer.noiseless())?;
    let sq = linalg::matmul(&ideal.matrix, &ideal.matrix);
    let flagged = linalg::max_norm(&(sq - linalg::identity(ideal.dim()))) > SELF_INVERSE_TOL;
    let m = linalg::matpow(&k.matrix, 2 * j + 1);
    Ok(GateInsertion {
        channel: SuperOperator::new(m, k.kind),
        flagged,
    })
}

/// Computational-basis measurement of some qubits.
#[derive(Clone, Debug)]
pub struct MeasurementEvent {
    pub label: String,
    pub qubits: Vec<usize>,
    pub n_qubits: usize,
}

impl MeasurementEvent {
    pub fn new(label: impl Into<String>, qubits: Vec<usize>, n_qubits: usize) -> Result<Self> {
        let label = label.into();
        if qubits.is_empty() {
            return Err(Error::Structural(format!(
                "measurement `{label}` has no qubits"
            )));
        }
        for (i, q) in qubits.iter().enumerate() {
            if *q >= n_qubits || qubits[..i].contains(q) {
                return Err(Error::Structural(format!(
                    "measurement `{label}` has bad qubit {q}"
                )));
            }
        }
        Ok(MeasurementEvent {
            label,
            qubits,
            n_qubits,
        })
    }

    pub fn outcomes(&self) -> usize {
        1 << self.qubits.len()
    }

    /// Outcome index of a computational basis state; the first listed qubit is
    /// the most significant bit.
    pub fn outcome_of(&self, basis: usize) -> usize {
        self.qubits.iter().fold(0, |acc, &q| {
            (acc << 1) | ((basis >> (self.n_qubits - 1 - q)) & 1)
        })
    }

    /// Outcome bitstring such as "01".
    pub fn outcome_label(&self, k: usize) -> String {
        let w = self.qubits.len();
        (0..w)
            .map(|i| {
                if k & (1 << (w - 1 - i)) != 0 {
                    '1'
                } else {
                    '0'
                }
            })
            .collect()
    }

    /// `𝕄_k = P_k ⊗ P_k` (the projectors are real).
    pub fn projector(&self, k: usize) -> SuperOperator {
        let d = 1usize << self.n_qubits;
        let mut m = CMatrix::zeros(d * d, d * d);
        for col in 0..d {
            for row in 0..d {
                if self.outcome_of(row) == k && self.outcome_of(col) == k {
                    let idx = col * d + row;
                    m[(idx, idx)] = linalg::ONE;
                }
            }
        }
        SuperOperator::new(m, Kind::Projector)
    }

    /// Applies `𝕄_k` to a density vector without forming the matrix.
    pub fn project(&self, k: usize, v: &CVector) -> CVector {
        let d = 1usize << self.n_qubits;
        let outcome: Vec<usize> = (0..d).map(|b| self.outcome_of(b)).collect();
        let mut out = v.clone();
        for col in 0..d {
            for row in 0..d {
                if outcome[row] != k || outcome[col] != k {
                    out[col * d + row] = ZERO;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Gate {
    pub label: String,
    pub unitary: CMatrix,
    pub channel: Arc<SuperOperator>,
    pub inverse: Arc<SuperOperator>,
}

impl Gate {
    pub fn new(label: impl Into<String>, unitary: CMatrix) -> Result<Self> {
        let channel = Arc::new(liouville::unitary_superop(&unitary)?);
        let inverse = Arc::new(liouville::unitary_superop(&unitary.adjoint())?);
        Ok(Gate {
            label: label.into(),
            unitary,
            channel,
            inverse,
        })
    }

    pub fn named(name: &str, qubits: &[usize], n_qubits: usize) -> Result<Self> {
        let g = pauli::gate(name)?;
        let arity = g.nrows().trailing_zeros() as usize;
        if arity != qubits.len() {
            return Err(Error::Structural(format!(
                "gate `{name}` acts on {arity} qubits, got {}",
                qubits.len()
            )));
        }
        let u = pauli::embed(&g, qubits, n_qubits)?;
        Gate::new(format!("{name}{qubits:?}"), u)
    }
}

/// One element of a dynamic circuit.
#[derive(Clone, Debug)]
pub enum Segment {
    /// Index into the circuit's layer registry.
    Layer(usize),
    /// Ideal instantaneous gate; never amplified.
    Gate(Gate),
    /// Mid-circuit measurement. Branch `k` runs after outcome `k`; execution
    /// then resumes with the following segments.
    Measure {
        event: MeasurementEvent,
        branches: Vec<Vec<Segment>>,
    },
    /// Keeps only outcome `outcome` (post-selection); the state loses trace.
    Project {
        event: MeasurementEvent,
        outcome: usize,
    },
}

#[derive(Clone, Debug)]
pub struct DynamicCircuit {
    pub n_qubits: usize,
    pub layers: Vec<LayerSpec>,
    pub segments: Vec<Segment>,
    pub initial_state: DensityVector,
    pub observable: Observable,
    pub declared_duration: Option<f64>,
}

impl DynamicCircuit {
    pub fn new(
        n_qubits: usize,
        initial_state: DensityVector,
        observable: Observable,
    ) -> Result<Self> {
        let d = 1usize << n_qubits;
        if initial_state.side() != d || observable.side() != d {
            return Err(Error::Dimension(format!(
                "state side {} and observable side {} for {n_qubits} qubits",
                initial_state.side(),
                observable.side()
            )));
        }
        Ok(DynamicCircuit {
            n_qubits,
            layers: Vec::new(),
            segments: Vec::new(),
            initial_state,
            observable,
            declared_duration: None,
        })
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }

    pub fn add_layer(&mut self, layer: LayerSpec) -> Result<usize> {
        if layer.dim() != self.dim() {
            return Err(Error::Dimension(format!(
                "layer `{}` is {}-dimensional, circuit is {}",
                layer.label,
                layer.dim(),
                self.dim()
            )));
        }
        self.layers.push(layer);
        Ok(self.layers.len() - 1)
    }

    pub fn push_layer(&mut self, layer: LayerSpec) -> Result<usize> {
        let id = self.add_layer(layer)?;
        self.segments.push(Segment::Layer(id));
        Ok(id)
    }

    pub fn push_gate(&mut self, name: &str, qubits: &[usize]) -> Result<()> {
        let g = Gate::named(name, qubits, self.n_qubits)?;
        self.segments.push(Segment::Gate(g));
        Ok(())
    }

    pub fn push_measure(&mut self, event: MeasurementEvent, branches: Vec<Vec<Segment>>) {
        self.segments.push(Segment::Measure { event, branches });
    }

    pub fn has_measurements(&self) -> bool {
        fn any(segs: &[Segment]) -> bool {
            segs.iter()
                .any(|s| matches!(s, Segment::Measure { .. } | Segment::Project { .. }))
        }
        any(&self.segments)
    }

    pub fn first_measurement(&self) -> Option<&MeasurementEvent> {
        self.segments.iter().find_map(|s| match s {
            Segment::Measure { event, .. } | Segment::Project { event, .. } => Some(event),
            _ => None,
        })
    }

    /// Registry ids of the top-level layers in time order.
    pub fn top_level_layers(&self) -> Vec<usize> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Layer(id) => Some(*id),
                _ => None,
            })
            .collect()
    }

    pub fn total_duration(&self) -> f64 {
        self.top_level_layers()
            .iter()
            .map(|&id| self.layers[id].duration)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        fn walk(c: &DynamicCircuit, segs: &[Segment]) -> Result<()> {
            for s in segs {
                match s {
                    Segment::Layer(id) => {
                        if *id >= c.layers.len() {
                            return Err(Error::Structural(format!("layer id {id} not registered")));
                        }
                    }
                    Segment::Gate(g) => {
                        if g.unitary.nrows() != c.dim() {
                            return Err(Error::Dimension(format!("gate `{}` dimension", g.label)));
                        }
                    }
                    Segment::Measure { event, branches } => {
                        if event.n_qubits != c.n_qubits {
                            return Err(Error::Structural(format!(
                                "measurement `{}` register size",
                                event.label
                            )));
                        }
                        if branches.len() != event.outcomes() {
                            return Err(Error::Structural(format!(
                                "measurement `{}` has {} branches for {} outcomes",
                                event.label,
                                branches.len(),
                                event.outcomes()
                            )));
                        }
                        for b in branches {
                            walk(c, b)?;
                        }
                    }
                    Segment::Project { event, outcome } => {
                        if *outcome >= event.outcomes() {
                            return Err(Error::Structural(format!(
                                "outcome {outcome} for `{}`",
                                event.label
                            )));
                        }
                    }
                }
            }
            Ok(())
        }
        walk(self, &self.segments)?;
        if let Some(tau) = self.declared_duration {
            let total = self.total_duration();
            if (total - tau).abs() > 1e-9 * tau.max(1.0) {
                return Err(Error::Structural(format!(
                    "layer durations sum to {total}, declared {tau}"
                )));
            }
        }
        Ok(())
    }

    /// Copy with every measurement replaced by post-selection on `outcome`
    /// (the kept branch is spliced in).
    pub fn postselected(&self, outcome: usize) -> Result<DynamicCircuit> {
        let mut out = self.clone();
        let mut count = 0;
        let mut segs = Vec::new();
        for s in &self.segments {
            match s {
                Segment::Measure { event, branches } => {
                    count += 1;
                    if outcome >= event.outcomes() {
                        return Err(Error::Structural(format!(
                            "outcome {outcome} for `{}`",
                            event.label
                        )));
                    }
                    segs.push(Segment::Project {
                        event: event.clone(),
                        outcome,
                    });
                    segs.extend(branches[outcome].iter().cloned());
                }
                other => segs.push(other.clone()),
            }
        }
        if count != 1 {
            return Err(Error::Structural(format!(
                "post-selection needs exactly one measurement, found {count}"
            )));
        }
        out.segments = segs;
        Ok(out)
    }

    /// Copy with the measured qubits fully dephased instead of branching,
    /// valid when every branch is identical.
    pub fn with_measurements_as_dephasing(&self) -> Result<DynamicCircuit> {
        let mut out = self.clone();
        let mut segs = Vec::new();
        for s in &self.segments {
            match s {
                Segment::Measure { event, branches } => {
                    segs.push(Segment::Gate(dephasing_gate(event)?));
                    segs.extend(branches[0].iter().cloned());
                }
                other => segs.push(other.clone()),
            }
        }
        out.segments = segs;
        Ok(out)
    }

    /// Copy with every measurement and its branches removed.
    pub fn without_measurements(&self) -> DynamicCircuit {
        let mut out = self.clone();
        out.segments
            .retain(|s| !matches!(s, Segment::Measure { .. } | Segment::Project { .. }));
        out
    }

    /// Same structure with every layer replaced by `f(layer)`.
    pub fn map_layers(&self, f: impl Fn(&LayerSpec) -> LayerSpec) -> DynamicCircuit {
        let mut out = self.clone();
        out.layers = self.layers.iter().map(f).collect();
        out
    }
}

/// Full dephasing of the measured qubits as a pseudo-gate (Σ_k 𝕄_k).
fn dephasing_gate(event: &MeasurementEvent) -> Result<Gate> {
    let d = 1usize << event.n_qubits;
    let mut m = CMatrix::zeros(d * d, d * d);
    for k in 0..event.outcomes() {
        m += event.projector(k).matrix;
    }
    let ch = Arc::new(SuperOperator::new(m, Kind::NoisyChannel));
    Ok(Gate {
        label: format!("dephase{:?}", event.qubits),
        unitary: linalg::identity(d),
        channel: ch.clone(),
        inverse: ch,
    })
}

/// Per-layer compiled superoperators.
#[derive(Clone, Debug)]
pub struct CompiledLayer {
    pub forward: Arc<SuperOperator>,
    pub inverse: Arc<SuperOperator>,
    pub ideal: Arc<SuperOperator>,
    /// `K_I K`.
    pub echo: Arc<SuperOperator>,
}

#[derive(Clone, Debug)]
pub struct CompiledCircuit {
    pub layers: Vec<CompiledLayer>,
}

pub fn compile_circuit(circuit: &DynamicCircuit) -> Result<CompiledCircuit> {
    let layers = exec::try_par_map(&circuit.layers, |layer| {
        let forward = compile_layer(layer)?;
        let inverse = compile_layer(&pulse_inverse(layer))?;
        let ideal = compile_layer(&layer.noiseless())?;
        let echo = inverse.compose(&forward);
        Ok::<_, Error>(CompiledLayer {
            forward: Arc::new(forward),
            inverse: Arc::new(inverse),
            ideal: Arc::new(ideal),
            echo: Arc::new(echo),
        })
    })?;
    Ok(CompiledCircuit { layers })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Gkik,
    Lkik,
    GateInsertion,
    Mve,
}

impl Scheme {
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::Gkik => "gkik",
            Scheme::Lkik => "lkik",
            Scheme::GateInsertion => "gate-insertion",
            Scheme::Mve => "mve",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gkik" => Ok(Scheme::Gkik),
            "lkik" => Ok(Scheme::Lkik),
            "gate-insertion" | "gi" => Ok(Scheme::GateInsertion),
            "mve" => Ok(Scheme::Mve),
            other => Err(Error::config("scheme", format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProgramEntry {
    pub weight: f64,
    pub amplification: Amplification,
}

#[derive(Clone, Debug)]
pub struct AmplifiedProgram {
    pub scheme: Scheme,
    pub coefficients: CoefficientSet,
    pub entries: Vec<ProgramEntry>,
    pub warnings: Vec<String>,
}

pub const WEIGHT_SUM_TOL: f64 = 1e-12;

pub fn build_program(
    circuit: &DynamicCircuit,
    coeffs: &CoefficientSet,
    scheme: Scheme,
) -> Result<AmplifiedProgram> {
    circuit.validate()?;
    let sum = coeffs.weight_sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Structural(format!("weights sum to {sum}, not 1")));
    }
    let mut warnings = Vec::new();
    match scheme {
        Scheme::Gkik => {
            if let Some(ev) = circuit.first_measurement() {
                return Err(Error::Incompatible {
                    event: ev.label.clone(),
                });
            }
            require_uniform(coeffs, scheme)?;
        }
        Scheme::Lkik => require_uniform(coeffs, scheme)?,
        Scheme::GateInsertion => {
            require_uniform(coeffs, scheme)?;
            for layer in &circuit.layers {
                let ideal = compile_layer(&layer.noiseless())?;
                let sq = linalg::matmul(&ideal.matrix, &ideal.matrix);
                if linalg::max_norm(&(sq - linalg::identity(ideal.dim()))) > SELF_INVERSE_TOL {
                    warnings.push(format!(
                        "layer `{}` is not self-inverse; gate insertion is biased",
                        layer.label
                    ));
                }
            }
        }
        Scheme::Mve => {
            if let Some(ev) = circuit.first_measurement() {
                return Err(Error::Structural(format!(
                    "MVE programs are defined for measurement-free circuits (found `{}`)",
                    ev.label
                )));
            }
            let n = circuit.top_level_layers().len();
            for e in &coeffs.entries {
                match &e.amplification {
                    Amplification::PerLayer(v) if v.len() == n => {}
                    other => {
                        return Err(Error::Structural(format!(
                            "MVE entry {other:?} does not match {n} layers"
                        )))
                    }
                }
            }
        }
    }
    let entries = coeffs
        .entries
        .iter()
        .map(|e| ProgramEntry {
            weight: e.weight,
            amplification: e.amplification.clone(),
        })
        .collect();
    Ok(AmplifiedProgram {
        scheme,
        coefficients: coeffs.clone(),
        entries,
        warnings,
    })
}

fn require_uniform(coeffs: &CoefficientSet, scheme: Scheme) -> Result<()> {
    if coeffs.is_uniform() {
        Ok(())
    } else {
        Err(Error::Structural(format!(
            "{} needs uniform amplification levels",
            scheme.label()
        )))
    }
}

/// What to do with each layer occurrence during propagation.
#[derive(Clone, Copy, Debug)]
pub enum LayerMode<'a> {
    Ideal,
    Noisy,
    /// `K (K_I K)^j` per occurrence, levels from the amplification.
    Kik(&'a Amplification),
    /// `K^(2j+1)`.
    Repeat(&'a Amplification),
    /// Caller-supplied per-layer channels (indexed by registry id).
    Custom(&'a [Arc<SuperOperator>]),
}

/// Propagates a density vector through the segments. Measurements are
/// resolved by summing the projected branches, which is exact and linear.
pub fn propagate(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
    mode: LayerMode<'_>,
    rho: &CVector,
) -> Result<CVector> {
    let mut occurrence = 0usize;
    run_segments(
        circuit,
        compiled,
        mode,
        &circuit.segments,
        rho.clone(),
        &mut occurrence,
    )
}

fn apply_layer(
    compiled: &CompiledCircuit,
    mode: LayerMode<'_>,
    id: usize,
    occurrence: usize,
    v: CVector,
) -> CVector {
    let cl = &compiled.layers[id];
    match mode {
        LayerMode::Ideal => cl.ideal.apply(&v),
        LayerMode::Noisy => cl.forward.apply(&v),
        LayerMode::Kik(amp) => {
            let mut v = v;
            for _ in 0..amp.level(occurrence) {
                v = cl.echo.apply(&v);
            }
            cl.forward.apply(&v)
        }
        LayerMode::Repeat(amp) => {
            let mut v = v;
            for _ in 0..(2 * amp.level(occurrence) + 1) {
                v = cl.forward.apply(&v);
            }
            v
        }
        LayerMode::Custom(chans) => chans[id].apply(&v),
    }
}

fn run_segments(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
    mode: LayerMode<'_>,
    segs: &[Segment],
    mut v: CVector,
    occurrence: &mut usize,
) -> Result<CVector> {
    for s in segs {
        match s {
            Segment::Layer(id) => {
                v = apply_layer(compiled, mode, *id, *occurrence, v);
                *occurrence += 1;
            }
            Segment::Gate(g) => v = g.channel.apply(&v),
            Segment::Measure { event, branches } => {
                let start = *occurrence;
                let mut acc = CVector::zeros(v.len());
                let mut end = start;
                for (k, branch) in branches.iter().enumerate() {
                    let mut occ = start;
                    let vk = event.project(k, &v);
                    acc += run_segments(circuit, compiled, mode, branch, vk, &mut occ)?;
                    end = end.max(occ);
                }
                *occurrence = end;
                v = acc;
            }
            Segment::Project { event, outcome } => v = event.project(*outcome, &v),
        }
    }
    Ok(v)
}

/// Applies the pulse inverse of a measurement-free circuit to `v`.
pub fn propagate_inverse(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
    v: CVector,
) -> Result<CVector> {
    let mut v = v;
    for s in circuit.segments.iter().rev() {
        match s {
            Segment::Layer(id) => v = compiled.layers[*id].inverse.apply(&v),
            Segment::Gate(g) => v = g.inverse.apply(&v),
            Segment::Measure { event, .. } | Segment::Project { event, .. } => {
                return Err(Error::Incompatible {
                    event: event.label.clone(),
                })
            }
        }
    }
    Ok(v)
}

/// Final density vector of one program entry.
pub fn evaluate_entry(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
    scheme: Scheme,
    amplification: &Amplification,
) -> Result<CVector> {
    let rho = &circuit.initial_state.entries;
    match scheme {
        Scheme::Lkik | Scheme::Mve => {
            propagate(circuit, compiled, LayerMode::Kik(amplification), rho)
        }
        Scheme::GateInsertion => {
            propagate(circuit, compiled, LayerMode::Repeat(amplification), rho)
        }
        Scheme::Gkik => {
            let j = match amplification {
                Amplification::Uniform(j) => *j,
                other => return Err(Error::Structural(format!("GKIK entry {other:?}"))),
            };
            let mut v = propagate(circuit, compiled, LayerMode::Noisy, rho)?;
            for _ in 0..j {
                v = propagate_inverse(circuit, compiled, v)?;
                v = propagate(circuit, compiled, LayerMode::Noisy, &v)?;
            }
            Ok(v)
        }
    }
}

/// Channel factors of one entry in time order (measurement-free circuits).
pub fn entry_factors(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
    scheme: Scheme,
    amplification: &Amplification,
) -> Result<Vec<Arc<SuperOperator>>> {
    if let Some(ev) = circuit.first_measurement() {
        return Err(Error::Structural(format!(
            "factor lists are not defined across `{}`",
            ev.label
        )));
    }
    let forward = |out: &mut Vec<Arc<SuperOperator>>| {
        for s in &circuit.segments {
            match s {
                Segment::Layer(id) => out.push(compiled.layers[*id].forward.clone()),
                Segment::Gate(g) => out.push(g.channel.clone()),
                _ => unreachable!(),
            }
        }
    };
    let mut out = Vec::new();
    match scheme {
        Scheme::Gkik => {
            let j = amplification.level(0);
            forward(&mut out);
            for _ in 0..j {
                for s in circuit.segments.iter().rev() {
                    match s {
                        Segment::Layer(id) => out.push(compiled.layers[*id].inverse.clone()),
                        Segment::Gate(g) => out.push(g.inverse.clone()),
                        _ => unreachable!(),
                    }
                }
                forward(&mut out);
            }
        }
        Scheme::Lkik | Scheme::Mve | Scheme::GateInsertion => {
            let mut occ = 0;
            for s in &circuit.segments {
                match s {
                    Segment::Layer(id) => {
                        let cl = &compiled.layers[*id];
                        let j = amplification.level(occ);
                        out.push(cl.forward.clone());
                        for _ in 0..j {
                            if scheme == Scheme::GateInsertion {
                                out.push(cl.forward.clone());
                                out.push(cl.forward.clone());
                            } else {
                                out.push(cl.inverse.clone());
                                out.push(cl.forward.clone());
                            }
                        }
                        occ += 1;
                    }
                    Segment::Gate(g) => out.push(g.channel.clone()),
                    _ => unreachable!(),
                }
            }
        }
    }
    Ok(out)
}

/// Product of factors (later factors on the left).
pub fn product(factors: &[Arc<SuperOperator>], dim: usize) -> SuperOperator {
    factors
        .iter()
        .fold(SuperOperator::identity(dim), |acc, f| f.compose(&acc))
}

/// Weighted sum of entry channels, `Σ c_i Π factors`.
pub fn program_superoperator(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
    program: &AmplifiedProgram,
) -> Result<SuperOperator> {
    let dim = circuit.dim() * circuit.dim();
    let mut acc = CMatrix::zeros(dim, dim);
    for e in &program.entries {
        let f = entry_factors(circuit, compiled, program.scheme, &e.amplification)?;
        acc += product(&f, dim).matrix * linalg::c(e.weight, 0.0);
    }
    Ok(SuperOperator::new(acc, Kind::Composite))
}

/// Branch-summed density vector at uniform amplification level `j`.
pub fn simulate_dynamic(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
    j: u32,
) -> Result<DensityVector> {
    circuit.validate()?;
    let amp = Amplification::Uniform(j);
    let v = propagate(
        circuit,
        compiled,
        LayerMode::Kik(&amp),
        &circuit.initial_state.entries,
    )?;
    Ok(DensityVector { entries: v })
}

/// Cache of compiled circuits keyed by caller-chosen names; used by sweeps
/// that revisit the same layer structure.
#[derive(Default)]
pub struct CompileCache {
    entries: HashMap<String, Arc<CompiledCircuit>>,
}

impl CompileCache {
    pub fn get_or_compile(
        &mut self,
        key: &str,
        circuit: &DynamicCircuit,
    ) -> Result<Arc<CompiledCircuit>> {
        if let Some(c) = self.entries.get(key) {
            return Ok(c.clone());
        }
        let c = Arc::new(compile_circuit(circuit)?);
        self.entries.insert(key.to_string(), c.clone());
        Ok(c)
    }
}
