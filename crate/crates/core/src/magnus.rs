//! First and second Magnus terms of the interaction-picture noise propagator.
//!
//! Each constant drive piece is handled in the eigenbasis of its Liouville
//! Hamiltonian, where conjugation by the ideal evolution is an elementwise
//! phase. Results are reported in the global interaction frame, i.e. relative
//! to the ideal evolution from t = 0.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::circuit::{CompiledCircuit, DynamicCircuit, LayerSpec, Segment};
use crate::coefficients::gauss_legendre;
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{self, c, CMatrix, C64};
use crate::liouville;

pub const DEFAULT_ORDER: usize = 32;
pub const CONVERGENCE_TOL: f64 = 1e-8;
pub const THIN_LAYER_LIMIT: f64 = 0.3;

/// One constant piece of a layer in its own eigenbasis.
struct Frame {
    /// `W̄ ⊗ W`, columns are eigenvectors of the Liouville Hamiltonian.
    p: CMatrix,
    /// `ω_m = λ_a − λ_b` for column `m = b·d + a`.
    omega: Vec<f64>,
    /// Dissipator in the eigenbasis.
    dtil: CMatrix,
}

impl Frame {
    fn new(h: &CMatrix, dissipator: &CMatrix) -> Result<Frame> {
        let d = h.nrows();
        let (w, lambda) = hermitian_eigen(h)?;
        let p = linalg::kron(&w.map(|z| z.conj()), &w);
        let omega = (0..d * d).map(|m| lambda[m % d] - lambda[m / d]).collect();
        let dtil = linalg::matmul3(&p.adjoint(), dissipator, &p);
        Ok(Frame { p, omega, dtil })
    }

    fn dim(&self) -> usize {
        self.omega.len()
    }

    /// `Σ_i w_i e^{iω u_i} e^{-iω u_i}†` for the given nodes.
    fn phase_sum(&self, nodes: &[f64], weights: &[f64]) -> CMatrix {
        let n = self.dim();
        let a = CMatrix::from_fn(n, nodes.len(), |m, i| {
            C64::from_polar(1.0, self.omega[m] * nodes[i])
        });
        let aw = CMatrix::from_fn(n, nodes.len(), |m, i| a[(m, i)] * weights[i]);
        linalg::matmul(&aw, &a.adjoint())
    }

    /// Interaction-picture dissipator at local time `s`, eigenbasis.
    fn at(&self, s: f64) -> CMatrix {
        let ph: Vec<C64> = self
            .omega
            .iter()
            .map(|w| C64::from_polar(1.0, w * s))
            .collect();
        CMatrix::from_fn(self.dim(), self.dim(), |m, n| {
            self.dtil[(m, n)] * ph[m] * ph[n].conj()
        })
    }

    /// `∫_0^dt 𝓛_int`, eigenbasis.
    fn integral(&self, dt: f64, q: usize) -> CMatrix {
        let (x, w) = scaled_rule(q, 0.0, dt);
        self.dtil.component_mul(&self.phase_sum(&x, &w))
    }

    /// `½ ∫_0^dt ds ∫_0^s du [𝓛_int(s), 𝓛_int(u)]`, eigenbasis.
    fn triangle(&self, dt: f64, q: usize) -> CMatrix {
        let (xs, ws) = scaled_rule(q, 0.0, dt);
        let terms = exec::par_map_range(q, |k| {
            let (xu, wu) = scaled_rule(q, 0.0, xs[k]);
            let g = self.dtil.component_mul(&self.phase_sum(&xu, &wu));
            linalg::commutator(&self.at(xs[k]), &g) * c(0.5 * ws[k], 0.0)
        });
        sum(terms, self.dim())
    }

    /// Ideal propagator over `dt` in the computational basis.
    fn propagator(&self, dt: f64) -> CMatrix {
        let n = self.dim();
        let mut pd = self.p.clone();
        for m in 0..n {
            let ph = C64::from_polar(1.0, -self.omega[m] * dt);
            for r in 0..n {
                pd[(r, m)] *= ph;
            }
        }
        linalg::matmul(&pd, &self.p.adjoint())
    }
}

/// Eigenvectors and eigenvalues of a Hermitian matrix via the complex Schur
/// form, which stays unitary on degenerate spectra.
fn hermitian_eigen(h: &CMatrix) -> Result<(CMatrix, Vec<f64>)> {
    let s = linalg::schur(h)?;
    let lambda: Vec<f64> = (0..h.nrows()).map(|i| s.t[(i, i)].re).collect();
    let diag = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        lambda.len(),
        lambda.iter().map(|&v| c(v, 0.0)),
    ));
    let defect = linalg::max_norm(&(linalg::matmul3(&s.z, &diag, &s.z.adjoint()) - h));
    if defect > 1e-10 * (1.0 + linalg::max_norm(h)) {
        return Err(Error::Accuracy { change: defect }.at("hermitian eigenbasis".to_string()));
    }
    Ok((s.z, lambda))
}

fn scaled_rule(q: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(q);
    let half = (b - a) / 2.0;
    let mid = (a + b) / 2.0;
    (
        x.iter().map(|t| mid + half * t).collect(),
        w.iter().map(|v| v * half).collect(),
    )
}

fn sum(terms: Vec<CMatrix>, n: usize) -> CMatrix {
    terms
        .into_iter()
        .fold(CMatrix::zeros(n, n), |acc, t| acc + t)
}

struct Piece {
    layer: usize,
    dt: f64,
    frame: Arc<Frame>,
    /// `C† P` and `P† C` with `C` the ideal evolution up to the piece start.
    to_global: CMatrix,
    from_global: CMatrix,
}

impl Piece {
    fn globalize(&self, local: &CMatrix) -> CMatrix {
        linalg::matmul3(&self.to_global, local, &self.from_global)
    }
}

struct Timeline {
    pieces: Vec<Piece>,
    layer_durations: Vec<f64>,
    layer_labels: Vec<String>,
    dim: usize,
}

fn timeline(circuit: &DynamicCircuit) -> Result<Timeline> {
    let mut frames: HashMap<(usize, usize), Arc<Frame>> = HashMap::new();
    let mut pieces = Vec::new();
    let mut layer_durations = Vec::new();
    let mut layer_labels = Vec::new();
    let n = circuit.dim() * circuit.dim();
    let mut cum = linalg::identity(n);
    for seg in &circuit.segments {
        let id = match seg {
            Segment::Layer(id) => *id,
            Segment::Gate(g) => {
                return Err(Error::Structural(format!(
                    "Magnus terms need drive-only circuits (gate `{}`)",
                    g.label
                )))
            }
            Segment::Measure { event, .. } | Segment::Project { event, .. } => {
                return Err(Error::Structural(format!(
                    "Magnus terms need measurement-free circuits (`{}`)",
                    event.label
                )))
            }
        };
        let layer = &circuit.layers[id];
        let diss = liouville::dissipator_superop(&layer.dissipator_pairs())?;
        let pos = layer_durations.len();
        for (k, step) in layer.schedule.iter().enumerate() {
            let frame = match frames.get(&(id, k)) {
                Some(f) => f.clone(),
                None => {
                    let f = Arc::new(Frame::new(&step.hamiltonian, &diss)?);
                    frames.insert((id, k), f.clone());
                    f
                }
            };
            let to_global = linalg::matmul(&cum.adjoint(), &frame.p);
            let from_global = to_global.adjoint();
            cum = linalg::matmul(&frame.propagator(step.duration), &cum);
            pieces.push(Piece {
                layer: pos,
                dt: step.duration,
                frame,
                to_global,
                from_global,
            });
        }
        layer_durations.push(layer.duration);
        layer_labels.push(layer.label.clone());
    }
    if pieces.is_empty() {
        return Err(Error::Structural("circuit has no layers".into()));
    }
    Ok(Timeline {
        pieces,
        layer_durations,
        layer_labels,
        dim: n,
    })
}

fn omega1_at(tl: &Timeline, q: usize) -> Vec<CMatrix> {
    exec::par_map(&tl.pieces, |p| p.globalize(&p.frame.integral(p.dt, q)))
}

fn converged(a: &CMatrix, b: &CMatrix, what: &str) -> Result<()> {
    let change = linalg::max_norm(&(a - b));
    if change > CONVERGENCE_TOL {
        return Err(Error::Accuracy { change }.at(what.to_string()));
    }
    Ok(())
}

/// `Ω₁ = ∫_0^τ 𝓛_int(t) dt` with a doubling check.
pub fn omega1(circuit: &DynamicCircuit, q: usize) -> Result<CMatrix> {
    let tl = timeline(circuit)?;
    let a = sum(omega1_at(&tl, q), tl.dim);
    let b = sum(omega1_at(&tl, 2 * q), tl.dim);
    converged(&a, &b, "omega1")?;
    Ok(b)
}

#[derive(Clone, Debug)]
pub struct MagnusReport {
    pub omega1: CMatrix,
    /// Direct double integral over the whole ordered triangle.
    pub omega2: CMatrix,
    /// `Ω₁,l` per layer, global frame.
    pub layer_omega1: Vec<CMatrix>,
    /// `Ω₂,l` per layer, global frame.
    pub triangles: Vec<CMatrix>,
    /// `½[Ω₁,l₂, Ω₁,l₁]` for every `l₂ > l₁`, keyed by `(l₂, l₁)`.
    pub squares: Vec<((usize, usize), CMatrix)>,
    /// `‖Ω₂ − Σ triangles − Σ squares‖_max`.
    pub residual: f64,
    pub quadrature_order: usize,
    pub layer_labels: Vec<String>,
}

/// Norm summary suitable for JSON output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MagnusSummary {
    pub omega1_norm: f64,
    pub omega2_norm: f64,
    pub triangle_norms: Vec<f64>,
    pub square_norm: f64,
    pub residual: f64,
    pub quadrature_order: usize,
    pub layers: Vec<String>,
}

impl MagnusReport {
    pub fn summary(&self) -> MagnusSummary {
        let n = self.omega2.nrows();
        let sq = self
            .squares
            .iter()
            .fold(CMatrix::zeros(n, n), |acc, (_, m)| acc + m);
        MagnusSummary {
            omega1_norm: linalg::spectral_norm(&self.omega1),
            omega2_norm: linalg::spectral_norm(&self.omega2),
            triangle_norms: self.triangles.iter().map(linalg::spectral_norm).collect(),
            square_norm: linalg::spectral_norm(&sq),
            residual: self.residual,
            quadrature_order: self.quadrature_order,
            layers: self.layer_labels.clone(),
        }
    }
}

/// Per-layer Ω₁ and Ω₂ (global frame) at order `q`.
fn layer_terms(tl: &Timeline, q: usize) -> (Vec<CMatrix>, Vec<CMatrix>) {
    let nl = tl.layer_durations.len();
    let local_tri: Vec<CMatrix> =
        exec::par_map(&tl.pieces, |p| p.globalize(&p.frame.triangle(p.dt, q)));
    let local_o1 = omega1_at(tl, q);
    let mut o1 = vec![CMatrix::zeros(tl.dim, tl.dim); nl];
    let mut tri = vec![CMatrix::zeros(tl.dim, tl.dim); nl];
    for (i, p) in tl.pieces.iter().enumerate() {
        // Pieces inside one layer combine like layers do.
        let cross = linalg::commutator(&local_o1[i], &o1[p.layer]) * c(0.5, 0.0);
        tri[p.layer] += &local_tri[i] + cross;
        o1[p.layer] += &local_o1[i];
    }
    (o1, tri)
}

/// Direct nested quadrature of the ordered double integral, global frame.
fn global_omega2(tl: &Timeline, q: usize) -> CMatrix {
    let o1 = omega1_at(tl, q);
    let mut before = CMatrix::zeros(tl.dim, tl.dim);
    let mut total = CMatrix::zeros(tl.dim, tl.dim);
    for (i, p) in tl.pieces.iter().enumerate() {
        let (xs, ws) = scaled_rule(q, 0.0, p.dt);
        let prior = &before;
        let terms = exec::par_map_range(q, |k| {
            let (xu, wu) = scaled_rule(q, 0.0, xs[k]);
            let partial = p.frame.dtil.component_mul(&p.frame.phase_sum(&xu, &wu));
            let f = prior + p.globalize(&partial);
            let l = p.globalize(&p.frame.at(xs[k]));
            linalg::commutator(&l, &f) * c(0.5 * ws[k], 0.0)
        });
        total += sum(terms, tl.dim);
        before += &o1[i];
    }
    total
}

fn squares_of(o1: &[CMatrix]) -> Vec<((usize, usize), CMatrix)> {
    let mut out = Vec::new();
    for l2 in 0..o1.len() {
        for l1 in 0..l2 {
            out.push(((l2, l1), linalg::commutator(&o1[l2], &o1[l1]) * c(0.5, 0.0)));
        }
    }
    out
}

/// Layer route only: `Σ_l Ω₂,l + ½ Σ_{l₂>l₁} [Ω₁,l₂, Ω₁,l₁]`.
pub fn omega2_layered(circuit: &DynamicCircuit, q: usize) -> Result<CMatrix> {
    let tl = timeline(circuit)?;
    let (o1a, tria) = layer_terms(&tl, q);
    let (o1, tri) = layer_terms(&tl, 2 * q);
    for (a, b) in tria.iter().zip(&tri) {
        converged(a, b, "omega2 triangle")?;
    }
    for (a, b) in o1a.iter().zip(&o1) {
        converged(a, b, "omega1 layer")?;
    }
    let sq = squares_of(&o1);
    Ok(tri
        .into_iter()
        .chain(sq.into_iter().map(|(_, m)| m))
        .fold(CMatrix::zeros(tl.dim, tl.dim), |a, b| a + b))
}

/// Both routes for Ω₂, with the decomposition residual.
pub fn omega2(circuit: &DynamicCircuit, q: usize) -> Result<MagnusReport> {
    let tl = timeline(circuit)?;
    let (o1a, tria) = layer_terms(&tl, q);
    let (layer_omega1, triangles) = layer_terms(&tl, 2 * q);
    for (a, b) in tria.iter().zip(&triangles) {
        converged(a, b, "omega2 triangle")?;
    }
    for (a, b) in o1a.iter().zip(&layer_omega1) {
        converged(a, b, "omega1 layer")?;
    }
    let omega2 = global_omega2(&tl, 2 * q);
    let squares = squares_of(&layer_omega1);
    let mut recon = CMatrix::zeros(tl.dim, tl.dim);
    for t in &triangles {
        recon += t;
    }
    for (_, s) in &squares {
        recon += s;
    }
    let residual = linalg::max_norm(&(&omega2 - recon));
    let omega1 = layer_omega1
        .iter()
        .fold(CMatrix::zeros(tl.dim, tl.dim), |a, b| a + b);
    Ok(MagnusReport {
        omega1,
        omega2,
        layer_omega1,
        triangles,
        squares,
        residual,
        quadrature_order: 2 * q,
        layer_labels: tl.layer_labels,
    })
}

/// `Ω₂` of a single layer in its own interaction frame (starting at the layer
/// start), Schrödinger basis.
pub fn layer_triangle(layer: &LayerSpec, q: usize) -> Result<CMatrix> {
    let diss = liouville::dissipator_superop(&layer.dissipator_pairs())?;
    let n = layer.dim() * layer.dim();
    let mut cum = linalg::identity(n);
    let mut o1 = CMatrix::zeros(n, n);
    let mut tri = CMatrix::zeros(n, n);
    for step in &layer.schedule {
        let f = Frame::new(&step.hamiltonian, &diss)?;
        let to = linalg::matmul(&cum.adjoint(), &f.p);
        let from = to.adjoint();
        let po1 = linalg::matmul3(&to, &f.integral(step.duration, q), &from);
        let ptri = linalg::matmul3(&to, &f.triangle(step.duration, q), &from);
        tri += ptri + linalg::commutator(&po1, &o1) * c(0.5, 0.0);
        o1 += po1;
        cum = linalg::matmul(&f.propagator(step.duration), &cum);
    }
    Ok(tri)
}

/// Largest spectral norm of the noise generator over a layer. Noise is
/// constant within a layer, so one evaluation covers endpoints and midpoint.
pub fn generator_norm(layer: &LayerSpec) -> Result<f64> {
    let diss = liouville::dissipator_superop(&layer.dissipator_pairs())?;
    Ok(linalg::spectral_norm(&diss))
}

/// `½ Σ_l Δt_l² · max_t ‖𝓛(t)‖²_op` for explicit layer widths.
pub fn bias_bound_widths(widths: &[f64], generator_norm: f64) -> f64 {
    0.5 * widths.iter().map(|w| w * w).sum::<f64>() * generator_norm * generator_norm
}

/// Bound on `‖U − K_mit^(∞)‖` for the circuit's own layer partition.
pub fn bias_bound(circuit: &DynamicCircuit) -> Result<f64> {
    let ids = circuit.top_level_layers();
    if ids.len() != circuit.segments.len() {
        return Err(Error::Structural(
            "bias bound needs a circuit made of layers only".into(),
        ));
    }
    let mut norm: f64 = 0.0;
    let mut widths = Vec::with_capacity(ids.len());
    for &id in &ids {
        norm = norm.max(generator_norm(&circuit.layers[id])?);
        widths.push(circuit.layers[id].duration);
    }
    Ok(bias_bound_widths(&widths, norm))
}

#[derive(Clone, Debug)]
pub struct ThinLayer {
    pub omega2_eff: CMatrix,
    /// Layers whose `‖H‖ τ/L` exceeds the thin-layer limit.
    pub warnings: Vec<String>,
}

/// `(τ²/3L²) ∫ [𝓛(t), [H(t), 𝓛(t)]] dt` for a circuit that will be cut into
/// `l` equal layers. `H` is the Liouville Hamiltonian generator.
pub fn thin_layer_omega2_eff(circuit: &DynamicCircuit, l: usize, q: usize) -> Result<ThinLayer> {
    if l == 0 {
        return Err(Error::Structural("layer count must be positive".into()));
    }
    let tl = timeline(circuit)?;
    let tau: f64 = tl.layer_durations.iter().sum();
    let width = tau / l as f64;
    let n = tl.dim;
    let mut integral = CMatrix::zeros(n, n);
    let mut warnings = Vec::new();
    for seg in &circuit.segments {
        let Segment::Layer(id) = seg else {
            unreachable!()
        };
        let layer = &circuit.layers[*id];
        let diss = liouville::dissipator_superop(&layer.dissipator_pairs())?;
        for step in &layer.schedule {
            let h_norm = linalg::spectral_norm(&step.hamiltonian);
            if h_norm * width > THIN_LAYER_LIMIT {
                warnings.push(format!(
                    "layer `{}`: ‖H‖τ/L = {:.3}",
                    layer.label,
                    h_norm * width
                ));
            }
            let hs = liouville::hamiltonian_superop(&step.hamiltonian);
            let inner = linalg::commutator(&hs, &diss);
            // Constant integrand per piece, so the quadrature is exact.
            let (_, w) = scaled_rule(q.max(1), 0.0, step.duration);
            let len: f64 = w.iter().sum();
            integral += linalg::commutator(&diss, &inner) * c(len, 0.0);
        }
    }
    warnings.dedup();
    let omega2_eff = integral * c(tau * tau / (3.0 * (l * l) as f64), 0.0);
    Ok(ThinLayer {
        omega2_eff,
        warnings,
    })
}

/// Exact per-layer Ω₂ for a uniformly split constant chain layer, for
/// comparison with the thin-layer formula.
pub fn thin_layer_single(layer: &LayerSpec, l: usize, q: usize) -> Result<(CMatrix, CMatrix)> {
    let slice = layer.split_uniform(l)?.remove(0);
    let exact = layer_triangle(&slice, q)?;
    let diss = liouville::dissipator_superop(&layer.dissipator_pairs())?;
    let width = slice.duration;
    let mut formula = CMatrix::zeros(exact.nrows(), exact.ncols());
    for step in &slice.schedule {
        let hs = liouville::hamiltonian_superop(&step.hamiltonian);
        formula += linalg::commutator(&diss, &linalg::commutator(&hs, &diss))
            * c(step.duration / width, 0.0);
    }
    Ok((exact, formula * c(width.powi(3) / 3.0, 0.0)))
}

/// Expectation bias predicted by the thin-layer formula, with each layer's
/// term `(Δ³/3)[𝓛,[H,𝓛]]` placed between the ideal evolutions before and
/// after it.
pub fn thin_layer_bias_prediction(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
) -> Result<f64> {
    let ids = circuit.top_level_layers();
    if ids.len() != circuit.segments.len() {
        return Err(Error::Structural(
            "thin-layer prediction needs a circuit made of layers only".into(),
        ));
    }
    let mut terms = HashMap::new();
    for &id in &ids {
        if terms.contains_key(&id) {
            continue;
        }
        let layer = &circuit.layers[id];
        let diss = liouville::dissipator_superop(&layer.dissipator_pairs())?;
        let mut x = CMatrix::zeros(diss.nrows(), diss.ncols());
        for step in &layer.schedule {
            let hs = liouville::hamiltonian_superop(&step.hamiltonian);
            x += linalg::commutator(&diss, &linalg::commutator(&hs, &diss)) * c(step.duration, 0.0);
        }
        terms.insert(id, x * c(layer.duration.powi(2) / 3.0, 0.0));
    }
    // States before each layer and co-states after it.
    let mut states = Vec::with_capacity(ids.len());
    let mut v = circuit.initial_state.entries.clone();
    for &id in &ids {
        states.push(v.clone());
        v = compiled.layers[id].ideal.apply(&v);
    }
    let mut dual = circuit.observable.dual.clone();
    let mut total = c(0.0, 0.0);
    for (k, &id) in ids.iter().enumerate().rev() {
        dual = compiled.layers[id].ideal.matrix.adjoint() * dual;
        total += dual.dotc(&(&terms[&id] * &states[k]));
    }
    liouville::real_part(total)
}
