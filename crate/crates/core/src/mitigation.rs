//! Mitigated expectation values, echoes, asymptotes and post-selection.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::circuit::{
    self, build_program, compile_circuit, evaluate_entry, AmplifiedProgram, CompiledCircuit,
    DynamicCircuit, LayerMode, Scheme, Segment,
};
use crate::coefficients::{adaptive_coefficients, CoefficientSet};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{self, CVector};
use crate::liouville::{self, InvSqrtOptions, Observable, SuperOperator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitigationResult {
    pub scheme: Scheme,
    pub order: usize,
    pub layers: usize,
    pub weights: Vec<f64>,
    pub raw_values: Vec<f64>,
    pub mitigated: f64,
    pub ideal: Option<f64>,
    pub delta: Option<f64>,
    pub mu: Option<f64>,
    pub gamma: f64,
}

impl MitigationResult {
    /// Unmitigated value, i.e. the raw value of the level-0 entry when present.
    pub fn unmitigated(&self) -> Option<f64> {
        self.raw_values.first().copied()
    }

    pub fn abs_delta(&self) -> Option<f64> {
        self.delta.map(f64::abs)
    }
}

/// Noiseless value of the circuit's observable.
pub fn ideal_value(circuit: &DynamicCircuit, compiled: &CompiledCircuit) -> Result<f64> {
    let v = circuit::propagate(
        circuit,
        compiled,
        LayerMode::Ideal,
        &circuit.initial_state.entries,
    )?;
    liouville::expectation_of(&circuit.observable, &v)
}

/// Raw value of each program entry.
pub fn raw_values(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
    program: &AmplifiedProgram,
) -> Result<Vec<f64>> {
    exec::try_par_map(&program.entries, |e| {
        let v = evaluate_entry(circuit, compiled, program.scheme, &e.amplification)?;
        liouville::expectation_of(&circuit.observable, &v)
    })
}

pub fn mitigate(
    circuit: &DynamicCircuit,
    coeffs: &CoefficientSet,
    scheme: Scheme,
) -> Result<MitigationResult> {
    let compiled = compile_circuit(circuit)?;
    mitigate_compiled(circuit, &compiled, coeffs, scheme)
}

pub fn mitigate_compiled(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
    coeffs: &CoefficientSet,
    scheme: Scheme,
) -> Result<MitigationResult> {
    let program = build_program(circuit, coeffs, scheme)?;
    let raw = raw_values(circuit, compiled, &program)?;
    let weights: Vec<f64> = program.entries.iter().map(|e| e.weight).collect();
    let mitigated = weights
        .iter()
        .zip(&raw)
        .fold(0.0, |acc, (w, a)| acc + w * a);
    let ideal = ideal_value(circuit, compiled)?;
    Ok(MitigationResult {
        scheme,
        order: coeffs.order,
        layers: circuit.top_level_layers().len(),
        weights,
        raw_values: raw,
        mitigated,
        ideal: Some(ideal),
        delta: Some(mitigated - ideal),
        mu: None,
        gamma: coeffs.gamma,
    })
}

/// Adaptive mitigation with `g = μ²`; measurement-free circuits only.
pub fn mitigate_adaptive(
    circuit: &DynamicCircuit,
    order: usize,
    scheme: Scheme,
) -> Result<MitigationResult> {
    let compiled = compile_circuit(circuit)?;
    let mu = echo_compiled(circuit, &compiled)?;
    let coeffs = adaptive_coefficients(order, (mu * mu).min(1.0))?;
    let mut res = mitigate_compiled(circuit, &compiled, &coeffs, scheme)?;
    res.mu = Some(mu);
    Ok(res)
}

/// Circuit echo `μ = ⟨ρ₀|K_I K|ρ₀⟩`.
pub fn echo(circuit: &DynamicCircuit) -> Result<f64> {
    let compiled = compile_circuit(circuit)?;
    echo_compiled(circuit, &compiled)
}

pub fn echo_compiled(circuit: &DynamicCircuit, compiled: &CompiledCircuit) -> Result<f64> {
    if let Some(ev) = circuit.first_measurement() {
        return Err(Error::Structural(format!(
            "echo is defined for measurement-free circuits (found `{}`)",
            ev.label
        )));
    }
    let rho0 = &circuit.initial_state;
    let d = rho0.side();
    let purity = liouville::real_part(rho0.entries.dotc(&rho0.entries))?;
    if (purity - 1.0).abs() > 1e-9 {
        return Err(Error::Structural(format!(
            "echo needs a pure initial state (purity {purity})"
        )));
    }
    let v = circuit::propagate(circuit, compiled, LayerMode::Noisy, &rho0.entries)?;
    let v = circuit::propagate_inverse(circuit, compiled, v)?;
    let mu = liouville::real_part(rho0.entries.dotc(&v))?;
    debug_assert_eq!(v.len(), d * d);
    if mu <= 0.0 {
        return Err(Error::CatastrophicNoise { mu });
    }
    Ok(mu)
}

#[derive(Clone, Debug)]
pub struct Asymptote {
    /// Whole-circuit map when the circuit is measurement-free.
    pub superop: Option<SuperOperator>,
    pub value: f64,
    pub ideal: f64,
    pub delta: f64,
}

/// `K (K_I K)^(-1/2)` for the whole circuit.
pub fn gkik_asymptote(circuit: &DynamicCircuit) -> Result<Asymptote> {
    let compiled = compile_circuit(circuit)?;
    gkik_asymptote_compiled(circuit, &compiled)
}

pub fn gkik_asymptote_compiled(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
) -> Result<Asymptote> {
    if let Some(ev) = circuit.first_measurement() {
        return Err(Error::Incompatible {
            event: ev.label.clone(),
        });
    }
    let dim = circuit.dim() * circuit.dim();
    let mut k = SuperOperator::identity(dim);
    let mut ki = SuperOperator::identity(dim);
    for s in &circuit.segments {
        match s {
            Segment::Layer(id) => {
                k = compiled.layers[*id].forward.compose(&k);
                ki = ki.compose(&compiled.layers[*id].inverse);
            }
            Segment::Gate(g) => {
                k = g.channel.compose(&k);
                ki = ki.compose(&g.inverse);
            }
            _ => unreachable!(),
        }
    }
    let s = liouville::inv_sqrt(&ki.compose(&k))?;
    let asym = k.compose(&s);
    finish(circuit, compiled, Some(asym))
}

/// Ordered product of per-layer asymptotes; measurements are branch-summed.
pub fn lkik_asymptote(circuit: &DynamicCircuit) -> Result<Asymptote> {
    let compiled = compile_circuit(circuit)?;
    lkik_asymptote_compiled(circuit, &compiled)
}

pub fn lkik_asymptote_compiled(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
) -> Result<Asymptote> {
    let per_layer = layer_asymptotes(circuit, compiled, &InvSqrtOptions::default())?;
    let v = circuit::propagate(
        circuit,
        compiled,
        LayerMode::Custom(&per_layer),
        &circuit.initial_state.entries,
    )?;
    if circuit.has_measurements() {
        let value = liouville::expectation_of(&circuit.observable, &v)?;
        let ideal = ideal_value(circuit, compiled)?;
        return Ok(Asymptote {
            superop: None,
            value,
            ideal,
            delta: value - ideal,
        });
    }
    let factors = circuit_factors(circuit, &per_layer);
    let op = circuit::product(&factors, circuit.dim() * circuit.dim());
    finish(circuit, compiled, Some(op))
}

/// `K_l (K_l^I K_l)^(-1/2)` for every registered layer.
pub fn layer_asymptotes(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
    opts: &InvSqrtOptions,
) -> Result<Vec<Arc<SuperOperator>>> {
    let idx: Vec<usize> = (0..compiled.layers.len()).collect();
    exec::try_par_map(&idx, |&i| {
        let cl = &compiled.layers[i];
        let (s, _, _) = liouville::inv_sqrt_with(&cl.echo, opts)
            .map_err(|e| e.at(circuit.layers[i].label.clone()))?;
        Ok(Arc::new(cl.forward.compose(&s)))
    })
}

fn circuit_factors(
    circuit: &DynamicCircuit,
    per_layer: &[Arc<SuperOperator>],
) -> Vec<Arc<SuperOperator>> {
    circuit
        .segments
        .iter()
        .map(|s| match s {
            Segment::Layer(id) => per_layer[*id].clone(),
            Segment::Gate(g) => g.channel.clone(),
            _ => unreachable!(),
        })
        .collect()
}

fn finish(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
    op: Option<SuperOperator>,
) -> Result<Asymptote> {
    let op = op.expect("measurement-free asymptote");
    let value = liouville::expectation(&circuit.observable, &op, &circuit.initial_state)?;
    let ideal = ideal_value(circuit, compiled)?;
    Ok(Asymptote {
        superop: Some(op),
        value,
        ideal,
        delta: value - ideal,
    })
}

/// Ideal whole-circuit channel (measurement-free circuits).
pub fn ideal_superop(circuit: &DynamicCircuit, compiled: &CompiledCircuit) -> SuperOperator {
    let ideal: Vec<Arc<SuperOperator>> = compiled.layers.iter().map(|l| l.ideal.clone()).collect();
    circuit::product(
        &circuit_factors(circuit, &ideal),
        circuit.dim() * circuit.dim(),
    )
}

pub const POSTSELECT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PostSelected {
    pub ratio: f64,
    pub ideal: f64,
    pub numerator: MitigationResult,
    pub denominator: MitigationResult,
}

/// `⟨O|K_b 𝕄_k K_a|ρ₀⟩ / ⟨I|𝕄_k K_a|ρ₀⟩`, each side LKIK-mitigated.
pub fn mitigate_postselected(
    circuit: &DynamicCircuit,
    outcome: usize,
    coeffs: &CoefficientSet,
    floor: f64,
) -> Result<PostSelected> {
    let num_circ = circuit.postselected(outcome)?;
    let mut den_circ = num_circ.clone();
    den_circ.observable = Observable::identity(circuit.dim());
    let compiled = compile_circuit(&num_circ)?;
    let numerator = mitigate_compiled(&num_circ, &compiled, coeffs, Scheme::Lkik)?;
    let denominator = mitigate_compiled(&den_circ, &compiled, coeffs, Scheme::Lkik)?;
    let raw_num = numerator.unmitigated().unwrap_or(numerator.mitigated);
    let raw_den = denominator.unmitigated().unwrap_or(denominator.mitigated);
    if raw_den < floor || denominator.mitigated < floor {
        return Err(Error::DivisionUnstable {
            denominator: denominator.mitigated,
            raw_numerator: raw_num,
            raw_denominator: raw_den,
        });
    }
    let ideal_den = denominator.ideal.unwrap_or(f64::NAN);
    let ideal = numerator.ideal.unwrap_or(f64::NAN) / ideal_den;
    Ok(PostSelected {
        ratio: numerator.mitigated / denominator.mitigated,
        ideal,
        numerator,
        denominator,
    })
}

/// `‖U − K_mit‖` in spectral norm for measurement-free circuits.
pub fn asymptote_operator_bias(
    circuit: &DynamicCircuit,
    compiled: &CompiledCircuit,
    asym: &SuperOperator,
) -> f64 {
    let u = ideal_superop(circuit, compiled);
    linalg::spectral_norm(&(&u.matrix - &asym.matrix))
}

/// Expectation of an arbitrary final density vector (used by callers that
/// propagate by hand).
pub fn value_of(circuit: &DynamicCircuit, v: &CVector) -> Result<f64> {
    liouville::expectation_of(&circuit.observable, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{Dissipator, Gate, LayerSpec, MeasurementEvent};
    use crate::coefficients::taylor_coefficients;
    use crate::linalg::{c, CMatrix};
    use crate::liouville::pure_state;
    use crate::pauli;

    fn plus_dephasing(xi: f64) -> DynamicCircuit {
        let plus = pauli::product_state("+").unwrap();
        let mut circ = DynamicCircuit::new(
            1,
            pure_state(&plus).unwrap(),
            Observable::projector(&plus).unwrap(),
        )
        .unwrap();
        let diss = vec![Dissipator {
            jump: pauli::z(),
            rate: xi,
        }];
        circ.push_layer(LayerSpec::constant("deph", 1.0, CMatrix::zeros(2, 2), diss).unwrap())
            .unwrap();
        circ
    }

    #[test]
    fn dephasing_first_order_closed_form() {
        let res = mitigate(
            &plus_dephasing(0.1),
            &taylor_coefficients(1).unwrap(),
            Scheme::Gkik,
        )
        .unwrap();
        let oracle = (2.0 + 3.0 * (-0.2f64).exp() - (-0.6f64).exp()) / 4.0;
        assert!((res.mitigated - oracle).abs() < 1e-12);
        assert!((res.raw_values[0] - 0.909365).abs() < 1e-6);
        let book: f64 = res
            .weights
            .iter()
            .zip(&res.raw_values)
            .map(|(w, a)| w * a)
            .sum();
        assert!((book - res.mitigated).abs() < 1e-12);
    }

    #[test]
    fn echo_of_dephasing() {
        let mu = echo(&plus_dephasing(0.1)).unwrap();
        assert!((mu - (1.0 + (-0.4f64).exp()) / 2.0).abs() < 1e-12);
        assert!((echo(&plus_dephasing(0.0)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn commuting_noise_asymptote_is_exact() {
        let circ = plus_dephasing(0.2);
        let g = gkik_asymptote(&circ).unwrap();
        assert!(g.delta.abs() < 1e-10);
        let l = lkik_asymptote(&circ).unwrap();
        assert!((l.value - g.value).abs() < 1e-12);
    }

    #[test]
    fn adaptive_beats_taylor_on_dephasing() {
        let circ = plus_dephasing(0.1);
        let t = mitigate(&circ, &taylor_coefficients(2).unwrap(), Scheme::Gkik).unwrap();
        let a = mitigate_adaptive(&circ, 2, Scheme::Gkik).unwrap();
        assert!(a.mu.unwrap() < 1.0);
        assert!(a.abs_delta().unwrap() < t.abs_delta().unwrap());
    }

    fn hadamard_measure(xi: f64) -> DynamicCircuit {
        let zero = pauli::product_state("0").unwrap();
        let obs = Observable::new(pauli::x()).unwrap();
        let mut circ = DynamicCircuit::new(1, pure_state(&zero).unwrap(), obs).unwrap();
        // exp(-i H t) with H = (π/2)(X+Z)/√2 - π/2 is a Hadamard up to phase.
        let h = (pauli::x() + pauli::z()) * c(std::f64::consts::FRAC_PI_2 / 2f64.sqrt(), 0.0);
        let diss = vec![Dissipator {
            jump: pauli::z(),
            rate: xi,
        }];
        circ.push_layer(LayerSpec::constant("h", 1.0, h, diss).unwrap())
            .unwrap();
        let ev = MeasurementEvent::new("m", vec![0], 1).unwrap();
        let g = Segment::Gate(Gate::named("h", &[0], 1).unwrap());
        circ.push_measure(ev, vec![vec![g], vec![]]);
        circ
    }

    #[test]
    fn postselected_matches_direct_projection() {
        let res = mitigate_postselected(
            &hadamard_measure(0.1),
            0,
            &taylor_coefficients(2).unwrap(),
            POSTSELECT_FLOOR,
        )
        .unwrap();
        // Ideal: |0⟩ → |+⟩, keep 0 → |0⟩, Hadamard → |+⟩, ⟨X⟩ = 1.
        assert!((res.ideal - 1.0).abs() < 1e-12);
        assert!((res.ratio - res.ideal).abs() < 1e-3);
        let noiseless = mitigate_postselected(
            &hadamard_measure(0.0),
            0,
            &taylor_coefficients(2).unwrap(),
            1e-6,
        )
        .unwrap();
        assert!((noiseless.ratio - 1.0).abs() < 1e-10);
    }

    #[test]
    fn postselect_floor_reports_raw_values() {
        let zero = pauli::product_state("0").unwrap();
        let mut circ = DynamicCircuit::new(
            1,
            pure_state(&zero).unwrap(),
            Observable::new(pauli::z()).unwrap(),
        )
        .unwrap();
        circ.push_layer(LayerSpec::constant("idle", 1.0, CMatrix::zeros(2, 2), vec![]).unwrap())
            .unwrap();
        circ.push_measure(
            MeasurementEvent::new("m", vec![0], 1).unwrap(),
            vec![vec![], vec![]],
        );
        match mitigate_postselected(&circ, 1, &taylor_coefficients(1).unwrap(), POSTSELECT_FLOOR) {
            Err(Error::DivisionUnstable {
                raw_denominator, ..
            }) => assert!(raw_denominator.abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lkik_asymptote_through_measurement_runs() {
        let circ = hadamard_measure(0.05);
        let a = lkik_asymptote(&circ).unwrap();
        assert!(a.superop.is_none());
        assert!(a.delta.abs() < 0.05);
        assert!(matches!(
            gkik_asymptote(&circ),
            Err(Error::Incompatible { .. })
        ));
    }
}
