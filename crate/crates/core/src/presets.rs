//! Ready-made circuits used by the experiments, benches and tests.

use std::f64::consts::FRAC_PI_4;

use crate::circuit::{Dissipator, DynamicCircuit, Gate, LayerSpec, MeasurementEvent, Segment};
use crate::error::Result;
use crate::linalg::{c, CMatrix};
use crate::liouville::{pure_state, Observable};
use crate::pauli;

pub const CHAIN_QUBITS: usize = 4;

/// Local noise on every qubit with the given jump operator.
pub fn local_noise(n: usize, jump: &CMatrix, rate: f64) -> Result<Vec<Dissipator>> {
    (0..n)
        .map(|q| {
            Ok(Dissipator {
                jump: pauli::embed(jump, &[q], n)?,
                rate,
            })
        })
        .collect()
}

/// One constant layer of the 4-qubit XX chain over duration `tau`.
pub fn chain_layer(xi: f64, tau: f64, jump: &CMatrix) -> Result<LayerSpec> {
    LayerSpec::constant(
        "chain",
        tau,
        pauli::xx_chain(CHAIN_QUBITS),
        local_noise(CHAIN_QUBITS, jump, xi)?,
    )
}

/// The 4-qubit chain starting in |0000⟩ and measured on |0000⟩⟨0000|,
/// split into `l` equal layers over total time 1.
pub fn chain_circuit(xi: f64, l: usize) -> Result<DynamicCircuit> {
    chain_circuit_with(xi, l, &pauli::z())
}

pub fn chain_circuit_with(xi: f64, l: usize, jump: &CMatrix) -> Result<DynamicCircuit> {
    let zero = pauli::product_state("0000")?;
    let mut circ = DynamicCircuit::new(
        CHAIN_QUBITS,
        pure_state(&zero)?,
        Observable::projector(&zero)?,
    )?;
    let whole = chain_layer(xi, 1.0, jump)?;
    // Constant drive: every slice is the same layer, so register it once.
    let slice = whole.split_uniform(l)?.remove(0);
    let id = circ.add_layer(slice)?;
    circ.segments = vec![Segment::Layer(id); l];
    circ.declared_duration = Some(1.0);
    Ok(circ)
}

/// Chain split at arbitrary cut points in (0, 1).
pub fn chain_circuit_cuts(xi: f64, cuts: &[f64]) -> Result<DynamicCircuit> {
    let zero = pauli::product_state("0000")?;
    let mut circ = DynamicCircuit::new(
        CHAIN_QUBITS,
        pure_state(&zero)?,
        Observable::projector(&zero)?,
    )?;
    for part in chain_layer(xi, 1.0, &pauli::z())?.split_at(cuts)? {
        circ.push_layer(part)?;
    }
    circ.declared_duration = Some(1.0);
    Ok(circ)
}

/// The chain with qubit 0 measured after every layer; outcome 1 applies
/// Hadamards to the other qubits.
pub fn feedforward_chain(xi: f64, l: usize) -> Result<DynamicCircuit> {
    let base = chain_circuit(xi, l)?;
    let mut circ = base.clone();
    circ.segments.clear();
    let hadamards: Vec<Segment> = (1..CHAIN_QUBITS)
        .map(|q| Gate::named("h", &[q], CHAIN_QUBITS).map(Segment::Gate))
        .collect::<Result<_>>()?;
    for (k, seg) in base.segments.iter().enumerate() {
        circ.segments.push(seg.clone());
        let ev = MeasurementEvent::new(format!("m{k}"), vec![0], CHAIN_QUBITS)?;
        circ.segments.push(Segment::Measure {
            event: ev,
            branches: vec![Vec::new(), hadamards.clone()],
        });
    }
    Ok(circ)
}

/// Two-qubit layer whose ideal action is a SWAP (up to phase) and whose noise
/// does not commute with the drive.
pub fn swap_layer(xi: f64) -> Result<LayerSpec> {
    let h = (pauli::pauli_string("XX")? + pauli::pauli_string("YY")? + pauli::pauli_string("ZZ")?)
        * c(FRAC_PI_4, 0.0);
    let diss = vec![Dissipator {
        jump: pauli::embed(&pauli::lowering(), &[0], 2)?,
        rate: xi,
    }];
    LayerSpec::constant("swap", 1.0, h, diss)
}

/// The swap layer started in |11⟩ and measured with X⊗Y.
pub fn swap_circuit(xi: f64) -> Result<DynamicCircuit> {
    let start = pauli::product_state("11")?;
    let obs = Observable::new(pauli::pauli_string("XY")?)?;
    let mut circ = DynamicCircuit::new(2, pure_state(&start)?, obs)?;
    circ.push_layer(swap_layer(xi)?)?;
    Ok(circ)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::compile_circuit;
    use crate::linalg::max_norm;
    use crate::mitigation::ideal_value;

    #[test]
    fn chain_ideal_value() {
        let circ = chain_circuit(0.02, 1).unwrap();
        let v = ideal_value(&circ, &compile_circuit(&circ).unwrap()).unwrap();
        assert!((v - 0.0248783).abs() < 1e-6, "{v}");
    }

    #[test]
    fn swap_layer_is_swap() {
        let l = swap_layer(0.0).unwrap();
        let k = crate::circuit::compile_layer(&l).unwrap();
        let s = crate::liouville::unitary_superop(&pauli::swap()).unwrap();
        assert!(max_norm(&(k.matrix - s.matrix)) < 1e-12);
    }

    #[test]
    fn feedforward_shape() {
        let circ = feedforward_chain(0.1, 3).unwrap();
        assert_eq!(circ.segments.len(), 6);
        assert_eq!(circ.top_level_layers().len(), 3);
        circ.validate().unwrap();
    }
}
