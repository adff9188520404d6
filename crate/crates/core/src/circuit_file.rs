//! JSON description of layered and dynamic circuits.

use serde::{Deserialize, Serialize};

use crate::circuit::{
    Dissipator, DriveStep, DynamicCircuit, Gate, LayerSpec, MeasurementEvent, Segment,
};
use crate::error::{Error, Result};
use crate::linalg::{c, CMatrix};
use crate::liouville::{pure_state, Observable};
use crate::pauli;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PauliTerm {
    pub pauli: String,
    pub coeff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QubitSel {
    All(AllQubits),
    List(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllQubits {
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DissipatorSpec {
    pub jump: String,
    pub qubits: QubitSel,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    pub duration: f64,
    pub drive: Vec<PauliTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFile {
    #[serde(default)]
    pub label: Option<String>,
    /// Constant drive over `duration`; mutually exclusive with `schedule`.
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub drive: Vec<PauliTerm>,
    #[serde(default)]
    pub schedule: Vec<StepSpec>,
    #[serde(default)]
    pub dissipators: Vec<DissipatorSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub gate: String,
    pub qubits: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Position {
    After(usize),
    Every(EveryLayer),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EveryLayer {
    EveryLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSpec {
    /// Index of the layer (after splitting) the measurement follows, or
    /// `"every-layer"`.
    pub after: Position,
    pub qubits: Vec<usize>,
    /// Gate list per outcome bitstring; missing outcomes mean "no action".
    #[serde(default)]
    pub branches: std::collections::BTreeMap<String, Vec<GateSpec>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum ObservableSpec {
    /// Projector onto a product state such as "0000".
    Projector(String),
    Pauli(String),
    Sum(Vec<PauliTerm>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitFile {
    pub qubits: usize,
    pub layers: Vec<LayerFile>,
    #[serde(default)]
    pub measurements: Vec<MeasurementSpec>,
    pub observable: ObservableSpec,
    pub initial_state: String,
    #[serde(default)]
    pub duration: Option<f64>,
}

/// Knobs applied while building a circuit from a file.
#[derive(Clone, Debug, Default)]
pub struct BuildOptions {
    /// Replaces every dissipator rate.
    pub rate: Option<f64>,
    /// Splits every layer into this many equal slices.
    pub split: Option<usize>,
    /// Drops all measurements.
    pub without_measurements: bool,
}

fn field_err(field: String, e: Error) -> Error {
    Error::config(field, e.to_string())
}

fn drive_matrix(terms: &[PauliTerm], n: usize, field: &str) -> Result<CMatrix> {
    let d = 1usize << n;
    let mut h = CMatrix::zeros(d, d);
    for (k, t) in terms.iter().enumerate() {
        let f = format!("{field}[{k}].pauli");
        if t.pauli.trim().len() != n {
            return Err(Error::config(
                f,
                format!("`{}` has length {}, expected {n}", t.pauli, t.pauli.len()),
            ));
        }
        h += pauli::pauli_string(&t.pauli).map_err(|e| field_err(f, e))? * c(t.coeff, 0.0);
    }
    Ok(h)
}

fn dissipators(
    specs: &[DissipatorSpec],
    n: usize,
    field: &str,
    rate: Option<f64>,
) -> Result<Vec<Dissipator>> {
    let mut out = Vec::new();
    for (k, s) in specs.iter().enumerate() {
        let f = format!("{field}[{k}]");
        let jump = pauli::jump(&s.jump).map_err(|e| field_err(format!("{f}.jump"), e))?;
        let qubits: Vec<usize> = match &s.qubits {
            QubitSel::All(_) => (0..n).collect(),
            QubitSel::List(v) => v.clone(),
        };
        let r = rate.unwrap_or(s.rate);
        if !(r >= 0.0) {
            return Err(Error::config(
                format!("{f}.rate"),
                format!("rate {r} must be non-negative"),
            ));
        }
        for q in qubits {
            let op =
                pauli::embed(&jump, &[q], n).map_err(|e| field_err(format!("{f}.qubits"), e))?;
            out.push(Dissipator { jump: op, rate: r });
        }
    }
    Ok(out)
}

impl CircuitFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn build(&self, opts: &BuildOptions) -> Result<DynamicCircuit> {
        let n = self.qubits;
        if n == 0 || n > 6 {
            return Err(Error::config(
                "qubits",
                format!("{n} qubits is outside 1..=6"),
            ));
        }
        let psi = pauli::product_state(&self.initial_state)
            .map_err(|e| field_err("initial_state".into(), e))?;
        if psi.len() != 1 << n {
            return Err(Error::config(
                "initial_state",
                format!("`{}` is not a {n}-qubit label", self.initial_state),
            ));
        }
        let observable = match &self.observable {
            ObservableSpec::Projector(s) => {
                let v = pauli::product_state(s)
                    .map_err(|e| field_err("observable.projector".into(), e))?;
                if v.len() != 1 << n {
                    return Err(Error::config(
                        "observable.projector",
                        format!("`{s}` is not a {n}-qubit label"),
                    ));
                }
                Observable::projector(&v)?
            }
            ObservableSpec::Pauli(s) => Observable::new(drive_matrix(
                &[PauliTerm {
                    pauli: s.clone(),
                    coeff: 1.0,
                }],
                n,
                "observable.pauli",
            )?)?,
            ObservableSpec::Sum(terms) => {
                Observable::new(drive_matrix(terms, n, "observable.sum")?)?
            }
        };
        let mut circ = DynamicCircuit::new(n, pure_state(&psi)?, observable)?;
        if self.layers.is_empty() {
            return Err(Error::config("layers", "at least one layer is required"));
        }
        let split = opts.split.unwrap_or(1);
        let mut layer_ids = Vec::new();
        for (i, lf) in self.layers.iter().enumerate() {
            let field = format!("layers[{i}]");
            let label = lf.label.clone().unwrap_or_else(|| format!("layer{i}"));
            let diss = dissipators(
                &lf.dissipators,
                n,
                &format!("{field}.dissipators"),
                opts.rate,
            )?;
            let layer = match (lf.duration, lf.schedule.is_empty()) {
                (Some(t), true) => {
                    let h = drive_matrix(&lf.drive, n, &format!("{field}.drive"))?;
                    LayerSpec::constant(label, t, h, diss)
                        .map_err(|e| field_err(field.clone(), e))?
                }
                (None, false) => {
                    if !lf.drive.is_empty() {
                        return Err(Error::config(
                            field,
                            "give either `drive` or `schedule`, not both",
                        ));
                    }
                    let mut steps = Vec::new();
                    for (k, st) in lf.schedule.iter().enumerate() {
                        let h =
                            drive_matrix(&st.drive, n, &format!("{field}.schedule[{k}].drive"))?;
                        steps.push(DriveStep {
                            duration: st.duration,
                            hamiltonian: h,
                        });
                    }
                    LayerSpec::scheduled(label, steps, diss)
                        .map_err(|e| field_err(field.clone(), e))?
                }
                _ => {
                    return Err(Error::config(
                        field,
                        "a layer needs exactly one of `duration` or `schedule`",
                    ))
                }
            };
            let constant = layer.schedule.len() == 1;
            let parts = layer.split_uniform(split)?;
            if constant {
                let id = circ.add_layer(parts.into_iter().next().expect("split >= 1"))?;
                layer_ids.extend(std::iter::repeat(id).take(split));
            } else {
                for p in parts {
                    layer_ids.push(circ.add_layer(p)?);
                }
            }
        }
        let mut after: Vec<Vec<Segment>> = vec![Vec::new(); layer_ids.len()];
        if !opts.without_measurements {
            for (mi, m) in self.measurements.iter().enumerate() {
                let field = format!("measurements[{mi}]");
                let positions: Vec<usize> = match m.after {
                    Position::After(k) => {
                        if k >= layer_ids.len() {
                            return Err(Error::config(
                                format!("{field}.after"),
                                format!("layer {k} does not exist ({} layers)", layer_ids.len()),
                            ));
                        }
                        vec![k]
                    }
                    Position::Every(_) => (0..layer_ids.len()).collect(),
                };
                for k in positions {
                    let ev = MeasurementEvent::new(format!("m{mi}@{k}"), m.qubits.clone(), n)
                        .map_err(|e| field_err(format!("{field}.qubits"), e))?;
                    let mut branches = vec![Vec::new(); ev.outcomes()];
                    for (bits, gates) in &m.branches {
                        let idx = (0..ev.outcomes())
                            .find(|&o| ev.outcome_label(o) == *bits)
                            .ok_or_else(|| {
                                Error::config(
                                    format!("{field}.branches"),
                                    format!("`{bits}` is not an outcome"),
                                )
                            })?;
                        for (gi, g) in gates.iter().enumerate() {
                            let gate = Gate::named(&g.gate, &g.qubits, n).map_err(|e| {
                                field_err(format!("{field}.branches.{bits}[{gi}]"), e)
                            })?;
                            branches[idx].push(Segment::Gate(gate));
                        }
                    }
                    after[k].push(Segment::Measure {
                        event: ev,
                        branches,
                    });
                }
            }
        }
        for (k, id) in layer_ids.iter().enumerate() {
            circ.segments.push(Segment::Layer(*id));
            circ.segments.append(&mut after[k]);
        }
        circ.declared_duration = self.duration;
        circ.validate()?;
        Ok(circ)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHAIN: &str = r#"{
        "qubits": 2,
        "layers": [{"duration": 1.0, "drive": [{"pauli": "XX", "coeff": 1.0}],
                    "dissipators": [{"jump": "dephasing", "qubits": "all", "rate": 0.1}]}],
        "measurements": [{"after": "every-layer", "qubits": [0], "branches": {"1": [{"gate": "h", "qubits": [1]}]}}],
        "observable": {"projector": "00"},
        "initial_state": "00",
        "duration": 1.0
    }"#;

    #[test]
    fn parses_and_builds() {
        let f = CircuitFile::from_json(CHAIN).unwrap();
        let c = f
            .build(&BuildOptions {
                split: Some(3),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(c.segments.len(), 6);
        assert_eq!(c.layers.len(), 1);
        let plain = f
            .build(&BuildOptions {
                without_measurements: true,
                rate: Some(0.0),
                ..Default::default()
            })
            .unwrap();
        assert!(!plain.has_measurements());
        assert!(plain.layers[0].is_noiseless());
    }

    #[test]
    fn bad_pauli_names_field() {
        let text = CHAIN.replace("\"XX\"", "\"XQ\"");
        let err = CircuitFile::from_json(&text)
            .unwrap()
            .build(&BuildOptions::default())
            .unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "layers[0].drive[0].pauli"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let text = CHAIN.replace("\"qubits\": 2,", "\"qubits\": 2, \"colour\": 1,");
        let err = CircuitFile::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("colour"));
    }
}
