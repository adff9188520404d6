//! Pauli strings, standard gates and product states.
//!
//! Qubit 0 is the leftmost tensor factor, i.e. the most significant bit of a
//! computational basis index.

use crate::error::{Error, Result};
use crate::linalg::{c, CMatrix, CVector, ONE, ZERO};

pub fn id2() -> CMatrix {
    CMatrix::identity(2, 2)
}

pub fn x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
}

pub fn y() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, c(0.0, -1.0), c(0.0, 1.0), ZERO])
}

pub fn z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, c(-1.0, 0.0)])
}

/// σ⁻ = |0⟩⟨1|.
pub fn lowering() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ZERO, ZERO])
}

/// σ⁺ = |1⟩⟨0|.
pub fn raising() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, ZERO, ONE, ZERO])
}

pub fn hadamard() -> CMatrix {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    CMatrix::from_row_slice(2, 2, &[c(h, 0.0), c(h, 0.0), c(h, 0.0), c(-h, 0.0)])
}

pub fn phase_s() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, c(0.0, 1.0)])
}

pub fn phase_t() -> CMatrix {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, c(h, h)])
}

pub fn cnot() -> CMatrix {
    let mut m = CMatrix::zeros(4, 4);
    m[(0, 0)] = ONE;
    m[(1, 1)] = ONE;
    m[(2, 3)] = ONE;
    m[(3, 2)] = ONE;
    m
}

pub fn cz() -> CMatrix {
    let mut m = CMatrix::identity(4, 4);
    m[(3, 3)] = c(-1.0, 0.0);
    m
}

pub fn swap() -> CMatrix {
    let mut m = CMatrix::zeros(4, 4);
    m[(0, 0)] = ONE;
    m[(1, 2)] = ONE;
    m[(2, 1)] = ONE;
    m[(3, 3)] = ONE;
    m
}

fn single(ch: char) -> Option<CMatrix> {
    match ch {
        'I' => Some(id2()),
        'X' => Some(x()),
        'Y' => Some(y()),
        'Z' => Some(z()),
        _ => None,
    }
}

/// Dense Pauli string such as `"XXII"`; its length fixes the qubit count.
pub fn pauli_string(s: &str) -> Result<CMatrix> {
    let s = s.trim();
    if s.is_empty() {
        return Err(Error::Structural("empty Pauli string".into()));
    }
    let mut out = CMatrix::identity(1, 1);
    for (pos, ch) in s.chars().enumerate() {
        let m = single(ch.to_ascii_uppercase()).ok_or_else(|| {
            Error::Structural(format!(
                "malformed Pauli string `{s}`: `{ch}` at position {pos}"
            ))
        })?;
        out = out.kronecker(&m);
    }
    Ok(out)
}

/// Embeds an operator on `targets` (in the operator's own qubit order) into an
/// `n`-qubit register.
pub fn embed(op: &CMatrix, targets: &[usize], n: usize) -> Result<CMatrix> {
    let k = targets.len();
    if op.nrows() != 1 << k || op.ncols() != 1 << k {
        return Err(Error::Dimension(format!(
            "operator is {}×{} for {k} targets",
            op.nrows(),
            op.ncols()
        )));
    }
    for (i, &t) in targets.iter().enumerate() {
        if t >= n {
            return Err(Error::Dimension(format!(
                "qubit {t} out of range for {n} qubits"
            )));
        }
        if targets[..i].contains(&t) {
            return Err(Error::Dimension(format!("qubit {t} repeated")));
        }
    }
    let dim = 1usize << n;
    let bit = |q: usize| 1usize << (n - 1 - q);
    let mut out = CMatrix::zeros(dim, dim);
    for col in 0..dim {
        let mut sub_in = 0;
        for &t in targets {
            sub_in = (sub_in << 1) | usize::from(col & bit(t) != 0);
        }
        let base = targets.iter().fold(col, |acc, &t| acc & !bit(t));
        for sub_out in 0..(1 << k) {
            let v = op[(sub_out, sub_in)];
            if v == ZERO {
                continue;
            }
            let mut row = base;
            for (i, &t) in targets.iter().enumerate() {
                if sub_out & (1 << (k - 1 - i)) != 0 {
                    row |= bit(t);
                }
            }
            out[(row, col)] += v;
        }
    }
    Ok(out)
}

pub fn jump(name: &str) -> Result<CMatrix> {
    match name.to_ascii_lowercase().as_str() {
        "dephasing" | "z" => Ok(z()),
        "damping" | "amplitude-damping" | "lowering" => Ok(lowering()),
        "excitation" | "raising" => Ok(raising()),
        "x" | "bit-flip" => Ok(x()),
        "y" => Ok(y()),
        other => Err(Error::Structural(format!(
            "unknown jump operator `{other}`"
        ))),
    }
}

/// Named gate and its arity.
pub fn gate(name: &str) -> Result<CMatrix> {
    match name.to_ascii_lowercase().as_str() {
        "i" | "id" => Ok(id2()),
        "h" => Ok(hadamard()),
        "x" => Ok(x()),
        "y" => Ok(y()),
        "z" => Ok(z()),
        "s" => Ok(phase_s()),
        "t" => Ok(phase_t()),
        "cnot" | "cx" => Ok(cnot()),
        "cz" => Ok(cz()),
        "swap" => Ok(swap()),
        other => Err(Error::Structural(format!("unknown gate `{other}`"))),
    }
}

pub fn basis_state(n: usize, index: usize) -> CVector {
    let mut v = CVector::zeros(1 << n);
    v[index] = ONE;
    v
}

/// Product state from per-qubit labels in `{0, 1, +, -, r, l}`.
pub fn product_state(labels: &str) -> Result<CVector> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = CVector::from_element(1, ONE);
    for ch in labels.trim().chars() {
        let v = match ch {
            '0' => [ONE, ZERO],
            '1' => [ZERO, ONE],
            '+' => [c(h, 0.0), c(h, 0.0)],
            '-' => [c(h, 0.0), c(-h, 0.0)],
            'r' => [c(h, 0.0), c(0.0, h)],
            'l' => [c(h, 0.0), c(0.0, -h)],
            other => return Err(Error::Structural(format!("unknown state label `{other}`"))),
        };
        out = out.kronecker(&CVector::from_row_slice(&v));
    }
    if out.len() == 1 {
        return Err(Error::Structural("empty state label".into()));
    }
    Ok(out)
}

/// Σ_{i} X_i X_{i+1} on an open chain of `n` qubits.
pub fn xx_chain(n: usize) -> CMatrix {
    let dim = 1 << n;
    let mut h = CMatrix::zeros(dim, dim);
    for i in 0..n.saturating_sub(1) {
        let mut label = vec!['I'; n];
        label[i] = 'X';
        label[i + 1] = 'X';
        h += pauli_string(&label.into_iter().collect::<String>()).expect("valid label");
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_norm, unitarity_defect};

    #[test]
    fn pauli_algebra() {
        let xy = &x() * &y();
        assert!(max_norm(&(xy - z() * c(0.0, 1.0))) < 1e-15);
        let zz = pauli_string("ZZ").unwrap();
        assert_eq!(zz[(3, 3)], ONE);
        assert_eq!(zz[(1, 1)], c(-1.0, 0.0));
        assert!(pauli_string("XQ").is_err());
    }

    #[test]
    fn embed_matches_kron() {
        let full = embed(&x(), &[1], 3).unwrap();
        assert!(max_norm(&(full - pauli_string("IXI").unwrap())) < 1e-15);
        // CNOT with control 2, target 0 flips qubit 0 when qubit 2 is set.
        let g = embed(&cnot(), &[2, 0], 3).unwrap();
        let v = &g * basis_state(3, 0b001);
        assert_eq!(v[0b101], ONE);
        assert!(unitarity_defect(&g) < 1e-15);
    }

    #[test]
    fn product_states() {
        let s = product_state("1+").unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s[2] - c(h, 0.0)).norm() < 1e-15);
        assert!((s[3] - c(h, 0.0)).norm() < 1e-15);
        assert!(product_state("0a").is_err());
    }

    #[test]
    fn chain_has_expected_terms() {
        let h = xx_chain(3);
        assert!(
            max_norm(&(h - pauli_string("XXI").unwrap() - pauli_string("IXX").unwrap())) < 1e-15
        );
    }
}
