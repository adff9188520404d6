//! Vectorized density-matrix algebra.
//!
//! Column stacking throughout: `vec(A ρ B) = (Bᵀ ⊗ A) vec(ρ)`, so the unitary
//! channel `ρ ↦ U ρ U†` is `Ū ⊗ U`. The inner product is `⟨⟨A|ρ⟩⟩ = Tr(A†ρ)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMatrix, CVector, C64, ONE};

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const UNITARY_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct DensityVector {
    pub entries: CVector,
}

impl DensityVector {
    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    /// Side length of the underlying density matrix.
    pub fn side(&self) -> usize {
        (self.entries.len() as f64).sqrt().round() as usize
    }

    pub fn trace(&self) -> C64 {
        let d = self.side();
        (0..d).map(|i| self.entries[i * d + i]).sum()
    }

    pub fn devectorize(&self) -> CMatrix {
        let d = self.side();
        CMatrix::from_column_slice(d, d, self.entries.as_slice())
    }
}

pub fn vectorize(rho: &CMatrix) -> Result<DensityVector> {
    if !linalg::is_square(rho) {
        return Err(Error::Dimension(format!(
            "{}×{} is not square",
            rho.nrows(),
            rho.ncols()
        )));
    }
    if !rho.nrows().is_power_of_two() {
        return Err(Error::Dimension(format!(
            "vectorized length {} is not a power of 4",
            rho.nrows() * rho.nrows()
        )));
    }
    let defect = linalg::hermiticity_defect(rho);
    if defect > HERMITIAN_TOL {
        return Err(Error::NotHermitian { defect });
    }
    Ok(DensityVector {
        entries: CVector::from_column_slice(rho.as_slice()),
    })
}

/// Pure-state density vector `|ψ⟩⟨ψ|`.
pub fn pure_state(psi: &CVector) -> Result<DensityVector> {
    let rho = psi * psi.adjoint();
    vectorize(&rho)
}

/// Vectorized identity, the trace functional `⟨⟨I|`.
pub fn vec_identity(d: usize) -> CVector {
    let mut v = CVector::zeros(d * d);
    for i in 0..d {
        v[i * d + i] = ONE;
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    UnitaryChannel,
    NoisyChannel,
    Generator { dissipative: bool },
    Projector,
    Composite,
}

#[derive(Clone, Debug)]
pub struct SuperOperator {
    pub matrix: CMatrix,
    pub kind: Kind,
}

impl SuperOperator {
    pub fn new(matrix: CMatrix, kind: Kind) -> Self {
        SuperOperator { matrix, kind }
    }

    pub fn identity(dim: usize) -> Self {
        SuperOperator::new(linalg::identity(dim), Kind::UnitaryChannel)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SuperOperator) -> SuperOperator {
        let kind = match (self.kind, other.kind) {
            (Kind::UnitaryChannel, Kind::UnitaryChannel) => Kind::UnitaryChannel,
            (
                Kind::UnitaryChannel | Kind::NoisyChannel,
                Kind::UnitaryChannel | Kind::NoisyChannel,
            ) => Kind::NoisyChannel,
            _ => Kind::Composite,
        };
        SuperOperator::new(linalg::matmul(&self.matrix, &other.matrix), kind)
    }

    pub fn apply(&self, rho: &CVector) -> CVector {
        &self.matrix * rho
    }

    /// `‖⟨⟨I|S − ⟨⟨I|‖_max`.
    pub fn trace_defect(&self) -> f64 {
        let d = (self.dim() as f64).sqrt().round() as usize;
        let id = vec_identity(d);
        let row = id.transpose() * &self.matrix;
        row.iter()
            .zip(id.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct Observable {
    pub matrix: CMatrix,
    /// `vec(A)`, so that `⟨⟨A|ρ⟩⟩ = dual† · vec(ρ)`.
    pub dual: CVector,
}

impl Observable {
    pub fn new(matrix: CMatrix) -> Result<Self> {
        if !linalg::is_square(&matrix) {
            return Err(Error::Dimension("observable must be square".into()));
        }
        let defect = linalg::hermiticity_defect(&matrix);
        if defect > HERMITIAN_TOL {
            return Err(Error::NotHermitian { defect });
        }
        let dual = CVector::from_column_slice(matrix.as_slice());
        Ok(Observable { matrix, dual })
    }

    pub fn projector(psi: &CVector) -> Result<Self> {
        Observable::new(psi * psi.adjoint())
    }

    pub fn identity(d: usize) -> Self {
        Observable::new(linalg::identity(d)).expect("identity is Hermitian")
    }

    pub fn is_projector(&self) -> bool {
        let sq = linalg::matmul(&self.matrix, &self.matrix);
        linalg::max_norm(&(sq - &self.matrix)) < 1e-10
    }

    pub fn side(&self) -> usize {
        self.matrix.nrows()
    }

    /// `⟨⟨A|v⟩⟩` as a complex number.
    pub fn pair(&self, v: &CVector) -> C64 {
        self.dual.dotc(v)
    }
}

pub fn unitary_superop(u: &CMatrix) -> Result<SuperOperator> {
    if !linalg::is_square(u) {
        return Err(Error::Dimension("unitary must be square".into()));
    }
    let defect = linalg::unitarity_defect(u);
    if defect > UNITARY_TOL {
        return Err(Error::NotUnitary { defect });
    }
    Ok(SuperOperator::new(
        linalg::kron(&u.conjugate(), u),
        Kind::UnitaryChannel,
    ))
}

/// `−i(I ⊗ H − Hᵀ ⊗ I)`, the coherent part of the generator.
pub fn hamiltonian_superop(h: &CMatrix) -> CMatrix {
    let d = h.nrows();
    let id = linalg::identity(d);
    (linalg::kron(&id, h) - linalg::kron(&h.transpose(), &id)) * c(0.0, -1.0)
}

pub fn dissipator_superop(dissipators: &[(CMatrix, f64)]) -> Result<CMatrix> {
    let d = dissipators.first().map(|(l, _)| l.nrows()).unwrap_or(0);
    let mut out = CMatrix::zeros(d * d, d * d);
    let id = linalg::identity(d);
    for (l, rate) in dissipators {
        if *rate < 0.0 || !rate.is_finite() {
            return Err(Error::NegativeRate { rate: *rate });
        }
        if l.nrows() != d || !linalg::is_square(l) {
            return Err(Error::Dimension(
                "jump operators must share one dimension".into(),
            ));
        }
        if *rate == 0.0 {
            continue;
        }
        let ldl = linalg::matmul(&l.adjoint(), l);
        let term = linalg::kron(&l.conjugate(), l)
            - (linalg::kron(&id, &ldl) + linalg::kron(&ldl.transpose(), &id)) * c(0.5, 0.0);
        out += term * c(*rate, 0.0);
    }
    Ok(out)
}

pub fn lindbladian(h: &CMatrix, dissipators: &[(CMatrix, f64)]) -> Result<SuperOperator> {
    if !linalg::is_square(h) {
        return Err(Error::Dimension("Hamiltonian must be square".into()));
    }
    let defect = linalg::hermiticity_defect(h);
    if defect > HERMITIAN_TOL * h.nrows().max(1) as f64 {
        return Err(Error::NotHermitian { defect });
    }
    if let Some((l, _)) = dissipators.iter().find(|(l, _)| l.nrows() != h.nrows()) {
        return Err(Error::Dimension(format!(
            "jump operator is {}×{}, Hamiltonian is {}×{}",
            l.nrows(),
            l.ncols(),
            h.nrows(),
            h.ncols()
        )));
    }
    let mut gen = hamiltonian_superop(h);
    let dissipative = dissipators.iter().any(|(_, r)| *r != 0.0);
    if !dissipators.is_empty() {
        gen += dissipator_superop(dissipators)?;
    }
    Ok(SuperOperator::new(gen, Kind::Generator { dissipative }))
}

pub fn channel_exp(gen: &SuperOperator, t: f64) -> Result<SuperOperator> {
    let dissipative = match gen.kind {
        Kind::Generator { dissipative } => dissipative,
        other => {
            return Err(Error::Structural(format!(
                "channel_exp needs a generator, got {other:?}"
            )))
        }
    };
    if t < 0.0 || !t.is_finite() {
        return Err(Error::Structural(format!(
            "evolution time {t} must be finite and non-negative"
        )));
    }
    let m = linalg::expm(&(&gen.matrix * c(t, 0.0)))?;
    let kind = if dissipative {
        Kind::NoisyChannel
    } else {
        Kind::UnitaryChannel
    };
    let s = SuperOperator::new(m, kind);
    let defect = s.trace_defect();
    if defect > TRACE_TOL {
        return Err(Error::NotTracePreserving { defect });
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug)]
pub struct InvSqrtOptions {
    pub floor: f64,
    pub tol: f64,
    pub fallback_tol: f64,
}

impl Default for InvSqrtOptions {
    fn default() -> Self {
        InvSqrtOptions {
            floor: 1e-6,
            tol: 1e-8,
            fallback_tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InvSqrtRoute {
    Eigen,
    SchurSqrt,
}

pub fn inv_sqrt(s: &SuperOperator) -> Result<SuperOperator> {
    inv_sqrt_with(s, &InvSqrtOptions::default()).map(|(x, _, _)| x)
}

/// Principal `S^{-1/2}`, with the route taken and the residual
/// `‖X·X·S − I‖_max`.
pub fn inv_sqrt_with(
    s: &SuperOperator,
    opts: &InvSqrtOptions,
) -> Result<(SuperOperator, InvSqrtRoute, f64)> {
    let n = s.dim();
    let schur = linalg::schur(&s.matrix)?;
    let smallest = (0..n)
        .map(|i| schur.t[(i, i)].norm())
        .fold(f64::INFINITY, f64::min);
    if smallest < opts.floor {
        return Err(Error::NoiseTooStrong {
            magnitude: smallest,
            floor: opts.floor,
            layer: None,
        });
    }
    let residual_of = |x: &CMatrix| {
        let r = linalg::matmul3(x, x, &s.matrix) - linalg::identity(n);
        let m = linalg::max_norm(&r);
        if m.is_finite() {
            m
        } else {
            f64::INFINITY
        }
    };

    let y = linalg::triangular_eigenvectors(&schur.t);
    if let Ok(y_inv) = linalg::triangular_inverse(&y) {
        let mut yd = y.clone();
        for k in 0..n {
            let f = schur.t[(k, k)].sqrt().inv();
            for i in 0..n {
                yd[(i, k)] *= f;
            }
        }
        let inner = linalg::matmul(&yd, &y_inv);
        let x = linalg::matmul3(&schur.z, &inner, &schur.z.adjoint());
        let res = residual_of(&x);
        if res <= opts.tol {
            return Ok((
                SuperOperator::new(x, Kind::Composite),
                InvSqrtRoute::Eigen,
                res,
            ));
        }
    }

    let r = linalg::triangular_sqrt(&schur.t);
    let r_inv = linalg::triangular_inverse(&r)?;
    let x = linalg::matmul3(&schur.z, &r_inv, &schur.z.adjoint());
    let res = residual_of(&x);
    if res > opts.fallback_tol {
        return Err(Error::InvSqrtResidual { residual: res });
    }
    Ok((
        SuperOperator::new(x, Kind::Composite),
        InvSqrtRoute::SchurSqrt,
        res,
    ))
}

/// `⟨⟨A|S|ρ₀⟩⟩` split into real and imaginary parts.
pub fn expectation_parts(a: &Observable, s: &SuperOperator, rho0: &DensityVector) -> Result<C64> {
    if a.dual.len() != s.dim() || s.dim() != rho0.dim() {
        return Err(Error::Dimension(format!(
            "observable {}, superoperator {}, state {}",
            a.dual.len(),
            s.dim(),
            rho0.dim()
        )));
    }
    Ok(a.pair(&s.apply(&rho0.entries)))
}

pub const IMAG_ERROR: f64 = 1e-6;

pub fn expectation(a: &Observable, s: &SuperOperator, rho0: &DensityVector) -> Result<f64> {
    real_part(expectation_parts(a, s, rho0)?)
}

/// Real part of a Liouville pairing after the imaginary-residual check.
pub fn real_part(z: C64) -> Result<f64> {
    if z.im.abs() >= IMAG_ERROR {
        return Err(Error::Inconsistent { imag: z.im });
    }
    Ok(z.re)
}

pub fn expectation_of(a: &Observable, v: &CVector) -> Result<f64> {
    if a.dual.len() != v.len() {
        return Err(Error::Dimension("observable and state sizes differ".into()));
    }
    real_part(a.pair(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ZERO;
    use crate::pauli;

    fn plus() -> CVector {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        CVector::from_vec(vec![c(h, 0.0), c(h, 0.0)])
    }

    #[test]
    fn vectorize_examples() {
        let mixed = linalg::identity(2) * c(0.5, 0.0);
        let v = vectorize(&mixed).unwrap();
        assert_eq!(
            v.entries.as_slice(),
            &[c(0.5, 0.0), ZERO, ZERO, c(0.5, 0.0)]
        );
        let zero = pure_state(&pauli::basis_state(1, 0)).unwrap();
        assert_eq!(zero.entries.as_slice(), &[ONE, ZERO, ZERO, ZERO]);
        // Oracle: explicit outer product, then column stacking by hand.
        let p = plus();
        let outer = [
            [p[0] * p[0].conj(), p[0] * p[1].conj()],
            [p[1] * p[0].conj(), p[1] * p[1].conj()],
        ];
        let manual = [outer[0][0], outer[1][0], outer[0][1], outer[1][1]];
        let v = pure_state(&p).unwrap();
        for (a, b) in v.entries.iter().zip(manual.iter()) {
            assert!((a - b).norm() < 1e-15);
            assert!((a - c(0.5, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn vectorize_rejects_bad_dimension() {
        let m = linalg::identity(3);
        assert!(matches!(vectorize(&m), Err(Error::Dimension(_))));
    }

    #[test]
    fn unitary_superop_examples() {
        assert!(
            linalg::max_norm(
                &(unitary_superop(&linalg::identity(2)).unwrap().matrix - linalg::identity(4))
            ) == 0.0
        );
        let x = unitary_superop(&pauli::x()).unwrap();
        let zero = pure_state(&pauli::basis_state(1, 0)).unwrap();
        let one = pure_state(&pauli::basis_state(1, 1)).unwrap();
        assert!(linalg::max_norm_vec(&(x.apply(&zero.entries) - &one.entries)) < 1e-15);
        // Oracle: H|0⟩⟨0|H† computed as a 2×2 product.
        let h = pauli::hadamard();
        let direct = &h * zero.devectorize() * h.adjoint();
        let via = unitary_superop(&h).unwrap().apply(&zero.entries);
        assert!(linalg::max_norm_vec(&(via - vectorize(&direct).unwrap().entries)) < 1e-15);
        assert!(
            linalg::max_norm_vec(
                &(unitary_superop(&h).unwrap().apply(&zero.entries)
                    - pure_state(&plus()).unwrap().entries)
            ) < 1e-15
        );
    }

    #[test]
    fn unitary_superop_rejects_non_unitary() {
        let m = linalg::identity(2) * c(1.1, 0.0);
        match unitary_superop(&m) {
            Err(Error::NotUnitary { defect }) => assert!((defect - 0.21).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lindbladian_zero_and_negative_rate() {
        let z = lindbladian(&CMatrix::zeros(2, 2), &[]).unwrap();
        assert_eq!(linalg::max_norm(&z.matrix), 0.0);
        assert!(matches!(
            lindbladian(&CMatrix::zeros(2, 2), &[(pauli::z(), -0.1)]),
            Err(Error::NegativeRate { .. })
        ));
    }

    #[test]
    fn dephasing_channel_matches_closed_form() {
        let xi = 0.05;
        let t = 2.0;
        let gen = lindbladian(&CMatrix::zeros(2, 2), &[(pauli::z(), xi)]).unwrap();
        let k = channel_exp(&gen, t).unwrap();
        assert_eq!(k.kind, Kind::NoisyChannel);
        // Coherence index (0,1) in column stacking is 2.
        assert!((k.matrix[(2, 2)] - c((-2.0 * xi * t).exp(), 0.0)).norm() < 1e-14);
        assert!((k.matrix[(1, 1)] - c((-0.2f64).exp(), 0.0)).norm() < 1e-14);
        assert!((k.matrix[(0, 0)] - ONE).norm() < 1e-14);
        assert!(((-0.2f64).exp() - 0.81873).abs() < 1e-5);
    }

    #[test]
    fn channel_exp_semigroup_and_zero() {
        let gen = lindbladian(&(pauli::x() * c(0.7, 0.0)), &[(pauli::lowering(), 0.3)]).unwrap();
        let a = channel_exp(&gen, 0.4).unwrap();
        let b = channel_exp(&gen, 0.9).unwrap();
        let ab = channel_exp(&gen, 1.3).unwrap();
        assert!(linalg::max_norm(&(b.compose(&a).matrix - ab.matrix)) < 1e-10);
        let zero = lindbladian(&CMatrix::zeros(2, 2), &[]).unwrap();
        assert!(
            linalg::max_norm(&(channel_exp(&zero, 3.0).unwrap().matrix - linalg::identity(4)))
                == 0.0
        );
    }

    #[test]
    fn channel_exp_requires_generator() {
        let s = SuperOperator::identity(4);
        assert!(matches!(channel_exp(&s, 1.0), Err(Error::Structural(_))));
    }

    #[test]
    fn inv_sqrt_examples() {
        let id = SuperOperator::identity(4);
        assert!(linalg::max_norm(&(inv_sqrt(&id).unwrap().matrix - linalg::identity(4))) < 1e-14);
        let mut d = linalg::identity(4);
        d[(0, 0)] = c(4.0, 0.0);
        let x = inv_sqrt(&SuperOperator::new(d, Kind::Composite)).unwrap();
        let mut expect = linalg::identity(4);
        expect[(0, 0)] = c(0.5, 0.0);
        assert!(linalg::max_norm(&(x.matrix - expect)) < 1e-14);
        // Zero drive: pulse inverse equals the channel, so K·(K K)^{-1/2} = I.
        let gen = lindbladian(&CMatrix::zeros(2, 2), &[(pauli::z(), 0.1)]).unwrap();
        let k = channel_exp(&gen, 1.0).unwrap();
        let kik = k.compose(&k);
        let rec = k.compose(&inv_sqrt(&kik).unwrap());
        assert!(linalg::max_norm(&(rec.matrix - linalg::identity(4))) < 1e-8);
    }

    #[test]
    fn inv_sqrt_floor() {
        let mut d = linalg::identity(4);
        d[(3, 3)] = c(1e-9, 0.0);
        assert!(matches!(
            inv_sqrt(&SuperOperator::new(d, Kind::Composite)),
            Err(Error::NoiseTooStrong { .. })
        ));
    }

    #[test]
    fn inv_sqrt_defective_uses_schur() {
        // A Jordan block is not diagonalizable.
        let mut j = linalg::identity(4);
        j[(0, 1)] = c(0.5, 0.0);
        j[(2, 3)] = c(0.0, 0.25);
        let s = SuperOperator::new(j, Kind::Composite);
        let (x, _, res) = inv_sqrt_with(&s, &InvSqrtOptions::default()).unwrap();
        assert!(res < 1e-12);
        let back = linalg::matmul3(&x.matrix, &x.matrix, &s.matrix);
        assert!(linalg::max_norm(&(back - linalg::identity(4))) < 1e-8);
    }

    #[test]
    fn expectation_examples() {
        let gen = lindbladian(&CMatrix::zeros(2, 2), &[(pauli::z(), 0.1)]).unwrap();
        let k = channel_exp(&gen, 1.0).unwrap();
        let rho = pure_state(&plus()).unwrap();
        let a = Observable::projector(&plus()).unwrap();
        let v = expectation(&a, &k, &rho).unwrap();
        assert!((v - (1.0 + (-0.2f64).exp()) / 2.0).abs() < 1e-14);
        assert!((v - 0.90937).abs() < 1e-5);
        let tr = expectation(&Observable::identity(2), &k, &rho).unwrap();
        assert!((tr - 1.0).abs() < 1e-14);
    }

    #[test]
    fn expectation_flags_imaginary_residual() {
        let mut m = linalg::identity(4);
        m[(2, 0)] = c(0.0, 0.5);
        let s = SuperOperator::new(m, Kind::Composite);
        let rho = pure_state(&pauli::basis_state(1, 0)).unwrap();
        let mut a = CMatrix::zeros(2, 2);
        a[(0, 1)] = ONE;
        a[(1, 0)] = ONE;
        let a = Observable::new(a).unwrap();
        assert!(matches!(
            expectation(&a, &s, &rho),
            Err(Error::Inconsistent { .. })
        ));
    }
}
