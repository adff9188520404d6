//! Dense complex linear algebra used by the simulator.
//!
//! Storage is nalgebra's column-major `DMatrix<Complex64>`. Products go through
//! `matrixmultiply::zgemm`, which is several times faster than the generic
//! nalgebra kernel at the 256×256 sizes a four-qubit Liouville space needs.
//! The complex Schur form is computed here as well (Householder Hessenberg
//! reduction followed by single-shift QR sweeps) because it backs both routes
//! of the inverse square root.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// `a · b` via zgemm.
pub fn matmul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    assert_eq!(a.ncols(), b.nrows(), "matmul shape mismatch");
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = CMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: Complex64 is repr(C) with layout [f64; 2]; all three buffers are
    // column-major with the strides passed below and do not alias.
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a.as_ptr() as *const [f64; 2],
            1,
            m as isize,
            b.as_ptr() as *const [f64; 2],
            1,
            k as isize,
            [0.0, 0.0],
            out.as_mut_ptr() as *mut [f64; 2],
            1,
            m as isize,
        );
    }
    out
}

pub fn matmul3(a: &CMatrix, b: &CMatrix, c: &CMatrix) -> CMatrix {
    matmul(&matmul(a, b), c)
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

pub fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    matmul(a, b) - matmul(b, a)
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn max_norm(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn max_norm_vec(a: &CVector) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Maximum absolute column sum.
pub fn norm1(a: &CMatrix) -> f64 {
    a.column_iter()
        .map(|col| col.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest singular value.
pub fn spectral_norm(a: &CMatrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().singular_values().max()
}

pub fn unitarity_defect(u: &CMatrix) -> f64 {
    let n = u.nrows();
    max_norm(&(matmul(&u.adjoint(), u) - identity(n)))
}

pub fn hermiticity_defect(a: &CMatrix) -> f64 {
    max_norm(&(a - a.adjoint()))
}

pub fn is_square(a: &CMatrix) -> bool {
    a.nrows() == a.ncols()
}

pub fn inverse(a: &CMatrix) -> Result<CMatrix> {
    a.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Structural("singular matrix".into()))
}

/// Integer power by repeated squaring.
pub fn matpow(a: &CMatrix, mut p: u32) -> CMatrix {
    let mut result = identity(a.nrows());
    let mut base = a.clone();
    while p > 0 {
        if p & 1 == 1 {
            result = matmul(&result, &base);
        }
        p >>= 1;
        if p > 0 {
            base = matmul(&base, &base);
        }
    }
    result
}

const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA_13: f64 = 5.371920351148152e0;

fn pade_coefficients(m: usize) -> &'static [f64] {
    match m {
        3 => &[120.0, 60.0, 12.0, 1.0],
        5 => &[30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0],
        7 => &[
            17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
        ],
        9 => &[
            17643225600.0,
            8821612800.0,
            2075673600.0,
            302702400.0,
            30270240.0,
            2162160.0,
            110880.0,
            3960.0,
            90.0,
            1.0,
        ],
        13 => &[
            64764752532480000.0,
            32382376266240000.0,
            7771770303897600.0,
            1187353796428800.0,
            129060195264000.0,
            10559470521600.0,
            670442572800.0,
            33522128640.0,
            1323241920.0,
            40840800.0,
            960960.0,
            16380.0,
            182.0,
            1.0,
        ],
        _ => unreachable!(),
    }
}

fn scaled(a: &CMatrix, s: f64) -> CMatrix {
    a * C64::new(s, 0.0)
}

fn add_diag(mut a: CMatrix, s: f64) -> CMatrix {
    for i in 0..a.nrows() {
        a[(i, i)] += s;
    }
    a
}

/// Matrix exponential by scaling and squaring with diagonal Padé approximants.
pub fn expm(a: &CMatrix) -> Result<CMatrix> {
    if !is_square(a) {
        return Err(Error::Dimension("expm needs a square matrix".into()));
    }
    let n = a.nrows();
    let norm = norm1(a);
    if !norm.is_finite() {
        return Err(Error::NumericalOverflow("expm input"));
    }
    if norm == 0.0 {
        return Ok(identity(n));
    }
    for &(m, theta) in &THETA {
        if norm <= theta {
            return pade_low(a, m);
        }
    }
    let s = ((norm / THETA_13).log2().ceil()).max(0.0) as i32;
    let a_scaled = scaled(a, 2f64.powi(-s));
    let mut x = pade13(&a_scaled)?;
    for _ in 0..s {
        x = matmul(&x, &x);
    }
    if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NumericalOverflow("expm"));
    }
    Ok(x)
}

fn pade_low(a: &CMatrix, m: usize) -> Result<CMatrix> {
    let b = pade_coefficients(m);
    let n = a.nrows();
    let a2 = matmul(a, a);
    let mut powers = vec![identity(n), a2.clone()];
    for k in 2..=(m - 1) / 2 {
        let next = matmul(&powers[k - 1], &a2);
        powers.push(next);
    }
    let mut u = CMatrix::zeros(n, n);
    let mut v = CMatrix::zeros(n, n);
    for (k, p) in powers.iter().enumerate() {
        u += scaled(p, b[2 * k + 1]);
        v += scaled(p, b[2 * k]);
    }
    let u = matmul(a, &u);
    solve_pade(&u, &v)
}

fn pade13(a: &CMatrix) -> Result<CMatrix> {
    let b = pade_coefficients(13);
    let a2 = matmul(a, a);
    let a4 = matmul(&a2, &a2);
    let a6 = matmul(&a4, &a2);
    let inner_u = scaled(&a6, b[13]) + scaled(&a4, b[11]) + scaled(&a2, b[9]);
    let u = matmul(&a6, &inner_u) + scaled(&a6, b[7]) + scaled(&a4, b[5]) + scaled(&a2, b[3]);
    let u = matmul(a, &add_diag(u, b[1]));
    let inner_v = scaled(&a6, b[12]) + scaled(&a4, b[10]) + scaled(&a2, b[8]);
    let v = matmul(&a6, &inner_v) + scaled(&a6, b[6]) + scaled(&a4, b[4]) + scaled(&a2, b[2]);
    let v = add_diag(v, b[0]);
    solve_pade(&u, &v)
}

fn solve_pade(u: &CMatrix, v: &CMatrix) -> Result<CMatrix> {
    let p = v + u;
    let q = v - u;
    q.lu().solve(&p).ok_or(Error::NumericalOverflow(
        "expm Padé denominator is singular",
    ))
}

/// Complex Schur decomposition `a = z · t · z†` with `t` upper triangular.
pub struct Schur {
    pub z: CMatrix,
    pub t: CMatrix,
}

/// Complex Givens rotation `G = [[c, s], [-s̄, c]]` with `G·[f; g] = [r; 0]`.
fn givens(f: C64, g: C64) -> (f64, C64) {
    let af = f.norm();
    let ag = g.norm();
    if ag == 0.0 {
        return (1.0, ZERO);
    }
    if af == 0.0 {
        return (0.0, g.conj() / ag);
    }
    let r = af.hypot(ag);
    let phase = f / af;
    (af / r, phase * g.conj() / r)
}

pub fn schur(a: &CMatrix) -> Result<Schur> {
    if !is_square(a) {
        return Err(Error::Dimension("schur needs a square matrix".into()));
    }
    let n = a.nrows();
    let mut h = a.clone();
    let mut z = identity(n);
    hessenberg(&mut h, &mut z);
    if n > 1 {
        qr_sweeps(&mut h, &mut z)?;
    }
    for j in 0..n {
        for i in (j + 1)..n {
            h[(i, j)] = ZERO;
        }
    }
    Ok(Schur { z, t: h })
}

fn hessenberg(h: &mut CMatrix, q: &mut CMatrix) {
    let n = h.nrows();
    if n < 3 {
        return;
    }
    let mut v = vec![ZERO; n];
    let mut acc = vec![ZERO; n];
    for k in 0..n - 2 {
        let len = n - k - 1;
        let xnorm = (0..len)
            .map(|i| h[(k + 1 + i, k)].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if xnorm == 0.0 {
            continue;
        }
        let x0 = h[(k + 1, k)];
        let phase = if x0.norm() > 0.0 { x0 / x0.norm() } else { ONE };
        let alpha = -phase * xnorm;
        for i in 0..len {
            v[i] = h[(k + 1 + i, k)];
        }
        v[0] -= alpha;
        let vnorm = (0..len).map(|i| v[i].norm_sqr()).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        for vi in v.iter_mut().take(len) {
            *vi /= vnorm;
        }
        // Left: rows k+1.., columns k..
        for j in k..n {
            let mut s = ZERO;
            for i in 0..len {
                s += v[i].conj() * h[(k + 1 + i, j)];
            }
            let s2 = s * 2.0;
            for i in 0..len {
                h[(k + 1 + i, j)] -= v[i] * s2;
            }
        }
        // Right on h and q: columns k+1..
        for m in [&mut *h, &mut *q] {
            acc.iter_mut().for_each(|x| *x = ZERO);
            for cidx in 0..len {
                let vc = v[cidx];
                let col = m.column(k + 1 + cidx);
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += col[i] * vc;
                }
            }
            for cidx in 0..len {
                let vc = v[cidx].conj() * 2.0;
                let mut col = m.column_mut(k + 1 + cidx);
                for (i, a) in acc.iter().enumerate() {
                    col[i] -= *a * vc;
                }
            }
        }
        h[(k + 1, k)] = alpha;
        for i in (k + 2)..n {
            h[(i, k)] = ZERO;
        }
    }
}

fn qr_sweeps(h: &mut CMatrix, z: &mut CMatrix) -> Result<()> {
    let n = h.nrows();
    let eps = f64::EPSILON;
    let scale = max_norm(h).max(f64::MIN_POSITIVE);
    let mut hi = n - 1;
    let mut iter = 0usize;
    let mut total = 0usize;
    let mut rots: Vec<(f64, C64)> = vec![(1.0, ZERO); n];
    while hi > 0 {
        let mut l = hi;
        while l > 0 {
            let sub = h[(l, l - 1)].norm();
            let diag = h[(l - 1, l - 1)].norm() + h[(l, l)].norm();
            if sub <= eps * diag.max(eps * scale) {
                h[(l, l - 1)] = ZERO;
                break;
            }
            l -= 1;
        }
        if l == hi {
            hi -= 1;
            iter = 0;
            continue;
        }
        iter += 1;
        total += 1;
        if iter > 200 || total > 100 * n {
            return Err(Error::Structural(
                "Schur QR iteration did not converge".into(),
            ));
        }
        let mu = if iter % 11 == 0 {
            // Exceptional shift breaks rare cycles.
            h[(hi, hi)] + h[(hi, hi - 1)].norm() * 0.75
        } else {
            let a = h[(hi - 1, hi - 1)];
            let b = h[(hi - 1, hi)];
            let cc = h[(hi, hi - 1)];
            let d = h[(hi, hi)];
            let mean = (a + d) * 0.5;
            let disc = (((a - d) * 0.5).powi(2) + b * cc).sqrt();
            let l1 = mean + disc;
            let l2 = mean - disc;
            if (l1 - d).norm() < (l2 - d).norm() {
                l1
            } else {
                l2
            }
        };
        for i in l..=hi {
            h[(i, i)] -= mu;
        }
        for k in l..hi {
            let (cs, sn) = givens(h[(k, k)], h[(k + 1, k)]);
            rots[k] = (cs, sn);
            for j in k..n {
                let x = h[(k, j)];
                let y = h[(k + 1, j)];
                h[(k, j)] = x * cs + sn * y;
                h[(k + 1, j)] = -sn.conj() * x + y * cs;
            }
            h[(k + 1, k)] = ZERO;
        }
        for k in l..hi {
            let (cs, sn) = rots[k];
            let top = (k + 1).min(hi);
            rotate_columns(h, k, cs, sn, top + 1);
            rotate_columns(z, k, cs, sn, n);
        }
        for i in l..=hi {
            h[(i, i)] += mu;
        }
    }
    Ok(())
}

/// Columns (k, k+1) ← (k, k+1)·G† on rows 0..rows.
fn rotate_columns(m: &mut CMatrix, k: usize, cs: f64, sn: C64, rows: usize) {
    let snc = sn.conj();
    for i in 0..rows {
        let x = m[(i, k)];
        let y = m[(i, k + 1)];
        m[(i, k)] = x * cs + y * snc;
        m[(i, k + 1)] = -x * sn + y * cs;
    }
}

/// Eigenvectors of an upper triangular matrix, as the columns of an upper
/// triangular matrix with unit diagonal. Near-coincident eigenvalues are
/// regularized with a small pivot; callers check the residual.
pub fn triangular_eigenvectors(t: &CMatrix) -> CMatrix {
    let n = t.nrows();
    let smin = (f64::EPSILON * max_norm(t)).max(f64::MIN_POSITIVE * 1e10);
    let mut y = CMatrix::zeros(n, n);
    for k in 0..n {
        y[(k, k)] = ONE;
        let lambda = t[(k, k)];
        for i in (0..k).rev() {
            let mut s = ZERO;
            for m in (i + 1)..=k {
                s += t[(i, m)] * y[(m, k)];
            }
            let mut d = t[(i, i)] - lambda;
            if d.norm() < smin {
                d = C64::new(smin, 0.0);
            }
            y[(i, k)] = -s / d;
        }
    }
    y
}

pub fn triangular_inverse(t: &CMatrix) -> Result<CMatrix> {
    let n = t.nrows();
    let mut x = CMatrix::zeros(n, n);
    for j in 0..n {
        if t[(j, j)].norm() == 0.0 {
            return Err(Error::Structural("singular triangular matrix".into()));
        }
        x[(j, j)] = ONE / t[(j, j)];
        for i in (0..j).rev() {
            let mut s = ZERO;
            for m in (i + 1)..=j {
                s += t[(i, m)] * x[(m, j)];
            }
            x[(i, j)] = -s / t[(i, i)];
        }
    }
    Ok(x)
}

/// Principal square root of an upper triangular matrix (Björck–Hammarling).
pub fn triangular_sqrt(t: &CMatrix) -> CMatrix {
    let n = t.nrows();
    let mut r = CMatrix::zeros(n, n);
    for j in 0..n {
        r[(j, j)] = t[(j, j)].sqrt();
        for i in (0..j).rev() {
            let mut s = ZERO;
            for k in (i + 1)..j {
                s += r[(i, k)] * r[(k, j)];
            }
            r[(i, j)] = (t[(i, j)] - s) / (r[(i, i)] + r[(j, j)]);
        }
    }
    r
}
