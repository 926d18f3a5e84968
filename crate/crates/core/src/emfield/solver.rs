//! Sparse complex linear algebra for the Helmholtz system: a CSR matrix,
//! Jacobi-preconditioned BiCGSTAB with restarts, and a dense LU oracle.

use num_complex::Complex64;

use super::FieldError;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<Complex64>,
}

impl CsrMatrix {
    pub fn from_rows(rows: Vec<Vec<(usize, Complex64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        let (a, b) = (self.row_ptr[row], self.row_ptr[row + 1]);
        self.cols[a..b]
            .iter()
            .position(|&c| c == col)
            .map_or(Complex64::new(0.0, 0.0), |i| self.vals[a + i])
    }

    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        let (a, b) = (self.row_ptr[row], self.row_ptr[row + 1]);
        self.cols[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn mul_vec(&self, x: &[Complex64], out: &mut [Complex64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *o = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<Complex64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> Vec<Complex64> {
        let mut d = vec![Complex64::new(0.0, 0.0); self.n * self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[i * self.n + j] = v;
            }
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// relative residual ‖b − Ax‖ / ‖b‖
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub restarts: usize,
    pub relative_residual: f64,
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn true_residual(a: &CsrMatrix, x: &[Complex64], b: &[Complex64], r: &mut [Complex64]) {
    a.mul_vec(x, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
}

/// Preconditioned BiCGSTAB. On breakdown, or when the recurrence claims
/// convergence that the true residual does not confirm, the Krylov space is
/// rebuilt from the current true residual.
pub fn bicgstab(
    a: &CsrMatrix,
    b: &[Complex64],
    opts: &SolverOptions,
) -> Result<(Vec<Complex64>, SolveStats), FieldError> {
    let n = a.n;
    let zero = Complex64::new(0.0, 0.0);
    let mut x = vec![zero; n];
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok((
            x,
            SolveStats {
                iterations: 0,
                restarts: 0,
                relative_residual: 0.0,
            },
        ));
    }
    let inv_diag: Vec<Complex64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d.norm() > 0.0 { d.inv() } else { Complex64::new(1.0, 0.0) })
        .collect();
    let precond = |src: &[Complex64], dst: &mut [Complex64]| {
        for ((d, s), m) in dst.iter_mut().zip(src).zip(&inv_diag) {
            *d = s * m;
        }
    };

    let mut r = b.to_vec();
    let mut r_hat = r.clone();
    let mut p = vec![zero; n];
    let mut v = vec![zero; n];
    let mut y = vec![zero; n];
    let mut s = vec![zero; n];
    let mut z = vec![zero; n];
    let mut t = vec![zero; n];
    let (mut rho, mut alpha, mut omega) = (Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0));
    let mut restarts = 0;
    let mut rel = 1.0;
    let tiny = 1e-300;

    let mut iter = 0;
    while iter < opts.max_iterations {
        iter += 1;
        let rho_new = dot(&r_hat, &r);
        if rho_new.norm() < tiny * b_norm * b_norm || omega.norm() < tiny {
            restart(a, &x, b, &mut r, &mut r_hat, &mut p, &mut v);
            restarts += 1;
            rho = Complex64::new(1.0, 0.0);
            alpha = rho;
            omega = rho;
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        precond(&p, &mut y);
        a.mul_vec(&y, &mut v);
        let denom = dot(&r_hat, &v);
        if denom.norm() < tiny {
            restart(a, &x, b, &mut r, &mut r_hat, &mut p, &mut v);
            restarts += 1;
            rho = Complex64::new(1.0, 0.0);
            alpha = rho;
            omega = rho;
            continue;
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) / b_norm <= opts.tolerance {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            true_residual(a, &x, b, &mut r);
            rel = norm(&r) / b_norm;
            if rel <= opts.tolerance {
                return Ok(finish(x, iter, restarts, rel));
            }
            r_hat.copy_from_slice(&r);
            p.fill(zero);
            v.fill(zero);
            restarts += 1;
            rho = Complex64::new(1.0, 0.0);
            alpha = rho;
            omega = rho;
            continue;
        }
        precond(&s, &mut z);
        a.mul_vec(&z, &mut t);
        let tt = dot(&t, &t);
        omega = if tt.norm() > 0.0 { dot(&t, &s) / tt } else { Complex64::new(0.0, 0.0) };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        rel = norm(&r) / b_norm;
        if rel <= opts.tolerance {
            true_residual(a, &x, b, &mut r);
            rel = norm(&r) / b_norm;
            if rel <= opts.tolerance {
                return Ok(finish(x, iter, restarts, rel));
            }
            r_hat.copy_from_slice(&r);
            p.fill(zero);
            v.fill(zero);
            restarts += 1;
            rho = Complex64::new(1.0, 0.0);
            alpha = rho;
            omega = rho;
        }
    }
    true_residual(a, &x, b, &mut r);
    rel = rel.max(norm(&r) / b_norm);
    Err(FieldError::NotConverged {
        iterations: iter,
        residual: rel,
    })
}

fn restart(
    a: &CsrMatrix,
    x: &[Complex64],
    b: &[Complex64],
    r: &mut [Complex64],
    r_hat: &mut [Complex64],
    p: &mut [Complex64],
    v: &mut [Complex64],
) {
    true_residual(a, x, b, r);
    r_hat.copy_from_slice(r);
    p.fill(Complex64::new(0.0, 0.0));
    v.fill(Complex64::new(0.0, 0.0));
}

fn finish(x: Vec<Complex64>, iterations: usize, restarts: usize, rel: f64) -> (Vec<Complex64>, SolveStats) {
    log::debug!("bicgstab converged: {iterations} iterations, {restarts} restarts, residual {rel:.3e}");
    (
        x,
        SolveStats {
            iterations,
            restarts,
            relative_residual: rel,
        },
    )
}

/// Largest system the dense oracle accepts (a 48×48 grid).
pub const DENSE_LIMIT: usize = 48 * 48;

/// Gaussian elimination with partial pivoting on the densified matrix.
pub fn dense_solve(a: &CsrMatrix, b: &[Complex64]) -> Result<Vec<Complex64>, FieldError> {
    let n = a.n;
    if n > DENSE_LIMIT {
        return Err(FieldError::DenseTooLarge(n));
    }
    let mut m = a.to_dense();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].norm().total_cmp(&m[j * n + col].norm()))
            .unwrap();
        if m[pivot * n + col].norm() == 0.0 {
            return Err(FieldError::Singular);
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            rhs.swap(col, pivot);
        }
        let inv = m[col * n + col].inv();
        for row in col + 1..n {
            let f = m[row * n + col] * inv;
            if f.norm() == 0.0 {
                continue;
            }
            for k in col..n {
                let sub = f * m[col * n + k];
                m[row * n + k] -= sub;
            }
            let sub = f * rhs[col];
            rhs[row] -= sub;
        }
    }
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in row + 1..n {
            acc -= m[row * n + k] * x[k];
        }
        x[row] = acc / m[row * n + row];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn small_nonsymmetric_system() {
        let a = CsrMatrix::from_rows(vec![
            vec![(0, c(4.0, 1.0)), (1, c(1.0, 0.0))],
            vec![(0, c(0.0, 2.0)), (1, c(3.0, -1.0)), (2, c(1.0, 0.0))],
            vec![(1, c(-1.0, 0.0)), (2, c(5.0, 0.5))],
        ]);
        let b = vec![c(1.0, 0.0), c(0.0, 1.0), c(2.0, -1.0)];
        let (x, _) = bicgstab(&a, &b, &SolverOptions::default()).unwrap();
        let xd = dense_solve(&a, &b).unwrap();
        for (u, v) in x.iter().zip(&xd) {
            assert!((u - v).norm() < 1e-8);
        }
        let mut ax = vec![c(0.0, 0.0); 3];
        a.mul_vec(&xd, &mut ax);
        for (u, v) in ax.iter().zip(&b) {
            assert!((u - v).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = CsrMatrix::from_rows(vec![vec![(0, c(2.0, 0.0))], vec![(1, c(3.0, 0.0))]]);
        let (x, stats) = bicgstab(&a, &[c(0.0, 0.0); 2], &SolverOptions::default()).unwrap();
        assert!(x.iter().all(|v| *v == c(0.0, 0.0)));
        assert_eq!(stats.iterations, 0);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let a = CsrMatrix::from_rows(vec![
            vec![(0, c(1.0, 0.0)), (1, c(2.0, 0.0))],
            vec![(0, c(3.0, 0.0)), (1, c(-1.0, 0.0))],
        ]);
        let opts = SolverOptions {
            tolerance: 1e-30,
            max_iterations: 1,
        };
        match bicgstab(&a, &[c(1.0, 0.0), c(1.0, 0.0)], &opts) {
            Err(FieldError::NotConverged { iterations, residual }) => {
                assert_eq!(iterations, 1);
                assert!(residual.is_finite());
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn dense_rejects_large_systems() {
        let rows = (0..DENSE_LIMIT + 1).map(|i| vec![(i, c(1.0, 0.0))]).collect();
        let a = CsrMatrix::from_rows(rows);
        let b = vec![c(1.0, 0.0); DENSE_LIMIT + 1];
        assert!(matches!(dense_solve(&a, &b), Err(FieldError::DenseTooLarge(_))));
    }
}
