use super::Tensor;
use crate::error::{Error, Result};

/// Thin SVD `m = U · diag(S) · Vᵀ` with `r = min(n, d)` components.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `[n, r]`
    pub u: Tensor<f64>,
    /// Nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// `[d, r]`
    pub v: Tensor<f64>,
}

const MAX_SWEEPS: usize = 80;

/// One-sided Jacobi SVD. Accurate to working precision for the small dense
/// matrices the diagnostics produce.
pub fn svd(m: &Tensor<f64>) -> Result<Svd> {
    let (n, d) = m.dims2()?;
    if m.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite entry in SVD input".into()));
    }
    if n < d {
        let t = svd(&m.transpose2()?)?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    // column-major working copy
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| m.data()[i * d + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            e
        })
        .collect();

    let scale: f64 = m.data().iter().map(|x| x * x).sum::<f64>();
    let tiny = f64::EPSILON * f64::EPSILON * scale.max(f64::MIN_POSITIVE);
    let mut converged = d < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for i in 0..n {
                        a += cp[i] * cp[i];
                        b += cq[i] * cq[i];
                        g += cp[i] * cq[i];
                    }
                    (a, b, g)
                };
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() || gamma.abs() < tiny {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!("SVD did not converge in {MAX_SWEEPS} sweeps")));
    }

    let mut order: Vec<usize> = (0..d).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let cutoff = s.first().copied().unwrap_or(0.0) * f64::EPSILON * (n.max(d) as f64);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(d);
    for (rank, &j) in order.iter().enumerate() {
        if s[rank] > cutoff && s[rank] > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / s[rank]).collect());
        } else {
            ucols.push(vec![0.0; n]);
        }
    }
    // complete U for (numerically) zero singular values
    let mut basis_probe = 0;
    for rank in 0..d {
        if s[rank] > cutoff && s[rank] > 0.0 {
            continue;
        }
        loop {
            let mut e = vec![0.0; n];
            e[basis_probe % n] = 1.0;
            basis_probe += 1;
            for (other, u) in ucols.iter().enumerate() {
                if other == rank || u.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let dot: f64 = u.iter().zip(&e).map(|(a, b)| a * b).sum();
                e.iter_mut().zip(u).for_each(|(x, &y)| *x -= dot * y);
            }
            let nrm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm > 1e-8 {
                ucols[rank] = e.iter().map(|x| x / nrm).collect();
                break;
            }
            if basis_probe > 2 * n + d {
                return Err(Error::Numeric("could not complete left singular basis".into()));
            }
        }
    }
    let u = Tensor::from_fn([n, d], |idx| ucols[idx % d][idx / d]);
    let vt = Tensor::from_fn([d, d], |idx| v[order[idx % d]][idx / d]);
    Ok(Svd { u, s, v: vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}
