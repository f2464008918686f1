//! Ordered simplex weights as divided differences of the exponential.
//!
//! The time integral attached to a jump sequence with piecewise energies
//! `E_0..E_n` is
//!
//! ```text
//! ∫_{0 ≤ t_1 ≤ … ≤ t_n ≤ 1} exp(-β Σ_k (t_{k+1} - t_k) E_k) dt,   t_0 = 0, t_{n+1} = 1,
//! ```
//!
//! which equals the divided difference of `exp` at the nodes `y_k = -β E_k`.
//! Rather than the textbook recurrence — which cancels catastrophically when
//! nodes collide — divided differences are read off the matrix exponential of
//! the bidiagonal matrix with the nodes on the diagonal and ones above it:
//! `exp(Z)[i][j] = exp[y_i, …, y_j]`. After shifting out the largest real
//! part, scaling-and-squaring keeps every intermediate entry non-negative for
//! real nodes, so there is no cancellation at any spread, and confluent or
//! near-confluent nodes need no special casing.

use num_complex::Complex64;

/// Divided difference `exp[y_0, …, y_n]` of the exponential at arbitrary
/// complex nodes. For a single node this is `exp(y_0)`.
///
/// Panics on an empty node list.
pub fn dd_exp(nodes: &[Complex64]) -> Complex64 {
    dd_exp_row(nodes)[nodes.len() - 1]
}

/// All leading divided differences at once: element `k` is
/// `exp[y_0, …, y_k]` (the first row of the bidiagonal exponential).
pub fn dd_exp_row(nodes: &[Complex64]) -> Vec<Complex64> {
    let n = nodes.len();
    assert!(n > 0, "divided difference needs at least one node");
    // Shift out the dominant real part: exp[y + c] = e^c · exp[y].
    let shift = nodes.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<Complex64> = nodes.iter().map(|z| z - shift).collect();

    // Scaling: bring the matrix 1-norm under 1/2 before the Taylor series.
    let max_abs = shifted.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let norm_bound = max_abs + 1.0; // diagonal plus unit superdiagonal
    let squarings = norm_bound.log2().ceil().max(0.0) as u32 + 1;
    let scale = (0.5f64).powi(squarings as i32);

    // Upper-triangular matrices in packed row-major form.
    let idx = |i: usize, j: usize| i * n + j;
    let mut a = vec![Complex64::ZERO; n * n];
    for k in 0..n {
        a[idx(k, k)] = shifted[k] * scale;
        if k + 1 < n {
            a[idx(k, k + 1)] = Complex64::new(scale, 0.0);
        }
    }

    // exp(a) by plain Taylor: with ‖a‖ ≤ 1/2 the terms decay geometrically
    // past the first few, and 40 terms drive the tail below 2^-120.
    let mut result = vec![Complex64::ZERO; n * n];
    for k in 0..n {
        result[idx(k, k)] = Complex64::ONE;
    }
    let mut term = result.clone();
    for m in 1..=40 {
        term = ut_mul(&term, &a, n);
        let inv = Complex64::new(1.0 / m as f64, 0.0);
        let mut largest = 0.0f64;
        for (r, t) in result.iter_mut().zip(&term) {
            let add = t * inv;
            *r += add;
            largest = largest.max(add.norm());
        }
        // term/m! has fully decayed; the triangular structure also makes the
        // series exact in the nilpotent directions after n steps.
        if largest < 1e-40 {
            break;
        }
        for t in term.iter_mut() {
            *t *= inv;
        }
    }

    for _ in 0..squarings {
        result = ut_mul(&result, &result, n);
    }

    let restore = Complex64::new(shift, 0.0).exp();
    (0..n).map(|j| result[idx(0, j)] * restore).collect()
}

/// Product of two upper-triangular matrices in packed row-major form.
fn ut_mul(a: &[Complex64], b: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::ZERO; n * n];
    for i in 0..n {
        for j in i..n {
            let mut acc = Complex64::ZERO;
            for k in i..=j {
                acc += a[i * n + k] * b[k * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// The ordered-simplex time integral for a jump sequence with segment
/// energies `E_0..E_n` at inverse temperature `β`: the divided difference of
/// `exp` at `-β E_k`. Always strictly positive.
pub fn ordered_weight(energies: &[f64], beta: f64) -> f64 {
    let nodes: Vec<Complex64> = energies
        .iter()
        .map(|&e| Complex64::new(-beta * e, 0.0))
        .collect();
    dd_exp(&nodes).re
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
///
/// Nodes are the roots of the Legendre polynomial found by Newton iteration
/// from the Chebyshev initial guess; exactness degree is `2n - 1`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Root of P_n in (-1, 1), descending.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Recurrence for P_n(x) and P'_n(x).
            let (mut p0, mut p1) = (1.0f64, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let step = p / dp;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = x;
        weights[i] = w;
        nodes[n - 1 - i] = -x;
        weights[n - 1 - i] = w;
    }
    // Map from [-1, 1] to [0, 1].
    for x in nodes.iter_mut() {
        *x = 0.5 * (*x + 1.0);
    }
    for w in weights.iter_mut() {
        *w *= 0.5;
    }
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}
