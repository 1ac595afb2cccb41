//! Truncated Taylor arithmetic for `y = tanh(a)` along one input direction.
//!
//! Coefficients are normalized (`c_j = f^(j) / j!`). With `q = 1 - y^2` the
//! identity `y' = q a'` gives, coefficient-wise,
//!
//! ```text
//! y_j = (1/j) * sum_{i=1..j} i * a_i * q_{j-i}
//! q_j = -sum_{i=0..j} y_i * y_{j-i}
//! ```
//!
//! Arrays hold one block per coefficient; block 0 (value) is shared by all
//! directions and each direction owns `order` consecutive blocks starting at
//! `base`. The reverse kernels are the exact adjoints of the forward ones.

pub const MAX_ORDER: usize = 4;

pub(crate) fn value_forward(a: &[f64], y: &mut [f64], q: &mut [f64], block: usize) {
    for e in 0..block {
        let t = crate::mlp::tanh(a[e]);
        y[e] = t;
        q[e] = 1.0 - t * t;
    }
}

pub(crate) fn direction_forward(
    a: &[f64],
    y: &mut [f64],
    q: &mut [f64],
    block: usize,
    base: usize,
    order: usize,
) {
    debug_assert!((1..=MAX_ORDER).contains(&order));
    let at = |j: usize| (base + j - 1) * block;
    for e in 0..block {
        let mut al = [0.0; MAX_ORDER + 1];
        let mut yl = [0.0; MAX_ORDER + 1];
        let mut ql = [0.0; MAX_ORDER + 1];
        yl[0] = y[e];
        ql[0] = q[e];
        for j in 1..=order {
            al[j] = a[at(j) + e];
        }
        for j in 1..=order {
            let mut s = 0.0;
            for i in 1..=j {
                s += i as f64 * al[i] * ql[j - i];
            }
            yl[j] = s / j as f64;
            y[at(j) + e] = yl[j];
            if j < order {
                let mut t = 0.0;
                for i in 0..=j {
                    t += yl[i] * yl[j - i];
                }
                ql[j] = -t;
                q[at(j) + e] = ql[j];
            }
        }
    }
}

/// Pulls the adjoints of one direction's output blocks back onto its input
/// blocks (`abar`, overwritten) and onto the shared value adjoints
/// (`ybar` block 0 and `qbar0`, accumulated).
#[allow(clippy::too_many_arguments)]
pub(crate) fn direction_reverse(
    a: &[f64],
    y: &[f64],
    q: &[f64],
    ybar: &mut [f64],
    abar: &mut [f64],
    qbar0: &mut [f64],
    block: usize,
    base: usize,
    order: usize,
) {
    let at = |j: usize| (base + j - 1) * block;
    for e in 0..block {
        let mut al = [0.0; MAX_ORDER + 1];
        let mut yl = [0.0; MAX_ORDER + 1];
        let mut ql = [0.0; MAX_ORDER + 1];
        let mut yb = [0.0; MAX_ORDER + 1];
        let mut qb = [0.0; MAX_ORDER + 1];
        let mut ab = [0.0; MAX_ORDER + 1];
        yl[0] = y[e];
        ql[0] = q[e];
        for j in 1..=order {
            al[j] = a[at(j) + e];
            yl[j] = y[at(j) + e];
            yb[j] = ybar[at(j) + e];
            if j < order {
                ql[j] = q[at(j) + e];
            }
        }
        for j in (1..=order).rev() {
            if j < order {
                let g = qb[j];
                for m in 0..=j {
                    yb[m] -= 2.0 * yl[j - m] * g;
                }
            }
            let inv = 1.0 / j as f64;
            let g = yb[j];
            for i in 1..=j {
                let c = i as f64 * inv;
                ab[i] += c * ql[j - i] * g;
                qb[j - i] += c * al[i] * g;
            }
        }
        ybar[e] += yb[0];
        qbar0[e] += qb[0];
        for j in 1..=order {
            abar[at(j) + e] = ab[j];
        }
    }
}

/// Final step of the reverse sweep through `y0 = tanh(a0)`, `q0 = 1 - y0^2`.
pub(crate) fn value_reverse(
    y: &[f64],
    q: &[f64],
    ybar: &[f64],
    qbar0: &[f64],
    abar: &mut [f64],
    block: usize,
) {
    for e in 0..block {
        let yb = ybar[e] - 2.0 * y[e] * qbar0[e];
        abar[e] = q[e] * yb;
    }
}
