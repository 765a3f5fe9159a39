//! Independent reference computations shared by several test targets.

use std::f64::consts::PI;

/// Per-layer inputs to the equivariance bound, listed term by term.
pub struct BoundTerms<'a> {
    pub channels: &'a [f64],
    pub value: &'a [f64],
    pub gradient: &'a [f64],
    pub hessian: &'a [f64],
    pub image: (f64, f64, f64),
    pub filter_size: f64,
    pub mesh: f64,
    pub group_order: f64,
    pub side: f64,
}

/// `C1 h^2 + C2 p h / t` evaluated directly from its definition.
pub fn reference_bound(b: &BoundTerms) -> f64 {
    let (f, g, h) = (b.value, b.gradient, b.hessian);
    let (f0, g0, h0) = b.image;
    let p = b.filter_size;
    let layers = f.len();
    let mut script = 1.0;
    for i in 0..layers {
        script *= b.channels[i] * p * p * f[i];
    }
    let mut total = 0.0;
    for i in 0..layers {
        let mut earlier = 0.0;
        for m in 0..i {
            earlier += g[m] * f0 / f[m];
        }
        total += h[i] * f0 / f[i] + 2.0 * g[i] / f[i] * earlier + 2.0 * g[i] * g0 / f[i] + h0;
    }
    let c1 = 2.0 * layers as f64 * script * total;
    let c2 = 2.0 * PI * g0 * script * (2.0 * b.side / p + 2.0 * layers as f64);
    c1 * b.mesh * b.mesh + c2 * p * b.mesh / b.group_order
}

/// Support of the best least-squares fit to `y` over every support of at
/// most three entries, found by enumeration.
pub fn best_subset(y: &[f64]) -> Vec<usize> {
    let n = y.len();
    // the residual is |y|^2 minus the captured energy
    let energy = |s: &[usize]| -> f64 { s.iter().map(|&i| y[i] * y[i]).sum() };
    let mut best: (f64, Vec<usize>) = (0.0, vec![]);
    let mut consider = |s: Vec<usize>| {
        let e = energy(&s);
        if e > best.0 {
            best = (e, s);
        }
    };
    for a in 0..n {
        consider(vec![a]);
        for b in a + 1..n {
            consider(vec![a, b]);
            for c in b + 1..n {
                consider(vec![a, b, c]);
            }
        }
    }
    best.1
}
