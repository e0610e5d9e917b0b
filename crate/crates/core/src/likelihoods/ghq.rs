//! Gauss–Hermite nodes and weights (physicists' convention), computed by
//! Newton iteration on the orthonormal Hermite recurrence and cached per
//! order. Integrates `int exp(-x^2) f(x) dx ~= sum w_i f(x_i)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use once_cell::sync::Lazy;

/// Default quadrature order used by the likelihood machinery.
pub const DEFAULT_ORDER: usize = 20;

static TABLES: Lazy<Mutex<HashMap<usize, Arc<Vec<(f64, f64)>>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

/// Orthonormal Hermite value and the value one order below at `x`.
fn hermite_pair(n: usize, x: f64) -> (f64, f64) {
    let mut hm = 0.0f64;
    let mut h = std::f64::consts::PI.powf(-0.25);
    for k in 0..n {
        let next = x * (2.0 / (k as f64 + 1.0)).sqrt() * h
            - (k as f64 / (k as f64 + 1.0)).sqrt() * hm;
        hm = h;
        h = next;
    }
    (h, hm)
}

fn compute(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    let mut nodes = vec![0.0f64; n];
    // Initial guesses sweep from the largest root inward.
    let m = n / 2;
    let mut z = 0.0f64;
    for i in 0..m + (n % 2) {
        z = match i {
            0 => ((2 * n + 1) as f64).sqrt() - 1.85575 * ((2 * n + 1) as f64).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        // Newton iteration on the Gaussian-weighted Hermite function
        // h(x) exp(-x^2/2), whose slowly varying amplitude keeps the
        // steps well-behaved near the spectrum edge.
        for _ in 0..100 {
            let (h, hm) = hermite_pair(n, z);
            let dh = (2.0 * n as f64).sqrt() * hm - z * h;
            let dz = h / dh;
            z -= dz;
            if dz.abs() < 1e-15 * (1.0 + z.abs()) {
                break;
            }
        }
        nodes[i] = z;
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = if i < m + (n % 2) { nodes[i] } else { -nodes[n - 1 - i] };
        let x = if n % 2 == 1 && i == m { 0.0 } else { x };
        let (_, hm) = hermite_pair(n, x);
        let dh = (2.0 * n as f64).sqrt() * hm;
        out.push((x, 2.0 / (dh * dh)));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Nodes and weights for the given order, cached after first use.
pub fn nodes(n: usize) -> Arc<Vec<(f64, f64)>> {
    let mut tables = TABLES.lock().unwrap();
    tables.entry(n).or_insert_with(|| Arc::new(compute(n))).clone()
}

/// Expectation `E[f(X)]` with `X ~ N(mu, s2)` by Gauss-Hermite quadrature.
pub fn expect(mu: f64, s2: f64, order: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let sqrt2s = (2.0 * s2).sqrt();
    let table = nodes(order);
    let mut sum = 0.0;
    for &(x, w) in table.iter() {
        sum += w * f(mu + sqrt2s * x);
    }
    sum / std::f64::consts::PI.sqrt()
}
