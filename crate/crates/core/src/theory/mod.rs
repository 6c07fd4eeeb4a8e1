//! Numerical checks of the local decomposition theory on synthetic
//! compositions `Q_tot(a) = g(Q^1(a^1), ..., Q^N(a^N))`, and a brute-force
//! IGM check for mixers.

mod igm;
pub mod linalg;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use igm::{
    check_igm, check_igm_with, igm_cases_from_env, igm_suite, random_igm_cases, Counterexample, IgmCase, IgmReport,
    IGM_LIMIT, IGM_SUITE_CASES, IGM_SUITE_SHAPE,
};

use crate::error::{LabError, Result};

/// Step for first-derivative central differences.
pub const H_FIRST: f64 = 1e-6;
/// Step for second-derivative central differences.
pub const H_SECOND: f64 = 1e-3;
/// Largest accepted gradient norm component at a reported maximum.
pub const STATIONARY_TOL: f64 = 1e-6;

/// `Q(a) = alpha + beta (a - center)^2 + rho (a - center)^3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub center: f64,
}

impl Utility {
    pub fn value(&self, a: f64) -> f64 {
        let d = a - self.center;
        self.alpha + d * d * (self.beta + self.rho * d)
    }
}

/// Outer polynomial up to degree 3 with ordered-index sums:
/// `g(q) = mu0 + sum_i mu_i q_i + sum_{i,j} mu_ij q_i q_j
///        + sum_{i,j,k} mu_ijk q_i q_j q_k`,
/// with `mu_ij` and `mu_ijk` symmetric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outer {
    pub constant: f64,
    pub linear: Vec<f64>,
    /// `n x n`, row-major.
    pub pairs: Vec<f64>,
    /// `n x n x n`, row-major; absent for quadratic outers.
    pub triples: Option<Vec<f64>>,
}

impl Outer {
    pub fn n(&self) -> usize {
        self.linear.len()
    }

    pub fn linear_only(constant: f64, linear: Vec<f64>) -> Self {
        let n = linear.len();
        Outer {
            constant,
            linear,
            pairs: vec![0.0; n * n],
            triples: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 || self.pairs.len() != n * n {
            return Err(LabError::dim("outer", &[self.pairs.len()], &[n * n]));
        }
        if let Some(t) = &self.triples {
            if t.len() != n * n * n {
                return Err(LabError::dim("outer", &[t.len()], &[n * n * n]));
            }
        }
        for i in 0..n {
            for j in 0..n {
                if self.pairs[i * n + j] != self.pairs[j * n + i] {
                    return Err(LabError::contract("pair coefficients must be symmetric"));
                }
            }
        }
        Ok(())
    }

    pub fn degree(&self) -> usize {
        if self.triples.as_ref().is_some_and(|t| t.iter().any(|&v| v != 0.0)) {
            3
        } else if self.pairs.iter().any(|&v| v != 0.0) {
            2
        } else {
            1
        }
    }

    pub fn eval(&self, q: &[f64]) -> f64 {
        let n = self.n();
        let mut out = self.constant;
        for i in 0..n {
            out += self.linear[i] * q[i];
            for j in 0..n {
                out += self.pairs[i * n + j] * q[i] * q[j];
            }
        }
        if let Some(t) = &self.triples {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        out += t[(i * n + j) * n + k] * q[i] * q[j] * q[k];
                    }
                }
            }
        }
        out
    }

    /// Contribution of the degree-`order` terms to `dg/dq_i` at `alpha`:
    /// `mu_i`, `2 sum_j mu_ij alpha_j`, `3 sum_jk mu_ijk alpha_j alpha_k`.
    pub fn lambda_order(&self, alpha: &[f64], order: usize) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|i| match order {
                1 => self.linear[i],
                2 => 2.0 * (0..n).map(|j| self.pairs[i * n + j] * alpha[j]).sum::<f64>(),
                3 => self.triples.as_ref().map_or(0.0, |t| {
                    let mut s = 0.0;
                    for j in 0..n {
                        for k in 0..n {
                            s += t[(i * n + j) * n + k] * alpha[j] * alpha[k];
                        }
                    }
                    3.0 * s
                }),
                _ => 0.0,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub utilities: Vec<Utility>,
    pub outer: Outer,
}

impl Composition {
    pub fn new(utilities: Vec<Utility>, outer: Outer) -> Result<Self> {
        outer.validate()?;
        if utilities.len() != outer.n() {
            return Err(LabError::dim("composition", &[utilities.len()], &[outer.n()]));
        }
        if utilities.iter().any(|u| u.beta >= 0.0) {
            return Err(LabError::contract("every utility needs negative curvature"));
        }
        if outer.linear.iter().any(|&m| m <= 0.0) {
            return Err(LabError::contract("linear outer coefficients must be positive"));
        }
        Ok(Composition { utilities, outer })
    }

    pub fn n(&self) -> usize {
        self.utilities.len()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.utilities.iter().map(|u| u.alpha).collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.utilities.iter().map(|u| u.center).collect()
    }

    pub fn agent_values(&self, a: &[f64]) -> Vec<f64> {
        self.utilities.iter().zip(a).map(|(u, &x)| u.value(x)).collect()
    }

    pub fn q_tot(&self, a: &[f64]) -> f64 {
        self.outer.eval(&self.agent_values(a))
    }

    pub fn partial(&self, a: &[f64], i: usize, h: f64) -> f64 {
        let mut p = a.to_vec();
        p[i] = a[i] + h;
        let up = self.q_tot(&p);
        p[i] = a[i] - h;
        let down = self.q_tot(&p);
        (up - down) / (2.0 * h)
    }

    pub fn gradient(&self, a: &[f64], h: f64) -> Vec<f64> {
        (0..self.n()).map(|i| self.partial(a, i, h)).collect()
    }

    /// Predicted attention-free coefficients for a quadratic outer:
    /// `lambda_i = mu_i + 2 sum_j mu_ij alpha_j`.
    pub fn predicted_lambda(&self) -> Vec<f64> {
        let alpha = self.alphas();
        let n = self.n();
        (0..n)
            .map(|i| {
                self.outer.linear[i]
                    + 2.0
                        * (0..n)
                            .map(|j| self.outer.pairs[i * n + j] * alpha[j])
                            .sum::<f64>()
            })
            .collect()
    }
}

/// Coordinate-wise bisection on the sign of the central-difference partial,
/// repeated until a sweep moves no coordinate by more than `tol`.
pub fn find_local_max(comp: &Composition, lo: &[f64], hi: &[f64], tol: f64) -> Result<Vec<f64>> {
    let n = comp.n();
    if lo.len() != n || hi.len() != n {
        return Err(LabError::dim("find_local_max", &[lo.len(), hi.len()], &[n, n]));
    }
    const SWEEPS: usize = 50;
    let mut a: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
    for _ in 0..SWEEPS {
        let mut moved = 0.0f64;
        for i in 0..n {
            let slope = |x: f64, a: &mut Vec<f64>| {
                let keep = a[i];
                a[i] = x;
                let d = comp.partial(a, i, H_FIRST);
                a[i] = keep;
                d
            };
            let (mut l, mut h) = (lo[i], hi[i]);
            if slope(l, &mut a) <= 0.0 || slope(h, &mut a) >= 0.0 {
                return Err(LabError::Convergence {
                    iterations: 0,
                    detail: format!("no interior maximum along coordinate {i} in the search box"),
                });
            }
            while h - l > 1e-13 {
                let m = 0.5 * (l + h);
                if slope(m, &mut a) > 0.0 {
                    l = m;
                } else {
                    h = m;
                }
            }
            let next = 0.5 * (l + h);
            moved = moved.max((next - a[i]).abs());
            a[i] = next;
        }
        if moved < tol {
            let grad = comp.gradient(&a, H_FIRST);
            let worst = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if worst >= STATIONARY_TOL {
                return Err(LabError::Convergence {
                    iterations: SWEEPS,
                    detail: format!("gradient component {worst:e} at the located point"),
                });
            }
            return Ok(a);
        }
    }
    Err(LabError::Convergence {
        iterations: SWEEPS,
        detail: "coordinate sweeps kept moving".into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossReport {
    pub max_abs: f64,
    pub min_abs: f64,
    pub worst_pair: (usize, usize),
}

/// Central mixed second differences for every pair `i < j`.
pub fn check_cross_derivatives(comp: &Composition, point: &[f64], h: f64) -> Result<CrossReport> {
    let n = comp.n();
    if n < 2 {
        return Err(LabError::contract("cross derivatives need at least two agents"));
    }
    let mut report = CrossReport {
        max_abs: 0.0,
        min_abs: f64::INFINITY,
        worst_pair: (0, 1),
    };
    let mut p = point.to_vec();
    for i in 0..n {
        for j in i + 1..n {
            let mut f = |si: f64, sj: f64| {
                p[i] = point[i] + si * h;
                p[j] = point[j] + sj * h;
                let v = comp.q_tot(&p);
                p[i] = point[i];
                p[j] = point[j];
                v
            };
            let d = (f(1.0, 1.0) - f(1.0, -1.0) - f(-1.0, 1.0) + f(-1.0, -1.0)) / (4.0 * h * h);
            if d.abs() > report.max_abs {
                report.max_abs = d.abs();
                report.worst_pair = (i, j);
            }
            report.min_abs = report.min_abs.min(d.abs());
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub c: f64,
    pub lambda: Vec<f64>,
    /// Largest absolute fit error over the samples.
    pub residual: f64,
    pub radius: f64,
}

/// Uniform sample in the Euclidean ball of radius `r` around `center`.
fn ball_sample<R: Rng>(center: &[f64], r: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let d: Vec<f64> = center.iter().map(|_| rng.gen_range(-1.0..=1.0)).collect();
        if d.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            return center.iter().zip(d).map(|(c, x)| c + r * x).collect();
        }
    }
}

/// Least-squares fit of `Q_tot` against `[1, Q^1, ..., Q^N]` on uniform
/// samples in the `r`-ball around `center`.
pub fn fit_local_linear<R: Rng>(
    comp: &Composition,
    center: &[f64],
    r: f64,
    samples: usize,
    rng: &mut R,
) -> Result<LinearFit> {
    if r.is_nan() || r <= 0.0 {
        return Err(LabError::contract("fit radius must be positive"));
    }
    let n = comp.n();
    let mut x = Vec::with_capacity(samples * n);
    let mut y = Vec::with_capacity(samples);
    for _ in 0..samples {
        let a = ball_sample(center, r, rng);
        let q = comp.agent_values(&a);
        y.push(comp.outer.eval(&q));
        x.extend(q);
    }
    let (c, lambda) = linalg::least_squares(&x, &y, n)?;
    let residual = x
        .chunks(n)
        .zip(&y)
        .map(|(q, t)| (c + q.iter().zip(&lambda).map(|(a, b)| a * b).sum::<f64>() - t).abs())
        .fold(0.0, f64::max);
    Ok(LinearFit {
        c,
        lambda,
        residual,
        radius: r,
    })
}

pub fn default_samples(n: usize) -> usize {
    50 * (n + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Report {
    pub predicted: Vec<f64>,
    pub fitted: Vec<f64>,
    pub max_rel_gap: f64,
}

/// Compares the closed-form coefficients of a quadratic outer with a local
/// linear fit of radius `r` around `a_o`.
pub fn check_theorem3<R: Rng>(
    comp: &Composition,
    a_o: &[f64],
    r: f64,
    rng: &mut R,
) -> Result<Theorem3Report> {
    if comp.outer.degree() > 2 {
        return Err(LabError::contract("the closed form covers outers of degree <= 2"));
    }
    let predicted = comp.predicted_lambda();
    let fit = fit_local_linear(comp, a_o, r, default_samples(comp.n()), rng)?;
    let max_rel_gap = predicted
        .iter()
        .zip(&fit.lambda)
        .map(|(p, f)| (p - f).abs() / p.abs().max(1e-12))
        .fold(0.0, f64::max);
    Ok(Theorem3Report {
        predicted,
        fitted: fit.lambda,
        max_rel_gap,
    })
}

/// Per-check outcome; `passed` is `None` for report-only measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub composition: usize,
    pub inputs: Value,
    pub measured: Value,
    pub passed: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub checks: Vec<CheckRecord>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn checks_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a CheckRecord> + 'a {
        self.checks.iter().filter(move |c| c.name == name)
    }
}

pub const SUITE_SIZE: usize = 20;
/// Half-width of the maximum search box around each constructed maximum.
pub const SEARCH_HALF_WIDTH: f64 = 0.3;
pub const FIT_RADIUS: f64 = 0.1;
pub const THEOREM3_RADIUS: f64 = 0.05;
/// Offset of the non-stationary negative-control point.
pub const OFF_MAX_SHIFT: f64 = 0.2;
pub const MIN_PREDICTED_LAMBDA: f64 = 0.3;

fn suite_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// One random cooperative composition with a quadratic outer whose pair
/// coefficients are all nonzero. Redrawn until every predicted coefficient
/// is at least [`MIN_PREDICTED_LAMBDA`].
pub fn random_composition<R: Rng>(n: usize, rng: &mut R) -> Composition {
    loop {
        let utilities: Vec<Utility> = (0..n)
            .map(|_| Utility {
                alpha: rng.gen_range(0.5..=3.0),
                beta: rng.gen_range(-3.0..=-1.0),
                rho: rng.gen_range(-0.1..=0.1),
                center: rng.gen_range(-0.5..=0.5),
            })
            .collect();
        let linear: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..=2.0)).collect();
        let mut pairs = vec![0.0; n * n];
        for i in 0..n {
            pairs[i * n + i] = rng.gen_range(-0.05..=0.05);
            for j in i + 1..n {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let v = sign * rng.gen_range(0.08..=0.15);
                pairs[i * n + j] = v;
                pairs[j * n + i] = v;
            }
        }
        let outer = Outer {
            constant: rng.gen_range(-1.0..=1.0),
            linear,
            pairs,
            triples: None,
        };
        let comp = Composition::new(utilities, outer).expect("constructed valid");
        if comp.predicted_lambda().iter().all(|&l| l >= MIN_PREDICTED_LAMBDA) {
            return comp;
        }
    }
}

pub fn synthetic_suite(seed: u64) -> Vec<Composition> {
    (0..SUITE_SIZE)
        .map(|k| random_composition(2 + k % 3, &mut suite_rng(seed, k)))
        .collect()
}

fn record(name: &str, composition: usize, inputs: Value, measured: Value, passed: Option<bool>) -> CheckRecord {
    CheckRecord {
        name: name.into(),
        composition,
        inputs,
        measured,
        passed,
    }
}

/// Runs every check on every composition of the seeded suite.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for (k, comp) in synthetic_suite(seed).iter().enumerate() {
        let mut rng = suite_rng(seed ^ 0x5eed, k);
        let inputs = serde_json::to_value(comp).map_err(|e| LabError::contract(e.to_string()))?;
        let centers = comp.centers();
        let lo: Vec<f64> = centers.iter().map(|c| c - SEARCH_HALF_WIDTH).collect();
        let hi: Vec<f64> = centers.iter().map(|c| c + SEARCH_HALF_WIDTH).collect();

        let a_o = find_local_max(comp, &lo, &hi, 1e-10)?;
        let err = a_o
            .iter()
            .zip(&centers)
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max);
        let grad = comp
            .gradient(&a_o, H_FIRST)
            .iter()
            .fold(0.0f64, |m, g| m.max(g.abs()));
        checks.push(record(
            "stationary_point",
            k,
            inputs.clone(),
            json!({"a_o": a_o, "max_coordinate_error": err, "max_gradient": grad}),
            Some(err < 1e-6 && grad < STATIONARY_TOL),
        ));

        let at_max = check_cross_derivatives(comp, &a_o, H_SECOND)?;
        let off: Vec<f64> = a_o.iter().map(|a| a + OFF_MAX_SHIFT).collect();
        let off_max = check_cross_derivatives(comp, &off, H_SECOND)?;
        checks.push(record(
            "cross_derivatives",
            k,
            inputs.clone(),
            json!({
                "h": H_SECOND,
                "max_at_maximum": at_max.max_abs,
                "min_off_maximum": off_max.min_abs,
                "off_maximum_shift": OFF_MAX_SHIFT,
            }),
            Some(at_max.max_abs < 1e-3 && off_max.min_abs > 1e-2),
        ));

        let samples = default_samples(comp.n());
        let wide = fit_local_linear(comp, &a_o, FIT_RADIUS, samples, &mut rng)?;
        let narrow = fit_local_linear(comp, &a_o, FIT_RADIUS / 2.0, samples, &mut rng)?;
        let ratio = narrow.residual / wide.residual;
        let min_lambda = wide.lambda.iter().copied().fold(f64::INFINITY, f64::min);
        checks.push(record(
            "local_linear_fit",
            k,
            inputs.clone(),
            json!({
                "radius": FIT_RADIUS,
                "residual": wide.residual,
                "residual_half_radius": narrow.residual,
                "residual_ratio": ratio,
                "lambda": wide.lambda,
                "c": wide.c,
            }),
            Some(ratio <= 0.3 && min_lambda >= -1e-8),
        ));

        let t3 = check_theorem3(comp, &a_o, THEOREM3_RADIUS, &mut rng)?;
        checks.push(record(
            "theorem3_coefficients",
            k,
            inputs.clone(),
            json!({
                "radius": THEOREM3_RADIUS,
                "predicted": t3.predicted,
                "fitted": t3.fitted,
                "max_rel_gap": t3.max_rel_gap,
            }),
            Some(t3.max_rel_gap <= 0.01),
        ));

        let alpha = comp.alphas();
        let decay: Vec<f64> = (1..=3)
            .map(|h| {
                comp.outer
                    .lambda_order(&alpha, h)
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs()))
            })
            .collect();
        checks.push(record(
            "coefficient_order_decay",
            k,
            inputs.clone(),
            json!({"max_abs_lambda_by_order": decay}),
            None,
        ));

        let mut radius = None;
        for r in [0.8, 0.4, 0.2, 0.1] {
            let w = fit_local_linear(comp, &a_o, r, samples, &mut rng)?;
            let nrw = fit_local_linear(comp, &a_o, r / 2.0, samples, &mut rng)?;
            if nrw.residual / w.residual <= 0.3 {
                radius = Some(r);
                break;
            }
        }
        checks.push(record(
            "convergence_radius",
            k,
            inputs,
            json!({"largest_radius_with_ratio_0_3": radius}),
            None,
        ));
    }
    let passed = checks.iter().all(|c| c.passed != Some(false));
    Ok(SuiteReport {
        seed,
        checks,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple(centers: &[f64], outer: Outer) -> Composition {
        let utilities = centers
            .iter()
            .map(|&c| Utility {
                alpha: 0.0,
                beta: -1.0,
                rho: 0.0,
                center: c,
            })
            .collect();
        Composition::new(utilities, outer).unwrap()
    }

    #[test]
    fn separable_maxima() {
        let comp = simple(&[0.0, 0.0], Outer::linear_only(0.0, vec![1.0, 1.0]));
        let a = find_local_max(&comp, &[-1.0, -1.0], &[1.0, 1.0], 1e-10).unwrap();
        assert!(a.iter().all(|x| x.abs() < 1e-9));

        let mut outer = Outer::linear_only(0.5, vec![2.0, 1.0, 0.5]);
        outer.pairs[1] = 0.1;
        outer.pairs[3] = 0.1;
        let comp = simple(&[0.3, 0.3, 0.3], outer);
        let a = find_local_max(&comp, &[-1.0; 3], &[1.0; 3], 1e-10).unwrap();
        assert!(a.iter().all(|x| (x - 0.3).abs() < 1e-9), "{a:?}");
    }

    #[test]
    fn boundary_maximum_is_rejected() {
        let comp = simple(&[2.0], Outer::linear_only(0.0, vec![1.0]));
        assert!(matches!(
            find_local_max(&comp, &[-1.0], &[1.0], 1e-10),
            Err(LabError::Convergence { .. })
        ));
    }

    #[test]
    fn random_compositions_recover_constructed_maxima() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 2..=4 {
            let comp = random_composition(n, &mut rng);
            let c = comp.centers();
            let lo: Vec<f64> = c.iter().map(|x| x - 0.3).collect();
            let hi: Vec<f64> = c.iter().map(|x| x + 0.3).collect();
            let a = find_local_max(&comp, &lo, &hi, 1e-10).unwrap();
            for (x, y) in a.iter().zip(&c) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn additive_outer_has_no_cross_terms_anywhere() {
        let comp = simple(&[0.1, -0.2, 0.0], Outer::linear_only(1.0, vec![1.0, 2.0, 3.0]));
        let r = check_cross_derivatives(&comp, &[0.5, 0.5, 0.5], 1e-3).unwrap();
        assert!(r.max_abs < 1e-8);
    }

    #[test]
    fn coupled_outer_cross_terms_vanish_only_at_the_maximum() {
        let mut outer = Outer::linear_only(0.0, vec![1.0, 1.0]);
        outer.pairs = vec![0.0, 0.1, 0.1, 0.0];
        let comp = simple(&[0.0, 0.0], outer);
        for h in [1e-2, 1e-3] {
            let r = check_cross_derivatives(&comp, &[0.0, 0.0], h).unwrap();
            assert!(r.max_abs < 10.0 * h * h, "h={h}: {}", r.max_abs);
        }
        // d2/da1da2 of 0.2 q1 q2 = 0.2 * (-2 a1) * (-2 a2)
        let r = check_cross_derivatives(&comp, &[0.2, 0.2], 1e-3).unwrap();
        let exact = 0.2 * 0.4 * 0.4;
        assert!((r.max_abs - exact).abs() < 1e-6);
    }

    #[test]
    fn linear_outer_fits_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let utilities = vec![
            Utility { alpha: 1.0, beta: -2.0, rho: 0.05, center: 0.1 },
            Utility { alpha: 2.0, beta: -1.0, rho: -0.02, center: -0.3 },
        ];
        let comp = Composition::new(utilities, Outer::linear_only(0.7, vec![1.3, 0.4])).unwrap();
        let fit = fit_local_linear(&comp, &[0.1, -0.3], 0.1, 150, &mut rng).unwrap();
        assert!(fit.residual < 1e-10);
        assert!((fit.lambda[0] - 1.3).abs() < 1e-8 && (fit.lambda[1] - 0.4).abs() < 1e-8);
        assert!((fit.c - 0.7).abs() < 1e-8);
    }

    #[test]
    fn flat_utility_is_a_degenerate_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut comp = simple(&[0.0, 0.0], Outer::linear_only(0.0, vec![1.0, 1.0]));
        comp.utilities[1].beta = 0.0;
        let err = fit_local_linear(&comp, &[0.0, 0.0], 0.1, 150, &mut rng).unwrap_err();
        assert!(matches!(err, LabError::DegenerateFit(_)));
    }

    #[test]
    fn theorem3_worked_example() {
        let utilities = vec![
            Utility { alpha: 2.0, beta: -1.0, rho: 0.0, center: 0.0 },
            Utility { alpha: 3.0, beta: -1.5, rho: 0.0, center: 0.0 },
        ];
        let mut outer = Outer::linear_only(0.0, vec![1.0, 1.0]);
        outer.pairs = vec![0.0, 0.1, 0.1, 0.0];
        let comp = Composition::new(utilities, outer).unwrap();
        let p = comp.predicted_lambda();
        assert!((p[0] - 1.6).abs() < 1e-12 && (p[1] - 1.4).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = check_theorem3(&comp, &[0.0, 0.0], THEOREM3_RADIUS, &mut rng).unwrap();
        assert!(r.max_rel_gap < 0.01, "{r:?}");
    }

    #[test]
    fn theorem3_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let utilities = vec![
            Utility { alpha: 1.0, beta: -1.0, rho: 0.0, center: 0.0 },
            Utility { alpha: 2.0, beta: -2.0, rho: 0.0, center: 0.0 },
        ];
        let comp = Composition::new(utilities.clone(), Outer::linear_only(0.0, vec![0.8, 1.2])).unwrap();
        let r = check_theorem3(&comp, &[0.0, 0.0], 0.1, &mut rng).unwrap();
        assert_eq!(r.predicted, vec![0.8, 1.2]);
        assert!(r.max_rel_gap < 1e-6);

        let mut zeroed = utilities;
        zeroed.iter_mut().for_each(|u| u.alpha = 0.0);
        let mut outer = Outer::linear_only(0.0, vec![0.8, 1.2]);
        outer.pairs = vec![0.0, 0.1, 0.1, 0.0];
        let comp = Composition::new(zeroed, outer).unwrap();
        assert_eq!(comp.predicted_lambda(), vec![0.8, 1.2]);
    }

    #[test]
    fn cubic_orders() {
        let mut outer = Outer::linear_only(0.0, vec![1.0, 1.0]);
        let mut t = vec![0.0; 8];
        t[1] = 0.01; // (0,0,1)
        t[2] = 0.01; // (0,1,0)
        t[4] = 0.01; // (1,0,0)
        outer.triples = Some(t);
        assert_eq!(outer.degree(), 3);
        let alpha = [2.0, 3.0];
        let l3 = outer.lambda_order(&alpha, 3);
        // g3 = 0.03 q0^2 q1: d/dq0 = 0.06 q0 q1, d/dq1 = 0.03 q0^2
        assert!((l3[0] - 0.06 * 6.0).abs() < 1e-12);
        assert!((l3[1] - 0.03 * 4.0).abs() < 1e-12);
        assert!((outer.eval(&alpha) - (2.0 + 3.0 + 0.03 * 4.0 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn suite_is_seeded_and_cooperative() {
        let a = synthetic_suite(11);
        assert_eq!(a.len(), SUITE_SIZE);
        assert_eq!(a, synthetic_suite(11));
        assert_ne!(a, synthetic_suite(12));
        for c in &a {
            assert!((2..=4).contains(&c.n()));
            let n = c.n();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        assert!(c.outer.pairs[i * n + j].abs() >= 0.08);
                    }
                }
            }
        }
    }
}
