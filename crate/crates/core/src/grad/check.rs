//! Central finite-difference gradient checking.

use super::{Array, ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor).max(1e-300);
    (analytic - numeric).abs() / denom
}

/// Smallest derivative magnitude a central difference with step `h` on a
/// function of size `|f|` resolves to four significant digits: its roundoff
/// is about `eps |f| / h`.
pub fn resolution_floor(f_value: f64, h: f64) -> f64 {
    1e4 * f64::EPSILON * f_value.abs().max(1.0) / h
}

/// Value of the scalar `f` on a fresh tape.
pub fn scalar_value<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    Ok(tape.value(out).data()[0])
}

/// `(f(x+h) - f(x-h)) / 2h` for every scalar of every parameter.
pub fn numeric_gradient<F>(f: &mut F, store: &ParamStore, h: f64) -> Result<Vec<Array>>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).value.len();
        let mut g = Array::zeros(store.get(id).value.shape());
        for k in 0..n {
            let orig = work.get(id).value.data()[k];
            work.get_mut(id).value.data_mut()[k] = orig + h;
            let up = scalar_value(f, &work)?;
            work.get_mut(id).value.data_mut()[k] = orig - h;
            let down = scalar_value(f, &work)?;
            work.get_mut(id).value.data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Analytic gradients (one array per parameter, store order) via backward.
pub fn analytic_gradient<F>(f: &mut F, store: &ParamStore) -> Result<Vec<Array>>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    tape.backward(loss, &mut work)?;
    Ok(work.iter().map(|p| p.grad.clone()).collect())
}

pub fn compare_gradients(
    store: &ParamStore,
    analytic: &[Array],
    numeric: &[Array],
    floor: f64,
    tolerance: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance,
        passed: true,
    };
    for ((p, a), n) in store.iter().zip(analytic).zip(numeric) {
        for (k, (x, y)) in a.data().iter().zip(n.data()).enumerate() {
            let e = relative_error(*x, *y, floor);
            report.checked += 1;
            if report.worst.is_none() || e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = Some((p.name.clone(), k));
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    report
}

/// Builds the scalar `f` on fresh tapes, differentiates it once, and
/// compares against central differences with step `h`. Relative errors use
/// [`resolution_floor`] as the smallest denominator.
pub fn grad_check<F>(mut f: F, store: &ParamStore, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let analytic = analytic_gradient(&mut f, store)?;
    let numeric = numeric_gradient(&mut f, store, h)?;
    let floor = resolution_floor(scalar_value(&mut f, store)?, h);
    Ok(compare_gradients(store, &analytic, &numeric, floor, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quadratic(tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let p = tape.param(store, store.id("p").unwrap());
        let sq = tape.square(p)?;
        let s = tape.sum_all(sq)?;
        tape.scale(s, 0.5)
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store
            .insert("p", Array::vector(vec![0.3, -1.2, 2.5, 0.01]))
            .unwrap();
        // central differences are exact on quadratics, so only roundoff
        // (~eps*|f|/h) remains
        let r = grad_check(quadratic, &store, 1e-3, 1e-9).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn relu_network_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.init_linear(&mut rng, "l1", 4, 8, true).unwrap();
        store.init_linear(&mut rng, "l2", 8, 1, true).unwrap();
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |t: &mut Tape, s: &ParamStore| -> Result<Var> {
            let xi = t.input(Array::matrix(3, 4, x.clone())?)?;
            let w1 = t.param(s, s.id("l1.weight").unwrap());
            let b1 = t.param(s, s.id("l1.bias").unwrap());
            let w2 = t.param(s, s.id("l2.weight").unwrap());
            let b2 = t.param(s, s.id("l2.bias").unwrap());
            let h = t.linear(xi, w1, Some(b1))?;
            let h = t.relu(h)?;
            let y = t.linear(h, w2, Some(b2))?;
            t.sum_all(y)
        };
        let r = grad_check(f, &store, 1e-6, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn floor_covers_roundoff_on_tiny_elements() {
        // a gap of 5e-11 on a 1e-8 element is pure central-difference
        // roundoff for |f| ~ 1 at h = 1e-6
        let floor = resolution_floor(1.0, 1e-6);
        assert!(relative_error(1e-8, 1e-8 + 5e-11, floor) < 1e-4);
        assert!(relative_error(1e-8, 1e-8 + 5e-11, 0.0) > 1e-3);
        // above the floor the error stays relative
        assert!(relative_error(1.0, 1.001, floor) > 9e-4);
    }

    #[test]
    fn corrupted_gradient_is_caught_with_name() {
        let mut store = ParamStore::new();
        store.insert("p", Array::vector(vec![1.0, 2.0])).unwrap();
        store.insert("q", Array::vector(vec![0.5])).unwrap();
        let mut f = |t: &mut Tape, s: &ParamStore| -> Result<Var> {
            let p = t.param(s, s.id("p").unwrap());
            let q = t.param(s, s.id("q").unwrap());
            let a = t.sum_all(p)?;
            let b = t.mul(a, q)?;
            Ok(b)
        };
        let mut analytic = analytic_gradient(&mut f, &store).unwrap();
        let numeric = numeric_gradient(&mut f, &store, 1e-6).unwrap();
        assert!(compare_gradients(&store, &analytic, &numeric, 1e-8, 1e-6).passed);
        analytic[1].data_mut()[0] += 0.1;
        let r = compare_gradients(&store, &analytic, &numeric, 1e-8, 1e-6);
        assert!(!r.passed);
        assert_eq!(r.worst, Some(("q".to_string(), 0)));
    }
}
