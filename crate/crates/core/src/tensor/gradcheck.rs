use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Compares tape gradients of a scalar function against central differences
/// at every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, h, &coords)
}

pub fn grad_check_coords<F>(f: F, point: &Tensor, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&tape, x)?;
    tape.backward(y)?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |p: &Tensor, coord: usize| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(p.clone());
        let v = f(&tape, x)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { coord })
        }
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        coords_checked: coords.len(),
    };
    let mut p = point.clone();
    for &c in coords {
        let orig = p.values[c];
        p.values[c] = orig + h;
        let fp = eval(&p, c)?;
        p.values[c] = orig - h;
        let fm = eval(&p, c)?;
        p.values[c] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let e = rel_err(analytic[c], numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_coord = c;
        }
    }
    Ok(report)
}

/// Gradient check over the flattened trainable values of a parameter store.
/// `coords` index into `store.flat_values()`.
pub fn grad_check_store<F>(store: &ParamStore, f: F, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let mut work = store.clone();
    work.zero_grad();
    {
        let tape = Tape::new();
        let y = f(&tape, &work)?;
        tape.backward(y)?;
        work.absorb_grads(&tape)?;
    }
    let analytic = work.flat_grads();
    let base = work.flat_values();
    let mut flat = base.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        coords_checked: coords.len(),
    };
    let mut eval = |flat: &[f64], coord: usize| -> Result<f64> {
        work.set_flat_values(flat);
        let tape = Tape::new();
        let v = f(&tape, &work)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { coord })
        }
    };
    for &c in coords {
        flat[c] = base[c] + h;
        let fp = eval(&flat, c)?;
        flat[c] = base[c] - h;
        let fm = eval(&flat, c)?;
        flat[c] = base[c];
        let numeric = (fp - fm) / (2.0 * h);
        let e = rel_err(analytic[c], numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_coord = c;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_form_is_exact() {
        let a = Tensor::new(vec![3, 3], vec![2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0]).unwrap();
        let point = Tensor::new(vec![3, 1], vec![0.7, -1.1, 0.4]).unwrap();
        let r = grad_check(
            |t, x| {
                let a = t.constant(a.clone());
                let ax = a.matmul(x)?;
                Ok(x.mul(ax)?.sum())
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-9, "{r:?}");
    }

    #[test]
    fn two_layer_mlp_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let inputs = rand_t(&[5, 4]);
        let w2 = rand_t(&[6, 3]);
        let point = rand_t(&[4, 6]);
        let r = grad_check(
            |t, w1| {
                let x = t.constant(inputs.clone());
                let w2 = t.constant(w2.clone());
                let h = x.matmul(w1)?.gelu();
                let logits = h.matmul(w2)?;
                logits.cross_entropy(&[0, 2, 1, 1, 0], &[true; 5])
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn detached_path_matches_oracle_on_detached_function() {
        // f(x) = sum(x * sg(x^2)) -> analytic grad is sg(x^2), the gradient of
        // g(x) = sum(x * c) with c frozen at x^2.
        let point = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
        let frozen = Tensor::new(vec![3], point.values.iter().map(|v| v * v).collect()).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(point.clone());
        let sq = x.mul(x).unwrap().detach();
        tape.backward(x.mul(sq).unwrap().sum()).unwrap();
        assert_eq!(x.grad().unwrap(), frozen.values);
        let r = grad_check(
            |t, x| {
                let c = t.constant(frozen.clone());
                Ok(x.mul(c)?.sum())
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-9);
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let point = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let err = grad_check(
            |t, x| {
                if x.value().values[1] > 1.0 {
                    Ok(t.constant(Tensor::new(vec![], vec![f64::INFINITY]).unwrap()))
                } else {
                    Ok(x.sum())
                }
            },
            &point,
            1e-5,
        );
        assert!(matches!(err, Err(TensorError::NonFinite { coord: 1 })), "{err:?}");
    }
}
