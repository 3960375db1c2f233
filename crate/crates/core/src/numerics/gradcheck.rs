use super::{Graph, NumericsError, Tensor, Var};

/// Compares tape gradients of `f` at `p` against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, p: &Tensor<f64>, h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, NumericsError>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(p), h)
}

/// Multi-parameter form of [`grad_check`]; every tensor in `params` is a
/// trainable leaf and all coordinates are checked.
pub fn grad_check_many<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(NumericsError::BadStep(h));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(NumericsError::NotScalar("grad_check objective"));
        }
        let y = v.data()[0];
        if !y.is_finite() {
            return Err(NumericsError::NonFinite("grad_check objective".into()));
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(params[pi].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        for i in 0..params[pi].len() {
            let orig = params[pi].data()[i];
            probe[pi].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[pi].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;
    const H: f64 = 1e-5;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        rand_t(rng, shape).map(|v| v.abs() + 0.2)
    }

    /// Reduces any tensor to a scalar through a fixed random projection so
    /// every output coordinate contributes a distinct weight.
    fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var, NumericsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_t(&mut rng, g.value(v).shape());
        let w = g.constant(w);
        let m = g.mul(v, w)?;
        Ok(g.sum(m))
    }

    #[test]
    fn square_at_three() {
        let p = Tensor::scalar(3.0);
        let err = grad_check(|g, x| g.mul(x, x).map(|y| g.sum(y)), &p, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let p = Tensor::scalar(1.0);
        assert!(matches!(
            grad_check(|g, x| Ok(g.sum(x)), &p, 0.1),
            Err(NumericsError::BadStep(_))
        ));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let p = Tensor::scalar(0.0);
        let r = grad_check(
            |g, x| {
                let l = g.log(x);
                Ok(g.sum(l))
            },
            &p,
            1e-5,
        );
        assert!(matches!(r, Err(NumericsError::NonFinite(_))));
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..5 {
            let a = rand_t(&mut rng, &[3, 4]);
            let b = rand_t(&mut rng, &[3, 4]);
            let err = grad_check_many(
                |g, v| {
                    let s = g.add(v[0], v[1])?;
                    let d = g.sub(s, v[1])?;
                    let m = g.mul(d, v[1])?;
                    let sc = g.scale(m, 0.7);
                    let sh = g.add_scalar(sc, 0.3);
                    let e = g.exp(sh);
                    project(g, e, trial)
                },
                &[a, b],
                H,
            )
            .unwrap();
            assert!(err < TOL, "{err}");
        }
    }

    #[test]
    fn log_xlogx_and_division() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..5 {
            let a = positive(&mut rng, &[2, 5]);
            let err = grad_check(
                |g, x| {
                    let l = g.log(x);
                    let xl = g.xlogx(x);
                    let t = g.sum(x);
                    let p = g.div_scalar(xl, t)?;
                    let s = g.add(l, p)?;
                    project(g, s, trial)
                },
                &a,
                H,
            )
            .unwrap();
            assert!(err < TOL, "{err}");
        }
    }

    #[test]
    fn reductions_and_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..5 {
            let a = rand_t(&mut rng, &[4, 3]);
            let err = grad_check(
                |g, x| {
                    let t = g.transpose(x);
                    let r = g.sum_rows(t);
                    let c = g.sum_cols(x);
                    let pr = project(g, r, trial)?;
                    let pc = project(g, c, trial + 100)?;
                    let m = g.mean(x);
                    let s = g.add(pr, pc)?;
                    g.add(s, m)
                },
                &a,
                H,
            )
            .unwrap();
            assert!(err < TOL, "{err}");
        }
    }

    #[test]
    fn matmul_bias_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..5 {
            let x = rand_t(&mut rng, &[3, 4]);
            let w = rand_t(&mut rng, &[4, 5]);
            let b = rand_t(&mut rng, &[5]);
            let err = grad_check_many(
                |g, v| {
                    let m = g.matmul(v[0], v[1])?;
                    let a = g.add_bias(m, v[2])?;
                    let r = g.relu(a);
                    project(g, r, trial)
                },
                &[x, w, b],
                H,
            )
            .unwrap();
            assert!(err < TOL, "{err}");
        }
    }

    #[test]
    fn softmax_and_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            let a = rand_t(&mut rng, &[4, 3]);
            let err = grad_check(
                |g, x| {
                    let s = g.softmax_rows(x);
                    let n = g.normalize_rows(x);
                    let sum = g.add(s, n)?;
                    project(g, sum, trial)
                },
                &a,
                H,
            )
            .unwrap();
            assert!(err < TOL, "{err}");
        }
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..5 {
            let x = rand_t(&mut rng, &[3, 6]);
            let gain = rand_t(&mut rng, &[6]);
            let bias = rand_t(&mut rng, &[6]);
            let err = grad_check_many(
                |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2])?;
                    project(g, y, trial)
                },
                &[x, gain, bias],
                H,
            )
            .unwrap();
            assert!(err < TOL, "{err}");
        }
    }

    #[test]
    fn conv_pool_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (trial, (stride, pad)) in [(1, 1), (2, 1), (1, 0)].into_iter().enumerate() {
            let x = rand_t(&mut rng, &[2, 6, 6, 2]);
            let w = rand_t(&mut rng, &[3 * 3 * 2, 3]);
            let b = rand_t(&mut rng, &[3]);
            let err = grad_check_many(
                |g, v| {
                    let c = g.conv2d(v[0], v[1], v[2], 3, stride, pad)?;
                    let p = g.avg_pool2(c)?;
                    let q = g.global_avg_pool(p)?;
                    let r = g.reshape(c, &[g.value(c).len()])?;
                    let pr = project(g, r, trial as u64)?;
                    let pq = project(g, q, trial as u64 + 50)?;
                    g.add(pr, pq)
                },
                &[x, w, b],
                H,
            )
            .unwrap();
            assert!(err < TOL, "{err}");
        }
    }

    #[test]
    fn concat_slice_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_t(&mut rng, &[2, 3]);
        let b = rand_t(&mut rng, &[3, 3]);
        let err = grad_check_many(
            |g, v| {
                let c = g.concat_rows(&[v[0], v[1]])?;
                let s = g.slice_rows(c, 1, 4)?;
                let mask = Tensor::from_f64(&[3, 3], &[1., 0., 1., 0., 1., 1., 1., 1., 0.])?;
                let m = g.mul_const(s, mask)?;
                project(g, m, 9)
            },
            &[a, b],
            H,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn constants_and_detached_values_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let d = g.detach(p);
        let m = g.mul(p, c).unwrap();
        let m2 = g.mul(m, d).unwrap();
        let loss = g.sum(m2);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(d).is_none());
        // d/dp (p * c * stop(p)) = c * p
        assert_eq!(grads.get(p).unwrap().data(), &[3.0, 8.0]);
    }

    #[test]
    fn normalize_zero_row_counts_clamp() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2, 2], &[0.0, 0.0, 1.0, 1.0]).unwrap());
        let n = g.normalize_rows(x);
        assert_eq!(g.clamp_events(), 1);
        assert!(g.value(n).all_finite());
    }
}
