//! Central finite-difference gradient checking against the tape.

use crate::error::{Error, Result};
use crate::numerics::ParameterStore;

/// Compare analytic gradients already stored in `store` against central
/// finite differences of `f`, perturbing one scalar parameter at a time.
/// Returns the worst relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, store: &mut ParameterStore, step: f64) -> Result<f64>
where
    F: Fn(&ParameterStore) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::invalid("finite_diff_check: step must be positive"));
    }
    let names: Vec<String> = store.names().cloned().collect();
    let mut worst = 0.0_f64;
    for name in names {
        let len = {
            let t = store.get(&name)?;
            t.rows() * t.cols()
        };
        for i in 0..len {
            let original = store.get(&name)?.data()[i];
            store.get_mut(&name)?.data_mut()[i] = original + step;
            let f_plus = f(store)?;
            store.get_mut(&name)?.data_mut()[i] = original - step;
            let f_minus = f(store)?;
            store.get_mut(&name)?.data_mut()[i] = original;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::invalid(format!(
                    "finite_diff_check: non-finite function value at {name}[{i}]"
                )));
            }
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let analytic = store
                .get(&name)?
                .grad()
                .map(|g| g[i])
                .unwrap_or(0.0);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{multi_head_attention, Activation, AttentionParamIds, Tape, TapeId, Tensor2D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(
        rng: &mut ChaCha8Rng,
        shapes: &[(&str, usize, usize)],
        scale: f64,
    ) -> ParameterStore {
        let mut store = ParameterStore::new();
        for &(name, r, c) in shapes {
            let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-scale..scale)).collect();
            store
                .insert(name, Tensor2D::from_vec(r, c, data).unwrap())
                .unwrap();
        }
        store
    }

    /// Run `cases` randomized checks of one op builder. The loss is
    /// `sum(out * R)` for a random constant `R`, which exercises every
    /// output entry.
    fn check_op<B>(name: &str, seed: u64, cases: usize, tol: f64, shapes: &[(&str, usize, usize)], build: B)
    where
        B: Fn(&mut Tape, &ParameterStore) -> TapeId,
    {
        check_op_scaled(name, seed, cases, tol, 1.5, shapes, build)
    }

    fn check_op_scaled<B>(
        name: &str,
        seed: u64,
        cases: usize,
        tol: f64,
        scale: f64,
        shapes: &[(&str, usize, usize)],
        build: B,
    ) where
        B: Fn(&mut Tape, &ParameterStore) -> TapeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in 0..cases {
            let mut store = random_store(&mut rng, shapes, scale);
            // R is fixed per case so the loss is a pure function of the store.
            let probe_seed = rng.random::<u64>();
            let loss_fn = |store: &ParameterStore| -> (Tape, TapeId) {
                let mut tape = Tape::new();
                let out = build(&mut tape, store);
                let (r, c) = tape.dims(out);
                let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
                let probe: Vec<f64> = (0..r * c).map(|_| prng.random_range(-1.0..1.0)).collect();
                let weighted = tape.mul_const(out, probe).unwrap();
                let loss = tape.sum_all(weighted);
                (tape, loss)
            };

            store.zero_grads();
            let (tape, loss) = loss_fn(&store);
            tape.backward(loss, &mut store).unwrap();
            let err = finite_diff_check(
                |s| {
                    let (tape, loss) = loss_fn(s);
                    tape.scalar(loss)
                },
                &mut store,
                1e-5,
            )
            .unwrap();
            assert!(
                err <= tol,
                "{name} case {case}: relative error {err} exceeds {tol}"
            );
        }
    }

    #[test]
    fn quadratic_loss_is_near_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = random_store(&mut rng, &[("w", 2, 3)], 1.5);
        let loss_fn = |s: &ParameterStore| -> (Tape, TapeId) {
            let mut tape = Tape::new();
            let w = tape.param(s, "w").unwrap();
            let sq = tape.mul_elem(w, w).unwrap();
            let sum = tape.sum_all(sq);
            let loss = tape.scale(sum, 0.5);
            (tape, loss)
        };
        let (tape, loss) = loss_fn(&store);
        tape.backward(loss, &mut store).unwrap();
        let err = finite_diff_check(
            |s| {
                let (tape, loss) = loss_fn(s);
                tape.scalar(loss)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "quadratic check error {err}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor2D::zeros(1, 1)).unwrap();
        assert!(finite_diff_check(|_| Ok(0.0), &mut store, 0.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_per_op() {
        // 21 op families x 5 cases each >= 100 randomized checks.
        let cases = 5;
        let tol = 1e-3;

        check_op("matmul", 101, cases, tol, &[("a", 3, 4), ("b", 4, 2)], |t, s| {
            let a = t.param(s, "a").unwrap();
            let b = t.param(s, "b").unwrap();
            t.matmul(a, b).unwrap()
        });
        check_op("add", 102, cases, tol, &[("a", 2, 3), ("b", 2, 3)], |t, s| {
            let a = t.param(s, "a").unwrap();
            let b = t.param(s, "b").unwrap();
            t.add(a, b).unwrap()
        });
        check_op("sub", 103, cases, tol, &[("a", 2, 3), ("b", 2, 3)], |t, s| {
            let a = t.param(s, "a").unwrap();
            let b = t.param(s, "b").unwrap();
            t.sub(a, b).unwrap()
        });
        check_op("mul_elem", 104, cases, tol, &[("a", 2, 3), ("b", 2, 3)], |t, s| {
            let a = t.param(s, "a").unwrap();
            let b = t.param(s, "b").unwrap();
            t.mul_elem(a, b).unwrap()
        });
        check_op("add_row_broadcast", 105, cases, tol, &[("a", 3, 4), ("b", 1, 4)], |t, s| {
            let a = t.param(s, "a").unwrap();
            let b = t.param(s, "b").unwrap();
            t.add_row_broadcast(a, b).unwrap()
        });
        check_op("scale", 106, cases, tol, &[("a", 2, 5)], |t, s| {
            let a = t.param(s, "a").unwrap();
            t.scale(a, -1.7)
        });
        check_op("transpose", 107, cases, tol, &[("a", 3, 2)], |t, s| {
            let a = t.param(s, "a").unwrap();
            t.transpose(a)
        });
        check_op("softmax_rows", 108, cases, tol, &[("a", 3, 4)], |t, s| {
            let a = t.param(s, "a").unwrap();
            t.softmax_rows(a).unwrap()
        });
        check_op("layer_norm", 109, cases, tol, &[("x", 3, 6), ("g", 1, 6), ("b", 1, 6)], |t, s| {
            let x = t.param(s, "x").unwrap();
            let g = t.param(s, "g").unwrap();
            let b = t.param(s, "b").unwrap();
            t.layer_norm(x, g, b, 1e-5).unwrap()
        });
        check_op("relu", 110, cases, tol, &[("x", 2, 6)], |t, s| {
            let x = t.param(s, "x").unwrap();
            t.activation(x, Activation::Relu)
        });
        check_op("gelu", 111, cases, tol, &[("x", 2, 6)], |t, s| {
            let x = t.param(s, "x").unwrap();
            t.activation(x, Activation::Gelu)
        });
        check_op("gather_rows", 112, cases, tol, &[("x", 4, 3)], |t, s| {
            let x = t.param(s, "x").unwrap();
            t.gather_rows(x, &[2, 0, 2, 3]).unwrap()
        });
        check_op("slice_rows", 113, cases, tol, &[("x", 4, 3)], |t, s| {
            let x = t.param(s, "x").unwrap();
            t.slice_rows(x, 1, 2).unwrap()
        });
        check_op("slice_cols", 114, cases, tol, &[("x", 3, 6)], |t, s| {
            let x = t.param(s, "x").unwrap();
            t.slice_cols(x, 2, 3).unwrap()
        });
        check_op("concat_rows", 115, cases, tol, &[("a", 2, 3), ("b", 1, 3)], |t, s| {
            let a = t.param(s, "a").unwrap();
            let b = t.param(s, "b").unwrap();
            t.concat_rows(&[a, b]).unwrap()
        });
        check_op("concat_cols", 116, cases, tol, &[("a", 2, 3), ("b", 2, 2)], |t, s| {
            let a = t.param(s, "a").unwrap();
            let b = t.param(s, "b").unwrap();
            t.concat_cols(&[a, b]).unwrap()
        });
        check_op("mean_rows", 117, cases, tol, &[("x", 4, 3)], |t, s| {
            let x = t.param(s, "x").unwrap();
            t.mean_rows(x)
        });
        check_op("max_rows", 118, cases, tol, &[("x", 4, 3)], |t, s| {
            let x = t.param(s, "x").unwrap();
            t.max_rows(x)
        });
        check_op("bce_with_logits", 119, cases, tol, &[("z", 1, 6)], |t, s| {
            let z = t.param(s, "z").unwrap();
            t.bce_with_logits_mean(z, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
                .unwrap()
        });
        check_op("softmax_cross_entropy", 120, cases, tol, &[("z", 1, 5)], |t, s| {
            let z = t.param(s, "z").unwrap();
            t.softmax_cross_entropy(z, 3).unwrap()
        });
        // Modest weight scale keeps attention logits away from softmax
        // saturation, where true gradients sink below difference noise.
        check_op_scaled(
            "multi_head_attention",
            121,
            cases,
            tol,
            0.5,
            &[
                ("a.wq", 4, 4),
                ("a.bq", 1, 4),
                ("a.wk", 4, 4),
                ("a.bk", 1, 4),
                ("a.wv", 4, 4),
                ("a.bv", 1, 4),
                ("a.wo", 4, 4),
                ("a.bo", 1, 4),
                ("x", 3, 4),
            ],
            |t, s| {
                let x = t.param(s, "x").unwrap();
                let params = AttentionParamIds::register(t, s, "a").unwrap();
                multi_head_attention(t, x, &params, 2, &[true, true, false]).unwrap()
            },
        );
    }
}
