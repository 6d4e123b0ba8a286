//! Central finite-difference verification for tape gradients.
//!
//! The checker never touches the reverse pass: it re-runs the forward build
//! with perturbed inputs, so it stays an independent oracle for `backward`.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error with a unit floor, the usual gradcheck metric.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Build a scalar loss from leaves bound to `inputs`, compare analytic
/// gradients against central differences, and return the worst relative
/// error over all input elements.
pub fn max_grad_error<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            tensors.iter().map(|t| tape.leaf(t.clone())).collect::<Result<_>>()?;
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<_>>()?;
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[ti]);
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.map(|g| g.data()[ei]).unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn randn(shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    /// Every layer primitive passes the finite-difference check on random
    /// small shapes.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = rng_from(42);

        // matmul + add_bias + relu + sum
        let err = max_grad_error(
            |tape, vs| {
                let y = tape.matmul(vs[0], vs[1])?;
                let y = tape.add_bias(y, vs[2])?;
                let y = tape.relu(y)?;
                tape.sum(y)
            },
            &[randn(vec![3, 4], &mut rng), randn(vec![4, 2], &mut rng), randn(vec![2], &mut rng)],
            H,
        )
        .unwrap();
        assert!(err < TOL, "matmul/add_bias/relu err {err}");

        // softmax through a weighted sum so the jacobian is exercised
        let w = randn(vec![2, 5], &mut rng);
        let err = max_grad_error(
            |tape, vs| {
                let p = tape.softmax(vs[0])?;
                let wl = tape.leaf(w.clone())?;
                let m = tape.mul(p, wl)?;
                tape.sum(m)
            },
            &[randn(vec![2, 5], &mut rng)],
            H,
        )
        .unwrap();
        assert!(err < TOL, "softmax err {err}");

        // layernorm
        let err = max_grad_error(
            |tape, vs| {
                let y = tape.layernorm(vs[0], vs[1], vs[2])?;
                let sq = tape.square(y)?;
                tape.sum(sq)
            },
            &[randn(vec![3, 6], &mut rng), randn(vec![6], &mut rng), randn(vec![6], &mut rng)],
            H,
        )
        .unwrap();
        assert!(err < TOL, "layernorm err {err}");

        // embedding lookup
        let err = max_grad_error(
            |tape, vs| {
                let rows = tape.embedding(vs[0], &[2, 0, 2, 1])?;
                let sq = tape.square(rows)?;
                tape.sum(sq)
            },
            &[randn(vec![4, 3], &mut rng)],
            H,
        )
        .unwrap();
        assert!(err < TOL, "embedding err {err}");

        // conv1d, strided and padded
        let err = max_grad_error(
            |tape, vs| {
                let y = tape.conv1d(vs[0], vs[1], vs[2], 2, 2)?;
                let sq = tape.square(y)?;
                tape.sum(sq)
            },
            &[randn(vec![7, 3], &mut rng), randn(vec![2, 3, 5], &mut rng), randn(vec![2], &mut rng)],
            H,
        )
        .unwrap();
        assert!(err < TOL, "conv1d err {err}");

        // exp/log/abs/mean and the flat-signal ops
        let err = max_grad_error(
            |tape, vs| {
                let e = tape.exp(vs[0])?;
                let l = tape.log(e)?;
                let framed = tape.frame(l, 4)?;
                let r = tape.reshape(framed, vec![8])?;
                let d = tape.downsample2(r)?;
                let a = tape.abs(d)?;
                tape.mean(a)
            },
            &[randn(vec![7], &mut rng)],
            H,
        )
        .unwrap();
        assert!(err < TOL, "flat op chain err {err}");

        // gather/broadcast/concat
        let err = max_grad_error(
            |tape, vs| {
                let g = tape.gather_rows(vs[0], &[0, 0, 2, 1])?;
                let b = tape.broadcast_row(vs[1], 4)?;
                let c = tape.concat_cols(g, b)?;
                let s = tape.square(c)?;
                tape.sum(s)
            },
            &[randn(vec![3, 2], &mut rng), randn(vec![2], &mut rng)],
            H,
        )
        .unwrap();
        assert!(err < TOL, "gather/broadcast/concat err {err}");
    }

    /// A random 6-parameter network agrees with finite differences.
    #[test]
    fn small_network_matches_finite_differences() {
        let mut rng = rng_from(7);
        let inputs = vec![
            randn(vec![2, 3], &mut rng), // x
            randn(vec![3, 3], &mut rng), // w1
            randn(vec![3], &mut rng),    // b1
            randn(vec![3, 2], &mut rng), // w2
            randn(vec![2], &mut rng),    // b2
            randn(vec![2], &mut rng),    // gamma-ish scale
        ];
        let err = max_grad_error(
            |tape, vs| {
                let h = tape.matmul(vs[0], vs[1])?;
                let h = tape.add_bias(h, vs[2])?;
                let h = tape.relu(h)?;
                let o = tape.matmul(h, vs[3])?;
                let o = tape.add_bias(o, vs[4])?;
                let p = tape.softmax(o)?;
                let s = tape.broadcast_row(vs[5], 2)?;
                let m = tape.mul(p, s)?;
                tape.sum(m)
            },
            &inputs,
            H,
        )
        .unwrap();
        assert!(err < TOL, "network err {err}");
    }
}
