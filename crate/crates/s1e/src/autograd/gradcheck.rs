//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{GradMap, Graph};
use super::tensor::{Result, Tensor};

/// A differentiable scalar program over a fixed set of leaf tensors.
pub trait TensorProgram {
    fn eval(&self, g: &mut Graph, inputs: &[Tensor]) -> Result<Tensor>;
}

impl<F> TensorProgram for F
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
{
    fn eval(&self, g: &mut Graph, inputs: &[Tensor]) -> Result<Tensor> {
        self(g, inputs)
    }
}

/// Compare analytic gradients of `f` against central finite differences.
///
/// Returns the maximum over all input coordinates of
/// `|analytic - fd| / max(1, |analytic|, |fd|)`.
pub fn grad_check<P: TensorProgram>(f: &P, inputs: &[Tensor], eps: f64) -> Result<f64> {
    assert!(eps > 0.0, "grad_check requires eps > 0");
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.with_data(t.data().to_vec(), true))
        .collect::<Result<_>>()?;

    let mut g = Graph::new();
    let loss = f.eval(&mut g, &leaves)?;
    loss.item()?;
    let grads: GradMap = g.backward(&loss)?;

    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let zero;
        let analytic = match grads.get(leaf) {
            Some(a) => a,
            None => {
                zero = vec![0.0; leaf.numel()];
                &zero
            }
        };
        for coord in 0..leaf.numel() {
            let fd = central_diff(f, &leaves, li, coord, eps)?;
            let a = analytic[coord];
            let denom = 1.0f64.max(a.abs()).max(fd.abs());
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    Ok(worst)
}

fn central_diff<P: TensorProgram>(
    f: &P,
    leaves: &[Tensor],
    which: usize,
    coord: usize,
    eps: f64,
) -> Result<f64> {
    let probe = |delta: f64| -> Result<f64> {
        let mut probed: Vec<Tensor> = Vec::with_capacity(leaves.len());
        for (i, t) in leaves.iter().enumerate() {
            if i == which {
                let mut data = t.data().to_vec();
                data[coord] += delta;
                probed.push(t.with_data(data, false)?);
            } else {
                probed.push(t.with_data(t.data().to_vec(), false)?);
            }
        }
        let mut g = Graph::inference();
        f.eval(&mut g, &probed)?.item()
    };
    let hi = probe(eps)?;
    let lo = probe(-eps)?;
    Ok((hi - lo) / (2.0 * eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        // f(x) = x^2 at x=3; FD of a quadratic is exact up to rounding.
        let f = |g: &mut Graph, xs: &[Tensor]| {
            let y = g.matmul(&xs[0], &xs[0])?;
            g.sum_all(&y)
        };
        let x = Tensor::new(&[1, 1], vec![3.0]).unwrap();
        let err = grad_check(&f, &[x], 1e-3).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn sigmoid_bce_on_zero_logit() {
        use std::sync::Arc;
        let f = |g: &mut Graph, xs: &[Tensor]| g.bce_with_logits(&xs[0], Arc::new(vec![1.0]));
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let err = grad_check(&f, &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn composed_graph_matches_fd_on_three_seeds() {
        use rand::{Rng, SeedableRng};
        // two-layer chain with every nonlinearity in the stack: the backward
        // sweep must compose the product rule across all of them
        let f = |g: &mut Graph, xs: &[Tensor]| {
            let h = g.matmul(&xs[0], &xs[1])?;
            let h = g.gelu(&h)?;
            let h = g.matmul(&h, &xs[2])?;
            let h = g.softmax_lastdim(&h)?;
            let h = g.sigmoid(&h)?;
            g.mean_all(&h)
        };
        for seed in 0..3u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut t = |shape: &[usize]| {
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect()).unwrap()
            };
            let inputs = [t(&[2, 3]), t(&[3, 4]), t(&[4, 3])];
            let err = grad_check(&f, &inputs, 1e-5).unwrap();
            assert!(err < 1e-5, "seed {seed}: err = {err}");
        }
    }

    #[test]
    fn layernorm_mean_path() {
        let f = |g: &mut Graph, xs: &[Tensor]| {
            let gamma = Tensor::new(&[8], vec![1.0; 8])?;
            let beta = Tensor::new(&[8], vec![0.0; 8])?;
            let y = g.layernorm(&xs[0], &gamma, &beta)?;
            let s = g.sigmoid(&y)?;
            g.mean_all(&s)
        };
        let data: Vec<f64> = (0..8).map(|i| (i as f64 * 0.77).sin() * 1.5).collect();
        let x = Tensor::new(&[1, 8], data).unwrap();
        let err = grad_check(&f, &[x], 1e-5).unwrap();
        assert!(err < 1e-5, "err = {err}");
    }
}
