use crate::error::{Error, Result};

use super::graph::{Bindings, Graph, NodeId};

/// Compare reverse-mode gradients against central finite differences.
///
/// For every coordinate of every node in `wrt`, perturbs the binding by
/// +/- eps, recomputes the scalar output, and forms
/// (f(t+eps) - f(t-eps)) / (2 eps). Returns the maximum over coordinates of
/// |analytic - numeric| / max(1e-8, |numeric|).
pub fn finite_diff_check(
    graph: &Graph,
    output: NodeId,
    wrt: &[NodeId],
    bindings: &Bindings,
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Graph("finite_diff_check requires eps > 0".into()));
    }
    let values = graph.evaluate(bindings)?;
    let grads = graph.gradient(&values, output, wrt)?;

    let mut work = bindings.clone();
    let mut max_rel = 0.0f64;
    for &p in wrt {
        let n = bindings
            .get(p)
            .ok_or_else(|| Error::Graph(format!("node {p} not bound")))?
            .len();
        let analytic = grads.get(p).data().to_vec();
        for c in 0..n {
            let orig = bindings.get(p).unwrap().data()[c];

            work.get_mut(p).unwrap().data_mut()[c] = orig + eps;
            let f_plus = graph.evaluate(&work)?.scalar(output)?;
            work.get_mut(p).unwrap().data_mut()[c] = orig - eps;
            let f_minus = graph.evaluate(&work)?.scalar(output)?;
            work.get_mut(p).unwrap().data_mut()[c] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let rel = (analytic[c] - numeric).abs() / numeric.abs().max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng::{rng_from, standard_normal};

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let mut g = Graph::new();
        let x = g.param(&[4], "x");
        let sq = g.square(x);
        let loss = g.sum(sq, &[], false).unwrap();
        let mut b = Bindings::new();
        b.bind(x, Tensor::from_vec(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap());
        let err = finite_diff_check(&g, loss, &[x], &b, 1e-5).unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn two_layer_tanh_mlp_under_1e4() {
        let mut g = Graph::new();
        let x = g.input(&[3, 4], "x");
        let w1 = g.param(&[4, 5], "w1");
        let b1 = g.param(&[5], "b1");
        let w2 = g.param(&[5, 1], "w2");
        let b2 = g.param(&[1], "b2");
        let h = g.matmul(x, w1).unwrap();
        let h = g.add(h, b1).unwrap();
        let h = g.tanh(h);
        let o = g.matmul(h, w2).unwrap();
        let o = g.add(o, b2).unwrap();
        let sq = g.square(o);
        let loss = g.mean(sq, &[], false).unwrap();

        let mut rng = rng_from(7);
        let mut b = Bindings::new();
        for (id, sh) in [(x, vec![3usize, 4]), (w1, vec![4, 5]), (w2, vec![5, 1])] {
            let n: usize = sh.iter().product();
            let data: Vec<f64> = (0..n).map(|_| 0.5 * standard_normal(&mut rng)).collect();
            b.bind(id, Tensor::from_vec(sh, data).unwrap());
        }
        b.bind(b1, Tensor::from_vec(vec![5], (0..5).map(|_| 0.1 * standard_normal(&mut rng)).collect()).unwrap());
        b.bind(b2, Tensor::from_vec(vec![1], vec![0.05]).unwrap());

        let err = finite_diff_check(&g, loss, &[w1, b1, w2, b2], &b, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
