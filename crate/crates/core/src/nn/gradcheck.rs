//! Central finite-difference checks of tape gradients.

use std::collections::HashSet;
use std::sync::Arc;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Entries compared.
    pub checked: usize,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `(parameter name, entry, analytic, numeric)` at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, rtol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= rtol
    }
}

/// Compares the gradient of the scalar built by `loss` w.r.t. `ids` against
/// central differences with step `eps`. At most `per_param` entries of each
/// parameter are probed, evenly spaced. `floor` keeps near-zero gradients
/// from dominating the relative error.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    eps: f64,
    per_param: usize,
    floor: f64,
    loss: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> GradCheck {
    let trainable: Arc<HashSet<ParamId>> = Arc::new(ids.iter().copied().collect());
    let mut g = Graph::with_trainable(trainable);
    let l = loss(&mut g, store);
    g.backward(l);
    let grads = g.param_grads();
    let eval = |s: &ParamStore| {
        let mut g = Graph::frozen();
        let l = loss(&mut g, s);
        g.value(l).item()
    };
    let mut work = store.clone();
    let mut out = GradCheck { checked: 0, max_rel_err: 0.0, worst: None };
    for &id in ids {
        let n = store.get(id).len();
        let analytic = grads.iter().find(|(g, _)| *g == id).map(|(_, t)| t.data.clone()).unwrap_or_else(|| vec![0.0; n]);
        let step = (n / per_param.max(1)).max(1);
        for k in (0..n).step_by(step).take(per_param) {
            let orig = work.get(id).data[k];
            work.get_mut(id).data[k] = orig + eps;
            let up = eval(&work);
            work.get_mut(id).data[k] = orig - eps;
            let down = eval(&work);
            work.get_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            out.checked += 1;
            if rel > out.max_rel_err || out.worst.is_none() {
                out.max_rel_err = out.max_rel_err.max(rel);
                out.worst = Some((store.name(id).to_string(), k, a, numeric));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::layers::{attention, FeedForward, LayerNorm, Linear};
    use crate::nn::Tensor;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn assert_ok(r: &GradCheck) {
        assert!(r.passes(1e-3), "gradient mismatch: {r:?}");
    }

    #[test]
    fn linear_layer_norm_gelu_chain() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, "lin", 5, 4, true, &mut r);
        let ln = LayerNorm::new(&mut s, "ln", 4);
        s.get_mut(ln.gamma).data = vec![1.1, 0.9, 1.3, 0.7];
        let ffn = FeedForward::new(&mut s, "ffn", 4, 6, false, &mut r);
        let x = Tensor::randn(3, 5, 1.0, &mut r);
        let w = Arc::new(Tensor::randn(3, 4, 1.0, &mut r));
        let ids: Vec<ParamId> = s.ids().collect();
        let res = check_params(&s, &ids, 1e-5, 50, 1e-6, |g, s| {
            let xv = g.constant(x.clone());
            let h = lin.forward(g, s, xv);
            let h = ln.forward(g, s, h);
            let h = ffn.forward(g, s, h);
            g.dot_const(h, w.clone())
        });
        assert_ok(&res);
    }

    #[test]
    fn causal_attention_with_rope() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let q = Linear::new(&mut s, "q", 8, 8, false, &mut r);
        let k = Linear::new(&mut s, "k", 8, 8, false, &mut r);
        let v = Linear::new(&mut s, "v", 8, 8, false, &mut r);
        let x = Tensor::randn(5, 8, 1.0, &mut r);
        let w = Arc::new(Tensor::randn(5, 8, 1.0, &mut r));
        let ids: Vec<ParamId> = s.ids().collect();
        let res = check_params(&s, &ids, 1e-5, 40, 1e-6, |g, s| {
            let xv = g.constant(x.clone());
            let pos = Arc::new((0..5).collect::<Vec<_>>());
            let qq = q.forward(g, s, xv);
            let qq = g.rope(qq, pos.clone(), 4);
            let kk = k.forward(g, s, xv);
            let kk = g.rope(kk, pos, 4);
            let vv = v.forward(g, s, xv);
            let a = attention(g, qq, kk, vv, 2, Some(0));
            g.dot_const(a, w.clone())
        });
        assert_ok(&res);
    }

    #[test]
    fn cross_entropy_and_pooling_ops() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::randn(6, 5, 1.0, &mut r));
        let targets = Arc::new(vec![Some(1), None, Some(4)]);
        let groups = Arc::new(vec![vec![0, 1], vec![2, 3], vec![4, 5]]);
        let res = check_params(&s, &[id], 1e-5, 30, 1e-6, |g, s| {
            let x = g.param(s, id);
            let m = g.segment_mean(x, groups.clone());
            let up = g.gather_rows(m, Arc::new(vec![0, 0, 2]));
            let sl = g.slice_rows(x, 1, 3);
            let sum = g.add(up, sl);
            g.cross_entropy(sum, targets.clone())
        });
        assert_ok(&res);
    }

    #[test]
    fn square_sum_and_empty_check() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::from_vec(1, 2, vec![0.5, -1.0]));
        let res = check_params(&s, &[id], 1e-5, 2, 1e-6, |g, s| {
            let x = g.param(s, id);
            let y = g.mul(x, x);
            g.sum_all(y)
        });
        assert_ok(&res);
        let (_, _, a, n) = res.worst.unwrap();
        assert!((a - n).abs() < 1e-8);
        let none = check_params(&s, &[], 1e-5, 2, 1e-6, |g, s| {
            let x = g.param(s, id);
            g.sum_all(x)
        });
        assert!(!none.passes(1e-3), "an empty check must not count as a pass");
    }
}
