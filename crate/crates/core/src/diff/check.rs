use super::graph::{Graph, NodeId, ParamSet};
use super::rng::RngStream;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Compares reverse-mode gradients against central differences.
///
/// `loss_fn` rebuilds the loss on a fresh graph from the current parameters. When
/// `max_coords` is set, that many coordinates per parameter are sampled from `rng`;
/// otherwise every coordinate is checked. Returns the maximum relative error
/// `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn finite_diff_check<T, F>(
    params: &ParamSet<T>,
    loss_fn: F,
    epsilon: f64,
    max_coords: Option<usize>,
    rng: &mut RngStream,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamSet<T>) -> Result<NodeId>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(invalid(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let grads = g.backward(loss)?;

    let eval = |ps: &ParamSet<T>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, ps)?;
        Ok(g.value(l).item().to_f64_lossy())
    };

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        let n = params.get(id).len();
        let coords = match max_coords {
            Some(k) if k < n => rng.sample_without_replacement(n, k),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + T::of(epsilon);
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig - T::of(epsilon);
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            let ad = grads
                .get(&id)
                .map_or(0.0, |t| t.data()[c].to_f64_lossy());
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
