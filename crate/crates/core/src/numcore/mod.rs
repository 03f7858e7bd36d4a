//! Minimal dense-tensor numeric core: reverse-mode tape, parameter store
//! with aliasing, AdamW with cosine schedule, and checkpoints.

mod checkpoint;
mod graph;
mod optim;
mod params;
mod tensor;


pub use checkpoint::{
    load_checkpoint, load_into, save_checkpoint, write_atomic, Manifest, ManifestEntry,
    CHECKPOINT_VERSION,
};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, OptimConfig, OptimState};
pub use params::ParamStore;
pub use tensor::Tensor;

/// Central finite-difference check of `f` with respect to every scalar of
/// parameter `name`. Returns `(analytic, numeric)` gradient vectors.
///
/// `f` must build a scalar loss on a fresh graph from the store.
pub fn finite_difference<F>(
    store: &mut ParamStore,
    name: &str,
    h: f64,
    mut f: F,
) -> crate::Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&mut Graph, &ParamStore) -> crate::Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let canonical = store.resolve(name)?.to_string();
    let n = store.get(&canonical)?.len();
    let analytic = g
        .param_vars()
        .find(|(p, _)| *p == canonical)
        .and_then(|(_, v)| grads.wrt(v).map(<[f64]>::to_vec))
        .unwrap_or_else(|| vec![0.0; n]);
    let mut numeric = vec![0.0; n];
    for (k, slot) in numeric.iter_mut().enumerate() {
        let orig = store.get(&canonical)?.data()[k];
        store.get_mut(&canonical)?.data_mut()[k] = orig + h;
        let mut gp = Graph::new();
        let lp = f(&mut gp, store)?;
        let plus = gp.scalar(lp);
        store.get_mut(&canonical)?.data_mut()[k] = orig - h;
        let mut gm = Graph::new();
        let lm = f(&mut gm, store)?;
        let minus = gm.scalar(lm);
        store.get_mut(&canonical)?.data_mut()[k] = orig;
        *slot = (plus - minus) / (2.0 * h);
    }
    Ok((analytic, numeric))
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}
