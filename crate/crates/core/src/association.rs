//! Object-to-track affinity head used as training-time supervision for the
//! self-attention-free decoder's embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assigner::AssignmentResult;
use crate::decoder::mlp;
use crate::numcore::{Graph, ParamStore, Var};
use crate::{Error, Result};

/// Which embedding set passes through the appearance FFN before the
/// Hadamard product.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AppearanceSide {
    #[default]
    Object,
    Track,
}

pub fn init_params(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Result<()> {
    for p in ["asso.ffn", "asso.mlp"] {
        store.init_matrix(&format!("{p}.w1"), channels, channels, rng)?;
        store.init_const(&format!("{p}.b1"), &[channels], 0.0)?;
    }
    store.init_matrix("asso.ffn.w2", channels, channels, rng)?;
    store.init_const("asso.ffn.b2", &[channels], 0.0)?;
    store.init_matrix("asso.mlp.w2", channels, 1, rng)?;
    store.init_const("asso.mlp.b2", &[1], 0.0)?;
    Ok(())
}

/// `N_object x N_track` affinities, normalised over the track axis.
#[derive(Clone, Copy, Debug)]
pub struct AffinityMatrix {
    pub log_probs: Var,
    pub rows: usize,
    pub cols: usize,
}

impl AffinityMatrix {
    pub fn probs(&self, g: &Graph) -> Vec<f64> {
        g.value(self.log_probs).iter().map(|v| v.exp()).collect()
    }
}

pub fn affinity(
    g: &mut Graph,
    store: &ParamStore,
    object_emb: Var,
    track_emb: Var,
    side: AppearanceSide,
) -> Result<AffinityMatrix> {
    let (n, m) = (g.shape(object_emb)[0], g.shape(track_emb)[0]);
    if m == 0 {
        return Err(Error::contract("association needs at least one track query"));
    }
    if n == 0 {
        return Err(Error::contract("association needs at least one object query"));
    }
    let (obj, trk) = match side {
        AppearanceSide::Object => (mlp(g, store, object_emb, "asso.ffn")?, track_emb),
        AppearanceSide::Track => (object_emb, mlp(g, store, track_emb, "asso.ffn")?),
    };
    let obj_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect();
    let trk_idx: Vec<usize> = (0..n).flat_map(|_| 0..m).collect();
    let a = g.gather_rows(obj, &obj_idx)?;
    let b = g.gather_rows(trk, &trk_idx)?;
    let pair = g.mul(a, b)?;
    let logits = mlp(g, store, pair, "asso.mlp")?;
    let logits = g.reshape(logits, vec![n, m])?;
    Ok(AffinityMatrix {
        log_probs: g.log_softmax(logits, 1)?,
        rows: n,
        cols: m,
    })
}

/// Target track column per object query; `None` rows are masked.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AssoTarget {
    pub columns: Vec<Option<usize>>,
}

impl AssoTarget {
    pub fn num_active(&self) -> usize {
        self.columns.iter().flatten().count()
    }
}

/// Joins object-query and track-query assignments on the shared
/// ground-truth index.
pub fn build_asso_target(
    obj_assign: &AssignmentResult,
    num_objects: usize,
    track_assign: &AssignmentResult,
) -> Result<AssoTarget> {
    let mut columns = vec![None; num_objects];
    for &(gt, obj) in &obj_assign.pairs {
        if obj >= num_objects {
            return Err(Error::contract(format!("object query {obj} out of range")));
        }
        let track = track_assign
            .pairs
            .iter()
            .find(|p| p.0 == gt)
            .map(|p| p.1)
            .ok_or_else(|| Error::contract(format!("gt {gt} has no live track query")))?;
        columns[obj] = Some(track);
    }
    Ok(AssoTarget { columns })
}

/// Mean negative log-probability of the target column over unmasked rows.
pub fn asso_loss(g: &mut Graph, aff: &AffinityMatrix, target: &AssoTarget) -> Result<Var> {
    if target.columns.len() != aff.rows {
        return Err(Error::shape(
            "asso_loss",
            format!("{} targets for {} rows", target.columns.len(), aff.rows),
        ));
    }
    let mut idx = Vec::new();
    for (row, col) in target.columns.iter().enumerate() {
        if let Some(c) = *col {
            if c >= aff.cols {
                return Err(Error::contract(format!("target column {c} with {} tracks", aff.cols)));
            }
            idx.push(row * aff.cols + c);
        }
    }
    if idx.is_empty() {
        return g.add_all(&[]);
    }
    let picked = g.gather_elems(aff.log_probs, &idx)?;
    let mean = g.mean(picked)?;
    g.scale(mean, -1.0)
}
