//! Standard decoder (self-attention + cross-attention + FFN) and its
//! self-attention-free twin, plus the shared box/class predictor.
//!
//! The twin's parameter names (`dec.u.*`) are registered as aliases of the
//! standard decoder's cross-attention, FFN and norm parameters (`dec.s.*`),
//! so both views read one storage. Blocks are pre-norm:
//!
//! ```text
//! S: e1 = e + SA(LN_sa(e)); e2 = e1 + CA(LN_ca(e1)); out = e2 + FFN(LN_ffn(e2))
//! U:                        e2 = e  + CA(LN_ca(e));  out = e2 + FFN(LN_ffn(e2))
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encoding_basis, positional_encoding, PositionScale};
use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::simworld::{EgoPose, SimConfig, TokenField};
use crate::{Error, Result};

/// Number of regression outputs: center offset (3), log size (3),
/// yaw sin/cos (2), velocity (2).
pub const BOX_CODE_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub num_object_queries: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            layers: 6,
            heads: 4,
            ffn_hidden: 128,
            num_object_queries: 64,
            num_classes: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.layers == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.num_object_queries == 0 || self.num_classes == 0 {
            return Err(Error::Config("need object queries and classes".into()));
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderKind {
    /// Standard decoder with self-attention.
    S,
    /// Self-attention-free twin.
    U,
}

/// Normalised box parameterisation shared by losses and matching costs:
/// `[cx/R, cy/R, cz/Z, ln l, ln w, ln h, sin yaw, cos yaw, vx/V, vy/V]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub half_range: f64,
    pub z_scale: f64,
    pub vel_scale: f64,
    /// Per-component L1 weights.
    pub weights: [f64; BOX_CODE_LEN],
}

impl BoxCoder {
    pub fn from_sim(cfg: &SimConfig) -> Self {
        BoxCoder {
            half_range: cfg.half_range,
            z_scale: cfg.z_scale,
            vel_scale: cfg.vel_scale,
            weights: [5.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0],
        }
    }

    pub fn position_scale(&self) -> PositionScale {
        PositionScale {
            half_range: self.half_range,
            z_scale: self.z_scale,
        }
    }

    pub fn encode(&self, b: &Box3D) -> [f64; BOX_CODE_LEN] {
        [
            b.center[0] / self.half_range,
            b.center[1] / self.half_range,
            b.center[2] / self.z_scale,
            b.size[0].ln(),
            b.size[1].ln(),
            b.size[2].ln(),
            b.yaw.sin(),
            b.yaw.cos(),
            b.velocity[0] / self.vel_scale,
            b.velocity[1] / self.vel_scale,
        ]
    }

    pub fn decode(&self, code: &[f64]) -> Box3D {
        Box3D {
            center: [
                code[0] * self.half_range,
                code[1] * self.half_range,
                code[2] * self.z_scale,
            ],
            size: [code[3].exp(), code[4].exp(), code[5].exp()],
            yaw: code[6].atan2(code[7]),
            velocity: [code[8] * self.vel_scale, code[9] * self.vel_scale],
        }
    }

    /// Clamps a reference point into the perception range.
    pub fn clamp_reference(&self, c: [f64; 3]) -> [f64; 3] {
        [
            c[0].clamp(-self.half_range, self.half_range),
            c[1].clamp(-self.half_range, self.half_range),
            c[2].clamp(-self.z_scale, self.z_scale),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl Box3D {
    pub fn to_array(&self) -> [f64; 9] {
        [
            self.center[0],
            self.center[1],
            self.center[2],
            self.size[0],
            self.size[1],
            self.size[2],
            self.yaw,
            self.velocity[0],
            self.velocity[1],
        ]
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        Box3D {
            center: [a[0], a[1], a[2]],
            size: [a[3], a[4], a[5]],
            yaw: a[6],
            velocity: [a[7], a[8]],
        }
    }
}

/// Per-class sigmoid probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores(pub Vec<f64>);

impl ClassScores {
    pub fn from_logits(logits: &[f64]) -> Self {
        ClassScores(logits.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect())
    }

    /// `(class, probability)` of the best class.
    pub fn best(&self) -> (usize, f64) {
        self.0
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, p)| if p > acc.1 { (i, p) } else { acc })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryKind {
    Track,
    Object,
}

/// Host-side query: embedding, reference point and lifecycle metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub embedding: Vec<f64>,
    pub reference: [f64; 3],
    pub kind: QueryKind,
    pub track_id: Option<u64>,
    pub age: u32,
    pub misses: u32,
}

/// Ordered queries, track queries first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuerySet {
    pub queries: Vec<Query>,
}

impl QuerySet {
    pub fn validate(&self) -> Result<()> {
        let mut seen_object = false;
        for q in &self.queries {
            match (q.kind, q.track_id) {
                (QueryKind::Track, Some(_)) if !seen_object => {}
                (QueryKind::Track, Some(_)) => {
                    return Err(Error::contract("track queries must precede object queries"))
                }
                (QueryKind::Track, None) => return Err(Error::contract("track query without id")),
                (QueryKind::Object, None) => seen_object = true,
                (QueryKind::Object, Some(_)) => {
                    return Err(Error::contract("object query carrying a track id"))
                }
            }
        }
        Ok(())
    }

    pub fn num_tracks(&self) -> usize {
        self.queries.iter().filter(|q| q.kind == QueryKind::Track).count()
    }
}

/// Replaces every reference with the matching predicted center.
pub fn refine_references(queries: &QuerySet, boxes: &[Box3D]) -> Result<QuerySet> {
    if queries.queries.len() != boxes.len() {
        return Err(Error::contract(format!(
            "{} queries but {} boxes",
            queries.queries.len(),
            boxes.len()
        )));
    }
    Ok(QuerySet {
        queries: queries
            .queries
            .iter()
            .zip(boxes)
            .map(|(q, b)| Query {
                reference: b.center,
                ..q.clone()
            })
            .collect(),
    })
}

/// Registers every model parameter, including the twin decoder's aliases.
pub fn init_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    store.init_uniform("query.embed", &[cfg.num_object_queries, c], 1.0, rng)?;
    let refs: Vec<f64> = (0..cfg.num_object_queries)
        .flat_map(|_| [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), 0.25])
        .collect();
    store.insert("query.ref", Tensor::new(vec![cfg.num_object_queries, 3], refs)?)?;

    for l in 0..cfg.layers {
        let s = format!("dec.s.l{l}");
        for attn in ["sa", "ca"] {
            for p in ["q", "k", "v", "o"] {
                store.init_matrix(&format!("{s}.{attn}.w{p}"), c, c, rng)?;
                // a key bias shifts every logit of a query equally, so it is omitted
                if p != "k" {
                    store.init_const(&format!("{s}.{attn}.b{p}"), &[c], 0.0)?;
                }
            }
        }
        for ln in ["ln_sa", "ln_ca", "ln_ffn"] {
            store.init_const(&format!("{s}.{ln}.g"), &[c], 1.0)?;
            store.init_const(&format!("{s}.{ln}.b"), &[c], 0.0)?;
        }
        store.init_matrix(&format!("{s}.ffn.w1"), c, cfg.ffn_hidden, rng)?;
        store.init_const(&format!("{s}.ffn.b1"), &[cfg.ffn_hidden], 0.0)?;
        store.init_matrix(&format!("{s}.ffn.w2"), cfg.ffn_hidden, c, rng)?;
        store.init_const(&format!("{s}.ffn.b2"), &[c], 0.0)?;

        let u = format!("dec.u.l{l}");
        let shared = ["ca.wq", "ca.bq", "ca.wk", "ca.wv", "ca.bv", "ca.wo", "ca.bo"]
            .into_iter()
            .chain(["ln_ca.g", "ln_ca.b", "ln_ffn.g", "ln_ffn.b"])
            .chain(["ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"]);
        for p in shared {
            store.alias(format!("{u}.{p}"), &format!("{s}.{p}"))?;
        }
    }

    store.init_const("head.ln.g", &[c], 1.0)?;
    store.init_const("head.ln.b", &[c], 0.0)?;
    store.init_matrix("head.reg.w1", c, c, rng)?;
    store.init_const("head.reg.b1", &[c], 0.0)?;
    store.init_matrix("head.reg.w2", c, BOX_CODE_LEN, rng)?;
    store.get_mut("head.reg.w2")?.data_mut().iter_mut().for_each(|w| *w *= 0.1);
    store.init_const("head.reg.b2", &[BOX_CODE_LEN], 0.0)?;
    // cos(yaw) starts at 1 so the initial yaw is 0
    store.get_mut("head.reg.b2")?.data_mut()[7] = 1.0;
    store.init_matrix("head.cls.w1", c, c, rng)?;
    store.init_const("head.cls.b1", &[c], 0.0)?;
    store.init_matrix("head.cls.w2", c, cfg.num_classes, rng)?;
    let prior = 0.01f64;
    store.init_const("head.cls.b2", &[cfg.num_classes], -((1.0 - prior) / prior).ln())?;
    Ok(())
}

/// `x W + b` with parameters `{prefix}.w{suffix}`, `{prefix}.b{suffix}`.
pub(crate) fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: &str, b: &str) -> Result<Var> {
    let wv = g.param(store, w)?;
    let bv = g.param(store, b)?;
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

pub(crate) fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.g"))?;
    let beta = g.param(store, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Two-layer ReLU MLP with parameters `{prefix}.{w1,b1,w2,b2}`.
pub(crate) fn mlp(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, store, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let h = g.relu(h)?;
    linear(g, store, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

/// Cross-attention keys and values for one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerMemory {
    pub keys: Var,
    pub values: Var,
}

/// Projected token field for every layer.
#[derive(Clone, Debug)]
pub struct TokenMemory {
    pub layers: Vec<LayerMemory>,
    pub num_tokens: usize,
}

pub fn token_position_encoding(tokens: &TokenField, scale: PositionScale, channels: usize) -> Result<Tensor> {
    let data = tokens
        .positions
        .iter()
        .flat_map(|p| positional_encoding(*p, scale, channels))
        .collect();
    Tensor::new(vec![tokens.len(), channels], data)
}

/// Projects the token field into per-layer keys/values. Keys carry the
/// token-position encoding; values do not.
pub fn prepare_memory(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    coder: &BoxCoder,
    tokens: &TokenField,
) -> Result<TokenMemory> {
    if tokens.is_empty() {
        return Err(Error::contract("empty token field"));
    }
    if tokens.tokens.shape() != [tokens.len(), cfg.channels] {
        return Err(Error::shape(
            "prepare_memory",
            format!("tokens {:?}, model has C = {}", tokens.tokens.shape(), cfg.channels),
        ));
    }
    let feats = g.constant(tokens.tokens.clone());
    let pe = g.constant(token_position_encoding(tokens, coder.position_scale(), cfg.channels)?);
    let key_in = g.add(feats, pe)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("dec.s.l{l}.ca");
        let wk = g.param(store, &format!("{p}.wk"))?;
        let keys = g.matmul(key_in, wk)?;
        let values = linear(g, store, feats, &format!("{p}.wv"), &format!("{p}.bv"))?;
        layers.push(LayerMemory { keys, values });
    }
    Ok(TokenMemory {
        layers,
        num_tokens: tokens.len(),
    })
}

/// Multi-head scaled dot-product attention over already-projected inputs.
/// Returns the merged head outputs and each head's weight matrix.
pub fn multi_head(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let c = g.shape(q)[1];
    if g.shape(k)[1] != c || g.shape(v)[1] != c || g.shape(k)[0] != g.shape(v)[0] {
        return Err(Error::shape("attention", "q/k/v widths disagree"));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let logits = g.matmul_t(qh, kh)?;
        let logits = g.scale(logits, scale)?;
        let w = g.softmax(logits, 1)?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    Ok((g.concat(&outs, 1)?, weights))
}

fn cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    query_pe: Var,
    mem: &LayerMemory,
) -> Result<(Var, Vec<Var>)> {
    let q_in = g.add(x, query_pe)?;
    let q = linear(g, store, q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let (merged, w) = multi_head(g, q, mem.keys, mem.values, cfg.heads)?;
    Ok((linear(g, store, merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?, w))
}

fn self_attention(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    query_pe: Var,
) -> Result<Var> {
    let qk_in = g.add(x, query_pe)?;
    let q = linear(g, store, qk_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let k = g.matmul(qk_in, wk)?;
    let v = linear(g, store, x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let (merged, _) = multi_head(g, q, k, v, cfg.heads)?;
    linear(g, store, merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

fn check_block_input(g: &Graph, cfg: &ModelConfig, x: Var, query_pe: Var) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != cfg.channels || g.shape(query_pe) != s {
        return Err(Error::contract(format!(
            "block input {:?} / pe {:?} for C = {}",
            s,
            g.shape(query_pe),
            cfg.channels
        )));
    }
    Ok(())
}

/// Cross-attention + FFN tail shared by both block kinds.
fn ca_ffn(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    query_pe: Var,
    mem: &LayerMemory,
) -> Result<Var> {
    let h = layer_norm(g, store, x, &format!("{prefix}.ln_ca"))?;
    let (ca, _) = cross_attention(g, store, cfg, &format!("{prefix}.ca"), h, query_pe, mem)?;
    let x = g.add(x, ca)?;
    let h = layer_norm(g, store, x, &format!("{prefix}.ln_ffn"))?;
    let f = mlp(g, store, h, &format!("{prefix}.ffn"))?;
    g.add(x, f)
}

/// Block `layer` of the standard decoder.
pub fn s_decoder_block(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    query_pe: Var,
    mem: &LayerMemory,
) -> Result<Var> {
    check_block_input(g, cfg, x, query_pe)?;
    let prefix = format!("dec.s.l{layer}");
    let h = layer_norm(g, store, x, &format!("{prefix}.ln_sa"))?;
    let sa = self_attention(g, store, cfg, &format!("{prefix}.sa"), h, query_pe)?;
    let x = g.add(x, sa)?;
    ca_ffn(g, store, cfg, &prefix, x, query_pe, mem)
}

/// Block `layer` of the self-attention-free decoder.
pub fn u_decoder_block(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    query_pe: Var,
    mem: &LayerMemory,
) -> Result<Var> {
    check_block_input(g, cfg, x, query_pe)?;
    ca_ffn(g, store, cfg, &format!("dec.u.l{layer}"), x, query_pe, mem)
}

/// Graph-side predictions for a stack of queries.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// `N x N_c` class logits.
    pub logits: Var,
    /// `N x 10` normalised box code.
    pub box_code: Var,
}

impl Prediction {
    pub fn num_queries(&self, g: &Graph) -> usize {
        g.shape(self.logits)[0]
    }

    pub fn boxes(&self, g: &Graph, coder: &BoxCoder) -> Vec<Box3D> {
        g.value(self.box_code)
            .chunks(BOX_CODE_LEN)
            .map(|c| coder.decode(c))
            .collect()
    }

    pub fn scores(&self, g: &Graph) -> Vec<ClassScores> {
        let nc = g.shape(self.logits)[1];
        g.value(self.logits)
            .chunks(nc)
            .map(ClassScores::from_logits)
            .collect()
    }
}

/// Shared predictor. `ref_code` is the `N x 3` normalised reference.
pub fn predict(g: &mut Graph, store: &ParamStore, emb: Var, ref_code: Var) -> Result<Prediction> {
    let n = g.shape(emb)[0];
    if g.shape(ref_code) != [n, 3] {
        return Err(Error::shape("predict", format!("references {:?} for {n} queries", g.shape(ref_code))));
    }
    let h = layer_norm(g, store, emb, "head.ln")?;
    let reg = mlp(g, store, h, "head.reg")?;
    let pad = g.constant(Tensor::zeros(&[n, BOX_CODE_LEN - 3]));
    let offset_base = g.concat(&[ref_code, pad], 1)?;
    let box_code = g.add(reg, offset_base)?;
    let logits = mlp(g, store, h, "head.cls")?;
    Ok(Prediction { logits, box_code })
}

/// A track embedding is either a host vector or a row of a node on the
/// current graph (training keeps the previous frame's output connected).
#[derive(Clone, Debug)]
pub enum Embedding {
    Value(Vec<f64>),
    Row { matrix: Var, row: usize },
}

/// Constant-velocity motion of track boxes between two vehicle frames,
/// applied to box codes as an affine map onto normalised references.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub dt: f64,
    pub prev: EgoPose,
    pub cur: EgoPose,
}

impl Default for Motion {
    fn default() -> Self {
        Motion::still()
    }
}

impl Motion {
    /// No elapsed time and no ego motion: references are the code centers.
    pub fn still() -> Self {
        Motion {
            dt: 0.0,
            prev: EgoPose::identity(),
            cur: EgoPose::identity(),
        }
    }

    /// `(matrix, offset)` with `ref = code * matrix + offset`, where `matrix`
    /// is `BOX_CODE_LEN x 3` row-major.
    pub fn affine(&self, coder: &BoxCoder) -> (Vec<f64>, [f64; 3]) {
        let turn = |v: [f64; 2]| self.cur.rotate_to_vehicle(self.prev.rotate_to_world(v));
        let ex = turn([1.0, 0.0]);
        let ey = turn([0.0, 1.0]);
        let gain = coder.vel_scale * self.dt / coder.half_range;
        let mut m = vec![0.0; BOX_CODE_LEN * 3];
        for k in 0..2 {
            m[k] = ex[k];
            m[3 + k] = ey[k];
            m[8 * 3 + k] = gain * ex[k];
            m[9 * 3 + k] = gain * ey[k];
        }
        m[2 * 3 + 2] = 1.0;
        let o = self.cur.to_vehicle(self.prev.to_world([0.0, 0.0]));
        (m, [o[0] / coder.half_range, o[1] / coder.half_range, 0.0])
    }

    /// Host-side reference of one code, for inspection.
    pub fn apply(&self, coder: &BoxCoder, code: &[f64]) -> [f64; 3] {
        let (m, o) = self.affine(coder);
        let mut r = o;
        for (k, c) in code.iter().enumerate().take(BOX_CODE_LEN) {
            for j in 0..3 {
                r[j] += c * m[k * 3 + j];
            }
        }
        r
    }
}

#[derive(Clone, Debug)]
pub struct TrackQueryInput {
    pub embedding: Embedding,
    /// Box code predicted for the track on the previous frame.
    pub code: Embedding,
}

/// Graph-side query stack: tracks first, then the learned object queries.
#[derive(Clone, Debug)]
pub struct QueryBatch {
    pub embeddings: Var,
    /// `N x 3` normalised references of the first layer.
    pub ref_code: Var,
    pub num_tracks: usize,
    pub len: usize,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_objects(&self) -> usize {
        self.len - self.num_tracks
    }

    /// First-layer references in metres, clamped into range.
    pub fn references(&self, g: &Graph, coder: &BoxCoder) -> Vec<[f64; 3]> {
        decode_refs(g, coder, self.ref_code)
    }
}

fn decode_refs(g: &Graph, coder: &BoxCoder, ref_code: Var) -> Vec<[f64; 3]> {
    g.value(ref_code)
        .chunks(3)
        .map(|r| coder.clamp_reference([r[0] * coder.half_range, r[1] * coder.half_range, r[2] * coder.z_scale]))
        .collect()
}

#[cfg(test)]
fn ref_codes(coder: &BoxCoder, refs: &[[f64; 3]]) -> Result<Tensor> {
    let s = coder.position_scale();
    Tensor::new(vec![refs.len(), 3], refs.iter().flat_map(|r| s.normalize(*r)).collect())
}

fn row_of(g: &mut Graph, e: &Embedding, width: usize, what: &str) -> Result<Var> {
    match e {
        Embedding::Value(v) => {
            if v.len() != width {
                return Err(Error::shape("build_queries", format!("track {what} width")));
            }
            g.constant_from(vec![1, width], v.clone())
        }
        Embedding::Row { matrix, row } => g.gather_rows(*matrix, &[*row]),
    }
}

/// Stacks track queries ahead of the learned object queries. Track
/// references follow their previous box codes through `motion`.
pub fn build_queries(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    coder: &BoxCoder,
    tracks: &[TrackQueryInput],
    motion: &Motion,
) -> Result<QueryBatch> {
    let obj_emb = g.param(store, "query.embed")?;
    let obj_ref = g.param(store, "query.ref")?;
    let len = tracks.len() + g.shape(obj_emb)[0];
    if tracks.is_empty() {
        return Ok(QueryBatch {
            embeddings: obj_emb,
            ref_code: obj_ref,
            num_tracks: 0,
            len,
        });
    }
    let mut rows = Vec::with_capacity(tracks.len() + 1);
    let mut codes = Vec::with_capacity(tracks.len());
    for t in tracks {
        rows.push(row_of(g, &t.embedding, cfg.channels, "embedding")?);
        codes.push(row_of(g, &t.code, BOX_CODE_LEN, "code")?);
    }
    rows.push(obj_emb);
    let embeddings = g.concat(&rows, 0)?;
    let codes = g.concat(&codes, 0)?;
    let (m, o) = motion.affine(coder);
    let m = g.constant(Tensor::new(vec![BOX_CODE_LEN, 3], m)?);
    let o = g.constant(Tensor::vector(o.to_vec())?);
    let moved = g.matmul(codes, m)?;
    let track_refs = g.add_row(moved, o)?;
    let ref_code = g.concat(&[track_refs, obj_ref], 0)?;
    Ok(QueryBatch {
        embeddings,
        ref_code,
        num_tracks: tracks.len(),
        len,
    })
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub embeddings: Var,
    pub prediction: Prediction,
    /// References used by this layer's block and predictor.
    pub references: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub kind: DecoderKind,
    pub layers: Vec<LayerOutput>,
    /// Predicted centers of the last layer, clamped into range.
    pub final_references: Vec<[f64; 3]>,
}

impl DecoderOutput {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("at least one layer")
    }
}

/// Positional encoding of `N x 3` normalised references, on the graph so
/// learned references receive its gradient.
pub fn query_pe(g: &mut Graph, channels: usize, ref_code: Var) -> Result<Var> {
    let b = encoding_basis(channels);
    let w = g.constant(Tensor::new(vec![3, channels], b.weights)?);
    let phase = g.constant(Tensor::vector(b.phase)?);
    let mask = g.constant(Tensor::vector(b.mask)?);
    let arg = g.matmul(ref_code, w)?;
    let arg = g.add_row(arg, phase)?;
    let s = g.sin(arg)?;
    g.mul_row(s, mask)
}

/// Runs all blocks of one decoder kind, predicting after every block. Each
/// layer's predicted centers become the next layer's references.
pub fn run_decoder(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    coder: &BoxCoder,
    kind: DecoderKind,
    queries: &QueryBatch,
    memory: &TokenMemory,
) -> Result<DecoderOutput> {
    if memory.num_tokens == 0 {
        return Err(Error::contract("empty token field"));
    }
    if memory.layers.len() != cfg.layers {
        return Err(Error::contract("memory layer count differs from model"));
    }
    let mut x = queries.embeddings;
    let mut ref_code = queries.ref_code;
    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, mem) in memory.layers.iter().enumerate() {
        let pe = query_pe(g, cfg.channels, ref_code)?;
        x = match kind {
            DecoderKind::S => s_decoder_block(g, store, cfg, l, x, pe, mem)?,
            DecoderKind::U => u_decoder_block(g, store, cfg, l, x, pe, mem)?,
        };
        let prediction = predict(g, store, x, ref_code)?;
        layers.push(LayerOutput {
            embeddings: x,
            prediction,
            references: decode_refs(g, coder, ref_code),
        });
        ref_code = g.slice(prediction.box_code, 1, 0, 3)?;
    }
    Ok(DecoderOutput {
        kind,
        layers,
        final_references: decode_refs(g, coder, ref_code),
    })
}
