//! Track lifecycle: constant-velocity propagation with ego compensation,
//! confident-query spawning and stale-track retirement at inference, and the
//! teacher-forced K-frame training clip.

use std::collections::{HashMap, HashSet};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assigner::{
    assign_one_to_many, assign_track_queries, cost_from_codes, hungarian, AssignConfig, AssignmentResult,
    CostMatrix, MatchStrategy,
};
use crate::association::{self, affinity, build_asso_target, AffinityMatrix, AppearanceSide};
use crate::decoder::{
    self, build_queries, prepare_memory, run_decoder, BoxCoder, Box3D, DecoderKind, DecoderOutput, Embedding,
    ModelConfig, Motion, Prediction, Query, QueryKind, QuerySet, TrackQueryInput, BOX_CODE_LEN,
};
use crate::loss::{clip_loss, clip_total, frame_losses, ClipLossReport, FrameSupervision, FrameTerms, LayerAssignments, LossWeights};
use crate::numcore::{Graph, ParamStore, Var};
use crate::simworld::{wrap_angle, EgoPose, GroundTruthFrame, GroundTruthTarget, Scene, TokenField};
use crate::{Error, Result};

/// Registers every trainable parameter of the tracker.
pub fn init_model(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    decoder::init_params(store, cfg, rng)?;
    association::init_params(store, cfg.channels, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifecycleConfig {
    /// Minimum best-class score for an object query to start a track.
    pub spawn_threshold: f64,
    /// Minimum score for a live track to count as observed this frame.
    pub keep_threshold: f64,
    /// Tracks unobserved for more than this many consecutive frames retire.
    pub max_misses: u32,
    /// A new track is not started within this BEV distance (m) of a live
    /// observed track or an earlier spawn of the same frame. 0 disables.
    pub spawn_suppress_radius: f64,
    /// Retire a track as soon as its box leaves the perception square.
    pub retire_out_of_range: bool,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        LifecycleConfig {
            spawn_threshold: 0.4,
            keep_threshold: 0.35,
            max_misses: 5,
            spawn_suppress_radius: 0.0,
            retire_out_of_range: true,
        }
    }
}

impl LifecycleConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.keep_threshold > 0.0
            && self.keep_threshold <= self.spawn_threshold
            && self.spawn_threshold < 1.0
            && self.spawn_suppress_radius >= 0.0
            && self.spawn_suppress_radius.is_finite();
        if !ok {
            return Err(Error::Config(format!(
                "need 0 < keep ({}) <= spawn ({}) < 1 and a finite non-negative suppression radius",
                self.keep_threshold, self.spawn_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    pub class_id: usize,
    pub embedding: Vec<f64>,
    /// Latest box, in the current vehicle frame once propagated.
    pub bbox: Box3D,
    /// Box code of the latest prediction, in the frame it was made in.
    pub code: Vec<f64>,
    pub score: f64,
    pub misses: u32,
    pub age: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackState {
    pub tracks: Vec<Track>,
    pub next_id: u64,
    /// Motion since the frame of the latest codes.
    pub motion: Motion,
}

impl TrackState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn query_set(&self) -> QuerySet {
        QuerySet {
            queries: self
                .tracks
                .iter()
                .map(|t| Query {
                    embedding: t.embedding.clone(),
                    reference: t.bbox.center,
                    kind: QueryKind::Track,
                    track_id: Some(t.id),
                    age: t.age,
                    misses: t.misses,
                })
                .collect(),
        }
    }

    fn inputs(&self) -> Vec<TrackQueryInput> {
        self.tracks
            .iter()
            .map(|t| TrackQueryInput {
                embedding: Embedding::Value(t.embedding.clone()),
                code: Embedding::Value(t.code.clone()),
            })
            .collect()
    }
}

/// Moves a box by its velocity over `dt` in the previous vehicle frame and
/// re-expresses it in the current vehicle frame.
pub fn propagate_box(b: &Box3D, dt: f64, prev: &EgoPose, cur: &EgoPose) -> Box3D {
    let moved = [b.center[0] + b.velocity[0] * dt, b.center[1] + b.velocity[1] * dt];
    let c = cur.to_vehicle(prev.to_world(moved));
    Box3D {
        center: [c[0], c[1], b.center[2]],
        size: b.size,
        yaw: wrap_angle(b.yaw + prev.heading - cur.heading),
        velocity: cur.rotate_to_vehicle(prev.rotate_to_world(b.velocity)),
    }
}

pub fn propagate(state: &TrackState, dt: f64, prev: &EgoPose, cur: &EgoPose) -> Result<TrackState> {
    if !(dt > 0.0) {
        return Err(Error::contract(format!("propagation needs dt > 0, got {dt}")));
    }
    if state.motion != Motion::still() {
        return Err(Error::contract("state is already propagated"));
    }
    let mut out = state.clone();
    out.motion = Motion {
        dt,
        prev: *prev,
        cur: *cur,
    };
    for t in &mut out.tracks {
        t.bbox = propagate_box(&t.bbox, dt, prev, cur);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub t: usize,
    pub id: u64,
    pub class: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 9],
}

/// Runs the standard decoder on track queries followed by object queries.
pub fn decode_frame(
    store: &ParamStore,
    model: &ModelConfig,
    coder: &BoxCoder,
    tracks: &[TrackQueryInput],
    motion: &Motion,
    tokens: &TokenField,
) -> Result<(Graph, DecoderOutput)> {
    let mut g = Graph::new();
    let mem = prepare_memory(&mut g, store, model, coder, tokens)?;
    let q = build_queries(&mut g, store, model, coder, tracks, motion)?;
    let out = run_decoder(&mut g, store, model, coder, DecoderKind::S, &q, &mem)?;
    Ok((g, out))
}

/// One inference step on a state already propagated to frame `t`.
pub fn step_frame(
    state: &TrackState,
    t: usize,
    tokens: &TokenField,
    store: &ParamStore,
    model: &ModelConfig,
    coder: &BoxCoder,
    life: &LifecycleConfig,
) -> Result<(TrackState, Vec<Emission>)> {
    let nt = state.tracks.len();
    let (g, out) = decode_frame(store, model, coder, &state.inputs(), &state.motion, tokens)?;
    let last = out.last();
    let emb = g.value(last.embeddings);
    let c = model.channels;
    let boxes = last.prediction.boxes(&g, coder);
    let scores = last.prediction.scores(&g);
    let codes = g.value(last.prediction.box_code);
    let code = |i: usize| codes[i * BOX_CODE_LEN..(i + 1) * BOX_CODE_LEN].to_vec();

    let mut next = TrackState {
        tracks: Vec::with_capacity(nt),
        next_id: state.next_id,
        motion: Motion::still(),
    };
    for (i, tr) in state.tracks.iter().enumerate() {
        let score = scores[i].0[tr.class_id];
        let misses = if score >= life.keep_threshold { 0 } else { tr.misses + 1 };
        let [x, y, _] = boxes[i].center;
        let outside = x.abs() > coder.half_range || y.abs() > coder.half_range;
        if misses > life.max_misses || (life.retire_out_of_range && outside) {
            continue;
        }
        next.tracks.push(Track {
            id: tr.id,
            class_id: tr.class_id,
            embedding: emb[i * c..(i + 1) * c].to_vec(),
            bbox: boxes[i],
            code: code(i),
            score,
            misses,
            age: tr.age + 1,
        });
    }

    let mut candidates: Vec<(usize, usize, f64)> = (nt..scores.len())
        .map(|j| {
            let (cls, p) = scores[j].best();
            (j, cls, p)
        })
        .filter(|c| c.2 >= life.spawn_threshold)
        .collect();
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let r2 = life.spawn_suppress_radius * life.spawn_suppress_radius;
    let mut occupied: Vec<[f64; 3]> = next.tracks.iter().filter(|t| t.misses == 0).map(|t| t.bbox.center).collect();
    for (j, cls, p) in candidates {
        let b = boxes[j];
        let near = |o: &[f64; 3]| (o[0] - b.center[0]).powi(2) + (o[1] - b.center[1]).powi(2) < r2;
        if r2 > 0.0 && occupied.iter().any(near) {
            continue;
        }
        occupied.push(b.center);
        next.tracks.push(Track {
            id: next.next_id,
            class_id: cls,
            embedding: emb[j * c..(j + 1) * c].to_vec(),
            bbox: b,
            code: code(j),
            score: p,
            misses: 0,
            age: 0,
        });
        next.next_id += 1;
    }

    let mut emissions: Vec<Emission> = next
        .tracks
        .iter()
        .filter(|tr| tr.misses == 0)
        .map(|tr| Emission {
            t,
            id: tr.id,
            class: tr.class_id,
            score: tr.score,
            bbox: tr.bbox.to_array(),
        })
        .collect();
    emissions.sort_by_key(|e| e.id);
    Ok((next, emissions))
}

/// Tracks a whole scene from an empty state.
pub fn track_scene(
    scene: &Scene,
    store: &ParamStore,
    model: &ModelConfig,
    coder: &BoxCoder,
    life: &LifecycleConfig,
) -> Result<Vec<Emission>> {
    life.validate()?;
    let mut state = TrackState::new();
    let mut out = Vec::new();
    for (t, frame) in scene.frames.iter().enumerate() {
        if t > 0 {
            state = propagate(&state, frame.dt, &scene.frames[t - 1].ego, &frame.ego)?;
        }
        let (next, em) = step_frame(&state, t, &scene.tokens[t], store, model, coder, life)?;
        state = next;
        out.extend(em);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GtRange {
    /// Ground truths already followed by a track query.
    #[default]
    Consistent,
    All,
}

/// Which supervision signals a training clip applies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// One-to-many supervision of twin-decoder object queries.
    pub o2m: bool,
    /// One-to-one supervision of twin-decoder track queries.
    pub o2o: bool,
    /// Object-to-track association supervision.
    pub asso: bool,
    /// Standard-decoder object queries: Hungarian or thresholded one-to-many
    /// against ground truths without a track.
    pub s_object_strategy: MatchStrategy,
    /// Ground truths the twin decoder's object queries are matched against.
    pub u_object_range: GtRange,
    /// Threshold, multiplicity and strategy for twin-decoder object queries.
    pub assign: AssignConfig,
    pub weights: LossWeights,
    pub appearance: AppearanceSide,
    /// Tracks whose target vanished stay alive this long.
    pub max_misses: u32,
    /// Classify tracks whose target vanished as background; when off they
    /// receive no loss at all.
    pub lost_track_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            o2m: true,
            o2o: true,
            asso: true,
            s_object_strategy: MatchStrategy::OneToOne,
            u_object_range: GtRange::Consistent,
            assign: AssignConfig::default(),
            weights: LossWeights::default(),
            appearance: AppearanceSide::Object,
            max_misses: 5,
            lost_track_negatives: true,
        }
    }
}

impl TrainConfig {
    pub fn baseline() -> Self {
        TrainConfig {
            o2m: false,
            o2o: false,
            asso: false,
            ..TrainConfig::default()
        }
    }

    /// The twin decoder runs iff one of its supervisions is on.
    pub fn runs_twin(&self) -> bool {
        self.o2m || self.o2o || self.asso
    }

    pub fn validate(&self) -> Result<()> {
        self.assign.validate()?;
        self.weights.validate()
    }
}

/// Training-side track: the embedding stays a node of the clip graph.
#[derive(Clone, Debug)]
struct ClipTrack {
    id: u64,
    row: Embedding,
    code: Embedding,
    misses: u32,
}

/// The differentiable clip and what produced it.
pub struct ClipGraph {
    pub graph: Graph,
    pub total: Var,
    pub frames: Vec<FrameTerms<Var>>,
    pub s_outputs: Vec<DecoderOutput>,
    /// Track ids and queries fed to each frame.
    pub track_inputs: Vec<Vec<(u64, TrackQueryInput)>>,
    pub motions: Vec<Motion>,
    pub twin_ran: Vec<bool>,
}

impl ClipGraph {
    pub fn report(&self, weights: &LossWeights) -> ClipLossReport {
        let values: Vec<FrameTerms<f64>> = self.frames.iter().map(|f| f.map(|v| self.graph.scalar(v))).collect();
        clip_loss(&values, weights)
    }
}

fn row_probs(g: &Graph, pred: &Prediction, rows: &Range<usize>) -> Vec<f64> {
    let nc = g.shape(pred.logits)[1];
    g.value(pred.logits)[rows.start * nc..rows.end * nc]
        .iter()
        .map(|x| 1.0 / (1.0 + (-x).exp()))
        .collect()
}

fn rows_cost(
    g: &Graph,
    pred: &Prediction,
    rows: &Range<usize>,
    gts: &[GroundTruthTarget],
    coder: &BoxCoder,
) -> Result<CostMatrix> {
    let nc = g.shape(pred.logits)[1];
    let codes = &g.value(pred.box_code)[rows.start * BOX_CODE_LEN..rows.end * BOX_CODE_LEN];
    cost_from_codes(gts, coder, codes, &row_probs(g, pred, rows), nc)
}

fn assign_with(cost: &CostMatrix, strategy: MatchStrategy, cfg: &AssignConfig) -> Result<AssignmentResult> {
    match strategy {
        MatchStrategy::OneToOne => Ok(hungarian(cost)),
        MatchStrategy::OneToMany => assign_one_to_many(cost, cfg),
    }
}

/// Builds the clip loss over consecutive `frames` with teacher-forced
/// track identities.
pub fn build_clip(
    store: &ParamStore,
    model: &ModelConfig,
    coder: &BoxCoder,
    cfg: &TrainConfig,
    frames: &[GroundTruthFrame],
    tokens: &[TokenField],
) -> Result<ClipGraph> {
    if frames.is_empty() || frames.len() != tokens.len() {
        return Err(Error::contract("clip needs matching, non-empty frames and tokens"));
    }
    let mut g = Graph::new();
    let mut tracks: Vec<ClipTrack> = Vec::new();
    let mut terms = Vec::with_capacity(frames.len());
    let mut s_outputs = Vec::with_capacity(frames.len());
    let mut track_inputs = Vec::with_capacity(frames.len());
    let mut twin_ran = Vec::with_capacity(frames.len());
    let mut motions = Vec::with_capacity(frames.len());

    for (t, frame) in frames.iter().enumerate() {
        let motion = if t > 0 {
            if !(frame.dt > 0.0) {
                return Err(Error::contract("frame dt must be positive"));
            }
            Motion {
                dt: frame.dt,
                prev: frames[t - 1].ego,
                cur: frame.ego,
            }
        } else {
            Motion::still()
        };
        motions.push(motion);
        let inputs: Vec<TrackQueryInput> = tracks
            .iter()
            .map(|tr| TrackQueryInput {
                embedding: tr.row.clone(),
                code: tr.code.clone(),
            })
            .collect();
        track_inputs.push(tracks.iter().map(|tr| tr.id).zip(inputs.iter().cloned()).collect());
        let nt = tracks.len();
        let mem = prepare_memory(&mut g, store, model, coder, &tokens[t])?;
        let q = build_queries(&mut g, store, model, coder, &inputs, &motion)?;
        let s_out = run_decoder(&mut g, store, model, coder, DecoderKind::S, &q, &mem)?;
        let run_twin = t > 0 && cfg.runs_twin();
        let u_out = if run_twin {
            Some(run_decoder(&mut g, store, model, coder, DecoderKind::U, &q, &mem)?)
        } else {
            None
        };
        twin_ran.push(run_twin);
        let n = q.len();
        let objects = nt..n;

        let track_ids: Vec<u64> = tracks.iter().map(|tr| tr.id).collect();
        let tracked: HashSet<u64> = track_ids.iter().copied().collect();
        let s_object_gts: Vec<GroundTruthTarget> =
            frame.targets.iter().filter(|gt| !tracked.contains(&gt.id)).cloned().collect();
        let u_object_gts: Vec<GroundTruthTarget> = match cfg.u_object_range {
            GtRange::Consistent => frame.targets.iter().filter(|gt| tracked.contains(&gt.id)).cloned().collect(),
            GtRange::All => frame.targets.clone(),
        };
        let track_assign = assign_track_queries(&track_ids, &frame.targets)?;
        let track_to_u = assign_track_queries(&track_ids, &u_object_gts)?;
        let want_asso = cfg.asso && nt > 0 && u_out.is_some();

        let mut layers = Vec::with_capacity(model.layers);
        let mut affinities: Vec<AffinityMatrix> = Vec::new();
        let mut final_s_cost = None;
        for l in 0..model.layers {
            let sp = &s_out.layers[l].prediction;
            let s_cost = rows_cost(&g, sp, &objects, &s_object_gts, coder)?;
            let s_objects = assign_with(&s_cost, cfg.s_object_strategy, &cfg.assign)?;
            if l + 1 == model.layers {
                final_s_cost = Some(s_cost);
            }
            let mut la = LayerAssignments {
                s_objects,
                ..LayerAssignments::default()
            };
            if let Some(u) = &u_out {
                if cfg.o2m || want_asso {
                    let up = &u.layers[l].prediction;
                    let u_cost = rows_cost(&g, up, &objects, &u_object_gts, coder)?;
                    let u_assign = assign_with(&u_cost, cfg.assign.strategy, &cfg.assign)?;
                    if want_asso {
                        let followed: HashSet<usize> = track_to_u.pairs.iter().map(|p| p.0).collect();
                        let linked = AssignmentResult {
                            pairs: u_assign.pairs.iter().copied().filter(|p| followed.contains(&p.0)).collect(),
                            ..AssignmentResult::default()
                        };
                        la.asso = Some(build_asso_target(&linked, n - nt, &track_to_u)?);
                        let emb = u.layers[l].embeddings;
                        let obj = g.slice(emb, 0, nt, n - nt)?;
                        let trk = g.slice(emb, 0, 0, nt)?;
                        affinities.push(affinity(&mut g, store, obj, trk, cfg.appearance)?);
                    }
                    if cfg.o2m {
                        la.u_objects = Some(u_assign);
                    }
                }
            }
            layers.push(la);
        }
        let final_s = layers.last().map(|la| la.s_objects.clone()).unwrap_or_default();
        let sup = FrameSupervision {
            track_gts: frame.targets.clone(),
            tracks: track_assign.clone(),
            s_object_gts: s_object_gts.clone(),
            u_object_gts,
            supervise_u_tracks: cfg.o2o,
            track_negatives: cfg.lost_track_negatives,
            layers,
        };
        terms.push(frame_losses(&mut g, &s_out, u_out.as_ref(), &affinities, nt, &sup, coder)?);

        // carry tracks to the next frame
        let last = s_out.last();
        let code_of = |row: usize| Embedding::Row {
            matrix: last.prediction.box_code,
            row,
        };
        let present: HashSet<u64> = frame.targets.iter().map(|gt| gt.id).collect();
        let mut next = Vec::with_capacity(nt + s_object_gts.len());
        for (i, tr) in tracks.iter().enumerate() {
            let misses = if present.contains(&tr.id) { 0 } else { tr.misses + 1 };
            if misses > cfg.max_misses {
                continue;
            }
            next.push(ClipTrack {
                id: tr.id,
                row: Embedding::Row {
                    matrix: last.embeddings,
                    row: i,
                },
                code: code_of(i),
                misses,
            });
        }
        // one spawn per matched ground truth: its cheapest query
        let cost = final_s_cost.expect("at least one layer");
        let mut best: HashMap<usize, usize> = HashMap::new();
        for &(gi, j) in &final_s.pairs {
            let e = best.entry(gi).or_insert(j);
            if cost.at(gi, j) < cost.at(gi, *e) {
                *e = j;
            }
        }
        let mut spawns: Vec<(usize, usize)> = best.into_iter().collect();
        spawns.sort_unstable();
        for (gi, j) in spawns {
            next.push(ClipTrack {
                id: s_object_gts[gi].id,
                row: Embedding::Row {
                    matrix: last.embeddings,
                    row: nt + j,
                },
                code: code_of(nt + j),
                misses: 0,
            });
        }
        tracks = next;
        s_outputs.push(s_out);
    }
    let total = clip_total(&mut g, &terms, &cfg.weights)?;
    Ok(ClipGraph {
        graph: g,
        total,
        frames: terms,
        s_outputs,
        track_inputs,
        motions,
        twin_ran,
    })
}

/// Builds the clip `scene.frames[start..start + k]`, backpropagates its total
/// and adds the gradients into `store`.
pub fn run_clip_training(
    store: &mut ParamStore,
    model: &ModelConfig,
    coder: &BoxCoder,
    cfg: &TrainConfig,
    scene: &Scene,
    start: usize,
    k: usize,
) -> Result<ClipLossReport> {
    if k == 0 || start + k > scene.frames.len() {
        return Err(Error::contract(format!(
            "clip [{start}, {}) beyond a {}-frame scene",
            start + k,
            scene.frames.len()
        )));
    }
    let clip = build_clip(
        store,
        model,
        coder,
        cfg,
        &scene.frames[start..start + k],
        &scene.tokens[start..start + k],
    )?;
    let grads = clip.graph.backward(clip.total)?;
    store.accumulate_grads(&clip.graph, &grads)?;
    Ok(clip.report(&cfg.weights))
}
