//! Synthetic bird's-eye-view world: ground-truth tracklets with identities,
//! ego motion, and the per-frame token field the decoder attends to.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoding::{positional_encoding, rng_for, PositionScale};
use crate::numcore::{write_atomic, Tensor};
use crate::{Error, Result};

pub const SCENE_VERSION: u64 = 1;

/// Typical extent `(l, w, h)` and top speed per class; classes beyond the
/// table reuse it cyclically.
const CLASS_TEMPLATES: [([f64; 3], f64); 7] = [
    ([4.6, 1.9, 1.7], 12.0), // car
    ([8.0, 2.6, 3.2], 9.0),  // truck
    ([11.0, 2.9, 3.4], 8.0), // bus
    ([10.0, 2.5, 3.6], 7.0), // trailer
    ([2.1, 0.8, 1.5], 10.0), // motorcycle
    ([1.7, 0.6, 1.3], 5.0),  // bicycle
    ([0.7, 0.7, 1.8], 1.5),  // pedestrian
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Perception range is the square `[-half_range, half_range]^2` (m).
    pub half_range: f64,
    /// Normaliser for heights/z (m).
    pub z_scale: f64,
    /// Normaliser for velocities (m/s).
    pub vel_scale: f64,
    /// Token grid `[nx, ny]`.
    pub grid: [usize; 2],
    pub channels: usize,
    pub num_classes: usize,
    pub num_frames: usize,
    pub dt: f64,
    /// Inclusive range for the number of targets in the first frame.
    pub initial_targets: [usize; 2],
    /// Cap on simultaneously alive targets.
    pub max_targets: usize,
    /// Expected births per frame (Poisson).
    pub birth_rate: f64,
    /// Per-target per-frame death probability.
    pub death_rate: f64,
    /// Std-dev of per-axis acceleration (m/s^2).
    pub accel_noise: f64,
    /// Multiplier on the class top speed.
    pub speed_scale: f64,
    pub ego_speed: f64,
    /// Std-dev of the ego yaw-rate random walk (rad/s per step).
    pub ego_yaw_noise: f64,
    pub token_noise: f64,
    /// Radius (m) within which a target perturbs a token.
    pub signature_radius: f64,
    pub signature_gain: f64,
    /// Seed for the fixed class embeddings and attribute projection.
    pub signature_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            half_range: 50.0,
            z_scale: 4.0,
            vel_scale: 10.0,
            grid: [16, 16],
            channels: 64,
            num_classes: 7,
            num_frames: 20,
            dt: 0.5,
            initial_targets: [3, 8],
            max_targets: 10,
            birth_rate: 0.4,
            death_rate: 0.03,
            accel_noise: 0.5,
            speed_scale: 1.0,
            ego_speed: 5.0,
            ego_yaw_noise: 0.05,
            token_noise: 0.05,
            signature_radius: 9.375,
            signature_gain: 1.0,
            signature_seed: 0x5eed,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("simulation: {m}")));
        if !(self.half_range > 0.0 && self.z_scale > 0.0 && self.vel_scale > 0.0) {
            return fail("scales must be positive");
        }
        if self.grid[0] == 0 || self.grid[1] == 0 || self.channels == 0 {
            return fail("token grid and channels must be non-empty");
        }
        if self.num_classes == 0 {
            return fail("need at least one class");
        }
        if self.num_frames == 0 || !(self.dt > 0.0) {
            return fail("need at least one frame and dt > 0");
        }
        if self.initial_targets[0] > self.initial_targets[1] {
            return fail("initial target range is empty (min > max)");
        }
        if self.max_targets < self.initial_targets[1] {
            return fail("max_targets below the initial target count");
        }
        if !(self.birth_rate >= 0.0 && (0.0..=1.0).contains(&self.death_rate)) {
            return fail("birth rate must be >= 0 and death rate in [0, 1]");
        }
        if !(self.accel_noise >= 0.0
            && self.speed_scale >= 0.0
            && self.ego_speed >= 0.0
            && self.ego_yaw_noise >= 0.0
            && self.token_noise >= 0.0)
        {
            return fail("noise scales and speeds must be >= 0");
        }
        if !(self.signature_radius > 0.0 && self.signature_gain >= 0.0) {
            return fail("signature radius must be positive");
        }
        Ok(())
    }

    pub fn position_scale(&self) -> PositionScale {
        PositionScale {
            half_range: self.half_range,
            z_scale: self.z_scale,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    /// Grid spacing along x and y (m).
    pub fn spacing(&self) -> [f64; 2] {
        [
            2.0 * self.half_range / self.grid[0] as f64,
            2.0 * self.half_range / self.grid[1] as f64,
        ]
    }

    pub fn in_range(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.half_range && y.abs() <= self.half_range
    }
}

/// Vehicle pose in the world frame: position and heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl From<[f64; 3]> for EgoPose {
    fn from(v: [f64; 3]) -> Self {
        EgoPose {
            x: v[0],
            y: v[1],
            heading: v[2],
        }
    }
}

impl From<EgoPose> for [f64; 3] {
    fn from(p: EgoPose) -> Self {
        [p.x, p.y, p.heading]
    }
}

impl EgoPose {
    pub fn identity() -> Self {
        EgoPose {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        }
    }

    /// Vehicle-frame point to world frame.
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// World-frame point to vehicle frame.
    pub fn to_vehicle(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Rotates a vehicle-frame vector into world axes.
    pub fn rotate_to_world(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn rotate_to_vehicle(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTarget {
    pub id: u64,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    #[serde(rename = "vel")]
    pub velocity: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub t: usize,
    pub dt: f64,
    pub ego: EgoPose,
    pub targets: Vec<GroundTruthTarget>,
}

/// Per-frame tokens standing in for position-aware image features.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenField {
    /// `T x C` features.
    pub tokens: Tensor,
    /// BEV anchor of each token (m).
    pub positions: Vec<[f64; 3]>,
}

impl TokenField {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub config: SimConfig,
    pub frames: Vec<GroundTruthFrame>,
    pub tokens: Vec<TokenField>,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    version: u64,
    seed: u64,
    config: SimConfig,
    frames: Vec<GroundTruthFrame>,
}

#[derive(Clone, Debug)]
struct WorldTarget {
    id: u64,
    class_id: usize,
    pos: [f64; 2],
    z: f64,
    size: [f64; 3],
    yaw: f64,
    vel: [f64; 2],
}

fn spawn_target(cfg: &SimConfig, id: u64, ego: &EgoPose, rng: &mut ChaCha8Rng) -> WorldTarget {
    let class_id = rng.random_range(0..cfg.num_classes);
    let (extent, top_speed) = CLASS_TEMPLATES[class_id % CLASS_TEMPLATES.len()];
    let size = extent.map(|e| e * rng.random_range(0.9..1.1));
    let margin = 0.9 * cfg.half_range;
    let local = [rng.random_range(-margin..margin), rng.random_range(-margin..margin)];
    let yaw = rng.random_range(-PI..PI);
    let speed = rng.random_range(0.0..=1.0) * top_speed * cfg.speed_scale;
    WorldTarget {
        id,
        class_id,
        pos: ego.to_world(local),
        z: size[2] / 2.0,
        size,
        yaw,
        vel: [speed * yaw.cos(), speed * yaw.sin()],
    }
}

fn observe(cfg: &SimConfig, t: usize, ego: EgoPose, world: &[WorldTarget]) -> GroundTruthFrame {
    let targets = world
        .iter()
        .map(|w| {
            let c = ego.to_vehicle(w.pos);
            GroundTruthTarget {
                id: w.id,
                class_id: w.class_id,
                center: [c[0], c[1], w.z],
                size: w.size,
                yaw: wrap_angle(w.yaw - ego.heading),
                velocity: ego.rotate_to_vehicle(w.vel),
            }
        })
        .collect();
    GroundTruthFrame {
        t,
        dt: cfg.dt,
        ego,
        targets,
    }
}

/// Generates a scene. Deterministic in `(cfg, seed)`.
///
/// Targets move with constant velocity; velocity then changes by Gaussian
/// acceleration. Leaving the perception range or a random death retires an
/// identity for good.
pub fn generate_scene(cfg: &SimConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = rng_for(seed, "scene");
    let accel = Normal::new(0.0, cfg.accel_noise.max(0.0)).expect("finite std");
    let yaw_walk = Normal::new(0.0, cfg.ego_yaw_noise.max(0.0)).expect("finite std");

    let mut ego = EgoPose {
        x: 0.0,
        y: 0.0,
        heading: rng.random_range(-PI..PI),
    };
    let mut yaw_rate = 0.0;
    let mut next_id = 1u64;
    let n0 = rng.random_range(cfg.initial_targets[0]..=cfg.initial_targets[1]);
    let mut world: Vec<WorldTarget> = (0..n0)
        .map(|_| {
            let t = spawn_target(cfg, next_id, &ego, &mut rng);
            next_id += 1;
            t
        })
        .collect();

    let mut frames = Vec::with_capacity(cfg.num_frames);
    frames.push(observe(cfg, 0, ego, &world));
    for t in 1..cfg.num_frames {
        yaw_rate = (yaw_rate + yaw_walk.sample(&mut rng)).clamp(-0.3, 0.3);
        ego.heading = wrap_angle(ego.heading + yaw_rate * cfg.dt);
        ego.x += cfg.ego_speed * cfg.dt * ego.heading.cos();
        ego.y += cfg.ego_speed * cfg.dt * ego.heading.sin();

        for w in &mut world {
            w.pos[0] += w.vel[0] * cfg.dt;
            w.pos[1] += w.vel[1] * cfg.dt;
            if cfg.accel_noise > 0.0 {
                w.vel[0] += accel.sample(&mut rng) * cfg.dt;
                w.vel[1] += accel.sample(&mut rng) * cfg.dt;
                if w.vel[0].hypot(w.vel[1]) > 0.1 {
                    w.yaw = w.vel[1].atan2(w.vel[0]);
                }
            }
        }
        world.retain(|w| {
            let c = ego.to_vehicle(w.pos);
            cfg.in_range(c[0], c[1])
        });
        if cfg.death_rate > 0.0 {
            world.retain(|_| rng.random::<f64>() >= cfg.death_rate);
        }
        if cfg.birth_rate > 0.0 {
            let births = Poisson::new(cfg.birth_rate).expect("positive rate").sample(&mut rng) as usize;
            for _ in 0..births {
                if world.len() >= cfg.max_targets {
                    break;
                }
                world.push(spawn_target(cfg, next_id, &ego, &mut rng));
                next_id += 1;
            }
        }
        frames.push(observe(cfg, t, ego, &world));
    }

    let tokens = frames.iter().map(|f| render_tokens(f, cfg, seed)).collect();
    Ok(Scene {
        seed,
        config: cfg.clone(),
        frames,
        tokens,
    })
}

/// Fixed, seeded signature tables: per-class embedding (`N_c x C`) and the
/// attribute projection (`C x 10`).
struct Signatures {
    class_emb: Vec<Vec<f64>>,
    proj: Vec<[f64; 10]>,
}

fn signatures(cfg: &SimConfig) -> Signatures {
    let mut rng = rng_for(cfg.signature_seed, "signatures");
    let c = cfg.channels;
    let class_emb = (0..cfg.num_classes)
        .map(|_| {
            (0..c)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect::<Vec<f64>>()
        })
        .collect();
    let proj = (0..c)
        .map(|_| {
            let mut row = [0.0; 10];
            for v in &mut row {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z / 10f64.sqrt();
            }
            row
        })
        .collect();
    Signatures { class_emb, proj }
}

/// Anchor positions of the token grid, x fastest.
pub fn token_anchors(cfg: &SimConfig) -> Vec<[f64; 3]> {
    let [nx, ny] = cfg.grid;
    let [sx, sy] = cfg.spacing();
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            out.push([
                -cfg.half_range + (ix as f64 + 0.5) * sx,
                -cfg.half_range + (iy as f64 + 0.5) * sy,
                0.0,
            ]);
        }
    }
    out
}

fn target_attributes(t: &GroundTruthTarget, anchor: [f64; 3], cfg: &SimConfig) -> [f64; 10] {
    let [sx, sy] = cfg.spacing();
    [
        (t.center[0] - anchor[0]) / sx,
        (t.center[1] - anchor[1]) / sy,
        t.center[2] / cfg.z_scale,
        t.size[0].ln(),
        t.size[1].ln(),
        t.size[2].ln(),
        t.yaw.sin(),
        t.yaw.cos(),
        t.velocity[0] / cfg.vel_scale,
        t.velocity[1] / cfg.vel_scale,
    ]
}

/// Signature-only part of the token field (no positional part, no noise).
pub fn signature_field(frame: &GroundTruthFrame, cfg: &SimConfig) -> Vec<Vec<f64>> {
    let sig = signatures(cfg);
    token_anchors(cfg)
        .into_iter()
        .map(|a| {
            let mut feat = vec![0.0; cfg.channels];
            for t in &frame.targets {
                let d = (t.center[0] - a[0]).hypot(t.center[1] - a[1]);
                let w = 1.0 - d / cfg.signature_radius;
                if w <= 0.0 {
                    continue;
                }
                let attrs = target_attributes(t, a, cfg);
                for (ch, f) in feat.iter_mut().enumerate() {
                    let projected: f64 = sig.proj[ch].iter().zip(&attrs).map(|(p, x)| p * x).sum();
                    *f += cfg.signature_gain * w * (sig.class_emb[t.class_id][ch] + projected);
                }
            }
            feat
        })
        .collect()
}

/// Renders the token field of a frame. Pure in `(frame, cfg, seed)`.
pub fn render_tokens(frame: &GroundTruthFrame, cfg: &SimConfig, seed: u64) -> TokenField {
    let positions = token_anchors(cfg);
    let scale = cfg.position_scale();
    let sig = signature_field(frame, cfg);
    let mut rng = rng_for(seed, &format!("tokens/{}", frame.t));
    let noise = Normal::new(0.0, cfg.token_noise).expect("finite std");
    let mut data = Vec::with_capacity(positions.len() * cfg.channels);
    for (a, s) in positions.iter().zip(&sig) {
        let pe = positional_encoding(*a, scale, cfg.channels);
        for ch in 0..cfg.channels {
            let n = if cfg.token_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push(pe[ch] + s[ch] + n);
        }
    }
    TokenField {
        tokens: Tensor::new(vec![positions.len(), cfg.channels], data).expect("finite tokens"),
        positions,
    }
}

/// Indices of `cur.targets` split into identities carried over from `prev`
/// and new-born ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetSplit {
    pub consistent: Vec<usize>,
    pub newborn: Vec<usize>,
}

pub fn split_consistent_newborn(prev: Option<&GroundTruthFrame>, cur: &GroundTruthFrame) -> TargetSplit {
    let prev_ids: HashSet<u64> = prev
        .map(|p| p.targets.iter().map(|t| t.id).collect())
        .unwrap_or_default();
    let mut split = TargetSplit::default();
    for (i, t) in cur.targets.iter().enumerate() {
        if prev_ids.contains(&t.id) {
            split.consistent.push(i);
        } else {
            split.newborn.push(i);
        }
    }
    split
}

pub fn scene_to_json(scene: &Scene) -> Result<String> {
    let file = SceneFile {
        version: SCENE_VERSION,
        seed: scene.seed,
        config: scene.config.clone(),
        frames: scene.frames.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    write_atomic(path, scene_to_json(scene)?.as_bytes())
}

fn parse_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn scene_from_json(text: &str, path: &Path) -> Result<Scene> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_error(path, e))?;
    let version = value.get("version").and_then(serde_json::Value::as_u64).ok_or_else(|| {
        Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: 1,
            message: "missing integer \"version\"".into(),
        }
    })?;
    if version != SCENE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: SCENE_VERSION,
        });
    }
    let file: SceneFile = serde_json::from_str(text).map_err(|e| parse_error(path, e))?;
    file.config.validate()?;
    let tokens = file
        .frames
        .iter()
        .map(|f| render_tokens(f, &file.config, file.seed))
        .collect();
    Ok(Scene {
        seed: file.seed,
        config: file.config,
        frames: file.frames,
        tokens,
    })
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_json(&text, path)
}

/// Loads every `*.json` scene in `dir`, sorted by file name.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_scene(p)).collect()
}

/// Checks the structural scene properties: ids unique per frame, each id's
/// frames form one contiguous run, sizes positive, yaws wrapped, dt > 0.
pub fn check_scene(scene: &Scene) -> Result<()> {
    let mut seen_dead: BTreeSet<u64> = BTreeSet::new();
    let mut prev: BTreeSet<u64> = BTreeSet::new();
    for f in &scene.frames {
        if !(f.dt > 0.0) {
            return Err(Error::contract(format!("frame {} has dt <= 0", f.t)));
        }
        let ids: BTreeSet<u64> = f.targets.iter().map(|t| t.id).collect();
        if ids.len() != f.targets.len() {
            return Err(Error::contract(format!("duplicate id in frame {}", f.t)));
        }
        for t in &f.targets {
            if seen_dead.contains(&t.id) {
                return Err(Error::contract(format!("id {} resurrected at frame {}", t.id, f.t)));
            }
            if t.size.iter().any(|s| !(*s > 0.0)) || !(-PI..PI).contains(&t.yaw) {
                return Err(Error::contract(format!("target {} malformed", t.id)));
            }
        }
        seen_dead.extend(prev.difference(&ids));
        prev = ids;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still_config() -> SimConfig {
        SimConfig {
            num_frames: 6,
            birth_rate: 0.0,
            death_rate: 0.0,
            accel_noise: 0.0,
            speed_scale: 0.1,
            ego_speed: 0.0,
            ego_yaw_noise: 0.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn degenerate_config_gives_linear_motion() {
        let cfg = still_config();
        let scene = generate_scene(&cfg, 3).unwrap();
        let first: Vec<u64> = scene.frames[0].targets.iter().map(|t| t.id).collect();
        for f in &scene.frames {
            let ids: Vec<u64> = f.targets.iter().map(|t| t.id).collect();
            assert_eq!(ids, first);
        }
        for (k, t0) in scene.frames[0].targets.iter().enumerate() {
            let ego0 = scene.frames[0].ego;
            let p0 = ego0.to_world([t0.center[0], t0.center[1]]);
            let v0 = ego0.rotate_to_world(t0.velocity);
            for f in &scene.frames {
                let t = &f.targets[k];
                let p = f.ego.to_world([t.center[0], t.center[1]]);
                let dt = f.t as f64 * cfg.dt;
                assert!((p[0] - (p0[0] + v0[0] * dt)).abs() < 1e-9);
                assert!((p[1] - (p0[1] + v0[1] * dt)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SimConfig::default();
        let a = scene_to_json(&generate_scene(&cfg, 11).unwrap()).unwrap();
        let b = scene_to_json(&generate_scene(&cfg, 11).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = scene_to_json(&generate_scene(&cfg, 12).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn infeasible_config_rejected() {
        let cfg = SimConfig {
            initial_targets: [5, 8],
            max_targets: 4,
            ..SimConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Config(_))));
        let cfg = SimConfig {
            initial_targets: [6, 2],
            ..SimConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn identities_never_resurrect() {
        let cfg = SimConfig {
            birth_rate: 1.0,
            death_rate: 0.1,
            num_frames: 15,
            ..SimConfig::default()
        };
        for seed in 0..100 {
            let scene = generate_scene(&cfg, seed).unwrap();
            check_scene(&scene).unwrap();
            let mut all_seen: HashSet<u64> = HashSet::new();
            for w in scene.frames.windows(2) {
                let prev: HashSet<u64> = w[0].targets.iter().map(|t| t.id).collect();
                all_seen.extend(&prev);
                for t in &w[1].targets {
                    assert!(prev.contains(&t.id) || !all_seen.contains(&t.id));
                }
            }
            assert!(scene.frames.iter().all(|f| f.targets.len() <= cfg.max_targets));
        }
    }

    #[test]
    fn frames_follow_constant_velocity_after_ego_compensation() {
        let cfg = SimConfig {
            accel_noise: 1.0,
            ..SimConfig::default()
        };
        let scene = generate_scene(&cfg, 5).unwrap();
        for w in scene.frames.windows(2) {
            for t0 in &w[0].targets {
                let Some(t1) = w[1].targets.iter().find(|t| t.id == t0.id) else {
                    continue;
                };
                let p0 = w[0].ego.to_world([t0.center[0], t0.center[1]]);
                let v0 = w[0].ego.rotate_to_world(t0.velocity);
                let p1 = w[1].ego.to_world([t1.center[0], t1.center[1]]);
                assert!((p1[0] - p0[0] - v0[0] * cfg.dt).abs() < 1e-9);
                assert!((p1[1] - p0[1] - v0[1] * cfg.dt).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_frame_tokens_are_positional_plus_noise() {
        let cfg = SimConfig {
            token_noise: 0.0,
            ..SimConfig::default()
        };
        let frame = GroundTruthFrame {
            t: 0,
            dt: 0.5,
            ego: EgoPose::identity(),
            targets: vec![],
        };
        let tf = render_tokens(&frame, &cfg, 1);
        for (i, a) in tf.positions.iter().enumerate() {
            let pe = positional_encoding(*a, cfg.position_scale(), cfg.channels);
            assert_eq!(tf.tokens.row(i), &pe[..]);
        }
        assert_eq!(tf, render_tokens(&frame, &cfg, 1));
    }

    fn target_at(id: u64, x: f64, y: f64) -> GroundTruthTarget {
        GroundTruthTarget {
            id,
            class_id: 2,
            center: [x, y, 1.0],
            size: [4.0, 2.0, 1.5],
            yaw: 0.3,
            velocity: [1.0, -2.0],
        }
    }

    #[test]
    fn target_on_anchor_dominates_its_token() {
        let cfg = SimConfig::default();
        let anchors = token_anchors(&cfg);
        let k = 5 * 16 + 7;
        let frame = GroundTruthFrame {
            t: 0,
            dt: 0.5,
            ego: EgoPose::identity(),
            targets: vec![target_at(1, anchors[k][0], anchors[k][1])],
        };
        let sig = signature_field(&frame, &cfg);
        let norms: Vec<f64> = sig.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let argmax = (0..norms.len()).max_by(|&a, &b| norms[a].total_cmp(&norms[b])).unwrap();
        assert_eq!(argmax, k);
    }

    #[test]
    fn far_apart_targets_have_disjoint_support() {
        let cfg = SimConfig::default();
        let a = GroundTruthFrame {
            t: 0,
            dt: 0.5,
            ego: EgoPose::identity(),
            targets: vec![target_at(1, -30.0, -30.0)],
        };
        let b = GroundTruthFrame {
            targets: vec![target_at(2, 25.0, 30.0)],
            ..a.clone()
        };
        let sa = signature_field(&a, &cfg);
        let sb = signature_field(&b, &cfg);
        let touched = |r: &Vec<f64>| r.iter().any(|v| *v != 0.0);
        assert!(sa.iter().zip(&sb).all(|(x, y)| !(touched(x) && touched(y))));
        assert!(sa.iter().any(touched) && sb.iter().any(touched));
    }

    #[test]
    fn split_examples() {
        let mk = |ids: &[u64]| GroundTruthFrame {
            t: 0,
            dt: 0.5,
            ego: EgoPose::identity(),
            targets: ids.iter().map(|&i| target_at(i, 0.0, 0.0)).collect(),
        };
        let s = split_consistent_newborn(None, &mk(&[4, 5]));
        assert_eq!(s.newborn, vec![0, 1]);
        assert!(s.consistent.is_empty());
        let s = split_consistent_newborn(Some(&mk(&[1, 2])), &mk(&[1, 2]));
        assert_eq!(s.consistent, vec![0, 1]);
        assert!(s.newborn.is_empty());
        let s = split_consistent_newborn(Some(&mk(&[1, 2])), &mk(&[2, 3]));
        assert_eq!(s.consistent, vec![0]);
        assert_eq!(s.newborn, vec![1]);
    }

    #[test]
    fn scene_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let scene = generate_scene(&SimConfig::default(), 21).unwrap();
        save_scene(&scene, &path).unwrap();
        assert_eq!(load_scene(&path).unwrap(), scene);

        let text = fs::read_to_string(&path).unwrap();
        let cut = dir.path().join("cut.json");
        fs::write(&cut, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_scene(&cut), Err(Error::Parse { line, .. }) if line > 1));

        let v2 = dir.path().join("v2.json");
        fs::write(&v2, text.replacen("\"version\": 1", "\"version\": 2", 1)).unwrap();
        assert!(matches!(load_scene(&v2), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn ego_transforms_invert() {
        let e = EgoPose {
            x: 3.0,
            y: -7.0,
            heading: 1.1,
        };
        let p = [12.5, -4.0];
        let back = e.to_vehicle(e.to_world(p));
        assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
        assert!((wrap_angle(PI) + PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }
}
