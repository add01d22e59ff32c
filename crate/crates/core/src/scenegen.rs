//! Deterministic synthetic operating-room generator.
//!
//! Scenes are axis-aligned boxes on a floor slab. Relations are derived
//! from box geometry in the room frame (`+x` right, `-y` front, `+z` up).
//! Views are rendered by raycasting with flat shading; every pixel gets a
//! colour, an exact depth along the camera axis and a class id. Text
//! (description, QA pairs, scene-graph answer) comes from fixed templates.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap, Vec3};
use crate::image::RgbImage;
use crate::spatial::PanopticMap;
use crate::text::Vocabulary;

pub const GENERATOR_VERSION: &str = "ormllm-scenegen/1";
pub const NUM_CLASSES: usize = 8;
pub const ROOM_HALF: f64 = 6.0;
pub const PLACE_HALF: f64 = 2.5;
pub const RELATION_MARGIN: f64 = 0.1;
pub const MAX_ATTEMPTS: usize = 1000;
pub const SGG_QUESTION: &str = "list the scene graph.";

/// Class ids are `1..=8`; id 1 covers the floor and ray misses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityClass {
    Floor,
    OperatingTable,
    Patient,
    Surgeon,
    Nurse,
    InstrumentTray,
    AnesthesiaMachine,
    Monitor,
}

impl EntityClass {
    pub const ALL: [EntityClass; 8] = [
        EntityClass::Floor,
        EntityClass::OperatingTable,
        EntityClass::Patient,
        EntityClass::Surgeon,
        EntityClass::Nurse,
        EntityClass::InstrumentTray,
        EntityClass::AnesthesiaMachine,
        EntityClass::Monitor,
    ];

    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get((id as usize).wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityClass::Floor => "floor",
            EntityClass::OperatingTable => "operating_table",
            EntityClass::Patient => "patient",
            EntityClass::Surgeon => "surgeon",
            EntityClass::Nurse => "nurse",
            EntityClass::InstrumentTray => "instrument_tray",
            EntityClass::AnesthesiaMachine => "anesthesia_machine",
            EntityClass::Monitor => "monitor",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn phrase(self) -> String {
        self.name().replace('_', " ")
    }

    pub fn is_person(self) -> bool {
        matches!(self, EntityClass::Patient | EntityClass::Surgeon | EntityClass::Nurse)
    }

    pub fn color(self) -> [f64; 3] {
        match self {
            EntityClass::Floor => [0.55, 0.55, 0.5],
            EntityClass::OperatingTable => [0.2, 0.35, 0.8],
            EntityClass::Patient => [0.95, 0.8, 0.6],
            EntityClass::Surgeon => [0.1, 0.6, 0.3],
            EntityClass::Nurse => [0.4, 0.8, 0.85],
            EntityClass::InstrumentTray => [0.9, 0.6, 0.1],
            EntityClass::AnesthesiaMachine => [0.6, 0.2, 0.6],
            EntityClass::Monitor => [0.12, 0.12, 0.12],
        }
    }

    /// Box extents `(dx, dy, dz)` before any rotation.
    fn size(self) -> Vec3 {
        match self {
            EntityClass::Floor => [2.0 * ROOM_HALF, 2.0 * ROOM_HALF, 0.05],
            EntityClass::OperatingTable => [2.0, 0.8, 0.9],
            EntityClass::Patient => [1.7, 0.45, 0.3],
            EntityClass::Surgeon => [0.5, 0.4, 1.8],
            EntityClass::Nurse => [0.45, 0.4, 1.7],
            EntityClass::InstrumentTray => [0.6, 0.4, 1.0],
            EntityClass::AnesthesiaMachine => [0.7, 0.6, 1.4],
            EntityClass::Monitor => [0.6, 0.15, 0.4],
        }
    }
}

/// Palette image of a class map (used when segmentation is fed as an image).
pub fn class_palette(ids: &[u8]) -> Vec<f64> {
    ids.iter()
        .flat_map(|&k| EntityClass::from_id(k).map_or([0.0; 3], EntityClass::color))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    LeftOf,
    RightOf,
    InFrontOf,
    Behind,
    NextTo,
    OnTopOf,
    Holding,
}

impl Predicate {
    pub const ALL: [Predicate; 7] = [
        Predicate::LeftOf,
        Predicate::RightOf,
        Predicate::InFrontOf,
        Predicate::Behind,
        Predicate::NextTo,
        Predicate::OnTopOf,
        Predicate::Holding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Predicate::LeftOf => "left_of",
            Predicate::RightOf => "right_of",
            Predicate::InFrontOf => "in_front_of",
            Predicate::Behind => "behind",
            Predicate::NextTo => "next_to",
            Predicate::OnTopOf => "on_top_of",
            Predicate::Holding => "holding",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn phrase(self) -> String {
        self.name().replace('_', " ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityClass,
    pub predicate: Predicate,
    pub object: EntityClass,
}

impl Triple {
    pub fn new(subject: EntityClass, predicate: Predicate, object: EntityClass) -> Self {
        Self {
            subject,
            predicate,
            object,
        }
    }

    /// `subject|predicate|object`.
    pub fn to_text(&self) -> String {
        format!("{}|{}|{}", self.subject.name(), self.predicate.name(), self.object.name())
    }
}

/// Canonical scene-graph answer: sorted triples joined by `"; "`.
pub fn sgg_answer(triples: &[Triple]) -> String {
    let mut t = triples.to_vec();
    t.sort();
    t.iter().map(Triple::to_text).collect::<Vec<_>>().join("; ")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_base(cx: f64, cy: f64, z0: f64, size: Vec3) -> Self {
        Self {
            min: [cx - size[0] / 2.0, cy - size[1] / 2.0, z0],
            max: [cx + size[0] / 2.0, cy + size[1] / 2.0, z0 + size[2]],
        }
    }

    pub fn center(&self) -> Vec3 {
        [
            (self.min[0] + self.max[0]) / 2.0,
            (self.min[1] + self.max[1]) / 2.0,
            (self.min[2] + self.max[2]) / 2.0,
        ]
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    /// Separation along `axis` (0 when the intervals overlap).
    pub fn gap(&self, other: &Aabb, axis: usize) -> f64 {
        (self.min[axis].max(other.min[axis]) - self.max[axis].min(other.max[axis])).max(0.0)
    }

    fn overlap_len(&self, other: &Aabb, axis: usize) -> f64 {
        (self.max[axis].min(other.max[axis]) - self.min[axis].max(other.min[axis])).max(0.0)
    }

    pub fn footprint_area(&self) -> f64 {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])
    }

    pub fn footprint_overlap(&self, other: &Aabb) -> f64 {
        self.overlap_len(other, 0) * self.overlap_len(other, 1)
    }

    /// Footprint of one box inside the other's.
    pub fn footprint_nested(&self, other: &Aabb) -> bool {
        let inside = |a: &Aabb, b: &Aabb| (0..2).all(|i| a.min[i] >= b.min[i] && a.max[i] <= b.max[i]);
        inside(self, other) || inside(other, self)
    }

    /// Boxes closer than `margin` on every axis.
    pub fn near(&self, other: &Aabb, margin: f64) -> bool {
        (0..3).all(|i| self.gap(other, i) < margin)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub class: EntityClass,
    pub bbox: Aabb,
    pub color: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub entities: Vec<Entity>,
    pub relations: Vec<Triple>,
}

impl Scene {
    pub fn entity(&self, class: EntityClass) -> Option<&Entity> {
        self.entities.iter().find(|e| e.class == class)
    }

    /// Non-floor entities.
    pub fn objects(&self) -> impl Iterator<Item = &Entity> {
        self.entities.iter().filter(|e| e.class != EntityClass::Floor)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation { seed: self.seed, reason: m });
        let mut seen = BTreeSet::new();
        for e in &self.entities {
            if !seen.insert(e.class) {
                return fail(format!("duplicate {}", e.class.name()));
            }
            let room = Aabb {
                min: [-ROOM_HALF, -ROOM_HALF, -0.05],
                max: [ROOM_HALF, ROOM_HALF, 3.0],
            };
            if !room.contains(&e.bbox.min, 1e-12) || !room.contains(&e.bbox.max, 1e-12) {
                return fail(format!("{} outside the room", e.class.name()));
            }
        }
        if let Some(p) = self.entity(EntityClass::Patient) {
            match self.entity(EntityClass::OperatingTable) {
                Some(t) if p.bbox.footprint_overlap(&t.bbox) > 0.0 => {}
                _ => return fail("patient not on the operating table".into()),
            }
        }
        Ok(())
    }
}

fn floor_entity() -> Entity {
    Entity {
        class: EntityClass::Floor,
        bbox: Aabb {
            min: [-ROOM_HALF, -ROOM_HALF, -0.05],
            max: [ROOM_HALF, ROOM_HALF, 0.0],
        },
        color: EntityClass::Floor.id(),
    }
}

fn place(rng: &mut ChaCha8Rng, classes: &[EntityClass]) -> Option<Vec<Entity>> {
    let mut out: Vec<Entity> = Vec::new();
    let table_rot = rng.gen_bool(0.5);
    let rot = |s: Vec3, r: bool| if r { [s[1], s[0], s[2]] } else { s };
    let free = |rng: &mut ChaCha8Rng, s: Vec3| {
        let hx = PLACE_HALF - s[0] / 2.0;
        let hy = PLACE_HALF - s[1] / 2.0;
        (rng.gen_range(-hx..hx), rng.gen_range(-hy..hy))
    };
    let mut ordered = classes.to_vec();
    ordered.sort();
    for &c in &ordered {
        let bbox = match c {
            EntityClass::OperatingTable => {
                let s = rot(c.size(), table_rot);
                let (x, y) = free(rng, s);
                Aabb::from_base(x, y, 0.0, s)
            }
            EntityClass::Patient => {
                let t = out.iter().find(|e| e.class == EntityClass::OperatingTable)?.bbox;
                let s = rot(c.size(), table_rot);
                let [cx, cy, _] = t.center();
                let shift = rng.gen_range(-0.1..0.1);
                let (x, y) = if table_rot { (cx, cy + shift) } else { (cx + shift, cy) };
                Aabb::from_base(x, y, t.max[2], s)
            }
            EntityClass::InstrumentTray => {
                let s = rot(c.size(), rng.gen_bool(0.5));
                let person = out
                    .iter()
                    .find(|e| matches!(e.class, EntityClass::Surgeon | EntityClass::Nurse))
                    .map(|e| e.bbox);
                match person {
                    Some(p) if rng.gen_bool(0.5) => {
                        let gap = rng.gen_range(0.0..0.08);
                        let [px, py, _] = p.center();
                        let (x, y) = match rng.gen_range(0..4) {
                            0 => (p.max[0] + gap + s[0] / 2.0, py),
                            1 => (p.min[0] - gap - s[0] / 2.0, py),
                            2 => (px, p.max[1] + gap + s[1] / 2.0),
                            _ => (px, p.min[1] - gap - s[1] / 2.0),
                        };
                        Aabb::from_base(x, y, 0.0, s)
                    }
                    _ => {
                        let (x, y) = free(rng, s);
                        Aabb::from_base(x, y, 0.0, s)
                    }
                }
            }
            EntityClass::Monitor => {
                let s = rot(c.size(), rng.gen_bool(0.5));
                let (x, y) = free(rng, s);
                Aabb::from_base(x, y, rng.gen_range(1.4..1.8), s)
            }
            _ => {
                let s = rot(c.size(), rng.gen_bool(0.5));
                let (x, y) = free(rng, s);
                Aabb::from_base(x, y, 0.0, s)
            }
        };
        out.push(Entity {
            class: c,
            bbox,
            color: c.id(),
        });
    }
    Some(out)
}

fn placement_ok(objects: &[Entity]) -> bool {
    for e in objects {
        for i in 0..2 {
            if e.bbox.min[i] < -PLACE_HALF || e.bbox.max[i] > PLACE_HALF {
                return false;
            }
        }
    }
    for (i, a) in objects.iter().enumerate() {
        for b in &objects[i + 1..] {
            let pair = [a.class, b.class];
            let resting = pair.contains(&EntityClass::Patient) && pair.contains(&EntityClass::OperatingTable);
            if !resting && a.bbox.near(&b.bbox, 0.0) {
                return false;
            }
            // Keep boxes from touching so every pixel has one nearest box.
            if !resting && (0..3).all(|k| a.bbox.gap(&b.bbox, k) < 1e-3) {
                return false;
            }
        }
    }
    true
}

/// Samples 2 or 3 objects and their placements, rejecting until the scene
/// invariants hold.
pub fn generate_scene(seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<EntityClass> = EntityClass::ALL[1..].to_vec();
    for _ in 0..MAX_ATTEMPTS {
        let n = rng.gen_range(2..=3);
        let mut classes = pool.clone();
        classes.shuffle(&mut rng);
        classes.truncate(n);
        if classes.contains(&EntityClass::Patient) && !classes.contains(&EntityClass::OperatingTable) {
            continue;
        }
        let Some(objects) = place(&mut rng, &classes) else {
            continue;
        };
        if !placement_ok(&objects) {
            continue;
        }
        let mut entities = vec![floor_entity()];
        entities.extend(objects);
        let relations = derive_triples(&entities);
        let scene = Scene {
            seed,
            entities,
            relations,
        };
        if scene.check_invariants().is_ok() {
            return Ok(scene);
        }
    }
    Err(Error::Generation {
        seed,
        reason: format!("no valid placement after {MAX_ATTEMPTS} attempts"),
    })
}

/// Geometric relation rules over ordered pairs of non-floor entities,
/// returned in canonical order. `right_of(b, a)` and `behind(b, a)` are
/// defined as the converses of `left_of(a, b)` and `in_front_of(a, b)`.
pub fn derive_triples(entities: &[Entity]) -> Vec<Triple> {
    let objs: Vec<&Entity> = entities.iter().filter(|e| e.class != EntityClass::Floor).collect();
    let m = RELATION_MARGIN;
    let left_of = |a: &Aabb, b: &Aabb| a.center()[0] < b.min[0] - m;
    let in_front_of = |a: &Aabb, b: &Aabb| a.center()[1] < b.min[1] - m;
    let mut out = BTreeSet::new();
    for a in &objs {
        for b in &objs {
            if a.class == b.class {
                continue;
            }
            let (ab, bb) = (&a.bbox, &b.bbox);
            let t = |p| Triple::new(a.class, p, b.class);
            if left_of(ab, bb) {
                out.insert(t(Predicate::LeftOf));
            }
            if left_of(bb, ab) {
                out.insert(t(Predicate::RightOf));
            }
            if in_front_of(ab, bb) {
                out.insert(t(Predicate::InFrontOf));
            }
            if in_front_of(bb, ab) {
                out.insert(t(Predicate::Behind));
            }
            if ab.gap(bb, 0) < 0.3 && ab.gap(bb, 1) < 0.3 && !ab.footprint_nested(bb) {
                out.insert(t(Predicate::NextTo));
            }
            if ab.footprint_overlap(bb) >= 0.5 * ab.footprint_area() && (ab.min[2] - bb.max[2]).abs() <= 0.05 {
                out.insert(t(Predicate::OnTopOf));
            }
            let holder = matches!(a.class, EntityClass::Surgeon | EntityClass::Nurse);
            if holder && b.class == EntityClass::InstrumentTray && ab.gap(bb, 0).max(ab.gap(bb, 1)) < 0.1 {
                out.insert(t(Predicate::Holding));
            }
        }
    }
    out.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub fov_deg: f64,
    pub ring_radius: f64,
    pub camera_height: f64,
    pub target_height: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            fov_deg: 60.0,
            ring_radius: 4.0,
            camera_height: 2.6,
            target_height: 0.5,
        }
    }
}

impl RenderConfig {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        let f = (self.width as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan();
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene_id: u64,
    pub view_id: usize,
    pub rgb: RgbImage,
    pub gt_depth: DepthMap,
    pub gt_seg: PanopticMap,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub triples: Vec<Triple>,
    pub description: String,
    pub qa: Vec<QaPair>,
}

/// Floor colour by room quadrant, so a single view fixes the orientation.
fn floor_color(p: &Vec3) -> [f64; 3] {
    match (p[0] >= 0.0, p[1] >= 0.0) {
        (true, true) => [0.62, 0.55, 0.45],
        (false, true) => [0.45, 0.55, 0.62],
        (false, false) => [0.5, 0.6, 0.45],
        (true, false) => [0.58, 0.47, 0.58],
    }
}

const BACKGROUND_RGB: [f64; 3] = [0.05, 0.05, 0.08];

/// Ray parameter and entry axis of the first hit of `o + t*d` with `b`.
fn ray_box(o: &Vec3, d: &Vec3, b: &Aabb) -> Option<(f64, usize)> {
    let mut tnear = f64::NEG_INFINITY;
    let mut tfar = f64::INFINITY;
    let mut axis = 0;
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i] < b.min[i] || o[i] > b.max[i] {
                return None;
            }
            continue;
        }
        let t1 = (b.min[i] - o[i]) / d[i];
        let t2 = (b.max[i] - o[i]) / d[i];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > tnear {
            tnear = lo;
            axis = i;
        }
        tfar = tfar.min(hi);
    }
    (tnear <= tfar && tnear > 1e-9).then_some((tnear, axis))
}

/// Flat-shaded raycast of one view.
pub fn render_view(
    scene: &Scene,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    height: usize,
    width: usize,
) -> (RgbImage, DepthMap, PanopticMap) {
    let mut rgb = RgbImage::zeros(height, width);
    let mut depth = vec![0.0; height * width];
    let mut ids = vec![EntityClass::Floor.id(); height * width];
    let o = pose.translation;
    for v in 0..height {
        for u in 0..width {
            // Unit camera-z direction: the ray parameter is the depth.
            let d = pose.rotate(&k.ray(u as f64, v as f64));
            let hit = scene
                .entities
                .iter()
                .filter_map(|e| ray_box(&o, &d, &e.bbox).map(|(t, ax)| (t, ax, e)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let i = v * width + u;
            match hit {
                Some((t, axis, e)) => {
                    let base = if e.class == EntityClass::Floor {
                        floor_color(&[o[0] + t * d[0], o[1] + t * d[1], 0.0])
                    } else {
                        e.class.color()
                    };
                    let shade = [0.8, 0.65, 1.0][axis];
                    rgb.set_pixel(u, v, [base[0] * shade, base[1] * shade, base[2] * shade]);
                    depth[i] = t;
                    ids[i] = e.class.id();
                }
                None => rgb.set_pixel(u, v, BACKGROUND_RGB),
            }
        }
    }
    (
        rgb,
        DepthMap {
            height,
            width,
            values: depth,
        },
        PanopticMap { height, width, ids },
    )
}

/// Camera poses on a ring around the room centre, equally spaced from a
/// seeded base azimuth, pushed outward while inside any box.
pub fn ring_poses(scene: &Scene, n_views: usize, cfg: &RenderConfig, seed: u64) -> Result<Vec<CameraPose>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca3e);
    let base = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut out = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let az = base + i as f64 * std::f64::consts::TAU / n_views as f64;
        let mut r = cfg.ring_radius;
        let mut nudges = 0;
        loop {
            let eye = [r * az.cos(), r * az.sin(), cfg.camera_height];
            if !scene.entities.iter().any(|e| e.bbox.contains(&eye, 0.05)) {
                out.push(CameraPose::look_at(eye, [0.0, 0.0, cfg.target_height])?);
                break;
            }
            nudges += 1;
            if nudges > 100 {
                return Err(Error::Generation {
                    seed: scene.seed,
                    reason: format!("camera {i} still inside a box after 100 nudges"),
                });
            }
            r += 0.1;
        }
    }
    Ok(out)
}

pub fn render_views(
    scene: &Scene,
    scene_id: u64,
    n_views: usize,
    cfg: &RenderConfig,
    text: &SceneText,
) -> Result<Vec<Sample>> {
    if n_views == 0 {
        return Err(Error::Config("n_views must be >= 1".into()));
    }
    let k = cfg.intrinsics();
    let poses = ring_poses(scene, n_views, cfg, scene.seed)?;
    Ok(poses
        .into_iter()
        .enumerate()
        .map(|(view_id, pose)| {
            let (rgb, gt_depth, gt_seg) = render_view(scene, &k, &pose, cfg.height, cfg.width);
            Sample {
                scene_id,
                view_id,
                rgb,
                gt_depth,
                gt_seg,
                intrinsics: k,
                pose,
                triples: scene.relations.clone(),
                description: text.description.clone(),
                qa: text.qa.clone(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneText {
    pub description: String,
    pub qa: Vec<QaPair>,
}

const NUMBER_WORDS: [&str; 4] = ["zero", "one", "two", "three"];

pub fn sentence(t: &Triple) -> String {
    format!(
        "The {} is {} the {}.",
        t.subject.phrase(),
        t.predicate.phrase(),
        t.object.phrase()
    )
}

/// Description (one sentence per triple, canonical order) and QA pairs:
/// relation, existence, counting and nearest-entity questions.
pub fn template_text(scene: &Scene, triples: &[Triple], qa_seed: u64) -> SceneText {
    let mut sorted = triples.to_vec();
    sorted.sort();
    let description = sorted.iter().map(sentence).collect::<Vec<_>>().join(" ");
    let mut rng = ChaCha8Rng::seed_from_u64(qa_seed);
    let mut qa = Vec::new();

    let pairs: BTreeSet<(EntityClass, EntityClass)> = sorted.iter().map(|t| (t.subject, t.object)).collect();
    let pairs: Vec<_> = pairs.into_iter().collect();
    if let Some(&(a, b)) = pairs.choose(&mut rng) {
        let answers = sorted
            .iter()
            .filter(|t| t.subject == a && t.object == b)
            .map(|t| t.predicate.phrase())
            .collect();
        qa.push(QaPair {
            question: format!("Where is the {} relative to the {}?", a.phrase(), b.phrase()),
            answers,
        });
    }

    let present: Vec<EntityClass> = scene.objects().map(|e| e.class).collect();
    let absent: Vec<EntityClass> = EntityClass::ALL[1..].iter().copied().filter(|c| !present.contains(c)).collect();
    let (c, yes) = if rng.gen_bool(0.5) || absent.is_empty() {
        (*present.choose(&mut rng).expect("scene has objects"), true)
    } else {
        (*absent.choose(&mut rng).expect("checked"), false)
    };
    qa.push(QaPair {
        question: format!("Is there a {} in the room?", c.phrase()),
        answers: vec![if yes { "yes" } else { "no" }.into()],
    });

    let people = present.iter().filter(|c| c.is_person()).count();
    qa.push(QaPair {
        question: "How many people are in the room?".into(),
        answers: vec![NUMBER_WORDS[people].into()],
    });

    if present.len() >= 2 {
        let a = *present.choose(&mut rng).expect("nonempty");
        let ca = scene.entity(a).expect("present").bbox.center();
        let dist = |c: EntityClass| {
            let cb = scene.entity(c).expect("present").bbox.center();
            (ca[0] - cb[0]).hypot(ca[1] - cb[1])
        };
        let nearest = present
            .iter()
            .copied()
            .filter(|&c| c != a)
            .min_by(|&x, &y| dist(x).total_cmp(&dist(y)).then(x.cmp(&y)))
            .expect("two objects");
        qa.push(QaPair {
            question: format!("Which object is closest to the {}?", a.phrase()),
            answers: vec![nearest.phrase()],
        });
    }
    SceneText { description, qa }
}

/// Every string the templates can produce, for the closed vocabulary.
pub fn template_inventory() -> Vec<String> {
    let mut texts = vec![
        SGG_QUESTION.to_string(),
        "How many people are in the room?".into(),
        "yes no".into(),
        NUMBER_WORDS.join(" "),
        "; |".into(),
    ];
    for c in EntityClass::ALL {
        texts.push(c.name().into());
        texts.push(format!("Is there a {} in the room?", c.phrase()));
        texts.push(format!("Which object is closest to the {}?", c.phrase()));
        texts.push(format!("Where is the {} relative to the {}?", c.phrase(), c.phrase()));
    }
    for p in Predicate::ALL {
        texts.push(p.name().into());
        texts.push(sentence(&Triple::new(EntityClass::Patient, p, EntityClass::Nurse)));
    }
    texts
}

pub fn vocabulary() -> Vocabulary {
    Vocabulary::from_texts(template_inventory())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl DatasetSplit {
    /// Seeded 60/20/20 partition of scene ids `0..n`.
    pub fn by_scene(n: usize, seed: u64) -> Self {
        let mut ids: Vec<u64> = (0..n as u64).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5b17));
        let n_train = (n as f64 * 0.6).round() as usize;
        let n_val = ((n as f64 * 0.2).round() as usize).min(n - n_train);
        let mut s = Self {
            train: ids[..n_train].to_vec(),
            val: ids[n_train..n_train + n_val].to_vec(),
            test: ids[n_train + n_val..].to_vec(),
        };
        s.train.sort_unstable();
        s.val.sort_unstable();
        s.test.sort_unstable();
        s
    }

    pub fn part(&self, name: &str) -> Result<&[u64]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split `{name}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub scenes: usize,
    pub views: usize,
    pub text_only: bool,
    pub render: RenderConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 300,
            views: 3,
            text_only: false,
            render: RenderConfig::default(),
        }
    }
}

/// One scene with its text, as stored in `scenes.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub scene: Scene,
    pub description: String,
    pub qa: Vec<QaPair>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: Vec<(String, String)>,
    pub vocab: Vocabulary,
    pub split: DatasetSplit,
    pub scenes: Vec<SceneRecord>,
    /// Empty for text-only datasets.
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn is_text_only(&self) -> bool {
        self.meta_value("kind") == Some("text-only")
    }

    pub fn samples_in(&self, part: &str) -> Result<Vec<&Sample>> {
        let ids = self.split.part(part)?;
        Ok(self.samples.iter().filter(|s| ids.binary_search(&s.scene_id).is_ok()).collect())
    }

    pub fn scenes_in(&self, part: &str) -> Result<Vec<&SceneRecord>> {
        let ids = self.split.part(part)?;
        Ok(self.scenes.iter().filter(|s| ids.binary_search(&s.scene_id).is_ok()).collect())
    }
}

fn scene_seed(base: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9).rotate_left(17)
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.scenes == 0 || cfg.views == 0 {
        return Err(Error::Config("scenes and views must be >= 1".into()));
    }
    let built: Vec<(SceneRecord, Vec<Sample>)> = (0..cfg.scenes as u64)
        .into_par_iter()
        .map(|i| {
            let scene = generate_scene(scene_seed(cfg.seed, i))?;
            let text = template_text(&scene, &scene.relations, scene.seed.wrapping_add(1));
            let samples = if cfg.text_only {
                Vec::new()
            } else {
                render_views(&scene, i, cfg.views, &cfg.render, &text)?
            };
            Ok((
                SceneRecord {
                    scene_id: i,
                    scene,
                    description: text.description,
                    qa: text.qa,
                },
                samples,
            ))
        })
        .collect::<Result<_>>()?;
    let vocab = vocabulary();
    let meta = vec![
        ("generator".to_string(), GENERATOR_VERSION.to_string()),
        ("kind".into(), if cfg.text_only { "text-only" } else { "full" }.into()),
        ("seed".into(), cfg.seed.to_string()),
        ("scenes".into(), cfg.scenes.to_string()),
        ("views".into(), cfg.views.to_string()),
        ("height".into(), cfg.render.height.to_string()),
        ("width".into(), cfg.render.width.to_string()),
        ("vocab".into(), "vocab.txt".into()),
        ("vocab_fingerprint".into(), vocab.fingerprint()),
    ];
    let mut scenes = Vec::with_capacity(built.len());
    let mut samples = Vec::new();
    for (r, s) in built {
        scenes.push(r);
        samples.extend(s);
    }
    Ok(Dataset {
        meta,
        vocab,
        split: DatasetSplit::by_scene(cfg.scenes, cfg.seed),
        scenes,
        samples,
    })
}

// ---- serialization ----

/// Writes every float with 17 significant digits.
struct Sig17;

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        write!(w, "{v:.16e}")
    }

    fn write_f32<W: ?Sized + std::io::Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        write!(w, "{:.16e}", v as f64)
    }
}

pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Contract(format!("serialization failed: {e}")))?;
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    scene_id: u64,
    view_id: usize,
    rgb: Vec<Vec<[f64; 3]>>,
    depth: Vec<Vec<f64>>,
    seg: Vec<Vec<u8>>,
    camera: CameraRecord,
    triples: Vec<[String; 3]>,
    description: String,
    qa: Vec<QaPair>,
}

fn rows<T: Clone>(flat: &[T], width: usize) -> Vec<Vec<T>> {
    flat.chunks(width).map(<[T]>::to_vec).collect()
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        let w = s.rgb.width;
        Self {
            scene_id: s.scene_id,
            view_id: s.view_id,
            rgb: s
                .rgb
                .data
                .chunks(3 * w)
                .map(|r| r.chunks(3).map(|p| [p[0], p[1], p[2]]).collect())
                .collect(),
            depth: rows(&s.gt_depth.values, w),
            seg: rows(&s.gt_seg.ids, w),
            camera: CameraRecord {
                fx: s.intrinsics.fx,
                fy: s.intrinsics.fy,
                cx: s.intrinsics.cx,
                cy: s.intrinsics.cy,
                rotation: s.pose.rotation,
                translation: s.pose.translation,
            },
            triples: s
                .triples
                .iter()
                .map(|t| [t.subject.name().into(), t.predicate.name().into(), t.object.name().into()])
                .collect(),
            description: s.description.clone(),
            qa: s.qa.clone(),
        }
    }
}

fn grid<T: Clone>(r: &[Vec<T>], what: &str) -> std::result::Result<(usize, usize, Vec<T>), String> {
    let h = r.len();
    let w = r.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || r.iter().any(|row| row.len() != w) {
        return Err(format!("{what} is not a non-empty rectangular grid"));
    }
    Ok((h, w, r.concat()))
}

impl SampleRecord {
    fn into_sample(self) -> std::result::Result<Sample, String> {
        let (h, w, px) = grid(&self.rgb, "rgb")?;
        let (dh, dw, depth) = grid(&self.depth, "depth")?;
        let (sh, sw, seg) = grid(&self.seg, "seg")?;
        if (dh, dw) != (h, w) || (sh, sw) != (h, w) {
            return Err("rgb, depth and seg sizes differ".into());
        }
        let triples = self
            .triples
            .iter()
            .map(|[s, p, o]| {
                Some(Triple::new(
                    EntityClass::from_name(s)?,
                    Predicate::from_name(p)?,
                    EntityClass::from_name(o)?,
                ))
            })
            .collect::<Option<Vec<_>>>()
            .ok_or("unknown class or predicate in triples")?;
        let c = self.camera;
        Ok(Sample {
            scene_id: self.scene_id,
            view_id: self.view_id,
            rgb: RgbImage::new(h, w, px.concat()).map_err(|e| e.to_string())?,
            gt_depth: DepthMap::new(h, w, depth).map_err(|e| e.to_string())?,
            gt_seg: PanopticMap::new(h, w, seg, NUM_CLASSES).map_err(|e| e.to_string())?,
            intrinsics: CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy).map_err(|e| e.to_string())?,
            pose: CameraPose::new(c.rotation, c.translation).map_err(|e| e.to_string())?,
            triples,
            description: self.description,
            qa: self.qa,
        })
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn format_split(s: &DatasetSplit) -> String {
    let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
    format!("train\t{}\nval\t{}\ntest\t{}\n", join(&s.train), join(&s.val), join(&s.test))
}

fn parse_split(text: &str, path: &Path) -> Result<DatasetSplit> {
    let mut s = DatasetSplit::default();
    let mut seen = 0;
    for (i, line) in text.lines().enumerate() {
        let (name, ids) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, i + 1, "expected `<part>\\t<ids>`"))?;
        let ids = ids
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<Vec<u64>, _>>()
            .map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        match name {
            "train" => s.train = ids,
            "val" => s.val = ids,
            "test" => s.test = ids,
            _ => return Err(parse_err(path, i + 1, format!("unknown part `{name}`"))),
        }
        seen += 1;
    }
    if seen != 3 {
        return Err(parse_err(path, seen + 1, "expected train, val and test lines"));
    }
    Ok(s)
}

pub fn format_meta(meta: &[(String, String)]) -> String {
    meta.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect()
}

pub fn parse_meta(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| parse_err(path, i + 1, "expected `<key>\\t<value>`"))
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        f.write_all(to_json_line(&it)?.as_bytes())?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| parse_err(path, i + 1, e.to_string()))
        })
        .collect()
}

/// Writes `meta`, `vocab.txt`, `split`, `scenes.jsonl` and (for full
/// datasets) `samples.jsonl` into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("meta"), format_meta(&ds.meta))?;
    std::fs::write(dir.join("vocab.txt"), ds.vocab.to_file_string())?;
    std::fs::write(dir.join("split"), format_split(&ds.split))?;
    write_jsonl(&dir.join("scenes.jsonl"), ds.scenes.iter())?;
    if !ds.is_text_only() {
        write_jsonl(&dir.join("samples.jsonl"), ds.samples.iter().map(SampleRecord::from))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta");
    let meta = parse_meta(&std::fs::read_to_string(&meta_path)?, &meta_path)?;
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let split_path = dir.join("split");
    let split = parse_split(&std::fs::read_to_string(&split_path)?, &split_path)?;
    let scenes = read_jsonl::<SceneRecord>(&dir.join("scenes.jsonl"))?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let mut ds = Dataset {
        meta,
        vocab,
        split,
        scenes,
        samples: Vec::new(),
    };
    if !ds.is_text_only() {
        let path = dir.join("samples.jsonl");
        for (line, r) in read_jsonl::<SampleRecord>(&path)? {
            ds.samples.push(r.into_sample().map_err(|m| parse_err(&path, line, m))?);
        }
    }
    Ok(ds)
}
