//! Synthetic scenes whose interaction labels are decided by small local cues.
//!
//! Humans share one glyph, every object class has its own colour and stripe
//! pattern. When a human interacts with an entity, the entity is placed next
//! to the human and carries a small cue square whose colour and position on
//! the entity identify the verb. The cue grammar does not depend on the
//! object class, so any (object, verb) pair can be rendered.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::category::CategorySpace;
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct CueRule {
    /// Cue centre relative to the entity box, in `[0,1]²`.
    pub anchor: (f64, f64),
    pub color: [f32; 3],
}

/// One cue rule per verb, indexed by verb.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRules {
    pub cues: Vec<CueRule>,
}

const CUE_ANCHORS: [(f64, f64); 9] = [
    (0.25, 0.25),
    (0.75, 0.25),
    (0.25, 0.75),
    (0.75, 0.75),
    (0.5, 0.5),
    (0.5, 0.2),
    (0.5, 0.8),
    (0.2, 0.5),
    (0.8, 0.5),
];

const CUE_COLORS: [[f32; 3]; 8] = [
    [1.0, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.1, 0.3, 1.0],
    [1.0, 0.9, 0.1],
    [1.0, 0.1, 1.0],
    [0.1, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.6, 0.0, 1.0],
];

const CUE_TOLERANCE: f32 = 0.12;
const HUMAN_COLOR: [f32; 3] = [0.80, 0.66, 0.52];
const HUMAN_HEAD: [f32; 3] = [0.92, 0.80, 0.68];

impl InteractionRules {
    /// Distinct (anchor, colour) per verb; supports up to 72 verbs.
    pub fn standard(n_verbs: usize) -> Result<Self> {
        if n_verbs > CUE_ANCHORS.len() * CUE_COLORS.len() {
            return Err(Error::invalid(format!("at most 72 verbs supported, got {n_verbs}")));
        }
        let cues = (0..n_verbs)
            .map(|v| CueRule {
                anchor: CUE_ANCHORS[v % CUE_ANCHORS.len()],
                color: CUE_COLORS[(v + v / CUE_ANCHORS.len()) % CUE_COLORS.len()],
            })
            .collect();
        Ok(Self { cues })
    }

    /// The verb a set of observed cues decides, if exactly one cue is present.
    pub fn decide(&self, present: &[bool]) -> Option<usize> {
        let mut hits = present.iter().enumerate().filter(|(_, &p)| p).map(|(v, _)| v);
        match (hits.next(), hits.next()) {
            (Some(v), None) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub max_humans: usize,
    pub max_objects: usize,
    pub space: CategorySpace,
    pub rules: InteractionRules,
    /// Cue side as a fraction of the entity's shorter side (capped at one patch).
    pub cue_scale: f64,
    pub frequency_weights: Vec<f64>,
    /// Probability that a human interacts with something.
    pub interact_prob: f64,
}

impl SceneSpec {
    pub fn new(space: CategorySpace) -> Result<Self> {
        let rules = InteractionRules::standard(space.num_verbs())?;
        let n = space.num_categories();
        let spec = Self {
            image_size: 64,
            patch_size: 8,
            max_humans: 2,
            max_objects: 3,
            space,
            rules,
            cue_scale: 0.25,
            frequency_weights: vec![1.0; n],
            interact_prob: 0.85,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.image_size < 32 {
            return Err(Error::invalid("image size must be at least 32 pixels"));
        }
        if self.rules.cues.len() < self.space.num_verbs() {
            return Err(Error::invalid("some verb has no cue rule"));
        }
        if self.frequency_weights.len() != self.space.num_categories()
            || self.frequency_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.frequency_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::invalid("frequency weights must be nonnegative, one per category"));
        }
        if !(0.0..=1.0).contains(&self.interact_prob) || !(self.cue_scale > 0.0 && self.cue_scale <= 0.5) {
            return Err(Error::invalid("interact_prob must be in [0,1] and cue_scale in (0, 0.5]"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    fn cue_side(&self, w: usize, h: usize) -> usize {
        let side = (self.cue_scale * w.min(h) as f64).round() as usize;
        side.clamp(2, self.patch_size.max(2))
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` (exclusive end) of the verb's cue on an entity.
    pub fn cue_rect(&self, verb: usize, bbox: &BBox) -> (usize, usize, usize, usize) {
        let (x0, y0, x1, y1) = to_pixels(bbox, self.image_size);
        let side = self.cue_side(x1 - x0, y1 - y0);
        let (ax, ay) = self.rules.cues[verb].anchor;
        let cx = x0 as f64 + ax * (x1 - x0) as f64;
        let cy = y0 as f64 + ay * (y1 - y0) as f64;
        let sx = ((cx - side as f64 / 2.0).round() as usize).clamp(x0, x1 - side);
        let sy = ((cy - side as f64 / 2.0).round() as usize).clamp(y0, y1 - side);
        (sx, sy, sx + side, sy + side)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub bbox: BBox,
    pub class: usize,
}

/// Ground-truth HOI instance; `human` and `object` index `Scene::entities`.
#[derive(Debug, Clone, PartialEq)]
pub struct HoiInstance {
    pub human: usize,
    pub object: usize,
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub verb: usize,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub size: usize,
    /// `size × size × 3`, row-major, values in `[0,1]`.
    pub pixels: Vec<f32>,
    pub entities: Vec<Entity>,
    pub instances: Vec<HoiInstance>,
}

impl Scene {
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.size + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    fn fill(&mut self, rect: (usize, usize, usize, usize), color: [f32; 3]) {
        let (x0, y0, x1, y1) = rect;
        for y in y0..y1 {
            for x in x0..x1 {
                let o = (y * self.size + x) * 3;
                self.pixels[o..o + 3].copy_from_slice(&color);
            }
        }
    }

    /// Paints over an instance's cue with the entity's base colour.
    pub fn mask_cue(&mut self, spec: &SceneSpec, instance: usize) {
        let inst = &self.instances[instance];
        let rect = spec.cue_rect(inst.verb, &inst.object_box);
        let color = base_color(&spec.space, self.entities[inst.object].class);
        self.fill(rect, color);
    }
}

pub fn to_pixels(b: &BBox, size: usize) -> (usize, usize, usize, usize) {
    let s = size as f64;
    (
        (b[0] * s).round() as usize,
        (b[1] * s).round() as usize,
        (b[2] * s).round() as usize,
        (b[3] * s).round() as usize,
    )
}

fn from_pixels(x0: usize, y0: usize, w: usize, h: usize, size: usize) -> BBox {
    let s = size as f64;
    [x0 as f64 / s, y0 as f64 / s, (x0 + w) as f64 / s, (y0 + h) as f64 / s]
}

fn base_color(space: &CategorySpace, class: usize) -> [f32; 3] {
    if class == space.human() {
        return HUMAN_COLOR;
    }
    // muted hues, well away from the saturated cue palette
    let hue = class as f32 * 0.618_034 % 1.0;
    let (s, v) = (0.35, 0.55);
    let i = (hue * 6.0).floor();
    let f = hue * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn draw_entity(scene: &mut Scene, space: &CategorySpace, e: &Entity) {
    let (x0, y0, x1, y1) = to_pixels(&e.bbox, scene.size);
    let color = base_color(space, e.class);
    scene.fill((x0, y0, x1, y1), color);
    if e.class == space.human() {
        let head = y0 + (y1 - y0) / 3;
        scene.fill((x0 + 2, y0, x1 - 2, head), HUMAN_HEAD);
        return;
    }
    let dark = [color[0] * 0.6, color[1] * 0.6, color[2] * 0.6];
    let period = 2 + e.class % 3;
    for y in y0..y1 {
        for x in x0..x1 {
            let on = if e.class.is_multiple_of(2) { (y - y0) % period == 0 } else { (x - x0) % period == 0 };
            if on {
                scene.fill((x, y, x + 1, y + 1), dark);
            }
        }
    }
}

type PxRect = (usize, usize, usize, usize);

fn overlaps(a: PxRect, b: PxRect, margin: usize) -> bool {
    a.0 < b.2 + margin && b.0 < a.2 + margin && a.1 < b.3 + margin && b.1 < a.3 + margin
}

const PLACEMENT_TRIES: usize = 200;
const SCENE_RESTARTS: usize = 50;
const MARGIN: usize = 2;

struct Layout<'a> {
    spec: &'a SceneSpec,
    rects: Vec<PxRect>,
}

impl Layout<'_> {
    fn free(&self, r: PxRect, except: Option<usize>) -> bool {
        let size = self.spec.image_size;
        r.2 <= size
            && r.3 <= size
            && self
                .rects
                .iter()
                .enumerate()
                .all(|(i, &o)| Some(i) == except || !overlaps(r, o, MARGIN))
    }

    fn entity_dims(&self, human: bool, rng: &mut impl Rng) -> (usize, usize) {
        let s = self.spec.image_size as f64 / 64.0;
        let px = |lo: f64, hi: f64, rng: &mut dyn rand::RngCore| {
            rng.gen_range((lo * s).round() as usize..=(hi * s).round() as usize)
        };
        if human {
            (px(10.0, 16.0, rng), px(18.0, 26.0, rng))
        } else {
            (px(14.0, 22.0, rng), px(14.0, 22.0, rng))
        }
    }

    fn place_free(&mut self, w: usize, h: usize, rng: &mut impl Rng) -> Option<PxRect> {
        let size = self.spec.image_size;
        for _ in 0..PLACEMENT_TRIES {
            let x = rng.gen_range(0..=size - w);
            let y = rng.gen_range(0..=size - h);
            let r = (x, y, x + w, y + h);
            if self.free(r, None) {
                self.rects.push(r);
                return Some(r);
            }
        }
        None
    }

    /// Places a partner touching the left or right side of `anchor`.
    fn place_adjacent(&mut self, anchor: usize, w: usize, h: usize, rng: &mut impl Rng) -> Option<PxRect> {
        let a = self.rects[anchor];
        let size = self.spec.image_size as isize;
        for _ in 0..PLACEMENT_TRIES {
            let gap = rng.gen_range(0..=1) as isize;
            let x = if rng.gen_bool(0.5) {
                a.2 as isize + gap
            } else {
                a.0 as isize - gap - w as isize
            };
            let y_lo = a.1 as isize - h as isize / 2;
            let y_hi = a.3 as isize - h as isize / 2;
            let y = rng.gen_range(y_lo..=y_hi);
            if x < 0 || y < 0 || x + w as isize > size || y + h as isize > size {
                continue;
            }
            let r = (x as usize, y as usize, x as usize + w, y as usize + h);
            if self.free(r, Some(anchor)) && !overlaps(r, a, 0) {
                self.rects.push(r);
                return Some(r);
            }
        }
        None
    }
}

/// Renders one scene; a pure function of `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = WeightedIndex::new(&spec.frequency_weights)
        .map_err(|e| Error::invalid(format!("frequency weights: {e}")))?;
    for _ in 0..SCENE_RESTARTS {
        if let Some(scene) = try_generate(spec, &weights, &mut rng) {
            return Ok(scene);
        }
    }
    Err(Error::Generation(format!(
        "no valid placement after {SCENE_RESTARTS} attempts (seed {seed})"
    )))
}

fn try_generate(spec: &SceneSpec, weights: &WeightedIndex<f64>, rng: &mut ChaCha8Rng) -> Option<Scene> {
    let space = &spec.space;
    let size = spec.image_size;
    let human = space.human();
    let mut layout = Layout {
        spec,
        rects: Vec::new(),
    };
    let mut entities: Vec<Entity> = Vec::new();
    // (subject entity, target entity, category)
    let mut links: Vec<(usize, usize, usize)> = Vec::new();

    let n_humans = if spec.max_humans == 0 { 0 } else { rng.gen_range(1..=spec.max_humans) };
    let mut objects_used = 0;
    for _ in 0..n_humans {
        let (w, h) = layout.entity_dims(true, rng);
        let r = layout.place_free(w, h, rng)?;
        let subject = entities.len();
        entities.push(Entity {
            bbox: from_pixels(r.0, r.1, w, h, size),
            class: human,
        });
        if !rng.gen_bool(spec.interact_prob) {
            continue;
        }
        let cat = weights.sample(rng);
        let (object, _) = space.categories()[cat];
        if object != human && objects_used >= spec.max_objects {
            continue;
        }
        let (w, h) = layout.entity_dims(object == human, rng);
        let r = layout.place_adjacent(subject, w, h, rng)?;
        if object != human {
            objects_used += 1;
        }
        links.push((subject, entities.len(), cat));
        entities.push(Entity {
            bbox: from_pixels(r.0, r.1, w, h, size),
            class: object,
        });
    }
    let non_human: Vec<usize> = (0..space.num_objects()).filter(|&o| o != human).collect();
    if !non_human.is_empty() && objects_used < spec.max_objects {
        let extra = rng.gen_range(0..=spec.max_objects - objects_used);
        for _ in 0..extra {
            let class = non_human[rng.gen_range(0..non_human.len())];
            let (w, h) = layout.entity_dims(false, rng);
            let r = layout.place_free(w, h, rng)?;
            entities.push(Entity {
                bbox: from_pixels(r.0, r.1, w, h, size),
                class,
            });
        }
    }

    let mut scene = Scene {
        size,
        pixels: Vec::with_capacity(size * size * 3),
        entities: Vec::new(),
        instances: Vec::new(),
    };
    for _ in 0..size * size {
        let n: f32 = rng.gen_range(-0.03..0.03);
        scene.pixels.extend_from_slice(&[0.15 + n, 0.15 + n, 0.18 + n]);
    }
    for e in &entities {
        draw_entity(&mut scene, space, e);
    }
    for &(subject, target, cat) in &links {
        let (object_class, verb) = space.categories()[cat];
        let rect = spec.cue_rect(verb, &entities[target].bbox);
        scene.fill(rect, spec.rules.cues[verb].color);
        scene.instances.push(HoiInstance {
            human: subject,
            object: target,
            human_box: entities[subject].bbox,
            object_box: entities[target].bbox,
            object_class,
            verb,
            category: cat,
        });
    }
    scene.entities = entities;
    Some(scene)
}

/// Reads the cue grammar off the pixels of one entity.
pub fn extract_verb(spec: &SceneSpec, scene: &Scene, entity: usize) -> Option<usize> {
    let bbox = scene.entities[entity].bbox;
    let present: Vec<bool> = (0..spec.space.num_verbs())
        .map(|v| {
            let (x0, y0, x1, y1) = spec.cue_rect(v, &bbox);
            let target = spec.rules.cues[v].color;
            (y0..y1).all(|y| {
                (x0..x1).all(|x| {
                    let p = scene.pixel(x, y);
                    (0..3).all(|c| (p[c] - target[c]).abs() <= CUE_TOLERANCE)
                })
            })
        })
        .collect();
    spec.rules.decide(&present)
}
