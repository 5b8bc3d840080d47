use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::{GeodesicField, OccGrid};
use crate::error::{Error, Result};
use crate::geom::{self, Point};

/// Category id used for walls; objects use `1..K`.
pub const WALL_CATEGORY: usize = 0;
pub const COLORS: [&str; 3] = ["red", "green", "blue"];
pub const MATERIALS: [&str; 2] = ["wood", "metal"];

pub const DESK_CATEGORIES: [&str; 8] = [
    "wall", "chair", "table", "sofa", "bed", "plant", "cabinet", "stool",
];

pub const CM2_CATEGORIES: [&str; 27] = [
    "void",
    "chair",
    "door",
    "table",
    "cushion",
    "sofa",
    "bed",
    "plant",
    "sink",
    "toilet",
    "tv-monitor",
    "shower",
    "bathtub",
    "counter",
    "appliances",
    "structure",
    "other",
    "free-space",
    "picture",
    "cabinet",
    "chest-of-drawers",
    "stool",
    "towel",
    "fireplace",
    "gym-equipment",
    "seating",
    "clothes",
];

/// Word for each category id under a naming preset (`desk` or `cm2`).
pub fn category_names(preset: &str, k: usize) -> Vec<String> {
    let base: &[&str] = if preset == "cm2" {
        &CM2_CATEGORIES
    } else {
        &DESK_CATEGORIES
    };
    (0..k)
        .map(|i| {
            base.get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("object{i}"))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Footprint {
    Disc { radius: f64 },
    Rect { half_x: f64, half_y: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub center: Point,
    pub footprint: Footprint,
    pub category_id: usize,
    pub attributes: Vec<f32>,
}

/// Bit width of the category code at the front of an attribute vector.
pub fn shape_bits(categories: usize) -> usize {
    (usize::BITS - (categories.max(2) - 1).leading_zeros()) as usize
}

impl SceneObject {
    fn corners(&self, hx: f64, hy: f64) -> [Point; 4] {
        let c = self.center;
        [
            Point::new(c.x - hx, c.y - hy),
            Point::new(c.x + hx, c.y - hy),
            Point::new(c.x + hx, c.y + hy),
            Point::new(c.x - hx, c.y + hy),
        ]
    }

    fn edges(&self, hx: f64, hy: f64) -> [(Point, Point); 4] {
        let k = self.corners(hx, hy);
        [(k[0], k[1]), (k[1], k[2]), (k[2], k[3]), (k[3], k[0])]
    }

    /// Strict interior test.
    pub fn contains(&self, p: Point) -> bool {
        let d = p.sub(self.center);
        match self.footprint {
            Footprint::Disc { radius } => d.norm() < radius,
            Footprint::Rect { half_x, half_y } => d.x.abs() < half_x && d.y.abs() < half_y,
        }
    }

    /// Distance from `p` to the footprint, 0 inside.
    pub fn distance(&self, p: Point) -> f64 {
        let d = p.sub(self.center);
        match self.footprint {
            Footprint::Disc { radius } => (d.norm() - radius).max(0.0),
            Footprint::Rect { half_x, half_y } => {
                let ox = (d.x.abs() - half_x).max(0.0);
                let oy = (d.y.abs() - half_y).max(0.0);
                ox.hypot(oy)
            }
        }
    }

    pub fn distance_to_segment(&self, a: Point, b: Point) -> f64 {
        match self.footprint {
            Footprint::Disc { radius } => {
                (geom::point_segment(self.center, a, b).0 - radius).max(0.0)
            }
            Footprint::Rect { half_x, half_y } => {
                if self.contains(a) || self.contains(b) {
                    return 0.0;
                }
                self.edges(half_x, half_y)
                    .iter()
                    .map(|(p, q)| geom::segment_segment(a, b, *p, *q))
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }

    pub fn distance_to_object(&self, o: &SceneObject) -> f64 {
        match (self.footprint, o.footprint) {
            (Footprint::Disc { radius }, _) => (o.distance(self.center) - radius).max(0.0),
            (_, Footprint::Disc { radius }) => (self.distance(o.center) - radius).max(0.0),
            (Footprint::Rect { half_x, half_y }, _) => self
                .edges(half_x, half_y)
                .iter()
                .map(|(a, b)| o.distance_to_segment(*a, *b))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Ray entry distance and the surface tangent at the hit.
    pub fn ray(&self, o: Point, d: Point) -> Option<(f64, Point)> {
        match self.footprint {
            Footprint::Disc { radius } => geom::ray_disc(o, d, self.center, radius).map(|t| {
                let n = o.add(d.scale(t)).sub(self.center);
                (t, Point::new(-n.y, n.x).scale(1.0 / n.norm().max(1e-12)))
            }),
            Footprint::Rect { half_x, half_y } => self
                .edges(half_x, half_y)
                .iter()
                .filter_map(|(a, b)| {
                    geom::ray_segment(o, d, *a, *b).map(|t| (t, b.sub(*a).scale(1.0 / a.dist(*b))))
                })
                .min_by(|x, y| x.0.total_cmp(&y.0)),
        }
    }

    /// Extent radius: a disc containing the footprint.
    pub fn extent(&self) -> f64 {
        match self.footprint {
            Footprint::Disc { radius } => radius,
            Footprint::Rect { half_x, half_y } => half_x.hypot(half_y),
        }
    }

    pub fn color(&self, categories: usize) -> usize {
        argmax(&self.attributes[shape_bits(categories)..shape_bits(categories) + 3])
    }

    pub fn material(&self, categories: usize) -> usize {
        let o = shape_bits(categories) + 3;
        argmax(&self.attributes[o..o + 2])
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Wall {
    pub a: Point,
    pub b: Point,
}

impl From<[f64; 4]> for Wall {
    fn from(v: [f64; 4]) -> Self {
        Wall {
            a: Point::new(v[0], v[1]),
            b: Point::new(v[2], v[3]),
        }
    }
}

impl From<Wall> for [f64; 4] {
    fn from(w: Wall) -> Self {
        [w.a.x, w.a.y, w.b.x, w.b.y]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl From<[f64; 4]> for Bounds {
    fn from(v: [f64; 4]) -> Self {
        Bounds {
            min: Point::new(v[0], v[1]),
            max: Point::new(v[2], v[3]),
        }
    }
}

impl From<Bounds> for [f64; 4] {
    fn from(b: Bounds) -> Self {
        [b.min.x, b.min.y, b.max.x, b.max.y]
    }
}

impl Bounds {
    pub fn size(&self) -> Point {
        self.max.sub(self.min)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x > self.min.x && p.y > self.min.y && p.x < self.max.x && p.y < self.max.y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub width: f64,
    pub height: f64,
    pub rooms: usize,
    pub objects: usize,
    pub ambiguity_fraction: f64,
    pub categories: usize,
    pub attr_dim: usize,
    pub clearance: f64,
    pub grid_cell: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 12.0,
            height: 10.0,
            rooms: 3,
            objects: 10,
            ambiguity_fraction: 0.3,
            categories: 8,
            attr_dim: 8,
            clearance: 0.15,
            grid_cell: 0.06,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HitTarget {
    Wall(usize),
    Object(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub target: HitTarget,
    /// Unit direction along the surface at the hit.
    pub tangent: Point,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    pub bounds: Bounds,
    pub walls: Vec<Wall>,
    pub objects: Vec<SceneObject>,
    pub categories: usize,
    pub attr_dim: usize,
    pub grid: OccGrid,
}

impl PartialEq for Scene {
    fn eq(&self, o: &Self) -> bool {
        self.id == o.id
            && self.bounds == o.bounds
            && self.walls == o.walls
            && self.objects == o.objects
    }
}

impl Scene {
    pub fn new(
        id: impl Into<String>,
        bounds: Bounds,
        walls: Vec<Wall>,
        objects: Vec<SceneObject>,
        categories: usize,
        attr_dim: usize,
        clearance: f64,
        grid_cell: f64,
    ) -> Self {
        let grid = {
            let clearance_of = |p: Point| {
                let w = walls
                    .iter()
                    .map(|w| geom::point_segment(p, w.a, w.b).0)
                    .fold(f64::INFINITY, f64::min);
                let o = objects
                    .iter()
                    .map(|o| o.distance(p))
                    .fold(f64::INFINITY, f64::min);
                w.min(o)
            };
            OccGrid::build(
                bounds.min,
                bounds.size(),
                grid_cell,
                clearance,
                clearance_of,
            )
        };
        Scene {
            id: id.into(),
            bounds,
            walls,
            objects,
            categories,
            attr_dim,
            grid,
        }
    }

    /// Rectangle room with its four boundary walls and the given objects.
    pub fn empty_room(width: f64, height: f64, objects: Vec<SceneObject>) -> Self {
        let b = Bounds {
            min: Point::new(0.0, 0.0),
            max: Point::new(width, height),
        };
        let p = SceneParams::default();
        Scene::new(
            "room",
            b,
            boundary_walls(&b),
            objects,
            p.categories,
            p.attr_dim,
            p.clearance,
            p.grid_cell,
        )
    }

    /// Inside an object footprint or outside the bounds.
    pub fn in_obstacle(&self, p: Point) -> bool {
        !self.bounds.contains(p) || self.objects.iter().any(|o| o.contains(p))
    }

    /// Nearest surface along the ray `o + t·d`, `t ∈ [0, max]`.
    pub fn raycast(&self, o: Point, d: Point, max: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, target: HitTarget, tangent: Point| {
            if t <= max && best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, target, tangent });
            }
        };
        for (i, w) in self.walls.iter().enumerate() {
            if let Some(t) = geom::ray_segment(o, d, w.a, w.b) {
                consider(
                    t,
                    HitTarget::Wall(i),
                    w.b.sub(w.a).scale(1.0 / w.a.dist(w.b)),
                );
            }
        }
        for (i, ob) in self.objects.iter().enumerate() {
            if let Some((t, tan)) = ob.ray(o, d) {
                consider(t, HitTarget::Object(i), tan);
            }
        }
        best
    }

    /// Geodesic field from `source`; errors when the source is inside an obstacle.
    pub fn geodesic_field(&self, source: Point) -> Result<GeodesicField> {
        if self.in_obstacle(source) {
            return Err(Error::Domain(format!(
                "geodesic source ({:.3}, {:.3}) lies inside an obstacle",
                source.x, source.y
            )));
        }
        self.grid.field(&[source])
    }

    pub fn wall_feature(&self) -> Vec<f32> {
        wall_feature(self.categories, self.attr_dim)
    }
}

pub fn boundary_walls(b: &Bounds) -> Vec<Wall> {
    let (a, c) = (b.min, b.max);
    vec![
        Wall {
            a,
            b: Point::new(c.x, a.y),
        },
        Wall {
            a: Point::new(c.x, a.y),
            b: c,
        },
        Wall {
            a: c,
            b: Point::new(a.x, c.y),
        },
        Wall {
            a: Point::new(a.x, c.y),
            b: a,
        },
    ]
}

/// Reserved wall feature: zero category code, neutral color, all materials.
pub fn wall_feature(categories: usize, attr_dim: usize) -> Vec<f32> {
    let sb = shape_bits(categories);
    (0..attr_dim)
        .map(|i| match i {
            i if i < sb => 0.0,
            i if i < sb + 3 => 0.5,
            i if i < sb + 5 => 1.0,
            _ => 0.5,
        })
        .collect()
}

pub fn object_attributes(
    category: usize,
    color: usize,
    material: usize,
    categories: usize,
    attr_dim: usize,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let sb = shape_bits(categories);
    let mut v = vec![0.0f32; attr_dim];
    for (b, slot) in v.iter_mut().enumerate().take(sb) {
        *slot = ((category >> b) & 1) as f32;
    }
    v[sb + color] = 1.0;
    v[sb + 3 + material] = 1.0;
    for slot in v.iter_mut().skip(sb + 5) {
        *slot = rng.gen_range(0.0..1.0);
    }
    for slot in v.iter_mut() {
        *slot = (*slot + rng.gen_range(-0.05f32..0.05)).clamp(0.0, 1.0);
    }
    v
}

/// Radius within which a same-category pair counts as ambiguous.
pub const AMBIGUITY_RADIUS: f64 = 4.0;

const OBJECT_WALL_GAP: f64 = 0.5;
const OBJECT_OBJECT_GAP: f64 = 0.6;
const DOOR_GAP: f64 = 0.9;

struct Layout {
    walls: Vec<Wall>,
    doors: Vec<Point>,
}

fn door_wall(
    rng: &mut ChaCha8Rng,
    a: Point,
    b: Point,
    walls: &mut Vec<Wall>,
    doors: &mut Vec<Point>,
) {
    let len = a.dist(b);
    let width = rng.gen_range(1.0..1.2);
    let c = rng.gen_range(0.8 + width / 2.0..len - 0.8 - width / 2.0);
    let dir = b.sub(a).scale(1.0 / len);
    let d0 = a.add(dir.scale(c - width / 2.0));
    let d1 = a.add(dir.scale(c + width / 2.0));
    walls.push(Wall { a, b: d0 });
    walls.push(Wall { a: d1, b });
    doors.push(a.add(dir.scale(c)));
}

fn layout(rng: &mut ChaCha8Rng, p: &SceneParams, bounds: &Bounds) -> Layout {
    let mut walls = boundary_walls(bounds);
    let mut doors = Vec::new();
    let (w, h) = (p.width, p.height);
    if p.rooms >= 2 {
        let xv = w * rng.gen_range(0.4..0.6);
        door_wall(
            rng,
            Point::new(xv, 0.0),
            Point::new(xv, h),
            &mut walls,
            &mut doors,
        );
        if p.rooms >= 3 {
            let yh = h * rng.gen_range(0.4..0.6);
            door_wall(
                rng,
                Point::new(0.0, yh),
                Point::new(xv, yh),
                &mut walls,
                &mut doors,
            );
        }
        if p.rooms >= 4 {
            let yh = h * rng.gen_range(0.4..0.6);
            door_wall(
                rng,
                Point::new(xv, yh),
                Point::new(w, yh),
                &mut walls,
                &mut doors,
            );
        }
    }
    Layout { walls, doors }
}

fn random_footprint(rng: &mut ChaCha8Rng) -> Footprint {
    if rng.gen_bool(0.5) {
        Footprint::Disc {
            radius: rng.gen_range(0.2..0.4),
        }
    } else {
        Footprint::Rect {
            half_x: rng.gen_range(0.2..0.45),
            half_y: rng.gen_range(0.2..0.45),
        }
    }
}

fn fits(o: &SceneObject, lay: &Layout, placed: &[SceneObject], bounds: &Bounds) -> bool {
    let e = o.extent();
    if o.center.x - e < bounds.min.x + OBJECT_WALL_GAP
        || o.center.y - e < bounds.min.y + OBJECT_WALL_GAP
        || o.center.x + e > bounds.max.x - OBJECT_WALL_GAP
        || o.center.y + e > bounds.max.y - OBJECT_WALL_GAP
    {
        return false;
    }
    lay.walls
        .iter()
        .all(|w| o.distance_to_segment(w.a, w.b) >= OBJECT_WALL_GAP)
        && lay.doors.iter().all(|d| o.distance(*d) >= DOOR_GAP)
        && placed
            .iter()
            .all(|q| o.distance_to_object(q) >= OBJECT_OBJECT_GAP)
}

fn no_same_category_near(
    center: Point,
    category: usize,
    placed: &[SceneObject],
    except: Option<usize>,
) -> bool {
    placed.iter().enumerate().all(|(i, q)| {
        Some(i) == except || q.category_id != category || q.center.dist(center) > AMBIGUITY_RADIUS
    })
}

fn random_center(rng: &mut ChaCha8Rng, b: &Bounds) -> Point {
    Point::new(
        rng.gen_range(b.min.x..b.max.x),
        rng.gen_range(b.min.y..b.max.y),
    )
}

fn place_objects(
    rng: &mut ChaCha8Rng,
    p: &SceneParams,
    lay: &Layout,
    bounds: &Bounds,
) -> Option<Vec<SceneObject>> {
    let n_amb = (p.ambiguity_fraction * p.objects as f64 - 1e-9)
        .ceil()
        .max(0.0) as usize;
    let pairs = n_amb.div_ceil(2);
    let mut placed: Vec<SceneObject> = Vec::with_capacity(p.objects);
    let (k, f) = (p.categories, p.attr_dim);
    for _ in 0..pairs {
        let category = rng.gen_range(1..k);
        let footprint = random_footprint(rng);
        let combo_a = rng.gen_range(0..6usize);
        let combo_b = (combo_a + rng.gen_range(1..6usize)) % 6;
        let mut done = false;
        for _ in 0..400 {
            let first = SceneObject {
                center: random_center(rng, bounds),
                footprint,
                category_id: category,
                attributes: object_attributes(category, combo_a / 2, combo_a % 2, k, f, rng),
            };
            if !fits(&first, lay, &placed, bounds)
                || !no_same_category_near(first.center, category, &placed, None)
            {
                continue;
            }
            let n0 = placed.len();
            placed.push(first);
            for _ in 0..100 {
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = rng.gen_range(1.2..AMBIGUITY_RADIUS - 0.5);
                let second = SceneObject {
                    center: placed[n0].center.add(Point::unit(ang).scale(r)),
                    footprint,
                    category_id: category,
                    attributes: object_attributes(category, combo_b / 2, combo_b % 2, k, f, rng),
                };
                if fits(&second, lay, &placed, bounds)
                    && no_same_category_near(second.center, category, &placed, Some(n0))
                {
                    placed.push(second);
                    done = true;
                    break;
                }
            }
            if done {
                break;
            }
            placed.pop();
        }
        if !done {
            return None;
        }
    }
    let mut guard = 0;
    while placed.len() < p.objects {
        guard += 1;
        if guard > 4000 {
            return None;
        }
        let center = random_center(rng, bounds);
        let allowed: Vec<usize> = (1..k)
            .filter(|&c| no_same_category_near(center, c, &placed, None))
            .collect();
        if allowed.is_empty() {
            continue;
        }
        let category = allowed[rng.gen_range(0..allowed.len())];
        let combo = rng.gen_range(0..6usize);
        let o = SceneObject {
            center,
            footprint: random_footprint(rng),
            category_id: category,
            attributes: object_attributes(category, combo / 2, combo % 2, k, f, rng),
        };
        if fits(&o, lay, &placed, bounds) {
            placed.push(o);
        }
    }
    Some(placed)
}

pub fn validate_params(p: &SceneParams) -> Result<()> {
    if p.categories < 2 {
        return Err(Error::Config("world.categories must be at least 2".into()));
    }
    if p.attr_dim < shape_bits(p.categories) + 5 {
        return Err(Error::Config(format!(
            "world.attr_dim must be at least {} for {} categories",
            shape_bits(p.categories) + 5,
            p.categories
        )));
    }
    if !(1..=4).contains(&p.rooms) {
        return Err(Error::Config("world.rooms must be in 1..=4".into()));
    }
    if !(0.0..=1.0).contains(&p.ambiguity_fraction) {
        return Err(Error::Config(
            "world.ambiguity_fraction must be in [0, 1]".into(),
        ));
    }
    if p.width < 4.0 || p.height < 4.0 {
        return Err(Error::Config("world extent must be at least 4 m".into()));
    }
    Ok(())
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, p: &SceneParams) -> Result<Scene> {
    validate_params(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = Bounds {
        min: Point::new(0.0, 0.0),
        max: Point::new(p.width, p.height),
    };
    for _ in 0..40 {
        let lay = layout(&mut rng, p, &bounds);
        let Some(objects) = place_objects(&mut rng, p, &lay, &bounds) else {
            continue;
        };
        let scene = Scene::new(
            format!("scene-{seed}"),
            bounds,
            lay.walls,
            objects,
            p.categories,
            p.attr_dim,
            p.clearance,
            p.grid_cell,
        );
        let free = scene.grid.blocked.iter().filter(|b| !**b).count();
        let comp = scene.grid.component.iter().filter(|c| **c).count();
        if comp * 10 >= free * 9 {
            return Ok(scene);
        }
    }
    Err(Error::Generation(format!(
        "could not place {} objects in {} room(s) for seed {seed}",
        p.objects, p.rooms
    )))
}

/// Objects with a same-category partner within the ambiguity radius.
pub fn ambiguous_objects(scene: &Scene) -> Vec<usize> {
    let o = &scene.objects;
    (0..o.len())
        .filter(|&i| {
            (0..o.len()).any(|j| {
                j != i
                    && o[j].category_id == o[i].category_id
                    && o[i].center.dist(o[j].center) <= AMBIGUITY_RADIUS
            })
        })
        .collect()
}
