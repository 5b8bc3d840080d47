use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{category_names, Scene, COLORS, MATERIALS};
use crate::error::{Error, Result};
use crate::geom::{self, Point, Pose};

const GRAMMAR: [&str; 8] = ["<pad>", "go", "past", "the", "and", "then", "stop", "near"];

/// Token table; id 0 is padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(category_words: &[String]) -> Self {
        let mut tokens: Vec<String> = GRAMMAR.iter().map(|s| s.to_string()).collect();
        tokens.extend(COLORS.iter().map(|s| s.to_string()));
        tokens.extend(MATERIALS.iter().map(|s| s.to_string()));
        for w in category_words.iter().skip(1) {
            if !tokens.contains(w) {
                tokens.push(w.clone());
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn for_categories(preset: &str, k: usize) -> Self {
        Vocab::new(&category_names(preset, k))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Domain(format!("word `{w}` is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != 0)
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub episode_id: String,
    pub scene_id: String,
    pub start: Pose,
    pub goal: Point,
    pub path: Vec<Point>,
    pub instruction_tokens: Vec<usize>,
    pub instruction_text: String,
    /// Mentioned objects in instruction order; the last is the goal object.
    pub landmarks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeParams {
    pub min_len: f64,
    pub max_len: f64,
    pub landmark_radius: f64,
    pub max_pass_landmarks: usize,
    pub success_distance: f64,
    pub goal_radius: f64,
    pub category_preset: String,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        EpisodeParams {
            min_len: 5.0,
            max_len: 12.0,
            landmark_radius: 1.5,
            max_pass_landmarks: 3,
            success_distance: 3.0,
            goal_radius: 1.3,
            category_preset: "desk".into(),
        }
    }
}

/// Removes interior vertices while the straight shortcut stays in free space.
pub fn string_pull(scene: &Scene, pts: &[Point]) -> Vec<Point> {
    let mut out = vec![pts[0]];
    let mut i = 0;
    while i + 1 < pts.len() {
        let mut j = pts.len() - 1;
        while j > i + 1 && !scene.grid.line_of_sight(pts[i], pts[j]) {
            j -= 1;
        }
        out.push(pts[j]);
        i = j;
    }
    out
}

fn describe(scene: &Scene, names: &[String], obj: usize) -> String {
    let o = &scene.objects[obj];
    format!(
        "the {} {} {}",
        COLORS[o.color(scene.categories)],
        MATERIALS[o.material(scene.categories)],
        names[o.category_id]
    )
}

pub fn instruction_text(scene: &Scene, names: &[String], landmarks: &[usize]) -> String {
    let (goal, pass) = landmarks.split_last().expect("at least the goal landmark");
    let passes: Vec<String> = pass.iter().map(|&o| describe(scene, names, o)).collect();
    format!(
        "go past {} then stop near {}",
        passes.join(" and "),
        describe(scene, names, *goal)
    )
}

/// Deterministic episode for `(scene, seed)`.
pub fn sample_episode(scene: &Scene, seed: u64, p: &EpisodeParams) -> Result<Episode> {
    if scene.objects.is_empty() {
        return Err(Error::Generation(format!(
            "scene {} has no objects to describe",
            scene.id
        )));
    }
    let names = category_names(&p.category_preset, scene.categories);
    let vocab = Vocab::new(&names);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comp = scene.grid.component_cells();
    for _ in 0..200 {
        let goal_obj = rng.gen_range(0..scene.objects.len());
        let oc = scene.objects[goal_obj].center;
        let near: Vec<usize> = comp
            .iter()
            .copied()
            .filter(|&c| scene.grid.center(c).dist(oc) <= p.goal_radius)
            .collect();
        if near.is_empty() {
            continue;
        }
        let goal_cell = near[rng.gen_range(0..near.len())];
        let field = scene.grid.distances_from_cells(&[goal_cell]);
        let starts: Vec<usize> = comp
            .iter()
            .copied()
            .filter(|&c| {
                field[c] >= p.min_len && field[c] <= p.max_len && field[c] > p.success_distance
            })
            .collect();
        if starts.is_empty() {
            continue;
        }
        let start_cell = starts[rng.gen_range(0..starts.len())];
        let cells = scene.grid.descend(&field, start_cell);
        if *cells.last().unwrap() != goal_cell {
            continue;
        }
        let raw: Vec<Point> = cells.iter().map(|&c| scene.grid.center(c)).collect();
        let path = string_pull(scene, &raw);
        let mut pass: Vec<(f64, usize)> = scene
            .objects
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != goal_obj)
            .map(|(i, o)| (geom::polyline_distance(o.center, &path), i))
            .filter(|(d, _)| *d <= p.landmark_radius)
            .collect();
        if pass.is_empty() || geom::polyline_distance(oc, &path) > p.landmark_radius {
            continue;
        }
        pass.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        pass.truncate(p.max_pass_landmarks);
        let mut ordered: Vec<(f64, usize)> = pass
            .iter()
            .map(|&(_, i)| {
                (
                    geom::project_polyline(scene.objects[i].center, &path).arc,
                    i,
                )
            })
            .collect();
        ordered.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut landmarks: Vec<usize> = ordered.into_iter().map(|(_, i)| i).collect();
        landmarks.push(goal_obj);
        let text = instruction_text(scene, &names, &landmarks);
        let tokens = vocab.encode(&text)?;
        let heading_k = rng.gen_range(-11..=12) as f64;
        let s = path[0];
        return Ok(Episode {
            episode_id: format!("{}-e{}", scene.id, seed),
            scene_id: scene.id.clone(),
            start: Pose::new(s.x, s.y, heading_k * std::f64::consts::PI / 12.0),
            goal: *path.last().unwrap(),
            path,
            instruction_tokens: tokens,
            instruction_text: text,
            landmarks,
        });
    }
    Err(Error::Generation(format!(
        "no valid start/goal pair in scene {} for seed {seed}",
        scene.id
    )))
}

/// `n` episodes with seeds derived from `seed`.
pub fn sample_episodes(
    scene: &Scene,
    seed: u64,
    n: usize,
    p: &EpisodeParams,
) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| sample_episode(scene, rng.gen(), p))
        .collect()
}
