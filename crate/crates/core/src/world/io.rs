//! Scene JSON and episode JSON-lines.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::episode::Episode;
use super::scene::{Bounds, Scene, SceneObject, SceneParams, Wall};
use crate::error::{Error, Result};
use crate::geom::{Point, Pose};

pub const FORMAT: &str = "v1";

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    format: String,
    id: String,
    bounds: Bounds,
    walls: Vec<Wall>,
    objects: Vec<SceneObject>,
    categories: usize,
    attr_dim: usize,
    clearance: f64,
    grid_cell: f64,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    format: String,
    episode_id: String,
    scene_id: String,
    start: Pose,
    goal: Point,
    path: Vec<Point>,
    instruction_tokens: Vec<usize>,
    instruction_text: String,
    landmarks: Vec<usize>,
}

fn check_format(v: &Value, line: usize) -> Result<()> {
    match v.get("format").and_then(Value::as_str) {
        Some(FORMAT) => Ok(()),
        Some(other) => Err(Error::Parse {
            line,
            msg: format!("unsupported format `{other}`, expected `{FORMAT}`"),
        }),
        None => Err(Error::Parse {
            line,
            msg: "missing `format` field".into(),
        }),
    }
}

pub fn scene_to_json(scene: &Scene, params: &SceneParams) -> String {
    let rec = SceneRecord {
        format: FORMAT.into(),
        id: scene.id.clone(),
        bounds: scene.bounds,
        walls: scene.walls.clone(),
        objects: scene.objects.clone(),
        categories: scene.categories,
        attr_dim: scene.attr_dim,
        clearance: params.clearance,
        grid_cell: params.grid_cell,
    };
    serde_json::to_string(&rec).expect("scene serializes")
}

pub fn scene_from_json(text: &str) -> Result<Scene> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    check_format(&v, 1)?;
    let r: SceneRecord = serde_json::from_value(v).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if let Some(o) = r
        .objects
        .iter()
        .find(|o| o.category_id >= r.categories || o.attributes.len() != r.attr_dim)
    {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "object category {} or attribute length {} inconsistent with the scene",
                o.category_id,
                o.attributes.len()
            ),
        });
    }
    Ok(Scene::new(
        r.id,
        r.bounds,
        r.walls,
        r.objects,
        r.categories,
        r.attr_dim,
        r.clearance,
        r.grid_cell,
    ))
}

pub fn write_scene(path: &std::path::Path, scene: &Scene, params: &SceneParams) -> Result<()> {
    std::fs::write(path, scene_to_json(scene, params) + "\n")?;
    Ok(())
}

pub fn read_scene(path: &std::path::Path) -> Result<Scene> {
    scene_from_json(&std::fs::read_to_string(path)?)
}

pub fn episode_to_json(e: &Episode) -> String {
    let rec = EpisodeRecord {
        format: FORMAT.into(),
        episode_id: e.episode_id.clone(),
        scene_id: e.scene_id.clone(),
        start: e.start,
        goal: e.goal,
        path: e.path.clone(),
        instruction_tokens: e.instruction_tokens.clone(),
        instruction_text: e.instruction_text.clone(),
        landmarks: e.landmarks.clone(),
    };
    serde_json::to_string(&rec).expect("episode serializes")
}

pub fn write_episodes(mut w: impl Write, episodes: &[Episode]) -> Result<()> {
    for e in episodes {
        writeln!(w, "{}", episode_to_json(e))?;
    }
    Ok(())
}

pub fn read_episodes(r: impl BufRead) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |e: serde_json::Error| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        };
        let v: Value = serde_json::from_str(&line).map_err(bad)?;
        check_format(&v, line_no)?;
        let r: EpisodeRecord = serde_json::from_value(v).map_err(bad)?;
        if r.path.is_empty() || r.instruction_tokens.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "episode needs a path and an instruction".into(),
            });
        }
        out.push(Episode {
            episode_id: r.episode_id,
            scene_id: r.scene_id,
            start: r.start,
            goal: r.goal,
            path: r.path,
            instruction_tokens: r.instruction_tokens,
            instruction_text: r.instruction_text,
            landmarks: r.landmarks,
        });
    }
    Ok(out)
}

pub fn write_episodes_file(path: &std::path::Path, episodes: &[Episode]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_episodes(&mut w, episodes)?;
    w.flush()?;
    Ok(())
}

pub fn read_episodes_file(path: &std::path::Path) -> Result<Vec<Episode>> {
    read_episodes(std::io::BufReader::new(std::fs::File::open(path)?))
}
