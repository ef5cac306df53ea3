//! Scenario files (one JSON object per line) and provenance records.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use decamp_core::scene::{AgentTrack, Frame, Horizon, LaneSegment, Scene};

use crate::error::{Error, Result};

pub const SCENE_FORMAT_VERSION: u32 = 1;

/// Who produced an output file and from what inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config: serde_json::to_value(config).expect("configs serialise"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneRecord {
    version: u32,
    frame: Frame,
    ego_index: usize,
    agents: Vec<AgentTrack>,
    lanes: Vec<LaneSegment>,
    #[serde(default)]
    horizon: Horizon,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

/// Parses one JSON document, reporting failures with the path of the offending field.
pub(crate) fn parse_json<T: DeserializeOwned>(text: &str, path: &Path, line: usize) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let mut field = e.path().to_string();
        let detail = e.inner().to_string();
        if let Some(name) = detail.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
            field = if field == "." { name.to_string() } else { format!("{field}.{name}") };
        }
        Error::Schema { path: path.to_path_buf(), line, field, detail }
    })
}

fn scene_error(path: &Path, line: usize, e: decamp_core::Error) -> Error {
    match e {
        decamp_core::Error::Scene(msg) => {
            let (field, detail) = msg.split_once(": ").unwrap_or(("scene", &msg));
            Error::Schema { path: path.to_path_buf(), line, field: field.into(), detail: detail.into() }
        }
        other => other.into(),
    }
}

/// Parses a scenario file. Blank lines are skipped.
pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenes(&text, path)
}

pub fn parse_scenes(text: &str, path: &Path) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: SceneRecord = parse_json(line, path, i + 1)?;
        if r.version != SCENE_FORMAT_VERSION {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                field: "version".into(),
                detail: format!("unsupported version {}, expected {SCENE_FORMAT_VERSION}", r.version),
            });
        }
        let scene =
            Scene { agents: r.agents, lanes: r.lanes, ego_index: r.ego_index, horizon: r.horizon, frame: r.frame };
        scene.validate().map_err(|e| scene_error(path, i + 1, e))?;
        scenes.push(scene);
    }
    Ok(scenes)
}

/// One JSON line per scene.
pub fn scene_line(scene: &Scene, provenance: Option<&Provenance>) -> String {
    let r = SceneRecord {
        version: SCENE_FORMAT_VERSION,
        frame: scene.frame,
        ego_index: scene.ego_index,
        agents: scene.agents.clone(),
        lanes: scene.lanes.clone(),
        horizon: scene.horizon,
        provenance: provenance.cloned(),
    };
    serde_json::to_string(&r).expect("scenes serialise")
}

pub fn write_scenes(path: &Path, scenes: &[Scene], provenance: Option<&Provenance>) -> Result<()> {
    let file = create(path)?;
    let mut w = BufWriter::new(file);
    for s in scenes {
        writeln!(w, "{}", scene_line(s, provenance)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let mut scenes = read_scenes(path)?;
    match scenes.len() {
        1 => Ok(scenes.remove(0)),
        n => Err(Error::Usage(format!("{}: expected exactly one scene, found {n}", path.display()))),
    }
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_scenes(path, std::slice::from_ref(scene), None)
}

pub(crate) fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Writes `value` as pretty JSON.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let file = create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::io(path, e.into()))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, path, 1)
}
