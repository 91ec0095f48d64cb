//! JSON-lines scene files and conversion between labeled scenes and token
//! layouts.
//!
//! One record per line:
//! `{"prompt": "street", "objects": [{"label": "car", "box": [x, y, w, h]}]}`.
//! Generated files may also carry a per-object `"opacity"` and a top-level
//! `"seed"`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::Vocabulary;
use crate::error::{Error, Result};
use crate::layout::{pad_layout, select_top_boxes, BoundingBox, DatasetStats, Layout, ObjectToken, OPACITY_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opacity: Option<f64>,
}

impl SceneObject {
    pub fn new(label: impl Into<String>, bbox: BoundingBox) -> Self {
        Self { label: label.into(), bbox: bbox.to_array(), opacity: None }
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::from_array(self.bbox)
    }
}

/// A labeled layout as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub prompt: String,
    pub objects: Vec<SceneObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Scene {
    pub fn new(prompt: impl Into<String>, objects: Vec<SceneObject>) -> Self {
        Self { prompt: prompt.into(), objects, seed: None }
    }
}

/// Parses JSON-lines scene records. Blank lines are skipped; errors carry
/// the 1-based line number.
pub fn parse_scenes(reader: impl BufRead) -> Result<Vec<Scene>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        if let Some(o) = scene.objects.iter().find(|o| o.bbox.iter().any(|v| !v.is_finite())) {
            return Err(Error::Parse { line: i + 1, message: format!("non-finite box for {:?}", o.label) });
        }
        out.push(scene);
    }
    Ok(out)
}

pub fn read_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    parse_scenes(BufReader::new(std::fs::File::open(path)?))
}

pub fn write_scenes(mut writer: impl Write, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut writer, s)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_scenes(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_scenes(&mut f, scenes)?;
    f.flush()?;
    Ok(())
}

/// Tokenizes a scene: boxes clamped to the canvas, the `capacity` largest
/// kept, then padded.
pub fn scene_to_layout(scene: &Scene, vocab: &Vocabulary, capacity: usize) -> Result<Layout> {
    let prompt_id = vocab.table.index_of(&scene.prompt).unwrap_or(usize::MAX);
    let tokens = scene
        .objects
        .iter()
        .map(|o| Ok(ObjectToken::new(o.bounding_box().clamped(), vocab.embed(&o.label)?.to_vec(), 1.0)))
        .collect::<Result<Vec<_>>>()?;
    let tokens = pad_layout(select_top_boxes(tokens, capacity), capacity, vocab.null_embedding())?;
    Ok(Layout { prompt_id, prompt_text: scene.prompt.clone(), tokens })
}

/// Exports a layout: tokens below the opacity threshold are dropped, labels
/// decoded to the nearest non-null entry, boxes and opacity clamped to [0,1].
pub fn layout_to_scene(layout: &Layout, vocab: &Vocabulary, seed: Option<u64>) -> Result<Scene> {
    let objects = layout
        .real_tokens()
        .map(|t| {
            Ok(SceneObject {
                label: vocab.decode(&t.embedding)?,
                bbox: t.bbox.clamped().to_array(),
                opacity: Some(t.opacity.clamp(0.0, 1.0)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene { prompt: layout.prompt_text.clone(), objects, seed })
}

/// Loads a scene file and tokenizes every record.
pub fn load_dataset(path: impl AsRef<Path>, vocab: &Vocabulary, capacity: usize) -> Result<Vec<Layout>> {
    read_scenes(path)?.iter().map(|s| scene_to_layout(s, vocab, capacity)).collect()
}

/// Writes layouts in the scene schema, one per line, with optional seeds.
pub fn save_layouts(
    path: impl AsRef<Path>,
    layouts: &[Layout],
    seeds: &[Option<u64>],
    vocab: &Vocabulary,
) -> Result<()> {
    let scenes = layouts
        .iter()
        .enumerate()
        .map(|(i, l)| layout_to_scene(l, vocab, seeds.get(i).copied().flatten()))
        .collect::<Result<Vec<_>>>()?;
    save_scenes(path, &scenes)
}

pub fn save_stats(path: impl AsRef<Path>, stats: &DatasetStats) -> Result<()> {
    std::fs::write(path, serde_json::to_string(stats)?)?;
    Ok(())
}

pub fn load_stats(path: impl AsRef<Path>) -> Result<DatasetStats> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Groups scenes by prompt, preserving first-seen prompt order.
pub fn group_by_prompt(scenes: &[Scene]) -> Vec<(String, Vec<&Scene>)> {
    let mut groups: Vec<(String, Vec<&Scene>)> = Vec::new();
    for s in scenes {
        match groups.iter_mut().find(|(p, _)| *p == s.prompt) {
            Some((_, g)) => g.push(s),
            None => groups.push((s.prompt.clone(), vec![s])),
        }
    }
    groups
}

pub(crate) fn is_real(opacity: Option<f64>) -> bool {
    opacity.map(|a| a >= OPACITY_THRESHOLD).unwrap_or(true)
}
