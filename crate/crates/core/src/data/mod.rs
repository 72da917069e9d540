//! Synthetic scene-caption corpus with ground-truth word/cell alignments.
//!
//! A scene is a square grid of cells, each empty or holding one coloured
//! shape. Captions come from three templates:
//!
//! - `a {color} {shape}` for a single object,
//! - `a {color} {shape} left of a {color} {shape}` for two objects in
//!   different columns, the left one named first,
//! - `a {color} {shape} above a {color} {shape}` for two objects in the
//!   same column, the upper one named first.
//!
//! The layout decides the template, so every scene has exactly one caption.

mod format;
mod vocab;

use std::io;
use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AnnotationGrid;
use crate::decoder::CaptionSequence;
use crate::evalviz::{Heatmap, UPSAMPLE};
use crate::graphcore::Tensor;

pub use format::{
    read_annotations, read_annotations_bytes, write_annotations, write_annotations_bytes, AnnotationDataset, Record,
    DATA_MAGIC, DATA_VERSION,
};
pub use vocab::{decode_caption, encode_caption, Vocabulary, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("impossible scene spec: {0}")]
    ImpossibleSpec(String),
    #[error("scene count must be at least 1")]
    ZeroCount,
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not an annotation dataset")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("dataset truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} unexpected bytes after the last record")]
    TrailingBytes(usize),
    #[error("record {index} holds a non-finite grid value")]
    NonFinite { index: usize },
    #[error("record {index}: {reason}")]
    Record { index: usize, reason: String },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
}

/// Caption templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Single,
    LeftOf,
    Above,
}

impl Relation {
    pub fn objects(self) -> usize {
        match self {
            Relation::Single => 1,
            Relation::LeftOf | Relation::Above => 2,
        }
    }

    /// Words between the two object phrases.
    fn joiner(self) -> &'static [&'static str] {
        match self {
            Relation::Single => &[],
            Relation::LeftOf => &["left", "of"],
            Relation::Above => &["above"],
        }
    }
}

/// Scene generator settings. The number of objects per scene follows from
/// the templates (one or two).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub grid_side: usize,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    /// Templates drawn uniformly per scene.
    pub relations: Vec<Relation>,
    /// Standard deviation of the feature noise.
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let words = |s: &str| s.split_whitespace().map(String::from).collect();
        Self {
            grid_side: 4,
            colors: words("red blue green yellow purple orange white black gray pink"),
            shapes: words("square circle triangle star cross diamond heart hexagon ring arrow"),
            relations: vec![Relation::Single, Relation::LeftOf, Relation::Above],
            noise_sigma: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn locations(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Colour one-hot, shape one-hot, occupancy, row, column.
    pub fn feature_dim(&self) -> usize {
        self.colors.len() + self.shapes.len() + 3
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::ImpossibleSpec(m));
        if self.grid_side == 0 {
            return bad("grid side must be at least 1".into());
        }
        if self.locations() > u16::MAX as usize {
            return bad("grid too large".into());
        }
        if self.colors.is_empty() || self.shapes.is_empty() || self.relations.is_empty() {
            return bad("need at least one color, one shape and one template".into());
        }
        if let Some(r) = self.relations.iter().find(|r| r.objects() > 1 && self.grid_side < 2) {
            return bad(format!("{r:?} needs two objects in a grid of side at least 2"));
        }
        let mut words: Vec<&str> = self.colors.iter().chain(&self.shapes).map(String::as_str).collect();
        words.extend(["a", "left", "of", "above", BOS_TOKEN, EOS_TOKEN, UNK_TOKEN]);
        let n = words.len();
        words.sort_unstable();
        words.dedup();
        if words.len() != n {
            return bad("color and shape words must be distinct from each other and from template words".into());
        }
        if self
            .colors
            .iter()
            .chain(&self.shapes)
            .any(|w| w.is_empty() || w.contains(char::is_whitespace))
        {
            return bad("words must be non-empty and contain no whitespace".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    /// Template words, then colours, then shapes.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: Vec<&str> = vec!["a", "left", "of", "above"];
        words.extend(self.colors.iter().map(String::as_str));
        words.extend(self.shapes.iter().map(String::as_str));
        Vocabulary::new(&words)
    }
}

/// A coloured shape, as indices into the spec's colour and shape lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub color: usize,
    pub shape: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub side: usize,
    /// Row-major cell contents.
    pub cells: Vec<Option<Object>>,
    pub relation: Relation,
    pub caption: Vec<String>,
    /// `(word position, cell)` for every colour and shape word.
    pub alignment: Vec<(usize, usize)>,
}

impl Scene {
    /// Lays out `objects` (in caption order) at `positions` and writes the caption.
    pub fn compose(spec: &SceneSpec, relation: Relation, placed: &[(usize, Object)]) -> Result<Self, DataError> {
        spec.validate()?;
        if placed.len() != relation.objects() {
            return Err(DataError::ImpossibleSpec(format!(
                "{relation:?} takes {} objects, got {}",
                relation.objects(),
                placed.len()
            )));
        }
        let side = spec.grid_side;
        let mut cells = vec![None; spec.locations()];
        for &(cell, obj) in placed {
            if cell >= cells.len() || obj.color >= spec.colors.len() || obj.shape >= spec.shapes.len() {
                return Err(DataError::ImpossibleSpec("object outside the spec".into()));
            }
            if cells[cell].replace(obj).is_some() {
                return Err(DataError::ImpossibleSpec(format!("two objects in cell {cell}")));
            }
        }
        if let [(a, _), (b, _)] = placed {
            let ok = match relation {
                Relation::LeftOf => a % side < b % side,
                Relation::Above => a % side == b % side && a / side < b / side,
                Relation::Single => false,
            };
            if !ok {
                return Err(DataError::ImpossibleSpec(format!("layout does not match {relation:?}")));
            }
        }
        let mut caption = Vec::new();
        let mut alignment = Vec::new();
        for (k, &(cell, obj)) in placed.iter().enumerate() {
            if k > 0 {
                caption.extend(relation.joiner().iter().map(|w| w.to_string()));
            }
            caption.push("a".to_string());
            alignment.push((caption.len(), cell));
            caption.push(spec.colors[obj.color].clone());
            alignment.push((caption.len(), cell));
            caption.push(spec.shapes[obj.shape].clone());
        }
        Ok(Self {
            side,
            cells,
            relation,
            caption,
            alignment,
        })
    }

    pub fn objects(&self) -> impl Iterator<Item = (usize, Object)> + '_ {
        self.cells.iter().enumerate().filter_map(|(i, c)| c.map(|o| (i, o)))
    }
}

fn random_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<Scene, DataError> {
    let side = spec.grid_side;
    let relation = spec.relations[rng.random_range(0..spec.relations.len())];
    let object = |rng: &mut R| Object {
        color: rng.random_range(0..spec.colors.len()),
        shape: rng.random_range(0..spec.shapes.len()),
    };
    let cells: Vec<usize> = match relation {
        Relation::Single => vec![rng.random_range(0..spec.locations())],
        Relation::LeftOf => {
            let cols = sample(rng, side, 2);
            let (c1, c2) = (cols.index(0).min(cols.index(1)), cols.index(0).max(cols.index(1)));
            vec![
                rng.random_range(0..side) * side + c1,
                rng.random_range(0..side) * side + c2,
            ]
        }
        Relation::Above => {
            let col = rng.random_range(0..side);
            let rows = sample(rng, side, 2);
            let (r1, r2) = (rows.index(0).min(rows.index(1)), rows.index(0).max(rows.index(1)));
            vec![r1 * side + col, r2 * side + col]
        }
    };
    let placed: Vec<(usize, Object)> = cells.into_iter().map(|c| (c, object(rng))).collect();
    Scene::compose(spec, relation, &placed)
}

/// `count` random scenes, reproducible from the rng state.
pub fn generate_corpus<R: Rng + ?Sized>(spec: &SceneSpec, count: usize, rng: &mut R) -> Result<Vec<Scene>, DataError> {
    spec.validate()?;
    if count == 0 {
        return Err(DataError::ZeroCount);
    }
    (0..count).map(|_| random_scene(spec, rng)).collect()
}

/// Per-cell features: colour one-hot, shape one-hot, occupancy bit,
/// `row / (side - 1)` and `col / (side - 1)`, each plus Gaussian noise.
pub fn encode_scene<R: Rng + ?Sized>(
    scene: &Scene,
    spec: &SceneSpec,
    rng: &mut R,
) -> Result<AnnotationGrid, DataError> {
    spec.validate()?;
    if scene.side != spec.grid_side || scene.cells.len() != spec.locations() {
        return Err(DataError::ImpossibleSpec("scene does not match the spec grid".into()));
    }
    let (nc, ns) = (spec.colors.len(), spec.shapes.len());
    let d = spec.feature_dim();
    let span = (spec.grid_side.max(2) - 1) as f64;
    let mut data = vec![0.0; spec.locations() * d];
    for (i, cell) in scene.cells.iter().enumerate() {
        let row = &mut data[i * d..(i + 1) * d];
        if let Some(obj) = cell {
            row[obj.color] = 1.0;
            row[nc + obj.shape] = 1.0;
            row[nc + ns] = 1.0;
        }
        row[nc + ns + 1] = (i / spec.grid_side) as f64 / span;
        row[nc + ns + 2] = (i % spec.grid_side) as f64 / span;
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in &mut data {
            *v += noise.sample(rng);
        }
    }
    let tensor = Tensor::new(&[spec.locations(), d], data).expect("consistent shape");
    Ok(AnnotationGrid::new(tensor).expect("finite features"))
}

/// Encodes scenes into a dataset; grids draw their noise from `rng` in scene order.
pub fn build_dataset<R: Rng + ?Sized>(
    scenes: &[Scene],
    spec: &SceneSpec,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<AnnotationDataset, DataError> {
    let records = scenes
        .iter()
        .enumerate()
        .map(|(index, scene)| {
            let caption =
                CaptionSequence::new(encode_caption(&scene.caption, vocab)).map_err(|e| DataError::Record {
                    index,
                    reason: e.to_string(),
                })?;
            Ok(Record {
                grid: encode_scene(scene, spec, rng)?,
                caption,
                alignment: scene.alignment.clone(),
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(AnnotationDataset {
        locations: spec.locations(),
        features: spec.feature_dim(),
        vocab_size: vocab.len(),
        records,
    })
}

/// Index ranges of the 80/10/10 train, validation and test split.
pub fn split_ranges(count: usize) -> [Range<usize>; 3] {
    let train = count * 8 / 10;
    let val = count * 9 / 10;
    [0..train, train..val, val..count]
}

/// Grey raster of a grid's occupancy, sized like the attention heatmaps.
/// Uses the occupancy feature at index `D - 3` of the synthetic encoding.
pub fn occupancy_raster(grid: &AnnotationGrid) -> Option<Heatmap> {
    let l = grid.locations();
    let side = (l as f64).sqrt().round() as usize;
    if side * side != l || grid.feature_dim() < 3 {
        return None;
    }
    let occ = grid.feature_dim() - 3;
    let px = side * UPSAMPLE;
    let data = (0..px * px)
        .map(|i| {
            let cell = (i / px / UPSAMPLE) * side + (i % px) / UPSAMPLE;
            grid.row(cell)[occ].clamp(0.0, 1.0) * 0.6
        })
        .collect();
    Some(Heatmap {
        width: px,
        height: px,
        data,
        word: None,
    })
}
