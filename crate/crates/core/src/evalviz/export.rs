use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{EvalError, Heatmap};

/// File name suffix of the manifest written next to the graymaps.
pub const MANIFEST_SUFFIX: &str = "manifest.tsv";

/// An 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Graymap {
    /// Quantises intensities in `[0, 1]` to `0..=255`.
    pub fn from_heatmap(map: &Heatmap) -> Self {
        Self {
            width: map.width,
            height: map.height,
            pixels: map.data.iter().map(|&v| quantize(v)).collect(),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, image: &Graymap) -> Result<(), EvalError> {
    let mut bytes = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend_from_slice(&image.pixels);
    fs::write(path, bytes).map_err(|source| EvalError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a binary graymap with a maximum value of 255. Comments are not supported.
pub fn read_pgm(path: &Path) -> Result<Graymap, EvalError> {
    let bytes = fs::read(path).map_err(|source| EvalError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |msg: &str| EvalError::Graymap(format!("{}: {msg}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(malformed("not a P5 graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| malformed("bad header number"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(malformed("only 8-bit graymaps are supported"));
    }
    let pixels = bytes.get(pos + 1..).unwrap_or_default();
    if pixels.len() != width * height {
        return Err(malformed("pixel count does not match header"));
    }
    Ok(Graymap {
        width,
        height,
        pixels: pixels.to_vec(),
    })
}

/// Writes one graymap per heatmap as `{prefix}_{t:02}.pgm` inside `dir`,
/// plus `{prefix}_manifest.tsv` with `timestep<TAB>word<TAB>filename`
/// rows. With a base image every map is blended half-and-half over it.
/// Returns the manifest path.
pub fn export_heatmaps(
    heatmaps: &[Heatmap],
    base: Option<&Heatmap>,
    dir: &Path,
    prefix: &str,
) -> Result<PathBuf, EvalError> {
    fs::create_dir_all(dir).map_err(|source| EvalError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut manifest = String::new();
    for (t, map) in heatmaps.iter().enumerate() {
        let mut image = Graymap::from_heatmap(map);
        if let Some(base) = base {
            if (base.width, base.height) != (map.width, map.height) {
                return Err(EvalError::BaseSize {
                    expected: (map.width, map.height),
                    found: (base.width, base.height),
                });
            }
            image.pixels = map
                .data
                .iter()
                .zip(&base.data)
                .map(|(&h, &b)| quantize(0.5 * h + 0.5 * b))
                .collect();
        }
        let name = format!("{prefix}_{t:02}.pgm");
        write_pgm(&dir.join(&name), &image)?;
        let word = map.word.as_deref().unwrap_or("");
        writeln!(manifest, "{t}\t{word}\t{name}").expect("string write");
    }
    let path = dir.join(format!("{prefix}_{MANIFEST_SUFFIX}"));
    fs::write(&path, manifest).map_err(|source| EvalError::Write {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}
