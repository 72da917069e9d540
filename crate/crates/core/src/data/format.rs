//! Annotation dataset files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ATTNDATA", version u32 (= 1)
//! record_count u32, L u32, D u32, K u32
//! per record:
//!   caption_len u16, caption indices u32 x caption_len (end token included)
//!   grid f64 x (L * D), row-major
//!   alignment_len u16, (word_pos u16, cell u16) x alignment_len
//! ```
//!
//! Any tool that can emit `L x D` grids can produce this format.

use std::fs;
use std::path::Path;

use super::DataError;
use crate::attention::AnnotationGrid;
use crate::decoder::CaptionSequence;
use crate::graphcore::Tensor;

pub const DATA_MAGIC: &[u8; 8] = b"ATTNDATA";
pub const DATA_VERSION: u32 = 1;

/// One image (as annotation grid) with its caption and optional alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub grid: AnnotationGrid,
    pub caption: CaptionSequence,
    /// `(word position, location)` pairs for content words.
    pub alignment: Vec<(usize, usize)>,
}

impl Record {
    pub fn example(&self) -> crate::training::Example<'_> {
        crate::training::Example {
            grid: &self.grid,
            caption: &self.caption,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationDataset {
    pub locations: usize,
    pub features: usize,
    pub vocab_size: usize,
    pub records: Vec<Record>,
}

impl AnnotationDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks that every record matches the header dimensions.
    pub fn validate(&self) -> Result<(), DataError> {
        for (i, r) in self.records.iter().enumerate() {
            let bad = |reason: String| Err(DataError::Record { index: i, reason });
            if r.grid.locations() != self.locations || r.grid.feature_dim() != self.features {
                return bad(format!(
                    "grid is {}x{}, dataset is {}x{}",
                    r.grid.locations(),
                    r.grid.feature_dim(),
                    self.locations,
                    self.features
                ));
            }
            if let Some(&t) = r.caption.tokens().iter().find(|&&t| t >= self.vocab_size) {
                return bad(format!("token {t} outside vocabulary of {}", self.vocab_size));
            }
            if r.caption.len() > u16::MAX as usize || r.alignment.len() > u16::MAX as usize {
                return bad("caption or alignment too long".into());
            }
            if let Some(&(p, c)) = r
                .alignment
                .iter()
                .find(|&&(p, c)| p >= r.caption.len() || c >= self.locations)
            {
                return bad(format!("alignment ({p}, {c}) out of range"));
            }
        }
        Ok(())
    }
}

pub fn write_annotations_bytes(data: &AnnotationDataset) -> Result<Vec<u8>, DataError> {
    data.validate()?;
    let dim = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| DataError::Record {
            index: 0,
            reason: format!("{what} does not fit in u32"),
        })
    };
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    for (v, what) in [
        (data.records.len(), "record count"),
        (data.locations, "L"),
        (data.features, "D"),
        (data.vocab_size, "K"),
    ] {
        out.extend_from_slice(&dim(v, what)?.to_le_bytes());
    }
    for r in &data.records {
        out.extend_from_slice(&(r.caption.len() as u16).to_le_bytes());
        for &t in r.caption.tokens() {
            out.extend_from_slice(&(t as u32).to_le_bytes());
        }
        for v in r.grid.tensor().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(r.alignment.len() as u16).to_le_bytes());
        for &(p, c) in &r.alignment {
            out.extend_from_slice(&(p as u16).to_le_bytes());
            out.extend_from_slice(&(c as u16).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_annotations(data: &AnnotationDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    fs::write(path, write_annotations_bytes(data)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DataError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(DataError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<usize, DataError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()) as usize)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn read_annotations_bytes(bytes: &[u8]) -> Result<AnnotationDataset, DataError> {
    if bytes.len() < DATA_MAGIC.len() {
        return Err(if DATA_MAGIC.starts_with(bytes) {
            DataError::Truncated("magic")
        } else {
            DataError::BadMagic
        });
    }
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != DATA_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r.u32("version")? as u32;
    if version != DATA_VERSION {
        return Err(DataError::Version(version));
    }
    let count = r.u32("record count")?;
    let locations = r.u32("L")?;
    let features = r.u32("D")?;
    let vocab_size = r.u32("K")?;
    let cells = locations.checked_mul(features).ok_or(DataError::Truncated("grid"))?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let len = r.u16("caption length")?;
        let tokens = (0..len).map(|_| r.u32("caption")).collect::<Result<Vec<_>, _>>()?;
        let raw = r.take(cells.checked_mul(8).ok_or(DataError::Truncated("grid"))?, "grid")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { index });
        }
        let alignment_len = r.u16("alignment length")?;
        let alignment = (0..alignment_len)
            .map(|_| Ok((r.u16("alignment")?, r.u16("alignment")?)))
            .collect::<Result<Vec<_>, DataError>>()?;
        let record_err = |reason: String| DataError::Record { index, reason };
        let tensor = Tensor::new(&[locations, features], values).map_err(|e| record_err(e.to_string()))?;
        let grid = AnnotationGrid::new(tensor).map_err(|e| record_err(e.to_string()))?;
        let caption = CaptionSequence::new(tokens).map_err(|e| record_err(e.to_string()))?;
        records.push(Record {
            grid,
            caption,
            alignment,
        });
    }
    if r.pos != bytes.len() {
        return Err(DataError::TrailingBytes(bytes.len() - r.pos));
    }
    let data = AnnotationDataset {
        locations,
        features,
        vocab_size,
        records,
    };
    data.validate()?;
    Ok(data)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationDataset, DataError> {
    read_annotations_bytes(&fs::read(path)?)
}
