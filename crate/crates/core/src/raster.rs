//! Raster types and their on-disk formats.
//!
//! Label rasters are binary PGM (`P5`) with maxval 65535: two-byte big-endian
//! samples, row-major, top-left origin. A sidecar `<stem>.labels.json` maps
//! ids to class names and records the ignore id.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::vocab::{ClassId, ClassVocabulary, IGNORE_ID};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed raster {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("label id {id} out of range: {reason}")]
    Range { id: u32, reason: String },
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RasterError + '_ {
    move |source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reference to an input image. The pixels are opaque to this crate; only the
/// bytes are forwarded to model services.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>, width: u32, height: u32) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Geometry(format!("image size {width}x{height} must be positive")));
        }
        Ok(Self {
            id: id.into(),
            path: path.into(),
            width,
            height,
        })
    }

    pub fn read_bytes(&self) -> Result<Vec<u8>, RasterError> {
        fs::read(&self.path).map_err(io_err(&self.path))
    }

    /// MIME type guessed from the file extension.
    pub fn mime(&self) -> &'static str {
        match self
            .path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("png") => "image/png",
            Some("jpg") | Some("jpeg") => "image/jpeg",
            Some("webp") => "image/webp",
            Some("ppm") | Some("pnm") => "image/x-portable-pixmap",
            _ => "application/octet-stream",
        }
    }
}

/// One unbounded per-pixel logit map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap<T> {
    width: u32,
    height: u32,
    values: Vec<T>,
}

impl<T: Scalar> LogitMap<T> {
    pub fn new(width: u32, height: u32, values: Vec<T>) -> Result<Self, RasterError> {
        check_len(width, height, values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(RasterError::NonFinite(i));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: u32, height: u32, value: T) -> Result<Self, RasterError> {
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Nearest-neighbour resample to `width`×`height`.
    pub fn resized(&self, width: u32, height: u32) -> Result<Self, RasterError> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        check_len(width, height, width as usize * height as usize)?;
        let mut out = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height as u64 {
            let sy = (y * self.height as u64 / height as u64) as usize;
            for x in 0..width as u64 {
                let sx = (x * self.width as u64 / width as u64) as usize;
                out.push(self.values[sy * self.width as usize + sx]);
            }
        }
        Ok(Self {
            width,
            height,
            values: out,
        })
    }
}

fn check_len(width: u32, height: u32, len: usize) -> Result<(), RasterError> {
    if width == 0 || height == 0 {
        return Err(RasterError::Geometry(format!("size {width}x{height} must be positive")));
    }
    let want = width as usize * height as usize;
    if len != want {
        return Err(RasterError::Geometry(format!(
            "{len} values for a {width}x{height} raster (expected {want})"
        )));
    }
    Ok(())
}

/// N logit maps for one class, one per reason prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack<T> {
    class_id: ClassId,
    maps: Vec<LogitMap<T>>,
}

impl<T: Scalar> MaskStack<T> {
    pub fn new(class_id: ClassId, maps: Vec<LogitMap<T>>) -> Result<Self, RasterError> {
        let first = maps
            .first()
            .ok_or_else(|| RasterError::Geometry("mask stack needs at least one map".into()))?;
        let (w, h) = (first.width, first.height);
        if let Some(i) = maps.iter().position(|m| m.width != w || m.height != h) {
            return Err(RasterError::Geometry(format!(
                "map {i} is {}x{}, stack is {w}x{h}",
                maps[i].width, maps[i].height
            )));
        }
        Ok(Self { class_id, maps })
    }

    pub fn class_id(&self) -> ClassId {
        self.class_id
    }

    pub fn maps(&self) -> &[LogitMap<T>] {
        &self.maps
    }

    pub fn depth(&self) -> usize {
        self.maps.len()
    }

    pub fn width(&self) -> u32 {
        self.maps[0].width
    }

    pub fn height(&self) -> u32 {
        self.maps[0].height
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, RasterError> {
        check_len(width, height, bits.len())?;
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Per-pixel class ids. `ignore_id` marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    ids: Vec<u32>,
    ignore_id: u32,
}

impl LabelMap {
    pub fn new(width: u32, height: u32, ids: Vec<u32>) -> Result<Self, RasterError> {
        Self::with_ignore(width, height, ids, IGNORE_ID)
    }

    pub fn with_ignore(width: u32, height: u32, ids: Vec<u32>, ignore_id: u32) -> Result<Self, RasterError> {
        check_len(width, height, ids.len())?;
        Ok(Self {
            width,
            height,
            ids,
            ignore_id,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn ignore_id(&self) -> u32 {
        self.ignore_id
    }

    pub fn get(&self, x: u32, y: u32) -> u32 {
        self.ids[y as usize * self.width as usize + x as usize]
    }

    /// Checks every id is a vocabulary class or the ignore id.
    pub fn validate(&self, vocab: &ClassVocabulary) -> Result<(), RasterError> {
        if vocab.contains_id(self.ignore_id) {
            return Err(RasterError::Range {
                id: self.ignore_id,
                reason: "ignore id collides with a class id".into(),
            });
        }
        match self
            .ids
            .iter()
            .find(|&&id| id != self.ignore_id && !vocab.contains_id(id))
        {
            Some(&id) => Err(RasterError::Range {
                id,
                reason: format!("vocabulary has {} classes", vocab.len()),
            }),
            None => Ok(()),
        }
    }
}

/// JSON sidecar next to a label raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSidecar {
    pub labels: BTreeMap<u32, String>,
    pub ignore_id: u32,
}

impl LabelSidecar {
    pub fn from_vocab(vocab: &ClassVocabulary, ignore_id: u32) -> Self {
        Self {
            labels: vocab.iter().map(|(id, n)| (id.0, n.to_string())).collect(),
            ignore_id,
        }
    }
}

/// `dir/name.pgm` → `dir/name.labels.json`.
pub fn sidecar_path(raster: &Path) -> PathBuf {
    let stem = raster.file_stem().and_then(|s| s.to_str()).unwrap_or("labels");
    raster.with_file_name(format!("{stem}.labels.json"))
}

pub fn encode_pgm16(width: u32, height: u32, samples: &[u32]) -> Result<Vec<u8>, RasterError> {
    check_len(width, height, samples.len())?;
    let header = format!("P5\n{width} {height}\n65535\n");
    let mut out = Vec::with_capacity(header.len() + samples.len() * 2);
    out.extend_from_slice(header.as_bytes());
    for &s in samples {
        let v = u16::try_from(s).map_err(|_| RasterError::Range {
            id: s,
            reason: "exceeds 16-bit maxval 65535".into(),
        })?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn decode_pgm16(path: &Path, bytes: &[u8]) -> Result<(u32, u32, Vec<u32>), RasterError> {
    let bad = |reason: &str| RasterError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |s: &str, what: &str| s.parse::<u32>().map_err(|_| bad(&format!("bad {what} {s:?}")));
    let width = num(fields[1], "width")?;
    let height = num(fields[2], "height")?;
    let maxval = num(fields[3], "maxval")?;
    if maxval != 65535 {
        return Err(bad(&format!("maxval {maxval}, expected 65535")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }
    // exactly one whitespace byte separates header and raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("missing header terminator"));
    }
    pos += 1;
    let n = width as usize * height as usize;
    let body = &bytes[pos..];
    if body.len() != n * 2 {
        return Err(bad(&format!("raster has {} bytes, expected {}", body.len(), n * 2)));
    }
    let samples = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
        .collect();
    Ok((width, height, samples))
}

/// Writes the PGM raster only.
pub fn save_label_map(map: &LabelMap, path: &Path) -> Result<(), RasterError> {
    let bytes = encode_pgm16(map.width, map.height, &map.ids)?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes the PGM raster and its sidecar.
pub fn save_label_map_with_sidecar(map: &LabelMap, vocab: &ClassVocabulary, path: &Path) -> Result<(), RasterError> {
    save_label_map(map, path)?;
    let sidecar = LabelSidecar::from_vocab(vocab, map.ignore_id);
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    text.push('\n');
    fs::write(&side, text).map_err(io_err(&side))
}

pub fn load_sidecar(path: &Path) -> Result<Option<LabelSidecar>, RasterError> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| RasterError::Sidecar {
            path: side,
            reason: e.to_string(),
        })
}

/// Reads a label raster. When a sidecar exists its ignore id is used and every
/// sample must be a declared label or the ignore id.
pub fn load_label_map(path: &Path) -> Result<LabelMap, RasterError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, ids) = decode_pgm16(path, &bytes)?;
    let sidecar = load_sidecar(path)?;
    let ignore_id = sidecar.as_ref().map_or(IGNORE_ID, |s| s.ignore_id);
    if let Some(side) = &sidecar {
        if let Some(&id) = ids
            .iter()
            .find(|&&id| id != ignore_id && !side.labels.contains_key(&id))
        {
            return Err(RasterError::Range {
                id,
                reason: format!("not declared in {}", sidecar_path(path).display()),
            });
        }
    }
    LabelMap::with_ignore(w, h, ids, ignore_id)
}

/// Debug dump of a real-valued raster: 32-bit big-endian floats, row-major,
/// with a `<stem>.json` sidecar carrying geometry.
pub fn save_f32_raster<T: Scalar>(width: u32, height: u32, values: &[T], path: &Path, meta: serde_json::Value) -> Result<(), RasterError> {
    check_len(width, height, values.len())?;
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(v.wide() as f32).to_be_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    let side = path.with_extension("json");
    let doc = serde_json::json!({
        "width": width,
        "height": height,
        "dtype": "f32be",
        "meta": meta,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("json");
    text.push('\n');
    fs::write(&side, text).map_err(io_err(&side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_round_trip_with_ignore() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let vocab = ClassVocabulary::new("t", &["a", "b"]).unwrap();
        let map = LabelMap::new(2, 2, vec![0, 1, 1, IGNORE_ID]).unwrap();
        save_label_map_with_sidecar(&map, &vocab, &p).unwrap();
        let back = load_label_map(&p).unwrap();
        assert_eq!(back, map);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..14], b"P5\n2 2\n65535\n\0");
        assert_eq!(bytes.len(), 13 + 8);
        // save(load(p)) is byte-identical
        save_label_map(&back, &dir.path().join("again.pgm")).unwrap();
        assert_eq!(fs::read(dir.path().join("again.pgm")).unwrap(), bytes);
    }

    #[test]
    fn id_beyond_sixteen_bits_cannot_be_saved() {
        let dir = tempfile::tempdir().unwrap();
        let map = LabelMap::new(1, 1, vec![70000]).unwrap();
        let err = save_label_map(&map, &dir.path().join("x.pgm")).unwrap_err();
        assert!(matches!(err, RasterError::Range { id: 70000, .. }));
    }

    #[test]
    fn malformed_headers() {
        let p = Path::new("x.pgm");
        for bytes in [
            &b"P2\n1 1\n65535\n\0\0"[..],
            b"P5\n1 1\n255\n\0",
            b"P5\n1",
            b"P5\n2 1\n65535\n\0\0",
            b"P5\n0 1\n65535\n",
        ] {
            assert!(matches!(decode_pgm16(p, bytes), Err(RasterError::Format { .. })), "{bytes:?}");
        }
        let (w, h, s) = decode_pgm16(p, b"P5 # comment\n1 1 65535\n\x01\x02").unwrap();
        assert_eq!((w, h, s), (1, 1, vec![0x0102]));
    }

    #[test]
    fn undeclared_id_is_range_error_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let vocab = ClassVocabulary::new("t", &["a"]).unwrap();
        save_label_map_with_sidecar(&LabelMap::new(1, 1, vec![0]).unwrap(), &vocab, &p).unwrap();
        fs::write(&p, encode_pgm16(1, 1, &[3]).unwrap()).unwrap();
        assert!(matches!(load_label_map(&p), Err(RasterError::Range { id: 3, .. })));
    }

    #[test]
    fn validate_against_vocabulary() {
        let vocab = ClassVocabulary::new("t", &["a", "b"]).unwrap();
        LabelMap::new(2, 1, vec![1, IGNORE_ID]).unwrap().validate(&vocab).unwrap();
        assert!(LabelMap::new(2, 1, vec![2, 0]).unwrap().validate(&vocab).is_err());
    }

    #[test]
    fn logit_maps_reject_non_finite_and_bad_geometry() {
        assert!(matches!(LogitMap::new(1, 2, vec![0.0f32, f32::NAN]), Err(RasterError::NonFinite(1))));
        assert!(matches!(LogitMap::new(1, 1, vec![f64::INFINITY]), Err(RasterError::NonFinite(0))));
        assert!(LogitMap::<f32>::new(2, 2, vec![0.0; 3]).is_err());
        let a = LogitMap::filled(2, 2, 0.0f32).unwrap();
        let b = LogitMap::filled(3, 2, 0.0f32).unwrap();
        assert!(MaskStack::new(ClassId(0), vec![a.clone(), b]).is_err());
        assert!(MaskStack::<f32>::new(ClassId(0), vec![]).is_err());
        assert_eq!(MaskStack::new(ClassId(0), vec![a.clone(), a]).unwrap().depth(), 2);
    }

    #[test]
    fn nearest_neighbour_resize() {
        let m = LogitMap::new(2, 1, vec![1.0f32, 2.0]).unwrap();
        let r = m.resized(4, 2).unwrap();
        assert_eq!(r.values(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    proptest! {
        #[test]
        fn pgm_round_trip_is_bit_exact(w in 1u32..6, h in 1u32..6, seed in proptest::collection::vec(0u32..=65535, 36)) {
            let n = (w * h) as usize;
            let ids = seed[..n].to_vec();
            let bytes = encode_pgm16(w, h, &ids).unwrap();
            let (w2, h2, ids2) = decode_pgm16(Path::new("p"), &bytes).unwrap();
            prop_assert_eq!((w2, h2, &ids2), (w, h, &ids));
            prop_assert_eq!(encode_pgm16(w2, h2, &ids2).unwrap(), bytes);
        }
    }
}
