//! Files on disk: PNM images, `.pts` annotations and JSON manifests that tie
//! them together.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patches::{normalize_face, FaceBox, Image, ImageError, NormalizeConfig};
use crate::sampling::Face;
use crate::shape::{LandmarkSet, ShapeError, ShapeModel};
use crate::synth::SyntheticDataset;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Per-side growth of the landmark bounding box when an entry has no face
/// box, so the box ends up 20% larger overall.
pub const FALLBACK_BOX_EXPAND: f64 = 0.1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}: expected {expected} landmarks, found {found}", path.display())]
    PointCount { path: PathBuf, expected: usize, found: usize },
    #[error("invalid image {}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("{}: entry {entry} has neither a face box nor an annotation", path.display())]
    MissingBox { path: PathBuf, entry: usize },
    #[error("cannot fit the shape model to {}", path.display())]
    Shape {
        path: PathBuf,
        #[source]
        source: ShapeError,
    },
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Pixel data read from a PNM file, scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Pixmap {
    pub fn into_image(self, face_box: FaceBox) -> Result<Image, ImageError> {
        Image::new(self.width, self.height, self.channels, self.pixels, face_box)
    }
}

/// Decodes binary PGM (P5) or PPM (P6), 8- or 16-bit.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Pixmap> {
    let mut pos = 0;
    let mut line = 1;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                if bytes[pos] == b'\n' {
                    line += 1;
                }
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, line, "truncated PNM header"));
        }
        fields.push((String::from_utf8_lossy(&bytes[start..pos]).into_owned(), line));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() {
        return Err(parse_err(path, line, "missing PNM raster"));
    }
    pos += 1;
    let channels = match fields[0].0.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(parse_err(path, 1, format!("unsupported PNM magic {other:?}, expected P5 or P6"))),
    };
    let mut dims = [0usize; 3];
    for (d, (text, l)) in dims.iter_mut().zip(&fields[1..]) {
        *d = text
            .parse()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| parse_err(path, *l, format!("invalid PNM header value {text:?}")))?;
    }
    let [width, height, maxval] = dims;
    if maxval > 65535 {
        return Err(parse_err(path, fields[3].1, format!("maxval {maxval} exceeds 65535")));
    }
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let n = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < n * bytes_per {
        return Err(parse_err(
            path,
            line,
            format!("raster holds {} bytes, expected {}", raster.len(), n * bytes_per),
        ));
    }
    let scale = maxval as f64;
    let pixels = if bytes_per == 1 {
        raster[..n].iter().map(|&b| b as f64 / scale).collect()
    } else {
        raster[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    Ok(Pixmap {
        width,
        height,
        channels,
        pixels,
    })
}

pub fn read_pnm(path: &Path) -> Result<Pixmap> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pnm(&bytes, path)
}

/// Writes an 8-bit P5 or P6 file; values are clamped to `[0, 1]`.
pub fn write_pnm(path: &Path, image: &Image) -> Result<()> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(io_err(path))
}

/// Parses the `version / n_points / { x y ... }` annotation format.
pub fn parse_pts(text: &str, path: &Path) -> Result<LandmarkSet> {
    let mut declared = None;
    let mut points = Vec::new();
    let mut open = false;
    let mut closed = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with("//") {
            continue;
        }
        if closed {
            return Err(parse_err(path, line, "content after closing brace"));
        }
        if !open {
            if let Some(v) = t.strip_prefix("version:") {
                v.trim().parse::<f64>().map_err(|_| parse_err(path, line, "invalid version"))?;
            } else if let Some(v) = t.strip_prefix("n_points:") {
                declared = Some(
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| parse_err(path, line, format!("invalid point count {:?}", v.trim())))?,
                );
            } else if t == "{" {
                open = true;
            } else {
                return Err(parse_err(path, line, format!("unexpected header line {t:?}")));
            }
            continue;
        }
        if t == "}" {
            closed = true;
            continue;
        }
        let mut it = t.split_whitespace().map(str::parse::<f64>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) if x.is_finite() && y.is_finite() => points.push([x, y]),
            _ => return Err(parse_err(path, line, format!("expected two finite coordinates, found {t:?}"))),
        }
    }
    let last = text.lines().count();
    let declared = declared.ok_or_else(|| parse_err(path, last, "missing n_points header"))?;
    if !closed {
        return Err(parse_err(path, last, "missing closing brace"));
    }
    if points.len() != declared {
        return Err(parse_err(
            path,
            last,
            format!("header declares {declared} points but {} were listed", points.len()),
        ));
    }
    Ok(LandmarkSet::new(points))
}

pub fn read_pts(path: &Path) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_pts(&text, path)
}

pub fn format_pts(landmarks: &LandmarkSet) -> String {
    let mut s = format!("version: 1\nn_points: {}\n{{\n", landmarks.len());
    for p in landmarks.points() {
        s.push_str(&format!("{} {}\n", p[0], p[1]));
    }
    s.push_str("}\n");
    s
}

pub fn write_pts(path: &Path, landmarks: &LandmarkSet) -> Result<()> {
    fs::write(path, format_pts(landmarks)).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_box: Option<FaceBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub entries: Vec<ManifestEntry>,
    /// Free-form record of how the data was produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            entries,
            generator: None,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(parse_err(
                path,
                1,
                format!("unsupported schema_version {}, expected {MANIFEST_SCHEMA_VERSION}", m.schema_version),
            ));
        }
        for (i, e) in m.entries.iter().enumerate() {
            if let Some(b) = e.face_box {
                if !b.is_valid() {
                    return Err(parse_err(path, 1, format!("entry {i} has an invalid face box {b:?}")));
                }
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(io_err(path))
    }
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// One manifest entry in raw image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEntry {
    /// The image path as written in the manifest.
    pub id: String,
    pub image: Image,
    pub landmarks: Option<LandmarkSet>,
}

fn load_entry(base: &Path, manifest_path: &Path, index: usize, e: &ManifestEntry) -> Result<RawEntry> {
    let image_path = base.join(&e.image);
    let pix = read_pnm(&image_path)?;
    let landmarks = e.annotation.as_ref().map(|a| read_pts(&base.join(a))).transpose()?;
    let face_box = match (e.face_box, &landmarks) {
        (Some(b), _) => b,
        (None, Some(l)) => FaceBox::around(l, FALLBACK_BOX_EXPAND),
        (None, None) => {
            return Err(IoError::MissingBox {
                path: manifest_path.to_path_buf(),
                entry: index,
            })
        }
    };
    let image = pix.into_image(face_box).map_err(|source| IoError::Image {
        path: image_path.clone(),
        source,
    })?;
    Ok(RawEntry {
        id: e.image.to_string_lossy().into_owned(),
        image,
        landmarks,
    })
}

/// Reads every entry in manifest order.
pub fn load_raw(manifest_path: &Path) -> Result<Vec<RawEntry>> {
    let m = Manifest::read(manifest_path)?;
    if m.entries.is_empty() {
        log::warn!("{}: manifest has no entries", manifest_path.display());
    }
    let base = base_dir(manifest_path);
    m.entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| load_entry(&base, manifest_path, i, e))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub faces: Vec<Face>,
    /// Entries without an annotation.
    pub skipped: usize,
}

/// Loads, normalises and fits every annotated entry. A landmark count that
/// differs from the model is an error.
pub fn load_dataset(manifest_path: &Path, model: &ShapeModel, norm: &NormalizeConfig) -> Result<Dataset> {
    let m = Manifest::read(manifest_path)?;
    let raw = load_raw(manifest_path)?;
    let base = base_dir(manifest_path);
    let mut skipped = 0;
    let mut faces = Vec::with_capacity(raw.len());
    for (entry, r) in m.entries.iter().zip(raw) {
        let Some(landmarks) = r.landmarks else {
            skipped += 1;
            continue;
        };
        let ann_path = base.join(entry.annotation.as_ref().expect("annotated entry"));
        if landmarks.len() != model.landmark_count() {
            return Err(IoError::PointCount {
                path: ann_path,
                expected: model.landmark_count(),
                found: landmarks.len(),
            });
        }
        let n = normalize_face(&r.image, norm).map_err(|source| IoError::Image {
            path: base.join(&entry.image),
            source,
        })?;
        let local = n.map.landmarks_to_normalized(&landmarks);
        let face = Face::new(r.id, n.image, local, n.map, model).map_err(|source| IoError::Shape { path: ann_path, source })?;
        faces.push(face);
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} entries without annotations", manifest_path.display());
    }
    Ok(Dataset { faces, skipped })
}

/// `.pts` file name used for a prediction of the entry `id`.
pub fn prediction_file_name(id: &str) -> String {
    let stem = Path::new(id).with_extension("");
    let flat: String = stem
        .to_string_lossy()
        .chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect();
    format!("{flat}.pts")
}

/// Writes one `.pts` per prediction (raw image coordinates) into `dir`.
pub fn write_predictions(dir: &Path, predictions: &[(String, LandmarkSet)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    predictions
        .iter()
        .map(|(id, l)| {
            let path = dir.join(prediction_file_name(id));
            write_pts(&path, l)?;
            Ok(path)
        })
        .collect()
}

pub fn read_predictions(dir: &Path, ids: &[String]) -> Result<Vec<LandmarkSet>> {
    ids.iter().map(|id| read_pts(&dir.join(prediction_file_name(id)))).collect()
}

/// Writes images, annotations and `manifest.json`; returns the manifest path.
pub fn write_synthetic(dataset: &SyntheticDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let width = dataset.faces.len().max(1).to_string().len().max(4);
    let entries = dataset
        .faces
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let ext = if f.image.channels() == 1 { "pgm" } else { "ppm" };
            let image = PathBuf::from(format!("face_{i:0width$}.{ext}"));
            let annotation = image.with_extension("pts");
            write_pnm(&dir.join(&image), &f.image)?;
            write_pts(&dir.join(&annotation), &f.landmarks)?;
            Ok(ManifestEntry {
                image,
                annotation: Some(annotation),
                face_box: Some(f.image.face_box()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = Manifest::new(entries);
    manifest.generator = Some(serde_json::to_value(dataset.spec).expect("spec serializes"));
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

/// Appends newline-delimited JSON records.
pub struct NdjsonWriter {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl NdjsonWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = fs::File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.out, "{line}").map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}
