//! File formats: PNG images and label maps, landmark text files, `TWSM`
//! score maps, palette sidecars and tab-separated manifests.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{ExtendedColorType, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::geometry::{Landmarks5, Point2};
use crate::labels::{CLASS_NAMES, NUM_CLASSES, PALETTE};
use crate::raster::{Image, LabelMap};
use crate::training::TrainSample;

fn decode_png(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::malformed(path, None, other.to_string()),
    })
}

fn encode_png(path: &Path, bytes: &[u8], width: usize, height: usize, color: ExtendedColorType) -> Result<()> {
    image::save_buffer_with_format(path, bytes, width as u32, height as u32, color, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::malformed(path, None, other.to_string()),
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an 8-bit PNG as values in `[0, 1]`. Grayscale stays single
/// channel; alpha is dropped.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = decode_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img {
        image::DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        image::DynamicImage::ImageLumaA8(_) => (1, img.to_luma8().into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    Image::new(h, w, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Loads an image and replicates a gray channel to RGB.
pub fn load_rgb(path: &Path) -> Result<Image> {
    let img = load_image(path)?;
    Ok(match img.channels() {
        3 => img,
        _ => Image::from_fn(img.height(), img.width(), 3, |i, j, _| img.pixel(i, j)[0]),
    })
}

/// Saves a 1- or 3-channel image as 8-bit PNG, rounding to the nearest level.
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    let color = match image.channels() {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        c => return Err(Error::ShapeMismatch(format!("cannot save a {c}-channel image as PNG"))),
    };
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    encode_png(path, &bytes, image.width(), image.height(), color)
}

/// Loads a single-channel PNG of class indices.
pub fn load_labelmap(path: &Path) -> Result<LabelMap> {
    let img = decode_png(path)?;
    let image::DynamicImage::ImageLuma8(buf) = img else {
        return Err(Error::malformed(path, None, "label map must be an 8-bit single-channel PNG"));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let data = buf.into_raw();
    if let Some(k) = data.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(Error::malformed(
            path,
            None,
            format!(
                "class index {} at row {}, column {} exceeds the {NUM_CLASSES}-class palette",
                data[k],
                k / w,
                k % w
            ),
        ));
    }
    LabelMap::new(h, w, data)
}

/// Path of the palette sidecar that accompanies `labels`.
pub fn palette_sidecar(labels: &Path) -> PathBuf {
    labels.with_extension("palette")
}

/// Writes the label map and its palette sidecar.
pub fn save_labelmap(labels: &LabelMap, path: &Path) -> Result<()> {
    if labels.max_label() as usize >= NUM_CLASSES {
        return Err(Error::ClassOutOfRange {
            class: labels.max_label() as usize,
            classes: NUM_CLASSES,
        });
    }
    encode_png(path, labels.data(), labels.width(), labels.height(), ExtendedColorType::L8)?;
    save_palette(&PALETTE, &palette_sidecar(path))
}

/// `index name rrggbb` per line.
pub fn save_palette(palette: &[[u8; 3]; NUM_CLASSES], path: &Path) -> Result<()> {
    let mut s = String::new();
    for (k, (name, c)) in CLASS_NAMES.iter().zip(palette).enumerate() {
        s.push_str(&format!("{k} {name} {:02x}{:02x}{:02x}\n", c[0], c[1], c[2]));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_palette(path: &Path) -> Result<[[u8; 3]; NUM_CLASSES]> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = [[0u8; 3]; NUM_CLASSES];
    let mut seen = [false; NUM_CLASSES];
    for (offset, line) in line_offsets(&text) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |r: &str| Error::malformed(path, Some(offset), r.to_string());
        let [idx, _name, hex] = f[..] else {
            return Err(bad("expected `index name rrggbb`"));
        };
        let k: usize = idx.parse().map_err(|_| bad("bad index"))?;
        if k >= NUM_CLASSES {
            return Err(bad("index outside the palette"));
        }
        let rgb = u32::from_str_radix(hex, 16).ok().filter(|_| hex.len() == 6).ok_or_else(|| bad("bad color"))?;
        out[k] = [(rgb >> 16) as u8, (rgb >> 8) as u8, rgb as u8];
        seen[k] = true;
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::malformed(path, None, format!("palette needs all {NUM_CLASSES} entries")));
    }
    Ok(out)
}

/// Non-blank lines with their byte offsets; `#` starts a comment line.
fn line_offsets(text: &str) -> impl Iterator<Item = (u64, &str)> {
    let mut offset = 0u64;
    text.split_inclusive('\n').filter_map(move |raw| {
        let at = offset;
        offset += raw.len() as u64;
        let line = raw.trim_end_matches(['\n', '\r']);
        (!line.trim().is_empty() && !line.trim_start().starts_with('#')).then_some((at, line))
    })
}

/// Five `x y` lines in pixel units: left eye, right eye, nose, left and
/// right mouth corner.
pub fn load_landmarks(path: &Path) -> Result<Landmarks5> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(&text, path)
}

pub fn parse_landmarks(text: &str, path: &Path) -> Result<Landmarks5> {
    let mut pts = Vec::with_capacity(5);
    for (offset, line) in line_offsets(text) {
        if pts.len() == 5 {
            return Err(Error::malformed(path, Some(offset), "more than five landmark lines"));
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::malformed(path, Some(offset), format!("cannot parse `{line}`")))?;
        let [x, y] = v[..] else {
            return Err(Error::malformed(path, Some(offset), "expected two numbers per line"));
        };
        pts.push(Point2::new(x, y));
    }
    let Ok(points) = <[Point2; 5]>::try_from(pts.as_slice()) else {
        return Err(Error::malformed(path, Some(text.len() as u64), format!("expected 5 landmarks, found {}", pts.len())));
    };
    Landmarks5::new(points).map_err(|e| Error::malformed(path, None, e.to_string()))
}

pub fn save_landmarks(lm: &Landmarks5, path: &Path) -> Result<()> {
    let s: String = lm.points().iter().map(|p| format!("{} {}\n", p.x, p.y)).collect();
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

const SCORE_MAGIC: &[u8; 4] = b"TWSM";

/// `TWSM`, then `u32` H, W, C and H·W·C `f32`, all little-endian.
pub fn write_scores<W: Write>(scores: &Image, mut out: W) -> std::io::Result<()> {
    out.write_all(SCORE_MAGIC)?;
    for d in [scores.height(), scores.width(), scores.channels()] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in scores.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

pub fn save_scores(scores: &Image, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_scores(scores, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(bytes: &[u8], path: &Path) -> Result<Image> {
    if bytes.len() < 16 {
        return Err(Error::malformed(path, Some(bytes.len() as u64), "truncated header"));
    }
    if &bytes[..4] != SCORE_MAGIC {
        return Err(Error::malformed(path, Some(0), "bad magic, expected TWSM"));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::malformed(path, Some(4), format!("zero dimension in {h}x{w}x{c}")));
    }
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::malformed(path, Some(4), "dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() != n * 4 {
        let at = 16 + body.len().min(n * 4);
        return Err(Error::malformed(
            path,
            Some(at as u64),
            format!("expected {} payload bytes, found {}", n * 4, body.len()),
        ));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Image::new(h, w, c, data)
}

pub fn load_scores(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_scores(&bytes, path)
}

/// Blends palette colors over `image` with 50% alpha.
pub fn colorize_overlay(image: &Image, labels: &LabelMap, palette: &[[u8; 3]; NUM_CLASSES]) -> Result<Image> {
    if (image.height(), image.width()) != (labels.height(), labels.width()) {
        return Err(Error::ShapeMismatch("overlay image and labels differ in size".into()));
    }
    Ok(Image::from_fn(image.height(), image.width(), 3, |i, j, k| {
        let src = image.pixel(i, j);
        let v = src[k.min(src.len() - 1)];
        let c = palette[labels.get(i, j) as usize][k] as f32 / 255.0;
        0.5 * v + 0.5 * c
    }))
}

/// One manifest line, paths resolved against the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub labels: Option<PathBuf>,
    pub landmarks: PathBuf,
}

/// Tab-separated records `image <TAB> labels <TAB> landmarks`; the label
/// column may be empty or left out (`image <TAB> landmarks`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Parses the manifest and checks that every referenced file exists and
    /// that label maps match their images in size.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        for (offset, line) in line_offsets(&text) {
            let f: Vec<&str> = line.split('\t').collect();
            let (image, labels, landmarks) = match f[..] {
                [i, l] => (i, "", l),
                [i, lab, l] => (i, lab, l),
                _ => return Err(Error::malformed(path, Some(offset), "expected 2 or 3 tab-separated fields")),
            };
            let resolve = |p: &str| base_dir.join(p.trim());
            let rec = ManifestRecord {
                image: resolve(image),
                labels: (!labels.trim().is_empty()).then(|| resolve(labels)),
                landmarks: resolve(landmarks),
            };
            for p in [Some(&rec.image), rec.labels.as_ref(), Some(&rec.landmarks)].into_iter().flatten() {
                if !p.is_file() {
                    return Err(Error::malformed(path, Some(offset), format!("missing file {}", p.display())));
                }
            }
            if let Some(l) = &rec.labels {
                let dims = |p: &Path| image::image_dimensions(p).map_err(|e| Error::malformed(p, None, e.to_string()));
                if dims(&rec.image)? != dims(l)? {
                    return Err(Error::malformed(path, Some(offset), format!("{} and {} differ in size", rec.image.display(), l.display())));
                }
            }
            records.push(rec);
        }
        Ok(Self { base_dir, records })
    }

    /// Writes records with paths relative to `base_dir` where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let rel = |p: &Path| p.strip_prefix(&self.base_dir).unwrap_or(p).display().to_string();
        let mut s = String::new();
        for r in &self.records {
            let labels = r.labels.as_deref().map(rel).unwrap_or_default();
            s.push_str(&format!("{}\t{}\t{}\n", rel(&r.image), labels, rel(&r.landmarks)));
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Loads every record that has a label map.
    pub fn load_samples(&self) -> Result<Vec<TrainSample>> {
        self.records
            .iter()
            .filter_map(|r| r.labels.as_ref().map(|l| (r, l)))
            .map(|(r, l)| TrainSample::new(load_rgb(&r.image)?, load_labelmap(l)?, load_landmarks(&r.landmarks)?))
            .collect()
    }
}

/// Writes `images/`, `labels/`, `landmarks/` and `manifest.tsv` under `dir`.
pub fn save_dataset(samples: &[TrainSample], dir: &Path) -> Result<Manifest> {
    let mut manifest = Manifest {
        base_dir: dir.to_path_buf(),
        records: Vec::with_capacity(samples.len()),
    };
    for sub in ["images", "labels", "landmarks"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (k, s) in samples.iter().enumerate() {
        let rec = ManifestRecord {
            image: dir.join(format!("images/{k:04}.png")),
            labels: Some(dir.join(format!("labels/{k:04}.png"))),
            landmarks: dir.join(format!("landmarks/{k:04}.txt")),
        };
        save_image(&s.image, &rec.image)?;
        save_labelmap(&s.labels, rec.labels.as_ref().unwrap())?;
        save_landmarks(&s.landmarks, &rec.landmarks)?;
        manifest.records.push(rec);
    }
    manifest.save(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}
