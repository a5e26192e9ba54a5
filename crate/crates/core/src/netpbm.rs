//! Binary PPM (P6) images and PGM (P5) label maps.
//!
//! Label maps store one class id per pixel; 255 marks unlabeled pixels.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::files::atomic_write;
use crate::seg::LabeledGrid;
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let bad = |msg: &str| Error::data(path, msg);
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(&format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after header"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit maxval (1..=255) is supported"));
    }
    Ok(Header {
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

fn raster<'a>(bytes: &'a [u8], h: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let body = &bytes[h.offset..];
    if body.len() < need {
        return Err(Error::data(
            path,
            format!("truncated raster: {} of {need} bytes", body.len()),
        ));
    }
    Ok(&body[..need])
}

/// Parses a P6 image into an `[H, W, 3]` tensor with values `v / maxval`.
pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let h = parse_header(bytes, b"P6", path)?;
    let data = raster(bytes, &h, 3, path)?
        .iter()
        .map(|&b| f64::from(b) / h.maxval as f64)
        .collect();
    Tensor::new(&[h.height, h.width, 3], data)
}

/// Parses a P5 map into `(height, width, values)`.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(bytes, b"P5", path)?;
    Ok((h.height, h.width, raster(bytes, &h, 1, path)?.to_vec()))
}

/// Encodes an `[H, W, 3]` tensor with values in `[0, 1]` as P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w, 3] = *image.shape() else {
        return Err(Error::contract(format!(
            "PPM needs an HxWx3 image, got {:?}",
            image.shape()
        )));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_pgm(height: usize, width: usize, values: &[u8]) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::dim("pgm", &[height, width], &[values.len()]));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::data(path, e.to_string()))
}

/// Loads one image/label pair, checking extents and label range.
pub fn load_pair(image: &Path, label: &Path, num_classes: usize) -> Result<LabeledGrid> {
    let img = parse_ppm(&read(image)?, image)?;
    let (h, w, labels) = parse_pgm(&read(label)?, label)?;
    if [h, w] != img.shape()[..2] {
        return Err(Error::data(
            label,
            format!(
                "label map is {h}x{w} but {} is {}x{}",
                image.display(),
                img.shape()[0],
                img.shape()[1]
            ),
        ));
    }
    LabeledGrid::new(img, labels, num_classes).map_err(|e| match e {
        Error::Label { pixel, label: l, classes } => Error::data(
            label,
            format!("label {l} at pixel {pixel} is outside 0..{classes}"),
        ),
        other => other,
    })
}

fn sorted_entries(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::data(dir, e.to_string()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Pairs every `NAME.ppm` in `image_dir` with `NAME.pgm` in `label_dir`, in
/// name order.
pub fn load_pairs(image_dir: &Path, label_dir: &Path, num_classes: usize) -> Result<Vec<LabeledGrid>> {
    let images = sorted_entries(image_dir, "ppm")?;
    let labels = sorted_entries(label_dir, "pgm")?;
    if images.is_empty() {
        return Err(Error::data(image_dir, "no .ppm images found"));
    }
    for l in &labels {
        let twin = image_dir.join(l.file_stem().unwrap_or_default()).with_extension("ppm");
        if !images.contains(&twin) {
            return Err(Error::data(l, "label map has no matching image"));
        }
    }
    images
        .iter()
        .map(|img| {
            let label = label_dir.join(img.file_stem().unwrap_or_default()).with_extension("pgm");
            if !label.exists() {
                return Err(Error::data(img, "image has no matching label map"));
            }
            load_pair(img, &label, num_classes)
        })
        .collect()
}

/// Loads a manifest of `image_path<TAB>label_path` lines; relative paths are
/// resolved against the manifest's directory. Blank lines and lines starting
/// with `#` are skipped.
pub fn load_manifest(manifest: &Path, num_classes: usize) -> Result<Vec<LabeledGrid>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::data(manifest, e.to_string()))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((img, lab)) = line.split_once('\t') else {
            return Err(Error::data(manifest, format!("line {}: expected image<TAB>label", n + 1)));
        };
        out.push(load_pair(&base.join(img), &base.join(lab), num_classes)?);
    }
    if out.is_empty() {
        return Err(Error::data(manifest, "manifest lists no pairs"));
    }
    Ok(out)
}

/// Writes `images/NNNNN.ppm`, `labels/NNNNN.pgm` and `manifest.tsv` under
/// `dir`. Every file is written atomically.
pub fn write_pairs(dir: &Path, data: &[LabeledGrid]) -> Result<()> {
    let (img_dir, lab_dir) = (dir.join("images"), dir.join("labels"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&lab_dir)?;
    let mut manifest = String::new();
    for (i, g) in data.iter().enumerate() {
        let name = format!("{i:05}");
        atomic_write(&img_dir.join(format!("{name}.ppm")), &encode_ppm(&g.image)?)?;
        atomic_write(
            &lab_dir.join(format!("{name}.pgm")),
            &encode_pgm(g.height(), g.width(), &g.labels)?,
        )?;
        manifest.push_str(&format!("images/{name}.ppm\tlabels/{name}.pgm\n"));
    }
    atomic_write(&dir.join("manifest.tsv"), manifest.as_bytes())
}
