//! Binary PPM (P6) images, binary PGM (P5) label maps and JSON-lines boxes.
//!
//! Dataset layout on disk:
//!
//! ```text
//! <root>/images/<id>.ppm
//! <root>/labels/<id>.pgm
//! <root>/boxes.jsonl
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SceneSample;
use crate::det_loss::{BoxLabel, GroundTruth};
use crate::fsutil::{read, write_atomic};
use crate::seg_loss::LabelMap;
use crate::tensor::DenseMap;
use crate::{Error, Result};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 3-channel map in `[0, 1]` as P6 with maxval 255.
pub fn encode_ppm(image: &DenseMap) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::shape(format!(
            "PPM needs 3 channels, got {}",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(image.get(c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.ids());
    out
}

struct Header {
    width: usize,
    height: usize,
    payload: usize,
}

/// Parses `magic width height maxval` with `#` comments and a single
/// whitespace byte before the payload.
fn parse_header(bytes: &[u8], magic: &[u8; 2], kind: &'static str) -> Result<Header> {
    let bad = |reason: &str| Error::Format {
        kind,
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad("wrong magic number"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("missing whitespace after maxval"));
    }
    if fields[2] != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        payload: pos + 1,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<DenseMap> {
    let hd = parse_header(bytes, b"P6", "PPM")?;
    let (h, w) = (hd.height, hd.width);
    let data = &bytes[hd.payload..];
    if data.len() < 3 * h * w {
        return Err(Error::Format {
            kind: "PPM",
            reason: format!("payload has {} bytes, expected {}", data.len(), 3 * h * w),
        });
    }
    Ok(DenseMap::from_fn(3, h, w, |c, y, x| {
        data[(y * w + x) * 3 + c] as f64 / 255.0
    }))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let hd = parse_header(bytes, b"P5", "PGM")?;
    let n = hd.height * hd.width;
    let data = &bytes[hd.payload..];
    if data.len() < n {
        return Err(Error::Format {
            kind: "PGM",
            reason: format!("payload has {} bytes, expected {n}", data.len()),
        });
    }
    LabelMap::new(hd.height, hd.width, data[..n].to_vec())
}

pub fn write_image(path: &Path, image: &DenseMap) -> Result<()> {
    write_atomic(path, &encode_ppm(image)?)
}

pub fn read_image(path: &Path) -> Result<DenseMap> {
    decode_ppm(&read(path)?)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_atomic(path, &encode_pgm(labels))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    decode_pgm(&read(path)?)
}

/// One line of `boxes.jsonl`: boxes as `[x1, y1, x2, y2, class]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxesRecord {
    pub image_id: u64,
    pub boxes: Vec<[f64; 5]>,
}

impl BoxesRecord {
    pub fn new(image_id: u64, gt: &GroundTruth) -> Self {
        BoxesRecord {
            image_id,
            boxes: gt
                .boxes
                .iter()
                .map(|b| [b.x1, b.y1, b.x2, b.y2, b.class as f64])
                .collect(),
        }
    }

    pub fn to_ground_truth(&self) -> Result<GroundTruth> {
        let boxes = self
            .boxes
            .iter()
            .map(|b| {
                let class = b[4];
                if class.fract() != 0.0 || !(0.0..255.0).contains(&class) {
                    return Err(Error::Format {
                        kind: "boxes",
                        reason: format!("class {class} is not a valid id"),
                    });
                }
                Ok(BoxLabel {
                    x1: b[0],
                    y1: b[1],
                    x2: b[2],
                    y2: b[3],
                    class: class as u8,
                })
            })
            .collect::<Result<_>>()?;
        Ok(GroundTruth { boxes })
    }
}

pub fn encode_boxes(records: &[BoxesRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format {
            kind: "boxes",
            reason: e.to_string(),
        })?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn decode_boxes(bytes: &[u8]) -> Result<Vec<BoxesRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format {
        kind: "boxes",
        reason: e.to_string(),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                kind: "boxes",
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn write_boxes(path: &Path, records: &[BoxesRecord]) -> Result<()> {
    write_atomic(path, &encode_boxes(records)?)
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoxesRecord>> {
    decode_boxes(&read(path)?)
}

fn image_path(root: &Path, id: u64) -> std::path::PathBuf {
    root.join("images").join(format!("{id:06}.ppm"))
}

fn label_path(root: &Path, id: u64) -> std::path::PathBuf {
    root.join("labels").join(format!("{id:06}.pgm"))
}

/// Materializes samples under `root` in the standard layout.
pub fn write_dataset(root: &Path, samples: &[(u64, SceneSample)]) -> Result<()> {
    let mut records = Vec::with_capacity(samples.len());
    for (id, s) in samples {
        write_image(&image_path(root, *id), &s.image)?;
        write_labels(&label_path(root, *id), &s.labels)?;
        records.push(BoxesRecord::new(*id, &s.gt));
    }
    write_boxes(&root.join("boxes.jsonl"), &records)
}

/// Loads every sample listed in `<root>/boxes.jsonl`.
pub fn read_dataset(root: &Path) -> Result<Vec<(u64, SceneSample)>> {
    read_boxes(&root.join("boxes.jsonl"))?
        .into_iter()
        .map(|r| {
            let image = read_image(&image_path(root, r.image_id))?;
            let labels = read_labels(&label_path(root, r.image_id))?;
            let gt = r.to_ground_truth()?;
            Ok((r.image_id, SceneSample { image, labels, gt }))
        })
        .collect()
}
