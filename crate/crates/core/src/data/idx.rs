//! IDX container parsing (the MNIST distribution format).

use std::fs;
use std::path::Path;

use super::{fnv1a, Dataset};
use crate::error::{Error, Result};
use crate::warp::Image;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.path,
                self.bytes.len() as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse_images(path: &Path, bytes: &[u8]) -> Result<Vec<Image>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.u32_be("image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::parse(
            path,
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let count = cur.u32_be("image count")? as usize;
    let rows = cur.u32_be("row count")? as usize;
    let cols = cur.u32_be("column count")? as usize;
    let payload = cur.take(count * rows * cols, "pixel payload")?;
    if cur.pos != bytes.len() {
        return Err(Error::parse(
            path,
            cur.pos as u64,
            format!("{} trailing bytes after pixel payload", bytes.len() - cur.pos),
        ));
    }
    Ok(payload
        .chunks(rows * cols)
        .map(|px| {
            let data = px.iter().map(|&b| b as f64 / 255.0).collect();
            Image::new(rows, cols, 1, data).expect("chunk size matches geometry")
        })
        .collect())
}

fn parse_labels(path: &Path, bytes: &[u8], num_classes: usize) -> Result<Vec<usize>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.u32_be("label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::parse(
            path,
            0,
            format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let count = cur.u32_be("label count")? as usize;
    let payload = cur.take(count, "label payload")?;
    if cur.pos != bytes.len() {
        return Err(Error::parse(
            path,
            cur.pos as u64,
            format!("{} trailing bytes after label payload", bytes.len() - cur.pos),
        ));
    }
    for (i, &b) in payload.iter().enumerate() {
        if b as usize >= num_classes {
            return Err(Error::parse(
                path,
                (8 + i) as u64,
                format!("label {b} out of range for {num_classes} classes"),
            ));
        }
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Load one MNIST split from standard IDX files: `split` is `train`
/// (train-images-idx3-ubyte / train-labels-idx1-ubyte) or `test`
/// (t10k-images-idx3-ubyte / t10k-labels-idx1-ubyte). Pixels are scaled to
/// [0, 1].
pub fn load_mnist(dir: &Path, split: &str) -> Result<Dataset> {
    let prefix = match split {
        "train" => "train",
        "test" => "t10k",
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split '{other}' (expected train or test)"
            )))
        }
    };
    let image_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let label_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let image_bytes = fs::read(&image_path).map_err(|e| Error::io(&image_path, e))?;
    let label_bytes = fs::read(&label_path).map_err(|e| Error::io(&label_path, e))?;

    let images = parse_images(&image_path, &image_bytes)?;
    let labels = parse_labels(&label_path, &label_bytes, 10)?;
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} labels in {}/{split}",
            images.len(),
            labels.len(),
            dir.display()
        )));
    }
    let checksum = fnv1a(&label_bytes, fnv1a(&image_bytes, 0));
    Ok(Dataset {
        images,
        labels,
        split: split.to_string(),
        checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(count: usize, rows: usize, cols: usize, pixel: u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        b.extend_from_slice(&(count as u32).to_be_bytes());
        b.extend_from_slice(&(rows as u32).to_be_bytes());
        b.extend_from_slice(&(cols as u32).to_be_bytes());
        b.extend(std::iter::repeat_n(pixel, count * rows * cols));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) {
        let mut f = std::fs::File::create(dir.join("train-images-idx3-ubyte")).unwrap();
        f.write_all(images).unwrap();
        let mut f = std::fs::File::create(dir.join("train-labels-idx1-ubyte")).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn loads_well_formed_files_scaled_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), &idx_images(3, 4, 4, 255), &idx_labels(&[0, 5, 9]));
        let ds = load_mnist(dir.path(), "train").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels, vec![0, 5, 9]);
        assert!(ds.images.iter().all(|i| i.data.iter().all(|&v| v == 1.0)));
        assert_eq!((ds.images[0].height, ds.images[0].width), (4, 4));
    }

    #[test]
    fn truncated_payload_names_the_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut imgs = idx_images(3, 4, 4, 7);
        imgs.truncate(imgs.len() - 5);
        write_pair(dir.path(), &imgs, &idx_labels(&[0, 1, 2]));
        let err = load_mnist(dir.path(), "train").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated") && msg.contains("byte"), "{msg}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut imgs = idx_images(1, 2, 2, 0);
        imgs[3] = 0x07;
        write_pair(dir.path(), &imgs, &idx_labels(&[0]));
        let err = load_mnist(dir.path(), "train").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), &idx_images(2, 2, 2, 0), &idx_labels(&[3, 10]));
        let err = load_mnist(dir.path(), "train").unwrap_err();
        assert!(err.to_string().contains("label 10"));
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), &idx_images(2, 2, 2, 0), &idx_labels(&[1, 2, 3]));
        let err = load_mnist(dir.path(), "train").unwrap_err();
        assert!(err.to_string().contains("2 images but 3 labels"));
    }

    #[test]
    fn ingestion_is_pure() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), &idx_images(2, 3, 3, 128), &idx_labels(&[4, 4]));
        let a = load_mnist(dir.path(), "train").unwrap();
        let b = load_mnist(dir.path(), "train").unwrap();
        assert_eq!(a.checksum, b.checksum);
        assert_eq!(a.images[0].data, b.images[0].data);
    }
}
