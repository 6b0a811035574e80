//! CIFAR-10 binary batch parsing: 3073-byte records of one label byte plus
//! 3072 channel-planar pixel bytes.

use std::fs;
use std::path::Path;

use super::{fnv1a, Dataset};
use crate::error::{Error, Result};
use crate::warp::Image;

const RECORD: usize = 3073;

fn parse_batch(path: &Path, bytes: &[u8], images: &mut Vec<Image>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::parse(
            path,
            bytes.len() as u64,
            format!("file size {} is not a positive multiple of {RECORD}", bytes.len()),
        ));
    }
    for (i, rec) in bytes.chunks(RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::parse(
                path,
                (i * RECORD) as u64,
                format!("label {label} out of range for 10 classes"),
            ));
        }
        // channel-planar bytes map directly onto our planar image layout
        let data = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Image::new(32, 32, 3, data)?);
        labels.push(label);
    }
    Ok(())
}

/// Load CIFAR-10 records from one `.bin` batch file, or from every
/// `data_batch_*.bin` (sorted) under a directory. Pixels are scaled
/// to [0, 1], geometry 32x32x3.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let mut files = Vec::new();
    if path.is_dir() {
        let mut names: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
            })
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no data_batch_*.bin files under {}",
                path.display()
            )));
        }
        files.extend(names);
    } else {
        files.push(path.to_path_buf());
    }

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut checksum = 0u64;
    for file in &files {
        let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
        checksum = fnv1a(&bytes, checksum);
        parse_batch(file, &bytes, &mut images, &mut labels)?;
    }
    Ok(Dataset {
        images,
        labels,
        split: "cifar10".into(),
        checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, 3072));
        r
    }

    #[test]
    fn one_batch_of_10000_records_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut f = std::fs::File::create(&path).unwrap();
        let mut bytes = Vec::with_capacity(10_000 * RECORD);
        for i in 0..10_000u32 {
            bytes.extend(record((i % 10) as u8, (i % 251) as u8));
        }
        assert_eq!(bytes.len(), 10_000 * RECORD);
        f.write_all(&bytes).unwrap();
        let ds = load_cifar10(&path).unwrap();
        assert_eq!(ds.len(), 10_000);
    }

    #[test]
    fn size_must_be_a_record_multiple() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(&record(1, 9)[..3000]).unwrap();
        let err = load_cifar10(&path).unwrap_err();
        assert!(err.to_string().contains("3073"));
    }

    #[test]
    fn first_pixel_matches_manual_offset_decode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut bytes = record(3, 0);
        bytes[1] = 200; // red plane, pixel (0,0)
        bytes[1 + 1024] = 100; // green plane
        bytes[1 + 2048] = 50; // blue plane
        std::fs::File::create(&path).unwrap().write_all(&bytes).unwrap();
        let ds = load_cifar10(&path).unwrap();
        let img = &ds.images[0];
        assert_eq!(ds.labels[0], 3);
        assert!((img.get(0, 0, 0) - 200.0 / 255.0).abs() < 1e-15);
        assert!((img.get(1, 0, 0) - 100.0 / 255.0).abs() < 1e-15);
        assert!((img.get(2, 0, 0) - 50.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn bad_label_byte_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut bytes = record(0, 0);
        bytes.extend(record(11, 0));
        std::fs::File::create(&path).unwrap().write_all(&bytes).unwrap();
        let err = load_cifar10(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("label 11") && msg.contains("3073"), "{msg}");
    }
}
