//! Classifier weight persistence: a textual header (format version,
//! architecture name, tensor manifest) followed by a contiguous little-endian
//! f32 payload.
//!
//! ```text
//! stadv-weights v1
//! model <architecture>
//! meta <single-line string>            (optional)
//! tensor <name> <d0>x<d1>... @ <offset>
//! ...
//! payload <byte count>
//! <raw f32 bytes>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Classifier;

const MAGIC_LINE: &str = "stadv-weights v1";

/// Serialize the classifier's weights. `meta` (single line, typically the
/// run configuration as JSON) is embedded in the header when given.
pub fn save_weights(g: &Classifier, path: &Path, meta: Option<&str>) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC_LINE);
    header.push('\n');
    header.push_str(&format!("model {}\n", g.name));
    if let Some(m) = meta {
        if m.contains('\n') {
            return Err(Error::InvalidArgument("weight meta must be a single line".into()));
        }
        header.push_str(&format!("meta {m}\n"));
    }

    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in &g.weights {
        let dims: Vec<String> = tensor.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} {} @ {}\n", dims.join("x"), payload.len()));
        for &v in &tensor.data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    header.push_str(&format!("payload {}\n", payload.len()));

    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

struct Parsed {
    arch: String,
    meta: Option<String>,
    entries: Vec<ManifestEntry>,
    payload: Vec<u8>,
}

struct Lines<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl Lines<'_> {
    fn next(&mut self, what: &str) -> Result<String> {
        let rest = &self.bytes[self.offset..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| {
            Error::parse(self.path, self.offset as u64, format!("missing newline in {what}"))
        })?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::parse(self.path, self.offset as u64, format!("non-UTF8 {what}")))?
            .to_string();
        self.offset += end + 1;
        Ok(line)
    }
}

fn parse_file(path: &Path) -> Result<Parsed> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Lines {
        bytes: &bytes,
        offset: 0,
        path,
    };

    if lines.next("magic")? != MAGIC_LINE {
        return Err(Error::parse(path, 0, "not a weight file (bad magic line)"));
    }
    let line_start = lines.offset as u64;
    let model_line = lines.next("model line")?;
    let arch = model_line
        .strip_prefix("model ")
        .ok_or_else(|| Error::parse(path, line_start, "expected 'model <name>'"))?
        .to_string();

    let mut meta = None;
    let mut entries = Vec::new();
    let payload_len;
    loop {
        let line_start = lines.offset as u64;
        let line = lines.next("manifest")?;
        if let Some(m) = line.strip_prefix("meta ") {
            meta = Some(m.to_string());
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 4 || parts[2] != "@" {
                return Err(Error::parse(path, line_start, format!("malformed tensor line '{line}'")));
            }
            let shape: Vec<usize> = parts[1]
                .split('x')
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| Error::parse(path, line_start, format!("bad dimension '{d}'")))
                })
                .collect::<Result<_>>()?;
            let off: usize = parts[3]
                .parse()
                .map_err(|_| Error::parse(path, line_start, format!("bad offset '{}'", parts[3])))?;
            entries.push(ManifestEntry {
                name: parts[0].to_string(),
                shape,
                offset: off,
            });
        } else if let Some(n) = line.strip_prefix("payload ") {
            payload_len = n
                .parse::<usize>()
                .map_err(|_| Error::parse(path, line_start, format!("bad payload length '{n}'")))?;
            break;
        } else {
            return Err(Error::parse(path, line_start, format!("unexpected header line '{line}'")));
        }
    }

    let payload_start = lines.offset;
    let payload = &bytes[payload_start..];
    if payload.len() != payload_len {
        return Err(Error::parse(
            path,
            payload_start as u64,
            format!("payload is {} bytes, header declares {payload_len}", payload.len()),
        ));
    }

    // offsets must tile the payload exactly, in order, without overlap
    let mut expected = 0usize;
    for e in &entries {
        if e.offset != expected {
            return Err(Error::parse(
                path,
                payload_start as u64,
                format!(
                    "tensor '{}' at offset {} overlaps or leaves a gap (expected {expected})",
                    e.name, e.offset
                ),
            ));
        }
        let nbytes = e.shape.iter().product::<usize>() * 4;
        expected = e.offset.checked_add(nbytes).ok_or_else(|| {
            Error::parse(path, payload_start as u64, format!("tensor '{}' size overflows", e.name))
        })?;
        if expected > payload_len {
            return Err(Error::parse(
                path,
                payload_start as u64,
                format!(
                    "tensor '{}' extends to byte {expected}, beyond the {payload_len}-byte payload",
                    e.name
                ),
            ));
        }
    }
    if expected != payload_len {
        return Err(Error::parse(
            path,
            payload_start as u64,
            format!("{} payload bytes not covered by the manifest", payload_len - expected),
        ));
    }

    Ok(Parsed {
        arch,
        meta,
        entries,
        payload: payload.to_vec(),
    })
}

/// Load weights into a classifier of the matching architecture. The file's
/// manifest must agree with the model's weight names and shapes; nothing is
/// written on any error.
pub fn load_weights(g: &mut Classifier, path: &Path) -> Result<()> {
    let parsed = parse_file(path)?;
    if parsed.arch != g.name {
        return Err(Error::InvalidArgument(format!(
            "weight file holds architecture '{}', classifier is '{}'",
            parsed.arch, g.name
        )));
    }
    if parsed.entries.len() != g.weights.len() {
        return Err(Error::InvalidArgument(format!(
            "manifest has {} tensors, model '{}' has {}",
            parsed.entries.len(),
            g.name,
            g.weights.len()
        )));
    }
    // validate everything before mutating the model
    for (entry, (name, tensor)) in parsed.entries.iter().zip(&g.weights) {
        if entry.name != *name || entry.shape != tensor.shape {
            return Err(Error::InvalidArgument(format!(
                "manifest tensor '{}' {:?} does not match model tensor '{}' {:?}",
                entry.name, entry.shape, name, tensor.shape
            )));
        }
    }
    for (entry, (_, tensor)) in parsed.entries.iter().zip(g.weights.iter_mut()) {
        let n = tensor.data.len();
        let bytes = &parsed.payload[entry.offset..entry.offset + 4 * n];
        for (v, chunk) in tensor.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
    }
    Ok(())
}

/// Architecture name and embedded meta line of a weight file.
pub fn read_weight_meta(path: &Path) -> Result<(String, Option<String>)> {
    let parsed = parse_file(path)?;
    Ok((parsed.arch, parsed.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_model;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.weights");
        let p2 = dir.path().join("b.weights");
        let mut g = build_model("A", 7).unwrap();
        save_weights(&g, &p1, Some("{\"seed\":7}")).unwrap();
        load_weights(&mut g, &p1).unwrap();
        save_weights(&g, &p2, Some("{\"seed\":7}")).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let (arch, meta) = read_weight_meta(&p1).unwrap();
        assert_eq!(arch, "A");
        assert_eq!(meta.as_deref(), Some("{\"seed\":7}"));
    }

    #[test]
    fn wrong_architecture_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.weights");
        let a = build_model("A", 1).unwrap();
        save_weights(&a, &p, None).unwrap();
        let mut b = build_model("B", 1).unwrap();
        let err = load_weights(&mut b, &p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("'A'") && msg.contains("'B'"), "{msg}");
    }

    #[test]
    fn tampered_offset_is_a_bounds_error_with_no_partial_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.weights");
        let mut g = build_model("A", 3).unwrap();
        save_weights(&g, &p, None).unwrap();

        let bytes = fs::read(&p).unwrap();
        let s = String::from_utf8_lossy(&bytes).into_owned();
        let tampered = s.replacen("@ 0\n", "@ 64\n", 1);
        assert_ne!(s, tampered, "expected an offset-0 tensor to tamper");
        fs::write(&p, tampered.into_bytes()).unwrap();

        let before: Vec<f64> = g.weights[0].1.data.clone();
        assert!(load_weights(&mut g, &p).is_err());
        assert_eq!(g.weights[0].1.data, before, "no partial mutation on error");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.weights");
        let g = build_model("A", 3).unwrap();
        save_weights(&g, &p, None).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 10);
        fs::write(&p, &bytes).unwrap();
        let mut g2 = build_model("A", 4).unwrap();
        assert!(load_weights(&mut g2, &p).is_err());
    }
}
