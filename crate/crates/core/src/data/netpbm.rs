//! Raw PGM (P5) and PPM (P6) encoding and decoding, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::warp::Image;

/// Quantize a pixel to a byte: scale into [0, 255] and round half up.
fn quantize(v: f64, lo: f64, hi: f64) -> u8 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0 + 0.5).floor() as u8
}

/// Write a grayscale image as P5 or a 3-channel image as P6. An optional
/// single-line comment (typically the run configuration) is embedded in the
/// header.
pub fn export_image_with_comment(x: &Image, path: &Path, comment: Option<&str>) -> Result<()> {
    let magic = match x.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::InvalidArgument(format!(
                "netpbm export supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut bytes = Vec::new();
    bytes.extend_from_slice(magic.as_bytes());
    bytes.push(b'\n');
    if let Some(c) = comment {
        if c.contains('\n') {
            return Err(Error::InvalidArgument("netpbm comment must be a single line".into()));
        }
        bytes.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    bytes.extend_from_slice(format!("{} {}\n255\n", x.width, x.height).as_bytes());
    for u in 0..x.height {
        for v in 0..x.width {
            for c in 0..x.channels {
                bytes.push(quantize(x.get(c, u, v), x.lo, x.hi));
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn export_image(x: &Image, path: &Path) -> Result<()> {
    export_image_with_comment(x, path, None)
}

/// Read a raw P5/P6 file back into a [0, 1] image.
pub fn import_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;

    let token = |pos: &mut usize| -> Result<String> {
        // skip whitespace and '#' comments, per the netpbm header grammar
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::parse(path, start as u64, "truncated netpbm header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = token(&mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::parse(path, 0, format!("unsupported netpbm magic '{other}'"))),
    };
    let width: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::parse(path, pos as u64, "bad width"))?;
    let height: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::parse(path, pos as u64, "bad height"))?;
    let maxval: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::parse(path, pos as u64, "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::parse(path, pos as u64, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(Error::parse(
            path,
            bytes.len() as u64,
            format!("raster truncated: need {need} bytes at offset {pos}, file has {}", bytes.len()),
        ));
    }
    let raster = &bytes[pos..pos + need];
    let mut img = Image::zeros(height, width, channels);
    let mut i = 0;
    for u in 0..height {
        for v in 0..width {
            for c in 0..channels {
                img.set(c, u, v, raster[i] as f64 / 255.0);
                i += 1;
            }
        }
    }
    Ok(img)
}

/// Side-by-side concatenation (same height and channel count).
pub fn hconcat(a: &Image, b: &Image) -> Result<Image> {
    if a.height != b.height || a.channels != b.channels {
        return Err(Error::ShapeMismatch {
            op: "hconcat",
            left: vec![a.height, a.width, a.channels],
            right: vec![b.height, b.width, b.channels],
        });
    }
    let mut out = Image::zeros(a.height, a.width + b.width, a.channels);
    for c in 0..a.channels {
        for u in 0..a.height {
            for v in 0..a.width {
                out.set(c, u, v, a.get(c, u, v));
            }
            for v in 0..b.width {
                out.set(c, u, a.width + v, b.get(c, u, v));
            }
        }
    }
    Ok(out)
}
