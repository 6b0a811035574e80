//! Flow-field quiver rendering: one arrow per strided grid cell over a faded
//! copy of the source image.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::warp::{FlowField, Image};

/// Render `f` as an SVG quiver plot on top of a faded `x`.
///
/// Arrows start at pixel centers on an `stride`-strided grid and point from
/// (u, v) toward (u + du * arrow_scale, v + dv * arrow_scale); SVG x is the
/// column axis and SVG y the row axis zero-based at the top-left, matching
/// the (u=row, v=column) convention. The arrow scale is recorded in the file.
pub fn export_flow_svg(
    f: &FlowField,
    x: &Image,
    path: &Path,
    stride: usize,
    arrow_scale: f64,
    comment: Option<&str>,
) -> Result<()> {
    if f.height != x.height || f.width != x.width {
        return Err(Error::ShapeMismatch {
            op: "export_flow_svg",
            left: vec![x.height, x.width],
            right: vec![f.height, f.width],
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let (h, w) = (f.height, f.width);
    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    if let Some(c) = comment {
        let _ = writeln!(svg, "<!-- {} -->", c.replace("--", "~~"));
    }
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" width=\"{}\" height=\"{}\">",
        w * 12,
        h * 12
    );
    let _ = writeln!(
        svg,
        "<!-- one SVG unit = one pixel; arrows drawn at {arrow_scale}x the flow displacement -->"
    );

    // faded source image as one rect per pixel
    svg.push_str("<g opacity=\"0.35\">\n");
    for u in 0..h {
        for v in 0..w {
            let (r, g, b) = match x.channels {
                3 => (x.get(0, u, v), x.get(1, u, v), x.get(2, u, v)),
                _ => {
                    let g = x.get(0, u, v);
                    (g, g, g)
                }
            };
            let to8 = |t: f64| ((t - x.lo) / (x.hi - x.lo) * 255.0).clamp(0.0, 255.0) as u8;
            let _ = writeln!(
                svg,
                "<rect x=\"{v}\" y=\"{u}\" width=\"1\" height=\"1\" fill=\"#{:02x}{:02x}{:02x}\"/>",
                to8(r),
                to8(g),
                to8(b)
            );
        }
    }
    svg.push_str("</g>\n");

    svg.push_str(
        "<defs><marker id=\"tip\" markerWidth=\"4\" markerHeight=\"4\" refX=\"2\" refY=\"2\" orient=\"auto\">\
<path d=\"M0,0 L4,2 L0,4 z\" fill=\"#d40000\"/></marker></defs>\n",
    );
    svg.push_str("<g stroke=\"#d40000\" stroke-width=\"0.12\">\n");
    for u in (0..h).step_by(stride) {
        for v in (0..w).step_by(stride) {
            let p = u * w + v;
            let x1 = v as f64 + 0.5;
            let y1 = u as f64 + 0.5;
            let x2 = x1 + f.dv[p] * arrow_scale;
            let y2 = y1 + f.du[p] * arrow_scale;
            let marker = if f.du[p] == 0.0 && f.dv[p] == 0.0 {
                ""
            } else {
                " marker-end=\"url(#tip)\""
            };
            let _ = writeln!(
                svg,
                "<line x1=\"{x1:.4}\" y1=\"{y1:.4}\" x2=\"{x2:.4}\" y2=\"{y2:.4}\"{marker}/>"
            );
        }
    }
    svg.push_str("</g>\n</svg>\n");
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}
