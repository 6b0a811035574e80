//! Differentiable spatial transformation of images by per-pixel flow fields.
//!
//! Coordinate convention, used everywhere in the crate: `u` indexes rows and
//! `v` indexes columns, both zero-based. A flow vector (du, dv) at output
//! pixel (u, v) points to the source location (u + du, v + dv) in the input
//! image; fractional locations are resolved by bilinear interpolation over
//! the four integer neighbors, and out-of-range locations are clamped to the
//! image rectangle.

use crate::error::{Error, Result};
use crate::gradcheck::{central_diff, max_rel_err};
use crate::tensor::{warp_forward, Tape, Tensor};

/// H x W x C pixel grid with a declared value range (default [0, 1]).
/// Stored channel-planar: `data[c * h * w + u * w + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub lo: f64,
    pub hi: f64,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            lo: 0.0,
            hi: 1.0,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            lo: 0.0,
            hi: 1.0,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn get(&self, c: usize, u: usize, v: usize) -> f64 {
        self.data[c * self.height * self.width + u * self.width + v]
    }

    pub fn set(&mut self, c: usize, u: usize, v: usize, val: f64) {
        self.data[c * self.height * self.width + u * self.width + v] = val;
    }

    /// Leaf tensor of shape [C, H, W] for classifier/attack tapes.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("image buffer consistent")
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// H x W grid of displacement vectors (du, dv) in pixel units, shared across
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            du: vec![0.0; height * width],
            dv: vec![0.0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, du: Vec<f64>, dv: Vec<f64>) -> Result<Self> {
        if du.len() != height * width || dv.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "flow {height}x{width} needs {} values per plane, got {}/{}",
                height * width,
                du.len(),
                dv.len()
            )));
        }
        Ok(FlowField {
            height,
            width,
            du,
            dv,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.du.iter().chain(&self.dv).all(|v| v.is_finite())
    }

    /// Solver layout: all du values followed by all dv values.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(2 * self.du.len());
        flat.extend_from_slice(&self.du);
        flat.extend_from_slice(&self.dv);
        flat
    }

    pub fn from_flat(height: usize, width: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != 2 * height * width {
            return Err(Error::InvalidArgument(format!(
                "flat flow for {height}x{width} needs {} values, got {}",
                2 * height * width,
                flat.len()
            )));
        }
        let (du, dv) = flat.split_at(height * width);
        Ok(FlowField {
            height,
            width,
            du: du.to_vec(),
            dv: dv.to_vec(),
        })
    }

    /// Leaf tensor of shape [2, H, W] (du plane, then dv plane).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![2, self.height, self.width], self.to_flat()).expect("flow buffer consistent")
    }
}

/// Synthesize the warped image: every output pixel samples the input at its
/// flow-displaced source location.
pub fn bilinear_warp(x: &Image, f: &FlowField) -> Result<Image> {
    if f.height != x.height || f.width != x.width {
        return Err(Error::ShapeMismatch {
            op: "bilinear_warp",
            left: vec![x.height, x.width],
            right: vec![f.height, f.width],
        });
    }
    if !f.is_finite() {
        return Err(Error::NonFinite("flow field".into()));
    }
    let data = warp_forward(&x.data, x.channels, x.height, x.width, &f.du, &f.dv);
    Ok(Image {
        height: x.height,
        width: x.width,
        channels: x.channels,
        lo: x.lo,
        hi: x.hi,
        data,
    })
}

/// Outcome of [`warp_gradient_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Validate the analytic flow gradient of the warp against central finite
/// differences.
///
/// The full Jacobian is probed through random linear functionals of the
/// output: for fixed projection weights r, s(f) = sum(r * warp(x, f)) is a
/// scalar whose analytic gradient (one backward pass) must match the finite
/// difference of s over every flow entry. Flow entries should sit away from
/// integer grid lines, where the interpolation kinks.
pub fn warp_gradient_check(x: &Image, f: &FlowField, seed: u64) -> Result<GradCheckReport> {
    use rand::Rng;
    let mut rng = crate::rng(seed);
    let tolerance = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let proj: Vec<f64> = (0..x.data.len()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

        let mut tape = Tape::new();
        let xv = tape.leaf(x.to_tensor());
        let fv = tape.leaf(f.to_tensor().with_grad());
        let warped = tape.bilinear_warp(xv, fv)?;
        let pv = tape.leaf(Tensor::new(vec![x.data.len()], proj.clone())?);
        let flat = tape.reshape(warped, vec![x.data.len()])?;
        let weighted = tape.mul(flat, pv)?;
        let s = tape.sum(weighted);
        tape.backward(s)?;
        let analytic = tape.grad(fv).expect("flow gradient populated").to_vec();

        let flat_flow = f.to_flat();
        let numeric = central_diff(
            |flow| {
                let ff = FlowField::from_flat(f.height, f.width, flow).unwrap();
                let out = bilinear_warp(x, &ff).unwrap();
                out.data.iter().zip(&proj).map(|(a, b)| a * b).sum()
            },
            &flat_flow,
            1e-4,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        tolerance,
        pass: worst <= tolerance,
    })
}
