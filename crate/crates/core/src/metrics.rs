//! Flow magnitude metrics: root-mean aggregations of neighbor differences
//! (TV) and raw displacements (L2), plus the mean/std helper the reporting
//! paths share.

use crate::warp::FlowField;

/// sqrt((1/n) * sum_p sum_{q in N(p)} [(du_p-du_q)^2 + (dv_p-dv_q)^2]) with
/// n the pixel count and N(p) the 4-connected neighbors, each adjacency
/// counted once per direction (the same convention as the flow loss).
pub fn flow_tv_metric(f: &FlowField) -> f64 {
    let (h, w) = (f.height, f.width);
    let n = (h * w) as f64;
    let mut sum = 0.0;
    for u in 0..h {
        for v in 0..w {
            let p = u * w + v;
            let mut pair = |q: usize| {
                let du = f.du[p] - f.du[q];
                let dv = f.dv[p] - f.dv[q];
                sum += du * du + dv * dv;
            };
            if u > 0 {
                pair(p - w);
            }
            if u + 1 < h {
                pair(p + w);
            }
            if v > 0 {
                pair(p - 1);
            }
            if v + 1 < w {
                pair(p + 1);
            }
        }
    }
    (sum / n).sqrt()
}

/// sqrt((1/n) * sum_p (du_p^2 + dv_p^2))
pub fn flow_l2_metric(f: &FlowField) -> f64 {
    let n = (f.height * f.width) as f64;
    let sum: f64 = f
        .du
        .iter()
        .zip(&f.dv)
        .map(|(&du, &dv)| du * du + dv * dv)
        .sum();
    (sum / n).sqrt()
}

/// Sample mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
