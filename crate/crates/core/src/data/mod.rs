//! Dataset ingestion, weight persistence, result persistence, and image
//! export. All parsers reject structurally inconsistent input outright
//! rather than truncating.

mod cifar;
mod idx;
mod netpbm;
mod results;
mod svg;
mod weights;

pub use cifar::load_cifar10;
pub use idx::load_mnist;
pub use netpbm::{export_image, export_image_with_comment, hconcat, import_image};
pub use results::{outcome_record, read_results, write_results, write_results_with_header, ResultRecord};
pub use svg::export_flow_svg;
pub use weights::{load_weights, read_weight_meta, save_weights};

use crate::warp::Image;

/// Images with aligned labels plus provenance of the source bytes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub split: String,
    /// FNV-1a over the raw source files.
    pub checksum: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// FNV-1a, used as the dataset source checksum.
pub(crate) fn fnv1a(bytes: &[u8], mut state: u64) -> u64 {
    if state == 0 {
        state = 0xcbf29ce484222325;
    }
    for &b in bytes {
        state ^= b as u64;
        state = state.wrapping_mul(0x100000001b3);
    }
    state
}
