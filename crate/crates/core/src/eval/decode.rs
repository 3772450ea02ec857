use rpose_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoded keypoint: position in heatmap-grid units and the plane maximum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub position: [f64; 2],
    pub response: f64,
}

/// Offset of a quarter cell toward the larger neighbour; none at a border or on a tie.
fn refine(prev: Option<f64>, next: Option<f64>) -> f64 {
    match (prev, next) {
        (Some(p), Some(n)) if n > p => 0.25,
        (Some(p), Some(n)) if p > n => -0.25,
        _ => 0.0,
    }
}

/// Argmax of a `height × width` plane (first in row-major order on ties),
/// refined by a quarter cell per axis.
pub fn decode<T: Real>(plane: &[T], height: usize, width: usize) -> Detection {
    assert!(!plane.is_empty() && plane.len() == height * width, "plane must be non-empty and {height}x{width}");
    let mut best = 0;
    for (i, v) in plane.iter().enumerate() {
        if *v > plane[best] {
            best = i;
        }
    }
    let (row, col) = (best / width, best % width);
    let at = |r: usize, c: usize| plane[r * width + c].as_f64();
    let dx = refine(
        (col > 0).then(|| at(row, col - 1)),
        (col + 1 < width).then(|| at(row, col + 1)),
    );
    let dy = refine(
        (row > 0).then(|| at(row - 1, col)),
        (row + 1 < height).then(|| at(row + 1, col)),
    );
    Detection {
        position: [col as f64 + dx, row as f64 + dy],
        response: at(row, col),
    }
}

/// Decodes the first `keypoints` channels of every sample in an `N × C × h × w` head.
pub fn decode_head<T: Real>(head: &Tensor<T>, keypoints: usize) -> Result<Vec<Vec<Detection>>> {
    let (n, c, h, w) = head.dims4()?;
    if keypoints > c {
        return Err(Error::Contract(format!("{keypoints} keypoints requested from a {c}-channel head")));
    }
    let plane = h * w;
    Ok((0..n)
        .map(|s| {
            (0..keypoints)
                .map(|k| {
                    let off = (s * c + k) * plane;
                    decode(&head.data()[off..off + plane], h, w)
                })
                .collect()
        })
        .collect())
}
