//! Frame-count reduction: fixed-interval skipping and greedy dedup on a
//! 64-bit difference hash.

use image::GrayImage;
use rayon::prelude::*;

use crate::error::{Error, Result};

const HASH_W: usize = 9;
const HASH_H: usize = 8;

/// Difference hash. Bit `8·row + col` (LSB first) is set when cell
/// `col + 1` of that row is brighter than cell `col` in the 9×8 box-filtered
/// downsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FrameHash(pub u64);

impl FrameHash {
    pub fn bits(&self) -> u64 {
        self.0
    }
}

impl std::fmt::Display for FrameHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Indices kept by skipping: 0, k, 2k, …  (⌈n/k⌉ of them).
pub fn frame_skip_indices(n: usize, k: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::InvalidInterval(k));
    }
    Ok((0..n).step_by(k).collect())
}

pub fn frame_skip<T: Clone>(frames: &[T], k: usize) -> Result<Vec<T>> {
    Ok(frame_skip_indices(frames.len(), k)?
        .into_iter()
        .map(|i| frames[i].clone())
        .collect())
}

/// Area-weighted average of the source pixels covered by each of the
/// `HASH_W × HASH_H` cells.
///
/// Coordinates are scaled by the cell count so every overlap is an integer;
/// each cell then covers exactly `w·h` scaled units and the sums compare
/// exactly.
fn box_sums(img: &GrayImage) -> [[u64; HASH_W]; HASH_H] {
    let (w, h) = (img.width() as u64, img.height() as u64);
    // overlap of cell [c·n, (c+1)·n) with pixel [p·cells, (p+1)·cells)
    let weights = |n: u64, cells: u64| -> Vec<Vec<(u32, u64)>> {
        (0..cells)
            .map(|c| {
                let (a0, a1) = (c * n, (c + 1) * n);
                (a0 / cells..a1.div_ceil(cells))
                    .filter_map(|p| {
                        let ov = a1.min((p + 1) * cells).saturating_sub(a0.max(p * cells));
                        (ov > 0).then_some((p as u32, ov))
                    })
                    .collect()
            })
            .collect()
    };
    let wx = weights(w, HASH_W as u64);
    let wy = weights(h, HASH_H as u64);
    let mut out = [[0u64; HASH_W]; HASH_H];
    for (r, ry) in wy.iter().enumerate() {
        for (c, cx) in wx.iter().enumerate() {
            out[r][c] = ry
                .iter()
                .flat_map(|&(y, fy)| cx.iter().map(move |&(x, fx)| img.get_pixel(x, y).0[0] as u64 * fx * fy))
                .sum();
        }
    }
    out
}

#[cfg(test)]
fn box_downsample(img: &GrayImage) -> [[f64; HASH_W]; HASH_H] {
    let area = (img.width() as u64 * img.height() as u64) as f64;
    box_sums(img).map(|row| row.map(|s| s as f64 / area))
}

pub fn dhash(img: &GrayImage) -> Result<FrameHash> {
    if (img.width() as usize) < HASH_W || (img.height() as usize) < HASH_H {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
        });
    }
    let cells = box_sums(img);
    let mut bits = 0u64;
    for (r, row) in cells.iter().enumerate() {
        for c in 0..HASH_W - 1 {
            if row[c] < row[c + 1] {
                bits |= 1 << (r * 8 + c);
            }
        }
    }
    Ok(FrameHash(bits))
}

pub fn dhash_all(images: &[GrayImage]) -> Result<Vec<FrameHash>> {
    images.par_iter().map(dhash).collect()
}

pub fn hamming(a: FrameHash, b: FrameHash) -> u32 {
    (a.0 ^ b.0).count_ones()
}

/// Greedy scan: frame 0 is kept, then each frame whose distance to the
/// most recently kept frame is at least `threshold`.
pub fn select_frames(hashes: &[FrameHash], threshold: u32) -> Vec<usize> {
    let mut kept = Vec::new();
    let mut last: Option<FrameHash> = None;
    for (i, &h) in hashes.iter().enumerate() {
        match last {
            Some(prev) if hamming(prev, h) < threshold => {}
            _ => {
                kept.push(i);
                last = Some(h);
            }
        }
    }
    kept
}
