//! Image segmentations used as LIME's interpretable features.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SegmentMethod {
    /// `k x k` regular grid; trailing cells absorb the remainder.
    Grid,
    /// SLIC-style k-means on colour + position, roughly `k * k` segments.
    Slic { compactness: f64, iterations: usize },
}

impl SegmentMethod {
    pub fn slic() -> Self {
        SegmentMethod::Slic {
            compactness: 10.0,
            iterations: 10,
        }
    }
}

/// Per-pixel segment ids in `[0, count)`; every segment is non-empty and
/// 4-connected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    labels: Vec<u32>,
    height: usize,
    width: usize,
    count: usize,
}

impl SegmentMap {
    /// Validates the id range, coverage and connectivity invariants.
    pub fn new(labels: Vec<u32>, height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: "label count mismatch".into(),
            });
        }
        let count = *labels.iter().max().expect("non-empty") as usize + 1;
        let map = SegmentMap {
            labels,
            height,
            width,
            count,
        };
        let sizes = map.sizes();
        if let Some(id) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::invalid(format!("segment {id} owns no pixels")));
        }
        let mut seen = vec![false; map.labels.len()];
        let mut components = 0;
        for start in 0..map.labels.len() {
            if !seen[start] {
                components += 1;
                flood(&map.labels, height, width, start, &mut seen, |_| {});
            }
        }
        if components != count {
            return Err(Error::invalid("segments must be 4-connected"));
        }
        Ok(map)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

/// Visits the 4-connected region of equal labels containing `start`.
fn flood(
    labels: &[u32],
    h: usize,
    w: usize,
    start: usize,
    seen: &mut [bool],
    mut visit: impl FnMut(usize),
) {
    let target = labels[start];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(p) = queue.pop_front() {
        visit(p);
        let (y, x) = (p / w, p % w);
        let mut push = |q: usize| {
            if !seen[q] && labels[q] == target {
                seen[q] = true;
                queue.push_back(q);
            }
        };
        if x > 0 {
            push(p - 1);
        }
        if x + 1 < w {
            push(p + 1);
        }
        if y > 0 {
            push(p - w);
        }
        if y + 1 < h {
            push(p + w);
        }
    }
}

pub fn grid_segments(height: usize, width: usize, grid_k: usize) -> Result<SegmentMap> {
    if grid_k == 0 {
        return Err(Error::invalid("grid size must be at least 1"));
    }
    if grid_k > height || grid_k > width {
        return Err(Error::invalid(format!(
            "{grid_k}x{grid_k} grid is larger than the {height}x{width} image"
        )));
    }
    let (ch, cw) = (height / grid_k, width / grid_k);
    let labels = (0..height * width)
        .map(|p| {
            let gy = (p / width / ch).min(grid_k - 1);
            let gx = (p % width / cw).min(grid_k - 1);
            (gy * grid_k + gx) as u32
        })
        .collect();
    Ok(SegmentMap {
        labels,
        height,
        width,
        count: grid_k * grid_k,
    })
}

/// SLIC-style clustering of a `C x H x W` image into about `grid_k^2`
/// connected segments.
pub fn slic_segments<T: Scalar>(
    image: &Tensor<T>,
    grid_k: usize,
    compactness: f64,
    iterations: usize,
) -> Result<SegmentMap> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "expected C x H x W".into(),
        });
    };
    let grid = grid_segments(h, w, grid_k)?;
    let px = image.to_f64_vec();
    // Colour on a 0..100 scale so `compactness` keeps its usual meaning.
    let color = |p: usize, ch: usize| 100.0 * px[ch * h * w + p];
    let step = ((h * w) as f64 / (grid_k * grid_k) as f64).sqrt().max(1.0);
    let spatial_weight = compactness / step;

    // Cluster centre: (y, x, colour...).
    let mut centres: Vec<Vec<f64>> = (0..grid_k * grid_k)
        .map(|cell| {
            let (gy, gx) = (cell / grid_k, cell % grid_k);
            let y = ((gy as f64 + 0.5) * h as f64 / grid_k as f64)
                .floor()
                .min((h - 1) as f64);
            let x = ((gx as f64 + 0.5) * w as f64 / grid_k as f64)
                .floor()
                .min((w - 1) as f64);
            let p = y as usize * w + x as usize;
            let mut v = vec![y, x];
            v.extend((0..c).map(|ch| color(p, ch)));
            v
        })
        .collect();

    let dist = |centre: &[f64], p: usize| {
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        let dc: f64 = (0..c)
            .map(|ch| (color(p, ch) - centre[2 + ch]).powi(2))
            .sum();
        let ds = (y - centre[0]).powi(2) + (x - centre[1]).powi(2);
        dc + ds * spatial_weight * spatial_weight
    };

    let mut assign = grid.labels.clone();
    let radius = (2.0 * step).ceil() as isize;
    for _ in 0..iterations {
        let mut best = vec![f64::INFINITY; h * w];
        let mut next: Vec<u32> = assign.clone();
        for (k, centre) in centres.iter().enumerate() {
            let (cy, cx) = (centre[0].round() as isize, centre[1].round() as isize);
            for y in (cy - radius).max(0)..(cy + radius + 1).min(h as isize) {
                for x in (cx - radius).max(0)..(cx + radius + 1).min(w as isize) {
                    let p = y as usize * w + x as usize;
                    let d = dist(centre, p);
                    if d < best[p] {
                        best[p] = d;
                        next[p] = k as u32;
                    }
                }
            }
        }
        assign = next;
        let mut sums = vec![vec![0.0; 2 + c]; centres.len()];
        let mut counts = vec![0usize; centres.len()];
        for (p, &k) in assign.iter().enumerate() {
            let s = &mut sums[k as usize];
            s[0] += (p / w) as f64;
            s[1] += (p % w) as f64;
            for ch in 0..c {
                s[2 + ch] += color(p, ch);
            }
            counts[k as usize] += 1;
        }
        for ((centre, s), &n) in centres.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                for (v, &t) in centre.iter_mut().zip(s) {
                    *v = t / n as f64;
                }
            }
        }
    }
    Ok(enforce_connectivity(
        &assign,
        h,
        w,
        (h * w) / (4 * grid_k * grid_k).max(1),
    ))
}

/// Splits clusters into 4-connected components, folds components smaller
/// than `min_size` into the neighbour preceding them in raster order, and
/// relabels densely.
fn enforce_connectivity(assign: &[u32], h: usize, w: usize, min_size: usize) -> SegmentMap {
    let mut labels = vec![u32::MAX; h * w];
    let mut seen = vec![false; h * w];
    let mut next = 0u32;
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        let mut members = Vec::new();
        flood(assign, h, w, start, &mut seen, |p| members.push(p));
        let (y, x) = (start / w, start % w);
        // Raster-order scan: left and up neighbours are already labelled.
        let adjacent = if x > 0 {
            Some(labels[start - 1])
        } else if y > 0 {
            Some(labels[start - w])
        } else {
            None
        };
        let id = match adjacent {
            Some(a) if members.len() < min_size => a,
            _ => {
                next += 1;
                next - 1
            }
        };
        for p in members {
            labels[p] = id;
        }
    }
    SegmentMap {
        labels,
        height: h,
        width: w,
        count: next as usize,
    }
}

pub fn segment<T: Scalar>(
    image: &Tensor<T>,
    grid_k: usize,
    method: SegmentMethod,
) -> Result<SegmentMap> {
    let &[_, h, w] = image.shape() else {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "expected C x H x W".into(),
        });
    };
    match method {
        SegmentMethod::Grid => grid_segments(h, w, grid_k),
        SegmentMethod::Slic {
            compactness,
            iterations,
        } => slic_segments(image, grid_k, compactness, iterations),
    }
}
