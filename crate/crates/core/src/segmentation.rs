//! Superpixel segmentation. A [`SegmentMap`] defines the interpretable
//! domain: one binary feature per superpixel.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::PlanarImage;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    height: usize,
    width: usize,
    segment_count: usize,
    labels: Vec<u32>,
}

impl SegmentMap {
    /// Wraps a row-major label array. Ids must cover `0..segment_count`
    /// with no gaps.
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        let segment_count = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let mut seen = vec![false; segment_count];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Parameter(format!(
                "segment id {missing} has no pixels"
            )));
        }
        Ok(Self {
            height,
            width,
            segment_count,
            labels,
        })
    }

    /// A single segment covering the whole image.
    pub fn uniform(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col] as usize
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.segment_count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// True when every id forms exactly one 4-connected component.
    pub fn is_four_connected(&self) -> bool {
        let (_, count) = connected_components(&self.labels, self.height, self.width);
        count == self.segment_count
    }

    /// Pixels whose right or lower neighbour carries a different label,
    /// giving 1-pixel-wide boundary lines.
    pub fn boundary_mask(&self) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        let mut mask = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                let l = self.labels[r * w + c];
                let right = c + 1 < w && self.labels[r * w + c + 1] != l;
                let down = r + 1 < h && self.labels[(r + 1) * w + c] != l;
                mask[r * w + c] = right || down;
            }
        }
        mask
    }

    pub(crate) fn check_image(&self, img: &PlanarImage) -> Result<()> {
        if img.dims() != self.dims() {
            return Err(Error::Dimension(format!(
                "segment map is {}x{}, image is {}x{}",
                self.height,
                self.width,
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub target_segments: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl SlicParams {
    /// 16 segments for images up to 64 px on a side, 50 otherwise.
    pub fn for_dims(height: usize, width: usize) -> Self {
        let target_segments = if height.max(width) <= 64 { 16 } else { 50 };
        Self {
            target_segments,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

// Colour samples are scaled to a Lab-like 0..100 range so that the usual
// compactness values keep their meaning.
const COLOR_SCALE: f64 = 100.0;

#[derive(Clone, Debug)]
struct Center {
    color: Vec<f64>,
    y: f64,
    x: f64,
}

/// SLIC k-means over (colour, row, col) with grid-seeded centers, followed by
/// merging of orphaned fragments so that every superpixel is 4-connected.
pub fn slic_segment(img: &PlanarImage, params: &SlicParams) -> Result<SegmentMap> {
    let (h, w) = img.dims();
    let n = h * w;
    if params.target_segments < 2 {
        return Err(Error::Parameter(
            "SLIC needs at least 2 target segments".into(),
        ));
    }
    if params.target_segments > n {
        return Err(Error::Parameter(format!(
            "{} target segments exceed the {n} pixels",
            params.target_segments
        )));
    }
    if !(params.compactness > 0.0) || !params.compactness.is_finite() {
        return Err(Error::Parameter("SLIC compactness must be positive".into()));
    }
    if params.iterations == 0 {
        return Err(Error::Parameter("SLIC needs at least one iteration".into()));
    }

    let channels = img.channels();
    let color_at = |i: usize, c: usize| img.plane(c)[i] * COLOR_SCALE;
    let k = params.target_segments as f64;
    let spacing = (n as f64 / k).sqrt();
    let nx = ((k * w as f64 / h as f64).sqrt().round() as usize).clamp(1, w);
    let ny = ((k / nx as f64).round() as usize).clamp(1, h);
    let (step_y, step_x) = (h as f64 / ny as f64, w as f64 / nx as f64);

    let mut centers: Vec<Center> = Vec::with_capacity(nx * ny);
    for i in 0..ny {
        for j in 0..nx {
            let y = (i as f64 + 0.5) * step_y;
            let x = (j as f64 + 0.5) * step_x;
            let idx = (y as usize).min(h - 1) * w + (x as usize).min(w - 1);
            centers.push(Center {
                color: (0..channels).map(|c| color_at(idx, c)).collect(),
                y,
                x,
            });
        }
    }

    let spatial = (params.compactness / spacing).powi(2);
    let reach = step_y.max(step_x).ceil() as isize;
    let mut labels = vec![u32::MAX; n];
    let mut best = vec![f64::INFINITY; n];

    let dist = |center: &Center, idx: usize, r: usize, c: usize| {
        let dc: f64 = (0..channels)
            .map(|ch| {
                let d = color_at(idx, ch) - center.color[ch];
                d * d
            })
            .sum();
        let dy = r as f64 + 0.5 - center.y;
        let dx = c as f64 + 0.5 - center.x;
        dc + (dy * dy + dx * dx) * spatial
    };

    for _ in 0..params.iterations {
        labels.fill(u32::MAX);
        best.fill(f64::INFINITY);
        // Centers are visited in index order and only a strictly smaller
        // distance replaces an assignment, so ties go to the lower index.
        for (ci, center) in centers.iter().enumerate() {
            let (cy, cx) = (center.y.floor() as isize, center.x.floor() as isize);
            let r0 = (cy - reach).max(0) as usize;
            let r1 = ((cy + reach) as usize).min(h - 1);
            let c0 = (cx - reach).max(0) as usize;
            let c1 = ((cx + reach) as usize).min(w - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let idx = r * w + c;
                    let d = dist(center, idx, r, c);
                    if d < best[idx] {
                        best[idx] = d;
                        labels[idx] = ci as u32;
                    }
                }
            }
        }
        for idx in 0..n {
            if labels[idx] == u32::MAX {
                let (r, c) = (idx / w, idx % w);
                let (ci, _) = centers
                    .iter()
                    .enumerate()
                    .map(|(ci, center)| (ci, dist(center, idx, r, c)))
                    .fold(
                        (0, f64::INFINITY),
                        |acc, cur| if cur.1 < acc.1 { cur } else { acc },
                    );
                labels[idx] = ci as u32;
            }
        }

        let mut sums = vec![(vec![0.0; channels], 0.0, 0.0, 0usize); centers.len()];
        for idx in 0..n {
            let acc = &mut sums[labels[idx] as usize];
            for c in 0..channels {
                acc.0[c] += color_at(idx, c);
            }
            acc.1 += (idx / w) as f64 + 0.5;
            acc.2 += (idx % w) as f64 + 0.5;
            acc.3 += 1;
        }
        for (center, (color, y, x, count)) in centers.iter_mut().zip(sums) {
            if count > 0 {
                let m = count as f64;
                center.color = color.into_iter().map(|v| v / m).collect();
                center.y = y / m;
                center.x = x / m;
            }
        }
    }

    let merged = enforce_connectivity(&labels, h, w);
    SegmentMap::new(h, w, relabel_in_scan_order(&merged))
}

/// 4-connected component ids in raster discovery order, plus their count.
fn connected_components(labels: &[u32], h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut comp = vec![usize::MAX; h * w];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = count;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            for nb in neighbours(idx, h, w).into_iter().flatten() {
                if comp[nb] == usize::MAX && labels[nb] == labels[start] {
                    comp[nb] = count;
                    queue.push_back(nb);
                }
            }
        }
        count += 1;
    }
    (comp, count)
}

#[inline]
fn neighbours(idx: usize, h: usize, w: usize) -> [Option<usize>; 4] {
    let (r, c) = (idx / w, idx % w);
    [
        (r > 0).then(|| idx - w),
        (c > 0).then(|| idx - 1),
        (c + 1 < w).then(|| idx + 1),
        (r + 1 < h).then(|| idx + w),
    ]
}

/// Keeps the largest component of each label and folds every other fragment
/// into the largest adjacent kept region.
fn enforce_connectivity(labels: &[u32], h: usize, w: usize) -> Vec<u32> {
    let (comp, count) = connected_components(labels, h, w);
    let mut size = vec![0usize; count];
    let mut comp_label = vec![0u32; count];
    for (idx, &c) in comp.iter().enumerate() {
        size[c] += 1;
        comp_label[c] = labels[idx];
    }
    // Largest component per label; the earliest-discovered wins ties.
    let max_label = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut keeper: Vec<Option<usize>> = vec![None; max_label + 1];
    for c in 0..count {
        let slot = &mut keeper[comp_label[c] as usize];
        if slot.is_none_or(|k| size[c] > size[k]) {
            *slot = Some(c);
        }
    }
    // owner[c] is the kept component that fragment c has been merged into.
    let mut owner: Vec<Option<usize>> = vec![None; count];
    for k in keeper.iter().flatten() {
        owner[*k] = Some(*k);
    }
    let mut region_size = size.clone();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (idx, &c) in comp.iter().enumerate() {
        members[c].push(idx);
    }

    loop {
        let mut progressed = false;
        let mut pending = false;
        for c in 0..count {
            if owner[c].is_some() {
                continue;
            }
            pending = true;
            let mut target: Option<usize> = None;
            for &idx in &members[c] {
                for nb in neighbours(idx, h, w).into_iter().flatten() {
                    if let Some(o) = owner[comp[nb]] {
                        let better = match target {
                            None => true,
                            Some(t) => {
                                region_size[o] > region_size[t]
                                    || (region_size[o] == region_size[t]
                                        && comp_label[o] < comp_label[t])
                            }
                        };
                        if better {
                            target = Some(o);
                        }
                    }
                }
            }
            if let Some(t) = target {
                owner[c] = Some(t);
                region_size[t] += size[c];
                progressed = true;
            }
        }
        if !pending || !progressed {
            break;
        }
    }

    comp.iter()
        .map(|&c| comp_label[owner[c].unwrap_or(c)])
        .collect()
}

fn relabel_in_scan_order(labels: &[u32]) -> Vec<u32> {
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut map = vec![u32::MAX; max + 1];
    let mut next = 0u32;
    labels
        .iter()
        .map(|&l| {
            let slot = &mut map[l as usize];
            if *slot == u32::MAX {
                *slot = next;
                next += 1;
            }
            *slot
        })
        .collect()
}

/// Per-segment, per-channel arithmetic means: `means[segment][channel]`.
pub fn segment_means(img: &PlanarImage, seg: &SegmentMap) -> Result<Vec<Vec<f64>>> {
    seg.check_image(img)?;
    let sizes = seg.segment_sizes();
    let mut sums = vec![vec![0.0; img.channels()]; seg.segment_count()];
    for c in 0..img.channels() {
        for (v, &l) in img.plane(c).iter().zip(seg.labels()) {
            sums[l as usize][c] += v;
        }
    }
    for (s, size) in sums.iter_mut().zip(sizes) {
        s.iter_mut().for_each(|v| *v /= size as f64);
    }
    Ok(sums)
}

/// Debug rendering: each superpixel filled with its mean colour and yellow
/// boundary lines on top.
pub fn render_segments(img: &PlanarImage, seg: &SegmentMap) -> Result<PlanarImage> {
    let means = segment_means(img, seg)?;
    let mask = seg.boundary_mask();
    let yellow = [1.0, 1.0, 0.0];
    PlanarImage::from_fn(img.height(), img.width(), 3, |c, r, col| {
        let idx = r * img.width() + col;
        if mask[idx] {
            yellow[c]
        } else {
            let m = &means[seg.labels()[idx] as usize];
            if m.len() == 1 {
                m[0]
            } else {
                m[c]
            }
        }
    })
}
