//! Expert-guided region-of-interest pipeline.
//!
//! An expert anomaly map is normalized and binarized, its connected
//! components become fixed-size boxes, overlapping boxes are merged, the
//! strongest few are kept, and the matching image crops are appended to the
//! base view as extra visual tokens.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map_io::{AnomalyMap, BinaryMask, ImageMeta, Raster};
use crate::metrics::{binarize, normalize_map};

/// Hard upper bound on auxiliary patches per image.
pub const MAX_PATCHES: usize = 4;

/// Largest visual-token context a configuration may request.
pub const MAX_CONTEXT_BUDGET: usize = 32768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxOrigin {
    Expert,
    GroundTruth,
    RandomNormal,
}

/// Half-open box `[x0, x1) x [y0, y1)` in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub peak_score: f64,
    pub origin: BoxOrigin,
}

impl RoiBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn iou(&self, other: &RoiBox) -> f64 {
        let ix = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let iy = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        let inter = (ix * iy) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::Argument(format!(
                "connectivity must be 4 or 8, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// `(x, y)` in discovery order.
    pub pixels: Vec<(usize, usize)>,
    /// Bounding rectangle, half-open.
    pub bounds: (usize, usize, usize, usize),
    pub centroid: (f64, f64),
}

impl Component {
    pub fn peak_score(&self, map: &AnomalyMap) -> f64 {
        self.pixels
            .iter()
            .map(|&(x, y)| map.get(x, y))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Connected components ordered by their first pixel in row-major order,
/// which is the `(min y, min x)` ordering.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComponentSet {
    pub components: Vec<Component>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

pub fn extract_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentSet {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut components = Vec::new();
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (0, -1),
            (1, -1),
            (-1, 0),
            (1, 0),
            (-1, 1),
            (0, 1),
            (1, 1),
        ],
    };
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits()[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let (mut sx, mut sy) = (0.0, 0.0);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            sx += x as f64;
            sy += y as f64;
            for &(dx, dy) in offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.bits()[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let n = pixels.len() as f64;
        components.push(Component {
            pixels,
            bounds: (x0, y0, x1, y1),
            centroid: (sx / n, sy / n),
        });
    }
    ComponentSet { components }
}

/// Start coordinate of a `side`-long window centered on `center`, translated
/// to fit inside `[0, limit)`.
fn place(center: f64, side: usize, limit: usize) -> usize {
    let start = (center - side as f64 / 2.0).round();
    start.clamp(0.0, (limit - side) as f64) as usize
}

fn check_box_side(box_side: usize, width: usize, height: usize) -> Result<()> {
    if box_side == 0 || box_side > width.min(height) {
        return Err(Error::Argument(format!(
            "box side {box_side} must be in 1..={} for a {width}x{height} image",
            width.min(height)
        )));
    }
    Ok(())
}

/// One fixed-size box per component, centered on its centroid.
pub fn propose_boxes(
    components: &ComponentSet,
    map: &AnomalyMap,
    box_side: usize,
    image: &ImageMeta,
) -> Result<Vec<RoiBox>> {
    check_box_side(box_side, image.width, image.height)?;
    if (map.width(), map.height()) != (image.width, image.height) {
        return Err(Error::Argument(format!(
            "map is {}x{} but image is {}x{}",
            map.width(),
            map.height(),
            image.width,
            image.height
        )));
    }
    Ok(components
        .components
        .iter()
        .map(|c| fixed_box(c.centroid, box_side, image.width, image.height, c.peak_score(map), BoxOrigin::Expert))
        .collect())
}

fn fixed_box(
    centroid: (f64, f64),
    side: usize,
    width: usize,
    height: usize,
    peak_score: f64,
    origin: BoxOrigin,
) -> RoiBox {
    // Centroids are in pixel-index coordinates: a lone pixel at 100 with
    // side 64 starts at 68.
    let x0 = place(centroid.0, side, width);
    let y0 = place(centroid.1, side, height);
    RoiBox {
        x0,
        y0,
        x1: x0 + side,
        y1: y0 + side,
        peak_score,
        origin,
    }
}

/// Result of [`merge_and_cap_traced`]: surviving boxes and, for each, the
/// indices of the input boxes folded into it.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeTrace {
    pub boxes: Vec<RoiBox>,
    pub members: Vec<Vec<usize>>,
}

pub fn merge_and_cap(boxes: &[RoiBox], iou_merge: f64, cap: usize) -> Result<Vec<RoiBox>> {
    merge_and_cap_traced(boxes, iou_merge, cap).map(|t| t.boxes)
}

/// Greedy pairwise merging followed by top-`cap` selection.
///
/// While some pair has IoU at least `iou_merge`, the pair with the highest
/// IoU (earliest pair on ties) is replaced by one box of the larger side,
/// centered at the area-weighted mean of the two centers. Survivors are then
/// ranked by peak score, ties by `(y0, x0)`, and the first `cap` are kept.
pub fn merge_and_cap_traced(boxes: &[RoiBox], iou_merge: f64, cap: usize) -> Result<MergeTrace> {
    if !(iou_merge > 0.0 && iou_merge <= 1.0) {
        return Err(Error::Argument(format!(
            "iou_merge must lie in (0, 1], got {iou_merge}"
        )));
    }
    if cap == 0 {
        return Err(Error::Argument("cap must be at least 1".into()));
    }
    // Slots keep their input position; a merge writes into the lower slot and
    // retires the higher one, so slot order matches the order of survivors.
    let mut slots: Vec<Option<(RoiBox, Vec<usize>)>> =
        boxes.iter().enumerate().map(|(i, b)| Some((*b, vec![i]))).collect();
    let mut version = vec![0u32; boxes.len()];
    let mut heap = BinaryHeap::new();
    let push = |heap: &mut BinaryHeap<PairKey>, slots: &[Option<(RoiBox, Vec<usize>)>], version: &[u32], i: usize, j: usize| {
        let (i, j) = (i.min(j), i.max(j));
        if let (Some((a, _)), Some((b, _))) = (&slots[i], &slots[j]) {
            let iou = a.iou(b);
            if iou >= iou_merge {
                heap.push(PairKey { iou, i, j, vi: version[i], vj: version[j] });
            }
        }
    };
    // Only pairs overlapping along x can reach a positive IoU.
    let mut by_x: Vec<usize> = (0..boxes.len()).collect();
    by_x.sort_by_key(|&i| (boxes[i].x0, i));
    for (n, &i) in by_x.iter().enumerate() {
        for &j in &by_x[n + 1..] {
            if boxes[j].x0 >= boxes[i].x1 {
                break;
            }
            push(&mut heap, &slots, &version, i, j);
        }
    }
    while let Some(PairKey { i, j, vi, vj, .. }) = heap.pop() {
        if version[i] != vi || version[j] != vj || slots[i].is_none() || slots[j].is_none() {
            continue;
        }
        let (b, mb) = slots[j].take().expect("checked live");
        let (a, ma) = slots[i].as_mut().expect("checked live");
        *a = merge_pair(a, &b);
        ma.extend(mb);
        ma.sort_unstable();
        version[i] += 1;
        version[j] += 1;
        for k in 0..slots.len() {
            if k != i {
                push(&mut heap, &slots, &version, i, k);
            }
        }
    }
    let mut live: Vec<(RoiBox, Vec<usize>)> = slots.into_iter().flatten().collect();
    live.sort_by(|(a, _), (b, _)| {
        b.peak_score
            .total_cmp(&a.peak_score)
            .then(a.y0.cmp(&b.y0))
            .then(a.x0.cmp(&b.x0))
    });
    live.truncate(cap);
    let (boxes, members) = live.into_iter().unzip();
    Ok(MergeTrace { boxes, members })
}

/// Heap entry for a mergeable pair: highest IoU first, then the earliest
/// pair. Versions detect entries made stale by a later merge.
#[derive(Debug, Clone, Copy)]
struct PairKey {
    iou: f64,
    i: usize,
    j: usize,
    vi: u32,
    vj: u32,
}

impl PartialEq for PairKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for PairKey {}

impl PartialOrd for PairKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PairKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.iou
            .total_cmp(&other.iou)
            .then(other.i.cmp(&self.i))
            .then(other.j.cmp(&self.j))
            .then(self.vi.cmp(&other.vi))
            .then(self.vj.cmp(&other.vj))
    }
}

fn merge_pair(a: &RoiBox, b: &RoiBox) -> RoiBox {
    let (wa, wb) = (a.area() as f64, b.area() as f64);
    let (ca, cb) = (a.center(), b.center());
    let cx = (ca.0 * wa + cb.0 * wb) / (wa + wb);
    let cy = (ca.1 * wa + cb.1 * wb) / (wa + wb);
    let w = a.width().max(b.width());
    let h = a.height().max(b.height());
    // The weighted center lies between the two in-bounds boxes, so clamping to
    // their joint extent keeps the result inside the image.
    let x_hi = a.x1.max(b.x1);
    let y_hi = a.y1.max(b.y1);
    let x0 = ((cx - w as f64 / 2.0).round().max(0.0) as usize).min(x_hi - w);
    let y0 = ((cy - h as f64 / 2.0).round().max(0.0) as usize).min(y_hi - h);
    let keep = if b.peak_score > a.peak_score { b } else { a };
    RoiBox {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
        peak_score: a.peak_score.max(b.peak_score),
        origin: keep.origin,
    }
}

/// Pixel-exact crops; no resampling.
pub fn crop_patches(image: &Raster, boxes: &[RoiBox]) -> Result<Vec<Raster>> {
    boxes
        .iter()
        .map(|b| {
            if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > image.width() || b.y1 > image.height() {
                return Err(Error::Argument(format!(
                    "box [{}, {}) x [{}, {}) is outside the {}x{} image",
                    b.x0,
                    b.x1,
                    b.y0,
                    b.y1,
                    image.width(),
                    image.height()
                )));
            }
            Ok(image.window(b.x0, b.y0, b.width(), b.height()))
        })
        .collect()
}

/// Visual token accounting for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub base_view: (usize, usize),
    pub extra_tiles: usize,
    pub n_patches: usize,
    pub patch_tokens_each: usize,
    pub total_visual_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpec {
    /// Token grid of the resized original image.
    pub base_grid: (usize, usize),
    /// Token grid of one crop before pooling.
    pub patch_grid: (usize, usize),
    /// Average-pooling factor applied to patch tokens along each axis.
    pub pool: usize,
    pub budget: usize,
    /// Additional full-resolution tiles, each costing one base grid.
    #[serde(default)]
    pub extra_tiles: usize,
}

pub fn token_layout(spec: &TokenSpec, n_patches: usize) -> Result<TokenLayout> {
    let TokenSpec {
        base_grid,
        patch_grid,
        pool,
        budget,
        extra_tiles,
    } = *spec;
    if n_patches > MAX_PATCHES {
        return Err(Error::Argument(format!(
            "{n_patches} patches exceeds the limit of {MAX_PATCHES}"
        )));
    }
    if pool == 0 || patch_grid.0 % pool != 0 || patch_grid.1 % pool != 0 {
        return Err(Error::Argument(format!(
            "pool factor {pool} must divide the patch grid {}x{}",
            patch_grid.0, patch_grid.1
        )));
    }
    let base = base_grid.0 * base_grid.1;
    let patch_tokens_each = (patch_grid.0 / pool) * (patch_grid.1 / pool);
    let total = base * (1 + extra_tiles) + n_patches * patch_tokens_each;
    if total > budget {
        return Err(Error::Budget {
            total,
            budget,
            excess: total - budget,
        });
    }
    Ok(TokenLayout {
        base_view: base_grid,
        extra_tiles,
        n_patches,
        patch_tokens_each,
        total_visual_tokens: total,
    })
}

/// Tunables of the region pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgroiConfig {
    pub threshold: f64,
    pub box_side: usize,
    pub iou_merge: f64,
    pub cap: usize,
    pub pool: usize,
    pub budget: usize,
    pub connectivity: u8,
    pub seed: u64,
    pub base_grid: (usize, usize),
    pub patch_grid: (usize, usize),
    pub extra_tiles: usize,
}

impl Default for EgroiConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            box_side: 336,
            iou_merge: 0.5,
            cap: MAX_PATCHES,
            pool: 2,
            budget: 4096,
            connectivity: 8,
            seed: 0,
            base_grid: (24, 24),
            patch_grid: (24, 24),
            extra_tiles: 0,
        }
    }
}

impl EgroiConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.threshold;
        if t == 0.0 || !t.is_finite() || t.abs() > 1.0 {
            return Err(Error::config("egroi.threshold", format!("must lie in [-1, 1] excluding 0, got {t}")));
        }
        if self.box_side == 0 {
            return Err(Error::config("egroi.box_side", "must be positive"));
        }
        if !(self.iou_merge > 0.0 && self.iou_merge <= 1.0) {
            return Err(Error::config("egroi.iou_merge", "must lie in (0, 1]"));
        }
        if self.cap == 0 || self.cap > MAX_PATCHES {
            return Err(Error::config("egroi.cap", format!("must lie in 1..={MAX_PATCHES}")));
        }
        if self.pool == 0 || self.patch_grid.0 % self.pool != 0 || self.patch_grid.1 % self.pool != 0 {
            return Err(Error::config("egroi.pool", "must divide the patch grid"));
        }
        Connectivity::try_from(self.connectivity)
            .map_err(|e| Error::config("egroi.connectivity", e.to_string()))?;
        if self.budget > MAX_CONTEXT_BUDGET {
            return Err(Error::config(
                "egroi.budget",
                format!("must not exceed {MAX_CONTEXT_BUDGET}, got {}", self.budget),
            ));
        }
        // Worst case: every allowed patch is used.
        token_layout(&self.token_spec(), self.cap)?;
        Ok(())
    }

    fn token_spec(&self) -> TokenSpec {
        TokenSpec {
            base_grid: self.base_grid,
            patch_grid: self.patch_grid,
            pool: self.pool,
            budget: self.budget,
            extra_tiles: self.extra_tiles,
        }
    }
}

/// Persisted per-image region manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiManifest {
    pub sample_id: String,
    pub boxes: Vec<RoiBox>,
    pub base_view: (usize, usize),
    pub patch_tokens_each: usize,
    pub total_visual_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct EgroiOutput {
    pub manifest: RoiManifest,
    /// One crop per box when a raster was supplied.
    pub patches: Vec<Raster>,
}

fn finish(
    image: &ImageMeta,
    raster: Option<&Raster>,
    boxes: Vec<RoiBox>,
    config: &EgroiConfig,
) -> Result<EgroiOutput> {
    let patches = match raster {
        Some(r) => {
            if (r.width(), r.height()) != (image.width, image.height) {
                return Err(Error::Argument(format!(
                    "raster is {}x{} but image metadata says {}x{}",
                    r.width(),
                    r.height(),
                    image.width,
                    image.height
                )));
            }
            crop_patches(r, &boxes)?
        }
        None => Vec::new(),
    };
    let layout = token_layout(&config.token_spec(), boxes.len())?;
    Ok(EgroiOutput {
        manifest: RoiManifest {
            sample_id: image.sample_id.clone(),
            boxes,
            base_view: layout.base_view,
            patch_tokens_each: layout.patch_tokens_each,
            total_visual_tokens: layout.total_visual_tokens,
        },
        patches,
    })
}

/// Inference-time pipeline from a raw expert map.
pub fn run_egroi(
    image: &ImageMeta,
    raster: Option<&Raster>,
    raw_map: &AnomalyMap,
    config: &EgroiConfig,
) -> Result<EgroiOutput> {
    config.validate()?;
    check_box_side(config.box_side, image.width, image.height)?;
    let map = if (raw_map.width(), raw_map.height()) == (image.width, image.height) {
        normalize_map(raw_map)
    } else {
        normalize_map(&raw_map.resample_nearest(image.width, image.height)?)
    };
    let mask = binarize(&map, config.threshold)?;
    let components = extract_components(&mask, Connectivity::try_from(config.connectivity)?);
    let proposed = propose_boxes(&components, &map, config.box_side, image)?;
    let boxes = merge_and_cap(&proposed, config.iou_merge, config.cap)?;
    finish(image, raster, boxes, config)
}

/// Maximum rejection-sampling attempts per random normal box.
const NORMAL_BOX_ATTEMPTS: usize = 256;
/// Random normal boxes must overlap every defect box by less than this IoU.
const NORMAL_BOX_MAX_IOU: f64 = 0.1;

/// Training-time pipeline: boxes come from ground-truth defect components
/// plus one or two seeded random boxes over normal regions.
pub fn run_egroi_training(
    image: &ImageMeta,
    raster: Option<&Raster>,
    gt_mask: &BinaryMask,
    config: &EgroiConfig,
) -> Result<EgroiOutput> {
    config.validate()?;
    check_box_side(config.box_side, image.width, image.height)?;
    if (gt_mask.width(), gt_mask.height()) != (image.width, image.height) {
        return Err(Error::Argument(format!(
            "mask is {}x{} but image is {}x{}",
            gt_mask.width(),
            gt_mask.height(),
            image.width,
            image.height
        )));
    }
    let components = extract_components(gt_mask, Connectivity::try_from(config.connectivity)?);
    let gt_boxes: Vec<RoiBox> = components
        .components
        .iter()
        .map(|c| {
            fixed_box(c.centroid, config.box_side, image.width, image.height, 1.0, BoxOrigin::GroundTruth)
        })
        .collect();
    let mut boxes = merge_and_cap(&gt_boxes, config.iou_merge, config.cap)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a(image.sample_id.as_bytes()));
    let wanted = rng.random_range(1..=2usize);
    let side = config.box_side;
    for _ in 0..wanted {
        if boxes.len() >= config.cap {
            break;
        }
        for _ in 0..NORMAL_BOX_ATTEMPTS {
            let x0 = rng.random_range(0..=image.width - side);
            let y0 = rng.random_range(0..=image.height - side);
            let candidate = RoiBox {
                x0,
                y0,
                x1: x0 + side,
                y1: y0 + side,
                peak_score: 0.0,
                origin: BoxOrigin::RandomNormal,
            };
            if boxes.iter().all(|b| b.iou(&candidate) < NORMAL_BOX_MAX_IOU) {
                boxes.push(candidate);
                break;
            }
        }
    }
    finish(image, raster, boxes, config)
}

/// Stable per-sample seed mixing, independent of platform hashers.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::Label;
    use proptest::prelude::*;

    /// Direct transcription of the merge rule: rescan all live pairs after
    /// every merge.
    fn rescanning_merge(boxes: &[RoiBox], iou_merge: f64, cap: usize) -> (Vec<RoiBox>, Vec<Vec<usize>>) {
        let mut live: Vec<(RoiBox, Vec<usize>)> = boxes.iter().enumerate().map(|(i, b)| (*b, vec![i])).collect();
        loop {
            let mut best: Option<(usize, usize, f64)> = None;
            for i in 0..live.len() {
                for j in i + 1..live.len() {
                    let iou = live[i].0.iou(&live[j].0);
                    if iou >= iou_merge && best.is_none_or(|(_, _, b)| iou > b) {
                        best = Some((i, j, iou));
                    }
                }
            }
            let Some((i, j, _)) = best else { break };
            let (b, mb) = live.remove(j);
            let (a, ma) = &mut live[i];
            *a = merge_pair(a, &b);
            ma.extend(mb);
            ma.sort_unstable();
        }
        live.sort_by(|(a, _), (b, _)| b.peak_score.total_cmp(&a.peak_score).then(a.y0.cmp(&b.y0)).then(a.x0.cmp(&b.x0)));
        live.truncate(cap);
        live.into_iter().unzip()
    }

    fn meta(w: usize, h: usize) -> ImageMeta {
        ImageMeta {
            width: w,
            height: h,
            product_class: "cable".into(),
            sample_id: "s".into(),
            label: Label::Abnormal,
        }
    }

    fn bx(x0: usize, y0: usize, x1: usize, y1: usize, peak: f64) -> RoiBox {
        RoiBox {
            x0,
            y0,
            x1,
            y1,
            peak_score: peak,
            origin: BoxOrigin::Expert,
        }
    }

    /// Union-find labelling, used as an independent oracle.
    fn union_find_labels(mask: &BinaryMask, eight: bool) -> Vec<Option<usize>> {
        let (w, h) = (mask.width(), mask.height());
        let mut parent: Vec<usize> = (0..w * h).collect();
        fn find(p: &mut Vec<usize>, i: usize) -> usize {
            let mut r = i;
            while p[r] != r {
                r = p[r];
            }
            p[i] = r;
            r
        }
        for y in 0..h {
            for x in 0..w {
                if !mask.get(x, y) {
                    continue;
                }
                let mut neigh = vec![];
                if x > 0 {
                    neigh.push((x - 1, y));
                }
                if y > 0 {
                    neigh.push((x, y - 1));
                    if eight && x > 0 {
                        neigh.push((x - 1, y - 1));
                    }
                    if eight && x + 1 < w {
                        neigh.push((x + 1, y - 1));
                    }
                }
                for (nx, ny) in neigh {
                    if mask.get(nx, ny) {
                        let a = find(&mut parent, y * w + x);
                        let b = find(&mut parent, ny * w + nx);
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        (0..w * h)
            .map(|i| mask.bits()[i].then(|| find(&mut parent, i)))
            .collect()
    }

    #[test]
    fn empty_mask_has_no_components() {
        assert!(extract_components(&BinaryMask::empty(5, 5), Connectivity::Eight).is_empty());
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let mut m = BinaryMask::empty(3, 3);
        m.set(0, 0, true);
        m.set(1, 1, true);
        assert_eq!(extract_components(&m, Connectivity::Four).len(), 2);
        assert_eq!(extract_components(&m, Connectivity::Eight).len(), 1);
    }

    #[test]
    fn components_ordered_by_first_pixel() {
        let mut m = BinaryMask::empty(6, 4);
        m.set(4, 0, true);
        m.set(0, 2, true);
        m.set(1, 2, true);
        m.set(5, 3, true);
        let set = extract_components(&m, Connectivity::Four);
        let firsts: Vec<_> = set.components.iter().map(|c| (c.bounds.1, c.bounds.0)).collect();
        assert_eq!(firsts, vec![(0, 4), (2, 0), (3, 5)]);
    }

    #[test]
    fn propose_centering_and_clamp() {
        let mut mask = BinaryMask::empty(640, 480);
        mask.set(100, 100, true);
        let map = AnomalyMap::new(640, 480, vec![0.0; 640 * 480], true, "").unwrap();
        let set = extract_components(&mask, Connectivity::Eight);
        let b = propose_boxes(&set, &map, 64, &meta(640, 480)).unwrap();
        assert_eq!((b[0].x0, b[0].y0, b[0].x1, b[0].y1), (68, 68, 132, 132));

        let mut mask = BinaryMask::empty(640, 480);
        mask.set(5, 5, true);
        let set = extract_components(&mask, Connectivity::Eight);
        let b = propose_boxes(&set, &map, 64, &meta(640, 480)).unwrap();
        assert_eq!((b[0].x0, b[0].y0, b[0].x1, b[0].y1), (0, 0, 64, 64));

        assert!(propose_boxes(&set, &map, 481, &meta(640, 480)).is_err());
    }

    #[test]
    fn propose_peak_score_is_component_max() {
        let mut scores = vec![0.0; 32 * 32];
        let mut mask = BinaryMask::empty(32, 32);
        for y in 0..=10 {
            for x in 0..=10 {
                mask.set(x, y, true);
                scores[y * 32 + x] = 0.92;
            }
        }
        scores[5 * 32 + 7] = 0.97;
        let map = AnomalyMap::new(32, 32, scores, true, "").unwrap();
        let set = extract_components(&mask, Connectivity::Eight);
        let b = propose_boxes(&set, &map, 16, &meta(32, 32)).unwrap();
        assert_eq!(b[0].peak_score, 0.97);
    }

    #[test]
    fn iou_arithmetic() {
        let a = bx(0, 0, 10, 10, 0.9);
        let b = bx(5, 5, 15, 15, 0.9);
        assert!((a.iou(&b) - 25.0 / 175.0).abs() < 1e-12);
        let out = merge_and_cap(&[a, b], 0.5, 4).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn identical_boxes_merge() {
        let a = bx(3, 3, 13, 13, 0.9);
        let out = merge_and_cap(&[a, bx(3, 3, 13, 13, 0.95)], 0.5, 4).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].x0, out[0].y0, out[0].peak_score), (3, 3, 0.95));
    }

    #[test]
    fn cap_keeps_highest_peaks() {
        let peaks = [0.90, 0.95, 0.92, 0.94, 0.91, 0.93];
        let boxes: Vec<RoiBox> = peaks
            .iter()
            .enumerate()
            .map(|(i, &p)| bx(i * 20, 0, i * 20 + 10, 10, p))
            .collect();
        let out = merge_and_cap(&boxes, 0.5, 4).unwrap();
        let got: Vec<f64> = out.iter().map(|b| b.peak_score).collect();
        assert_eq!(got, vec![0.95, 0.94, 0.93, 0.92]);
    }

    #[test]
    fn crop_full_and_partial() {
        let data: Vec<u8> = (0..100u8).collect();
        let r = Raster::new(10, 10, 1, data).unwrap();
        let full = crop_patches(&r, &[bx(0, 0, 10, 10, 0.0)]).unwrap();
        assert_eq!(full[0], r);
        let part = crop_patches(&r, &[bx(2, 3, 6, 9, 0.0)]).unwrap();
        assert_eq!((part[0].width(), part[0].height()), (4, 6));
        assert_eq!(part[0].data()[0], 32);
        assert!(crop_patches(&r, &[bx(5, 5, 11, 10, 0.0)]).is_err());
    }

    #[test]
    fn token_layout_examples() {
        let spec = TokenSpec {
            base_grid: (24, 24),
            patch_grid: (24, 24),
            pool: 2,
            budget: 4096,
            extra_tiles: 0,
        };
        let l = token_layout(&spec, 4).unwrap();
        assert_eq!((l.patch_tokens_each, l.total_visual_tokens), (144, 1152));
        assert_eq!(token_layout(&spec, 0).unwrap().total_visual_tokens, 576);
        let tight = TokenSpec { budget: 1000, ..spec };
        match token_layout(&tight, 4) {
            Err(Error::Budget { excess, .. }) => assert_eq!(excess, 152),
            other => panic!("expected budget error, got {other:?}"),
        }
        assert!(token_layout(&spec, 5).is_err());
        assert!(token_layout(&TokenSpec { pool: 5, ..spec }, 1).is_err());
        let tiled = TokenSpec { extra_tiles: 4, ..spec };
        assert_eq!(token_layout(&tiled, 4).unwrap().total_visual_tokens, 576 * 5 + 576);
    }

    #[test]
    fn all_zero_map_yields_base_view_only() {
        let map = AnomalyMap::raw(64, 64, vec![0.0; 64 * 64]).unwrap();
        let cfg = EgroiConfig {
            box_side: 16,
            ..Default::default()
        };
        let out = run_egroi(&meta(64, 64), None, &map, &cfg).unwrap();
        assert!(out.manifest.boxes.is_empty());
        assert_eq!(out.manifest.total_visual_tokens, 576);
    }

    #[test]
    fn lower_resolution_map_is_resampled() {
        let mut scores = vec![0.0; 16 * 16];
        scores[4 * 16 + 4] = 1.0;
        let map = AnomalyMap::raw(16, 16, scores).unwrap();
        let cfg = EgroiConfig {
            box_side: 8,
            ..Default::default()
        };
        let out = run_egroi(&meta(64, 64), None, &map, &cfg).unwrap();
        assert_eq!(out.manifest.boxes.len(), 1);
        // Source pixel (4, 4) covers image pixels 16..20.
        assert!(out.manifest.boxes[0].contains(17, 17));
    }

    #[test]
    fn training_mode_adds_random_normal_boxes() {
        let mut gt = BinaryMask::empty(128, 128);
        for y in 10..14 {
            for x in 10..14 {
                gt.set(x, y, true);
            }
        }
        let cfg = EgroiConfig {
            box_side: 32,
            seed: 7,
            ..Default::default()
        };
        let a = run_egroi_training(&meta(128, 128), None, &gt, &cfg).unwrap();
        let b = run_egroi_training(&meta(128, 128), None, &gt, &cfg).unwrap();
        assert_eq!(a.manifest, b.manifest);
        let boxes = &a.manifest.boxes;
        assert_eq!(boxes[0].origin, BoxOrigin::GroundTruth);
        let normals: Vec<_> = boxes.iter().filter(|b| b.origin == BoxOrigin::RandomNormal).collect();
        assert!((1..=2).contains(&normals.len()));
        for n in normals {
            assert!(n.iou(&boxes[0]) < NORMAL_BOX_MAX_IOU);
            assert_eq!((n.width(), n.height()), (32, 32));
        }
    }

    proptest! {
        #[test]
        fn components_match_union_find(bits in prop::collection::vec(any::<bool>(), 256), eight in any::<bool>()) {
            let mask = BinaryMask::new(16, 16, bits).unwrap();
            let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
            let set = extract_components(&mask, conn);
            let oracle = union_find_labels(&mask, eight);
            let mut covered = vec![false; 256];
            for c in &set.components {
                let root = oracle[c.pixels[0].1 * 16 + c.pixels[0].0];
                for &(x, y) in &c.pixels {
                    prop_assert!(!covered[y * 16 + x]);
                    covered[y * 16 + x] = true;
                    prop_assert_eq!(oracle[y * 16 + x], root);
                }
            }
            prop_assert_eq!(covered, mask.bits().to_vec());
            let roots: std::collections::BTreeSet<_> = oracle.iter().flatten().collect();
            prop_assert_eq!(roots.len(), set.len());
        }

        #[test]
        fn merged_output_is_separated_and_capped(
            raw in prop::collection::vec((0usize..90, 0usize..90, 0u32..100), 0..12),
            iou in 0.05f64..1.0,
            cap in 1usize..=4,
        ) {
            let boxes: Vec<RoiBox> = raw.iter().map(|&(x, y, p)| bx(x, y, x + 10, y + 10, p as f64 / 100.0)).collect();
            let trace = merge_and_cap_traced(&boxes, iou, cap).unwrap();
            prop_assert!(trace.boxes.len() <= cap);
            for (i, a) in trace.boxes.iter().enumerate() {
                prop_assert!(a.x1 <= 100 && a.y1 <= 100);
                prop_assert_eq!((a.width(), a.height()), (10, 10));
                for b in &trace.boxes[i + 1..] {
                    prop_assert!(a.iou(b) < iou);
                }
            }
        }

        #[test]
        fn merge_matches_rescanning_reference(
            raw in prop::collection::vec((0usize..40, 0usize..40, 0u32..4), 0..14),
            iou in 0.05f64..0.9,
        ) {
            // Few distinct peaks and a cramped canvas force ties and chains.
            let boxes: Vec<RoiBox> = raw.iter().map(|&(x, y, p)| bx(x, y, x + 10, y + 10, p as f64 / 4.0)).collect();
            let fast = merge_and_cap_traced(&boxes, iou, MAX_PATCHES).unwrap();
            let (slow, members) = rescanning_merge(&boxes, iou, MAX_PATCHES);
            prop_assert_eq!(fast.boxes, slow);
            prop_assert_eq!(fast.members, members);
        }

        #[test]
        fn crop_then_embed_reproduces_region(x0 in 0usize..20, y0 in 0usize..20, w in 1usize..12, h in 1usize..12) {
            let data: Vec<u8> = (0..32 * 32 * 3).map(|i| (i * 7 % 251) as u8).collect();
            let img = Raster::new(32, 32, 3, data).unwrap();
            let b = bx(x0, y0, x0 + w, y0 + h, 0.0);
            let patch = crop_patches(&img, &[b]).unwrap().remove(0);
            let mut canvas = Raster::new(32, 32, 3, vec![0; 32 * 32 * 3]).unwrap();
            canvas.embed(&patch, x0, y0).unwrap();
            for y in y0..y0 + h {
                let s = (y * 32 + x0) * 3;
                prop_assert_eq!(&canvas.data()[s..s + w * 3], &img.data()[s..s + w * 3]);
            }
        }
    }
}
