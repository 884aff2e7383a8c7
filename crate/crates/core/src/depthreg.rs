//! Registration of a predicted depth map onto the depth rendered from the
//! existing scene: a robust global affine fit, optional per-segment fits
//! with feathered seams, and re-anchoring of newly appearing objects.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, DepthMap};
use crate::imaging::Mask;
use crate::raster::render_depth;
use crate::scene::MultiScaleScene;

/// Segments with fewer usable pixels keep the global fit.
pub const MIN_SEGMENT_PIXELS: usize = 32;
/// Width of the blend between neighboring segment fits, in pixels.
pub const FEATHER_PX: u32 = 2;
/// Width of the ring around a novel object used to anchor its depth.
pub const ANCHOR_RING_PX: u32 = 3;

// pivot iterations of the exact L1 line search
const MAX_PIVOTS: usize = 100;

#[derive(Debug, Error)]
pub enum DepthRegError {
    #[error("alignment needs at least two masked pixels with distinct predicted depth (got {0} usable pixels)")]
    Degenerate(usize),
    #[error("{what} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    Dimensions {
        what: &'static str,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("segment file {path}: {msg}")]
    Segments { path: String, msg: String },
}

/// `aligned = a * pred + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineDepthParams {
    pub a: f64,
    pub b: f64,
}

impl AffineDepthParams {
    pub const IDENTITY: Self = Self { a: 1.0, b: 0.0 };

    #[inline]
    pub fn apply(&self, d: f64) -> f64 {
        self.a * d + self.b
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AlignNorm {
    /// Least absolute deviations (IRLS, then an exact pivoting descent).
    #[default]
    L1,
    /// Ordinary least squares closed form.
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignConfig {
    pub norm: AlignNorm,
    pub irls_iterations: usize,
    pub weight_floor: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            norm: AlignNorm::L1,
            irls_iterations: 20,
            weight_floor: 1e-6,
        }
    }
}

fn dims(what: &'static str, w: u32, h: u32, want_w: u32, want_h: u32) -> Result<(), DepthRegError> {
    if (w, h) != (want_w, want_h) {
        return Err(DepthRegError::Dimensions {
            what,
            got_w: w,
            got_h: h,
            want_w,
            want_h,
        });
    }
    Ok(())
}

fn usable_pairs(pred: &DepthMap, target: &DepthMap, mask: &Mask) -> Result<Vec<(f64, f64)>, DepthRegError> {
    dims("target", target.width(), target.height(), pred.width(), pred.height())?;
    dims("mask", mask.width, mask.height, pred.width(), pred.height())?;
    Ok((0..pred.len())
        .filter(|k| mask.bits[*k])
        .filter_map(|k| Some((pred.get_index(k)?, target.get_index(k)?)))
        .collect())
}

/// Masked mean absolute error `|target - pred|` over pixels where both are
/// valid. `None` when no pixel qualifies.
pub fn masked_mae(pred: &DepthMap, target: &DepthMap, mask: &Mask) -> Option<f64> {
    let pairs = usable_pairs(pred, target, mask).ok()?;
    (!pairs.is_empty()).then(|| mae(&pairs, AffineDepthParams::IDENTITY))
}

fn mae(pairs: &[(f64, f64)], p: AffineDepthParams) -> f64 {
    pairs.iter().map(|(x, y)| (y - p.apply(*x)).abs()).sum::<f64>() / pairs.len() as f64
}

fn weighted_ls(pairs: &[(f64, f64)], weights: Option<&[f64]>) -> Option<AffineDepthParams> {
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, (x, y)) in pairs.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[k]);
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let (mx, my) = (sx / sw, sy / sw);
    let var = sxx / sw - mx * mx;
    if !(var > 0.0) {
        return None;
    }
    let a = (sxy / sw - mx * my) / var;
    Some(AffineDepthParams { a, b: my - a * mx })
}

/// Exact least-absolute-deviations line by pivoting: the optimal line passes
/// through two data points, and for a line forced through one point the best
/// slope is a weighted median.
fn l1_pivot_descent(pairs: &[(f64, f64)], start: AffineDepthParams) -> AffineDepthParams {
    let mut pivot = pairs
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let ra = (a.1 .1 - start.apply(a.1 .0)).abs();
            let rb = (b.1 .1 - start.apply(b.1 .0)).abs();
            ra.total_cmp(&rb)
        })
        .map(|(k, _)| k)
        .expect("non-empty");
    let mut best = start;
    let mut best_err = mae(pairs, start);
    let mut slopes: Vec<(f64, f64, usize)> = Vec::with_capacity(pairs.len());
    for _ in 0..MAX_PIVOTS {
        let (xi, yi) = pairs[pivot];
        slopes.clear();
        slopes.extend(
            pairs
                .iter()
                .enumerate()
                .filter(|(_, (x, _))| *x != xi)
                .map(|(k, (x, y))| ((y - yi) / (x - xi), (x - xi).abs(), k)),
        );
        if slopes.is_empty() {
            break;
        }
        slopes.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = slopes.iter().map(|s| s.1).sum();
        let mut acc = 0.0;
        let mut chosen = slopes.len() - 1;
        for (n, s) in slopes.iter().enumerate() {
            acc += s.1;
            if acc >= 0.5 * total {
                chosen = n;
                break;
            }
        }
        let (a, _, next) = slopes[chosen];
        let cand = AffineDepthParams { a, b: yi - a * xi };
        let err = mae(pairs, cand);
        if err < best_err {
            best = cand;
            best_err = err;
            pivot = next;
        } else {
            break;
        }
    }
    best
}

fn fit(pairs: &[(f64, f64)], config: &AlignConfig) -> Result<AffineDepthParams, DepthRegError> {
    let first = pairs.first().map(|p| p.0);
    if pairs.len() < 2 || pairs.iter().all(|p| Some(p.0) == first) {
        return Err(DepthRegError::Degenerate(pairs.len()));
    }
    let l2 = weighted_ls(pairs, None).ok_or(DepthRegError::Degenerate(pairs.len()))?;
    if config.norm == AlignNorm::L2 {
        return Ok(l2);
    }
    let mut p = l2;
    let mut w = vec![0.0; pairs.len()];
    for _ in 0..config.irls_iterations {
        for (k, (x, y)) in pairs.iter().enumerate() {
            w[k] = 1.0 / (y - p.apply(*x)).abs().max(config.weight_floor);
        }
        match weighted_ls(pairs, Some(&w)) {
            Some(next) => p = next,
            None => break,
        }
    }
    let mut best = if mae(pairs, p) <= mae(pairs, l2) { p } else { l2 };
    best = l1_pivot_descent(pairs, best);
    Ok(best)
}

/// Accepts `cand` only if it has positive scale and strictly lowers the
/// masked error relative to leaving the prediction unchanged.
fn guarded(pairs: &[(f64, f64)], cand: AffineDepthParams) -> (AffineDepthParams, f64) {
    let base = mae(pairs, AffineDepthParams::IDENTITY);
    let err = mae(pairs, cand);
    if cand.a > 0.0 && cand.a.is_finite() && cand.b.is_finite() && err < base * (1.0 - 1e-12) {
        (cand, err)
    } else {
        (AffineDepthParams::IDENTITY, base)
    }
}

/// Fits `target ≈ a * pred + b` on masked pixels where both maps are valid.
/// Returns the parameters and the achieved masked mean absolute error. A fit
/// that would not lower the error is replaced by the identity.
pub fn global_align(
    pred: &DepthMap,
    target: &DepthMap,
    mask: &Mask,
) -> Result<(AffineDepthParams, f64), DepthRegError> {
    global_align_with(pred, target, mask, &AlignConfig::default())
}

pub fn global_align_with(
    pred: &DepthMap,
    target: &DepthMap,
    mask: &Mask,
    config: &AlignConfig,
) -> Result<(AffineDepthParams, f64), DepthRegError> {
    let pairs = usable_pairs(pred, target, mask)?;
    let cand = fit(&pairs, config)?;
    Ok(guarded(&pairs, cand))
}

pub fn apply_affine(depth: &DepthMap, p: AffineDepthParams) -> DepthMap {
    let mut out = depth.clone();
    for k in 0..out.len() {
        if let Some(d) = depth.get_index(k) {
            let v = p.apply(d);
            if v > 0.0 && v.is_finite() {
                out.set_index(k, v);
            } else {
                out.invalidate(k);
            }
        }
    }
    out
}

/// Per-pixel segment labels; 0 means unassigned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSet {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    /// One past the largest label.
    pub count: u32,
}

#[derive(Serialize, Deserialize)]
struct RleSegments {
    width: u32,
    height: u32,
    /// `[label, run length]` pairs in row-major order.
    runs: Vec<(u32, u64)>,
}

impl SegmentSet {
    pub fn new(width: u32, height: u32, labels: Vec<u32>) -> Self {
        assert_eq!(labels.len(), width as usize * height as usize);
        let count = labels.iter().max().map_or(0, |m| m + 1);
        Self {
            width,
            height,
            labels,
            count,
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> u32) -> Self {
        let labels = (0..height).flat_map(|j| (0..width).map(move |i| (i, j))).map(|(i, j)| f(i, j)).collect();
        Self::new(width, height, labels)
    }

    fn seg_err(path: &Path, msg: impl Into<String>) -> DepthRegError {
        DepthRegError::Segments {
            path: path.display().to_string(),
            msg: msg.into(),
        }
    }

    /// Loads a 16-bit grayscale PNG whose pixel values are labels.
    pub fn load_png16(path: &Path) -> Result<Self, DepthRegError> {
        let img = image::open(path).map_err(|e| Self::seg_err(path, e.to_string()))?;
        let g = img.into_luma16();
        let (w, h) = g.dimensions();
        Ok(Self::new(w, h, g.pixels().map(|p| u32::from(p.0[0])).collect()))
    }

    /// Loads `{"width": W, "height": H, "runs": [[label, length], ...]}`.
    pub fn load_rle_json(path: &Path) -> Result<Self, DepthRegError> {
        let text = std::fs::read_to_string(path).map_err(|e| Self::seg_err(path, e.to_string()))?;
        Self::from_rle_json(&text).map_err(|msg| Self::seg_err(path, msg))
    }

    pub fn from_rle_json(text: &str) -> Result<Self, String> {
        let rle: RleSegments = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let n = rle.width as usize * rle.height as usize;
        let mut labels = Vec::with_capacity(n);
        for (label, len) in rle.runs {
            if labels.len() as u64 + len > n as u64 {
                return Err(format!("runs cover more than {n} pixels"));
            }
            labels.extend(std::iter::repeat_n(label, len as usize));
        }
        if labels.len() != n {
            return Err(format!("runs cover {} of {n} pixels", labels.len()));
        }
        Ok(Self::new(rle.width, rle.height, labels))
    }

    pub fn to_rle_json(&self) -> String {
        let mut runs: Vec<(u32, u64)> = Vec::new();
        for &l in &self.labels {
            match runs.last_mut() {
                Some((last, n)) if *last == l => *n += 1,
                _ => runs.push((l, 1)),
            }
        }
        serde_json::to_string(&RleSegments {
            width: self.width,
            height: self.height,
            runs,
        })
        .expect("serializable")
    }

    pub fn load(path: &Path) -> Result<Self, DepthRegError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::load_rle_json(path),
            _ => Self::load_png16(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentFit {
    pub label: u32,
    pub pixels: usize,
    pub params: AffineDepthParams,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct SegmentAlignment {
    pub depth: DepthMap,
    pub fits: Vec<SegmentFit>,
}

/// Refines an already globally aligned map with one affine fit per segment.
/// Segments with fewer than [`MIN_SEGMENT_PIXELS`] usable pixels, and the
/// unassigned label 0, keep the input. Fits are blended across segment
/// borders over [`FEATHER_PX`] pixels.
pub fn segment_align(
    pred: &DepthMap,
    target: &DepthMap,
    mask: &Mask,
    segments: &SegmentSet,
) -> Result<SegmentAlignment, DepthRegError> {
    let (w, h) = (pred.width(), pred.height());
    dims("segments", segments.width, segments.height, w, h)?;
    dims("target", target.width(), target.height(), w, h)?;
    dims("mask", mask.width, mask.height, w, h)?;
    let mut per_label: Vec<Vec<(f64, f64)>> = vec![Vec::new(); segments.count as usize];
    for k in 0..pred.len() {
        let l = segments.labels[k];
        if l == 0 || !mask.bits[k] {
            continue;
        }
        if let (Some(x), Some(y)) = (pred.get_index(k), target.get_index(k)) {
            per_label[l as usize].push((x, y));
        }
    }
    let mut params = vec![AffineDepthParams::IDENTITY; segments.count as usize];
    let mut fits = Vec::new();
    for (label, pairs) in per_label.iter().enumerate().skip(1) {
        if pairs.len() < MIN_SEGMENT_PIXELS {
            continue;
        }
        let Ok(cand) = fit(pairs, &AlignConfig::default()) else {
            continue;
        };
        let (p, residual) = guarded(pairs, cand);
        params[label] = p;
        fits.push(SegmentFit {
            label: label as u32,
            pixels: pairs.len(),
            params: p,
            residual,
        });
    }

    let r = i64::from(FEATHER_PX);
    let weight = |d: i64| (r + 1 - d) as f64 / (r + 1) as f64;
    let label_at = |i: i64, j: i64| segments.labels[(j * i64::from(w) + i) as usize];
    let mut out = pred.clone();
    for j in 0..i64::from(h) {
        for i in 0..i64::from(w) {
            let k = (j * i64::from(w) + i) as usize;
            let Some(d) = pred.get_index(k) else {
                continue;
            };
            let own = params[label_at(i, j) as usize];
            let mut uniform = true;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for y in (j - r).max(0)..=(j + r).min(i64::from(h) - 1) {
                for x in (i - r).max(0)..=(i + r).min(i64::from(w) - 1) {
                    let p = params[label_at(x, y) as usize];
                    uniform &= p == own;
                    let wt = weight((x - i).abs().max((y - j).abs()));
                    acc += wt * p.apply(d);
                    wsum += wt;
                }
            }
            let v = if uniform { own.apply(d) } else { acc / wsum };
            if v > 0.0 && v.is_finite() {
                out.set_index(k, v);
            } else {
                out.invalidate(k);
            }
        }
    }
    Ok(SegmentAlignment { depth: out, fits })
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Pixels of `mask` with at least one 8-neighbor outside it.
pub fn inner_boundary(mask: &Mask) -> Mask {
    let (w, h) = (i64::from(mask.width), i64::from(mask.height));
    Mask::from_fn(mask.width, mask.height, |i, j| {
        if !mask.get(i, j) {
            return false;
        }
        let (i, j) = (i64::from(i), i64::from(j));
        (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                let (x, y) = (i + dx, j + dy);
                x >= 0 && y >= 0 && x < w && y < h && !mask.bits[(y * w + x) as usize]
            })
        })
    })
}

/// Shifts the depth inside `mask` so the median of its inner boundary equals
/// the median of the surrounding ring. Returns the applied shift, or `None`
/// when either median is undefined.
pub fn anchor_object(depth: &mut DepthMap, mask: &Mask) -> Option<f64> {
    let ring = mask.dilate(ANCHOR_RING_PX);
    let inner = inner_boundary(mask);
    let mut outside: Vec<f64> = (0..depth.len())
        .filter(|k| ring.bits[*k] && !mask.bits[*k])
        .filter_map(|k| depth.get_index(k))
        .collect();
    let mut edge: Vec<f64> = (0..depth.len())
        .filter(|k| inner.bits[*k])
        .filter_map(|k| depth.get_index(k))
        .collect();
    let shift = median(&mut outside)? - median(&mut edge)?;
    for k in 0..depth.len() {
        if mask.bits[k] {
            if let Some(d) = depth.get_index(k) {
                let v = d + shift;
                if v > 0.0 {
                    depth.set_index(k, v);
                } else {
                    depth.invalidate(k);
                }
            }
        }
    }
    Some(shift)
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub depth: DepthMap,
    /// True when the scene covered none of the view and the input was
    /// returned unchanged.
    pub passthrough: bool,
    pub global: AffineDepthParams,
    pub segments: Vec<SegmentFit>,
    pub anchor_shifts: Vec<Option<f64>>,
    /// Masked mean absolute depth error before and after registration.
    pub error_before: Option<f64>,
    pub error_after: Option<f64>,
}

/// Aligns `fine_depth` to the depth the scene renders at `camera`.
pub fn register_depth(
    fine_depth: &DepthMap,
    scene: &MultiScaleScene,
    camera: &Camera,
    segments: Option<&SegmentSet>,
    novel_masks: &[Mask],
) -> Result<Registration, DepthRegError> {
    let target = render_depth(scene, camera);
    register_to_target(fine_depth, &target, segments, novel_masks)
}

/// [`register_depth`] against an explicit target map.
pub fn register_to_target(
    fine_depth: &DepthMap,
    target: &DepthMap,
    segments: Option<&SegmentSet>,
    novel_masks: &[Mask],
) -> Result<Registration, DepthRegError> {
    let (w, h) = (fine_depth.width(), fine_depth.height());
    dims("target depth", target.width(), target.height(), w, h)?;
    let mask = Mask {
        width: w,
        height: h,
        bits: target.validity().to_vec(),
    };
    let error_before = masked_mae(fine_depth, target, &mask);
    if target.valid_count() == 0 {
        log::warn!("scene does not cover the view; depth passed through unregistered");
        return Ok(Registration {
            depth: fine_depth.clone(),
            passthrough: true,
            global: AffineDepthParams::IDENTITY,
            segments: Vec::new(),
            anchor_shifts: Vec::new(),
            error_before,
            error_after: error_before,
        });
    }
    let (global, _) = match global_align(fine_depth, target, &mask) {
        Ok(v) => v,
        Err(DepthRegError::Degenerate(n)) => {
            log::warn!("global depth alignment is degenerate ({n} usable pixels); keeping prediction");
            (AffineDepthParams::IDENTITY, 0.0)
        }
        Err(e) => return Err(e),
    };
    let mut depth = apply_affine(fine_depth, global);
    let mut seg_fits = Vec::new();
    if let Some(segs) = segments {
        let refined = segment_align(&depth, target, &mask, segs)?;
        // feathered seams must not undo the improvement of the fits
        let before = masked_mae(&depth, target, &mask);
        let after = masked_mae(&refined.depth, target, &mask);
        if after <= before {
            depth = refined.depth;
            seg_fits = refined.fits;
        }
    }
    let mut anchor_shifts = Vec::with_capacity(novel_masks.len());
    for m in novel_masks {
        dims("novel mask", m.width, m.height, w, h)?;
        let mut candidate = depth.clone();
        let shift = anchor_object(&mut candidate, m);
        let keep = shift.is_some() && masked_mae(&candidate, target, &mask) <= masked_mae(&depth, target, &mask);
        if keep {
            depth = candidate;
            anchor_shifts.push(shift);
        } else {
            anchor_shifts.push(None);
        }
    }
    let error_after = masked_mae(&depth, target, &mask);
    Ok(Registration {
        depth,
        passthrough: false,
        global,
        segments: seg_fits,
        anchor_shifts,
        error_before,
        error_after,
    })
}
