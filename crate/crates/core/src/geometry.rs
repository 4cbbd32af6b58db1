//! Boundary geometry on 2D pixel grids.
//!
//! Masks, probability maps, exact Euclidean distance transforms, boundary
//! extraction, and the overlap / surface-distance metrics (DSC, directed
//! Hausdorff, HD95). Everything here is a pure function of its inputs.
//!
//! Distances are measured in pixels between pixel centres. A pixel's
//! distance value is zero exactly when it belongs to the object set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary ground-truth style mask, row-major, values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidValue(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidValue(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Self::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                mask.data[r * width + c] = f(r, c) as u8;
            }
        }
        mask
    }

    /// Builds a mask from a pixel set on its own grid.
    pub fn from_pixels(set: &PixelSet) -> Self {
        let mut mask = Self::zeros(set.height, set.width);
        for &(r, c) in &set.pixels {
            mask.data[r * set.width + c] = 1;
        }
        mask
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// All object pixels in row-major order.
    pub fn object_pixels(&self) -> PixelSet {
        let pixels = self
            .data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect();
        PixelSet {
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    /// The mask values as reals, for use as a soft target.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Grid diagonal `sqrt(H^2 + W^2)`: the worst-case distance sentinel.
    pub fn diagonal(&self) -> f64 {
        grid_diagonal(self.height, self.width)
    }
}

/// Grid diagonal `sqrt(H^2 + W^2)`.
pub fn grid_diagonal(height: usize, width: usize) -> f64 {
    ((height * height + width * width) as f64).sqrt()
}

/// Soft prediction map with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidValue(format!(
                "map dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!(
                "probability {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Pixels with probability `>= threshold` become object pixels.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&p| (p >= threshold) as u8).collect(),
        }
    }
}

impl From<&BinaryMask> for ProbMap {
    fn from(mask: &BinaryMask) -> Self {
        ProbMap {
            height: mask.height,
            width: mask.width,
            data: mask.to_f64(),
        }
    }
}

/// Per-pixel unsigned Euclidean distance to a mask's object set.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DistanceMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// A set of pixel coordinates on a known grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSet {
    height: usize,
    width: usize,
    pixels: Vec<(usize, usize)>,
}

impl PixelSet {
    /// Sorts and deduplicates; rejects out-of-bounds coordinates.
    pub fn new(height: usize, width: usize, mut pixels: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(p) = pixels.iter().find(|(r, c)| *r >= height || *c >= width) {
            return Err(Error::InvalidValue(format!(
                "pixel {p:?} outside {height}x{width} grid"
            )));
        }
        pixels.sort_unstable();
        pixels.dedup();
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

const UNREACHED: f64 = f64::INFINITY;

/// Squared distance transform of one line, lower envelope of parabolas
/// rooted at the finite entries of `f`. Entries left infinite if `f` has
/// no finite value.
fn envelope_1d(f: &[f64], out: &mut [f64], roots: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    roots.clear();
    bounds.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        let mut s = f64::NEG_INFINITY;
        while let Some(&v) = roots.last() {
            let vf = v as f64;
            s = ((fq + qf * qf) - (f[v] + vf * vf)) / (2.0 * qf - 2.0 * vf);
            if s <= *bounds.last().unwrap() {
                roots.pop();
                bounds.pop();
                s = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        roots.push(q);
        bounds.push(s);
    }
    if roots.is_empty() {
        out.iter_mut().for_each(|o| *o = UNREACHED);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < roots.len() && bounds[k + 1] < qf {
            k += 1;
        }
        let d = qf - roots[k] as f64;
        *o = d * d + f[roots[k]];
    }
}

/// Exact squared Euclidean distance to the nearest object pixel, computed
/// with separable column and row passes. All values are integers held in
/// `f64`; pixels are infinite only when the mask is empty.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = mask.shape();
    let mut cols = vec![UNREACHED; h * w];
    let mut roots = Vec::with_capacity(h.max(w));
    let mut bounds = Vec::with_capacity(h.max(w));
    let mut line = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];

    for c in 0..w {
        for r in 0..h {
            line[r] = if mask.get(r, c) { 0.0 } else { UNREACHED };
        }
        envelope_1d(&line[..h], &mut out[..h], &mut roots, &mut bounds);
        for r in 0..h {
            cols[r * w + c] = out[r];
        }
    }
    let mut result = vec![0.0; h * w];
    for r in 0..h {
        envelope_1d(
            &cols[r * w..(r + 1) * w],
            &mut result[r * w..(r + 1) * w],
            &mut roots,
            &mut bounds,
        );
    }
    result
}

/// Unsigned Euclidean distance from every pixel to the mask's object set.
///
/// Zero on object pixels. An all-background mask yields the grid diagonal
/// everywhere, so downstream averages stay finite.
pub fn distance_transform(mask: &BinaryMask) -> DistanceMap {
    let (height, width) = mask.shape();
    let data = if mask.is_empty() {
        vec![mask.diagonal(); height * width]
    } else {
        squared_distance_transform(mask)
            .into_iter()
            .map(f64::sqrt)
            .collect()
    };
    DistanceMap {
        height,
        width,
        data,
    }
}

/// Distance to the object's boundary pixels rather than to the whole
/// object: zero on the boundary, positive both inside and outside.
pub fn boundary_distance_transform(mask: &BinaryMask) -> DistanceMap {
    distance_transform(&BinaryMask::from_pixels(&boundary_pixels(mask)))
}

/// Object pixels with a 4-neighbour that is background or off-grid.
pub fn boundary_pixels(mask: &BinaryMask) -> PixelSet {
    let (h, w) = mask.shape();
    let mut pixels = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                pixels.push((r, c));
            }
        }
    }
    PixelSet {
        height: h,
        width: w,
        pixels,
    }
}

/// Dice similarity coefficient `2|U∩V| / (|U| + |V|)` of two masks.
pub fn dsc(u: &BinaryMask, v: &BinaryMask) -> Result<f64> {
    if u.shape() != v.shape() {
        return Err(Error::shape(u.shape(), v.shape()));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in u.data.iter().zip(&v.data) {
        inter += (a & b) as usize;
        total += (a + b) as usize;
    }
    if total == 0 {
        return Err(Error::BothEmpty);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// For each pixel of `u`, the distance to the nearest pixel of `v`.
/// Order follows `u`'s (sorted) pixel order.
pub fn directed_distances(u: &PixelSet, v: &PixelSet) -> Result<Vec<f64>> {
    if u.is_empty() || v.is_empty() {
        return Err(Error::EmptySet);
    }
    if u.grid() != v.grid() {
        return Err(Error::shape(u.grid(), v.grid()));
    }
    let sq = squared_distance_transform(&BinaryMask::from_pixels(v));
    let w = v.width;
    Ok(u.pixels.iter().map(|&(r, c)| sq[r * w + c].sqrt()).collect())
}

/// Directed Hausdorff distance: max over `u` of the distance to `v`.
pub fn hd_directed(u: &PixelSet, v: &PixelSet) -> Result<f64> {
    Ok(directed_distances(u, v)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Percentile with linear interpolation between closest ranks
/// (rank `p/100 * (n-1)`). `values` need not be sorted.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySet);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidValue(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Directed 95th-percentile Hausdorff distance from `u` to `v`.
pub fn hd95(u: &PixelSet, v: &PixelSet) -> Result<f64> {
    percentile(&directed_distances(u, v)?, 95.0)
}

/// How the two directed HD95 values are folded into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdSymmetry {
    #[default]
    Max,
    Mean,
}

/// Both directed HD95 values and their symmetric combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetricHd95 {
    pub forward: f64,
    pub backward: f64,
    pub symmetric: f64,
}

pub fn symmetric_hd95(u: &PixelSet, v: &PixelSet, mode: HdSymmetry) -> Result<SymmetricHd95> {
    let forward = hd95(u, v)?;
    let backward = hd95(v, u)?;
    let symmetric = match mode {
        HdSymmetry::Max => forward.max(backward),
        HdSymmetry::Mean => 0.5 * (forward + backward),
    };
    Ok(SymmetricHd95 {
        forward,
        backward,
        symmetric,
    })
}

/// Metrics between a predicted and a reference mask, with the empty-mask
/// conventions used throughout evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskComparison {
    pub dsc: f64,
    /// Directed HD95, prediction boundary to reference boundary.
    pub hd95_pred_to_gt: f64,
    /// Directed HD95, reference boundary to prediction boundary.
    pub hd95_gt_to_pred: f64,
    pub hd95: f64,
    pub hd_pred_to_gt: f64,
    pub hd_gt_to_pred: f64,
    /// The prediction had no object pixel while the reference did.
    pub empty_prediction: bool,
    /// Neither mask had an object pixel; scored DSC 1, distances 0.
    pub both_empty: bool,
}

/// Compares `pred` against `gt`. Both-empty scores as perfect agreement;
/// exactly one empty mask scores DSC 0 and every distance at the grid
/// diagonal. Both cases are flagged.
pub fn compare_masks(pred: &BinaryMask, gt: &BinaryMask, mode: HdSymmetry) -> Result<MaskComparison> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(gt.shape(), pred.shape()));
    }
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => Ok(MaskComparison {
            dsc: 1.0,
            hd95_pred_to_gt: 0.0,
            hd95_gt_to_pred: 0.0,
            hd95: 0.0,
            hd_pred_to_gt: 0.0,
            hd_gt_to_pred: 0.0,
            empty_prediction: false,
            both_empty: true,
        }),
        (true, false) | (false, true) => {
            let diag = gt.diagonal();
            Ok(MaskComparison {
                dsc: 0.0,
                hd95_pred_to_gt: diag,
                hd95_gt_to_pred: diag,
                hd95: diag,
                hd_pred_to_gt: diag,
                hd_gt_to_pred: diag,
                empty_prediction: pred.is_empty(),
                both_empty: false,
            })
        }
        (false, false) => {
            let bp = boundary_pixels(pred);
            let bg = boundary_pixels(gt);
            let sym = symmetric_hd95(&bp, &bg, mode)?;
            Ok(MaskComparison {
                dsc: dsc(pred, gt)?,
                hd95_pred_to_gt: sym.forward,
                hd95_gt_to_pred: sym.backward,
                hd95: sym.symmetric,
                hd_pred_to_gt: hd_directed(&bp, &bg)?,
                hd_gt_to_pred: hd_directed(&bg, &bp)?,
                empty_prediction: false,
                both_empty: false,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_distance(mask: &BinaryMask) -> Vec<f64> {
        let (h, w) = mask.shape();
        let objects = mask.object_pixels();
        let mut out = vec![mask.diagonal(); h * w];
        if objects.is_empty() {
            return out;
        }
        for r in 0..h {
            for c in 0..w {
                let mut best = u64::MAX;
                for &(or, oc) in objects.pixels() {
                    let dr = r.abs_diff(or) as u64;
                    let dc = c.abs_diff(oc) as u64;
                    best = best.min(dr * dr + dc * dc);
                }
                out[r * w + c] = (best as f64).sqrt();
            }
        }
        out
    }

    fn set(h: usize, w: usize, px: &[(usize, usize)]) -> PixelSet {
        PixelSet::new(h, w, px.to_vec()).unwrap()
    }

    #[test]
    fn all_ones_gives_zero_distances() {
        let mask = BinaryMask::from_fn(4, 4, |_, _| true);
        assert!(distance_transform(&mask).data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn all_zeros_gives_diagonal_sentinel() {
        let dt = distance_transform(&BinaryMask::zeros(3, 3));
        for &d in dt.data() {
            assert_eq!(d, 18f64.sqrt());
        }
        assert!((dt.get(0, 0) - 4.2426).abs() < 1e-4);
    }

    #[test]
    fn single_pixel_distances() {
        let mask = BinaryMask::from_fn(5, 5, |r, c| (r, c) == (2, 2));
        let dt = distance_transform(&mask);
        assert_eq!(dt.get(0, 0), 8f64.sqrt());
        assert_eq!(dt.get(2, 4), 2.0);
        assert_eq!(dt.data(), brute_distance(&mask).as_slice());
    }

    #[test]
    fn non_square_grid_matches_brute_force() {
        let mask = BinaryMask::from_fn(3, 11, |r, c| (r, c) == (0, 10) || (r, c) == (2, 1));
        assert_eq!(distance_transform(&mask).data(), brute_distance(&mask).as_slice());
    }

    #[test]
    fn boundary_of_isolated_pixel() {
        let mask = BinaryMask::from_fn(3, 3, |r, c| (r, c) == (1, 1));
        assert_eq!(boundary_pixels(&mask).pixels(), &[(1, 1)]);
    }

    #[test]
    fn boundary_of_block_is_its_perimeter() {
        let mask = BinaryMask::from_fn(8, 8, |r, c| (2..6).contains(&r) && (2..6).contains(&c));
        let b = boundary_pixels(&mask);
        assert_eq!(b.len(), 12);
        for &(r, c) in b.pixels() {
            assert!(r == 2 || r == 5 || c == 2 || c == 5);
        }
    }

    #[test]
    fn boundary_counts_image_border() {
        let mask = BinaryMask::from_fn(3, 3, |_, _| true);
        assert_eq!(boundary_pixels(&mask).len(), 8);
        assert!(boundary_pixels(&BinaryMask::zeros(3, 3)).is_empty());
    }

    #[test]
    fn dsc_examples() {
        let a = BinaryMask::from_fn(4, 4, |r, c| r < 2 && c < 2);
        let shifted = BinaryMask::from_fn(4, 4, |r, c| r < 2 && (1..3).contains(&c));
        let disjoint = BinaryMask::from_fn(4, 4, |r, c| r >= 2 && c >= 2);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &disjoint).unwrap(), 0.0);
        assert_eq!(dsc(&a, &shifted).unwrap(), 0.5);
        let empty = BinaryMask::zeros(4, 4);
        assert!(matches!(dsc(&empty, &empty), Err(Error::BothEmpty)));
        assert!(matches!(
            dsc(&a, &BinaryMask::zeros(3, 4)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn hd_directed_examples() {
        let u = set(11, 11, &[(0, 0)]);
        let v = set(11, 11, &[(3, 4)]);
        assert_eq!(hd_directed(&u, &v).unwrap(), 5.0);
        assert_eq!(hd_directed(&u, &u).unwrap(), 0.0);

        let wide = set(11, 11, &[(0, 0), (0, 10)]);
        let origin = set(11, 11, &[(0, 0)]);
        assert_eq!(hd_directed(&wide, &origin).unwrap(), 10.0);
        assert_eq!(hd_directed(&origin, &wide).unwrap(), 0.0);

        let empty = set(11, 11, &[]);
        assert!(matches!(hd_directed(&u, &empty), Err(Error::EmptySet)));
        assert!(matches!(hd95(&empty, &u), Err(Error::EmptySet)));
    }

    #[test]
    fn hd95_discards_single_outlier() {
        // 19 pixels at distance 1 from v, one at distance 50.
        let mut u_px: Vec<(usize, usize)> = (0..19).map(|c| (1, c)).collect();
        u_px.push((50, 0));
        let v_px: Vec<(usize, usize)> = (0..19).map(|c| (0, c)).collect();
        let u = set(64, 64, &u_px);
        let v = set(64, 64, &v_px);
        let h = hd95(&u, &v).unwrap();
        // sorted distances: nineteen 1s then 50; rank 0.95*19 = 18.05
        let expected = 1.0 + 0.05 * 49.0;
        assert!((h - expected).abs() < 1e-12, "{h}");
        assert!(h < hd_directed(&u, &v).unwrap());

        let a = set(8, 8, &[(0, 0)]);
        let b = set(8, 8, &[(3, 4)]);
        assert_eq!(hd95(&a, &b).unwrap(), 5.0);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0).unwrap(), 2.0);
        assert_eq!(percentile(&[0.0, 10.0], 95.0).unwrap(), 9.5);
        assert_eq!(percentile(&[7.0], 95.0).unwrap(), 7.0);
    }

    #[test]
    fn compare_masks_conventions() {
        let gt = BinaryMask::from_fn(6, 6, |r, c| r < 3 && c < 3);
        let same = compare_masks(&gt, &gt, HdSymmetry::Max).unwrap();
        assert_eq!((same.dsc, same.hd95), (1.0, 0.0));

        let empty = BinaryMask::zeros(6, 6);
        let miss = compare_masks(&empty, &gt, HdSymmetry::Max).unwrap();
        assert!(miss.empty_prediction);
        assert_eq!(miss.dsc, 0.0);
        assert_eq!(miss.hd95, 72f64.sqrt());

        let both = compare_masks(&empty, &empty, HdSymmetry::Max).unwrap();
        assert!(both.both_empty && !both.empty_prediction);
        assert_eq!(both.dsc, 1.0);
    }

    #[test]
    fn boundary_distance_is_zero_on_boundary_only() {
        let mask = BinaryMask::from_fn(7, 7, |r, c| (1..6).contains(&r) && (1..6).contains(&c));
        let d = boundary_distance_transform(&mask);
        assert_eq!(d.get(1, 1), 0.0);
        assert_eq!(d.get(3, 3), 2.0);
        assert_eq!(d.get(0, 3), 1.0);
    }

    fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
        (1..=max, 1..=max).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), proptest::collection::vec(0u8..=1, h * w))
                .prop_map(|(h, w, d)| BinaryMask::new(h, w, d).unwrap())
        })
    }

    fn mask_pair_strategy(max: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1..=max, 1..=max).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(0u8..=1, h * w),
                proptest::collection::vec(0u8..=1, h * w),
            )
                .prop_map(move |(a, b)| {
                    (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn distance_transform_matches_brute_force(mask in mask_strategy(16)) {
            let fast = distance_transform(&mask);
            let brute = brute_distance(&mask);
            for (a, b) in fast.data().iter().zip(&brute) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn distance_transform_is_lipschitz(mask in mask_strategy(12)) {
            prop_assume!(!mask.is_empty());
            let d = distance_transform(&mask);
            for r in 0..mask.height() {
                for c in 0..mask.width() {
                    if r + 1 < mask.height() {
                        prop_assert!((d.get(r, c) - d.get(r + 1, c)).abs() <= 1.0 + 1e-12);
                    }
                    if c + 1 < mask.width() {
                        prop_assert!((d.get(r, c) - d.get(r, c + 1)).abs() <= 1.0 + 1e-12);
                    }
                    prop_assert_eq!(d.get(r, c) == 0.0, mask.get(r, c));
                }
            }
        }

        #[test]
        fn dsc_is_symmetric(a in mask_strategy(10)) {
            let b = BinaryMask::from_fn(a.height(), a.width(), |r, c| (r + c) % 3 == 0);
            prop_assume!(!(a.is_empty() && b.is_empty()));
            prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        }

        #[test]
        fn hd95_never_exceeds_hd((a, b) in mask_pair_strategy(12)) {
            let (u, v) = (boundary_pixels(&a), boundary_pixels(&b));
            prop_assume!(!u.is_empty() && !v.is_empty());
            prop_assert!(hd95(&u, &v).unwrap() <= hd_directed(&u, &v).unwrap());
            prop_assert_eq!(hd_directed(&u, &u).unwrap(), 0.0);
        }
    }
}
