//! Axis-aligned crop and patch geometry.
//!
//! All coordinates are continuous and expressed in original-image pixels.
//! A [`CropBox`] maps the square resized view back onto the source image via
//! an affine map (scale + translate, optionally mirrored horizontally), and a
//! [`PatchGrid`] tiles that view into square patches. Overlap ratios between
//! patches of two views are ratios of areas measured in image space.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Half-open axis-aligned rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let finite = [x0, y0, x1, y1].iter().all(|v| v.is_finite());
        if !finite || x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(
                "rect",
                format!("degenerate rect ({x0}, {y0}, {x1}, {y1})"),
            ));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Intersection rect, or `None` when the overlap has zero measure.
    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x0 < x1 && y0 < y1).then_some(Rect { x0, y0, x1, y1 })
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    /// Applies `p -> scale * p + offset` to both axes.
    pub fn scaled(&self, scale: f64, dx: f64, dy: f64) -> Rect {
        Rect {
            x0: self.x0 * scale + dx,
            y0: self.y0 * scale + dy,
            x1: self.x1 * scale + dx,
            y1: self.y1 * scale + dy,
        }
    }
}

/// Area of `a ∩ b`; edge-adjacent rects have zero overlap.
pub fn intersection_area(a: &Rect, b: &Rect) -> f64 {
    let w = a.x1.min(b.x1) - a.x0.max(b.x0);
    let h = a.y1.min(b.y1) - a.y0.max(b.y0);
    if w > 0.0 && h > 0.0 {
        w * h
    } else {
        0.0
    }
}

/// Fraction of `patch` covered by the union of `sampled`.
///
/// The rects in `sampled` must be pairwise disjoint (true for any subset of a
/// single [`PatchGrid`]), so the union intersection is the plain sum of
/// pairwise intersections.
pub fn overlap_ratio(sampled: &[Rect], patch: &Rect) -> f64 {
    let covered: f64 = sampled.iter().map(|r| intersection_area(r, patch)).sum();
    (covered / patch.area()).clamp(0.0, 1.0)
}

/// A crop region of the source image together with its resize/flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub rect: Rect,
    pub flip: bool,
    /// Side length of the square view after resizing.
    pub view_size: usize,
    /// Width and height of the source image the crop was taken from.
    pub image_size: (f64, f64),
}

impl CropBox {
    pub fn new(rect: Rect, flip: bool, view_size: usize, image_size: (f64, f64)) -> Result<Self> {
        if view_size == 0 {
            return Err(Error::invalid("view_size", "must be positive"));
        }
        let bounds = Rect::new(0.0, 0.0, image_size.0, image_size.1)?;
        if !bounds.contains_rect(&rect) {
            return Err(Error::invalid(
                "rect",
                format!("{rect:?} lies outside image {image_size:?}"),
            ));
        }
        Ok(Self {
            rect,
            flip,
            view_size,
            image_size,
        })
    }

    /// The whole image resized to `view_size`, without flip.
    pub fn full(image_w: f64, image_h: f64, view_size: usize) -> Result<Self> {
        Self::new(
            Rect::new(0.0, 0.0, image_w, image_h)?,
            false,
            view_size,
            (image_w, image_h),
        )
    }

    fn scale(&self) -> (f64, f64) {
        let v = self.view_size as f64;
        (self.rect.width() / v, self.rect.height() / v)
    }

    /// Maps a point in view coordinates to image coordinates.
    pub fn view_to_image(&self, u: f64, v: f64) -> (f64, f64) {
        let (sx, sy) = self.scale();
        let x = if self.flip {
            self.rect.x1 - u * sx
        } else {
            self.rect.x0 + u * sx
        };
        (x, self.rect.y0 + v * sy)
    }

    /// Inverse of [`CropBox::view_to_image`].
    pub fn image_to_view(&self, x: f64, y: f64) -> (f64, f64) {
        let (sx, sy) = self.scale();
        let u = if self.flip {
            (self.rect.x1 - x) / sx
        } else {
            (x - self.rect.x0) / sx
        };
        (u, (y - self.rect.y0) / sy)
    }

    /// Maps a view-space rect to image space.
    pub fn map_rect(&self, u0: f64, v0: f64, u1: f64, v1: f64) -> Rect {
        let (xa, ya) = self.view_to_image(u0, v0);
        let (xb, yb) = self.view_to_image(u1, v1);
        Rect {
            x0: xa.min(xb),
            y0: ya.min(yb),
            x1: xa.max(xb),
            y1: ya.max(yb),
        }
    }

    pub fn same_source(&self, other: &CropBox) -> bool {
        self.image_size == other.image_size
    }
}

/// Square-patch tokenization of one view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub crop: CropBox,
    pub patch_size: usize,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl PatchGrid {
    pub fn new(crop: CropBox, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || crop.view_size % patch_size != 0 {
            return Err(Error::invalid(
                "patch_size",
                format!(
                    "{patch_size} does not tile view of size {}",
                    crop.view_size
                ),
            ));
        }
        let n = crop.view_size / patch_size;
        Ok(Self {
            crop,
            patch_size,
            n_rows: n,
            n_cols: n,
        })
    }

    pub fn len(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row and column of a patch index (row-major).
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.n_cols, index % self.n_cols)
    }

    /// Footprint of patch `index` in original-image coordinates.
    pub fn map_patch_to_image(&self, index: usize) -> Result<Rect> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        Ok(self.patch_rect(index))
    }

    pub(crate) fn patch_rect(&self, index: usize) -> Rect {
        let (row, col) = self.position(index);
        let p = self.patch_size as f64;
        let u0 = col as f64 * p;
        let v0 = row as f64 * p;
        self.crop.map_rect(u0, v0, u0 + p, v0 + p)
    }

    /// Indices of patches whose footprint can intersect `rect`.
    ///
    /// This is a superset filter: callers still compute exact intersections.
    pub fn candidates(&self, rect: &Rect) -> impl Iterator<Item = usize> + '_ {
        let (ua, va) = self.crop.image_to_view(rect.x0, rect.y0);
        let (ub, vb) = self.crop.image_to_view(rect.x1, rect.y1);
        let p = self.patch_size as f64;
        let span = |a: f64, b: f64, n: usize| {
            let lo = (a.min(b) / p).floor().max(0.0);
            let hi = (a.max(b) / p).ceil().min(n as f64);
            if hi <= lo {
                (0, 0)
            } else {
                (lo as usize, hi as usize)
            }
        };
        let (c0, c1) = span(ua, ub, self.n_cols);
        let (r0, r1) = span(va, vb, self.n_rows);
        let n_cols = self.n_cols;
        (r0..r1).flat_map(move |r| (c0..c1).map(move |c| r * n_cols + c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(rect: Rect, flip: bool, view: usize, patch: usize) -> PatchGrid {
        let crop = CropBox::new(rect, flip, view, (32.0, 32.0)).unwrap();
        PatchGrid::new(crop, patch).unwrap()
    }

    fn r(x0: f64, y0: f64, x1: f64, y1: f64) -> Rect {
        Rect::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn identity_crop_first_patch() {
        let g = grid(r(0., 0., 32., 32.), false, 32, 2);
        assert_eq!(g.map_patch_to_image(0).unwrap(), r(0., 0., 2., 2.));
    }

    #[test]
    fn flip_mirrors_first_column() {
        let g = grid(r(0., 0., 32., 32.), true, 32, 2);
        assert_eq!(g.map_patch_to_image(0).unwrap(), r(30., 0., 32., 2.));
    }

    #[test]
    fn half_scale_crop() {
        let g = grid(r(8., 8., 24., 24.), false, 32, 16);
        assert_eq!(g.map_patch_to_image(0).unwrap(), r(8., 8., 16., 16.));
    }

    #[test]
    fn index_out_of_range() {
        let g = grid(r(0., 0., 32., 32.), false, 32, 16);
        assert!(matches!(
            g.map_patch_to_image(4),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn intersection_examples() {
        assert_eq!(intersection_area(&r(0., 0., 4., 4.), &r(0., 0., 4., 4.)), 16.0);
        assert_eq!(intersection_area(&r(0., 0., 2., 2.), &r(2., 0., 4., 2.)), 0.0);
        assert_eq!(intersection_area(&r(0., 0., 4., 4.), &r(2., 2., 6., 6.)), 4.0);
    }

    #[test]
    fn overlap_ratio_examples() {
        let p2 = r(0., 0., 2., 2.);
        assert_eq!(overlap_ratio(&[p2], &p2), 1.0);
        assert_eq!(overlap_ratio(&[r(5., 5., 6., 6.)], &p2), 0.0);
        // two quarters of patch2
        let quarters = [r(-1., -1., 1., 1.), r(1., 1., 3., 3.)];
        assert_eq!(overlap_ratio(&quarters, &p2), 0.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Rect::new(1., 0., 1., 2.).is_err());
        assert!(CropBox::new(r(0., 0., 40., 8.), false, 8, (32., 32.)).is_err());
        let crop = CropBox::new(r(0., 0., 8., 8.), false, 10, (32., 32.)).unwrap();
        assert!(PatchGrid::new(crop, 4).is_err());
    }

    fn arb_crop() -> impl Strategy<Value = (Rect, bool)> {
        (0.0..20.0f64, 0.0..20.0f64, 1.0..12.0f64, 1.0..12.0f64, any::<bool>())
            .prop_map(|(x, y, w, h, f)| (r(x, y, x + w, y + h), f))
    }

    proptest! {
        #[test]
        fn patches_of_one_grid_are_disjoint((rect, flip) in arb_crop(), patch in prop::sample::select(vec![2usize, 4, 8])) {
            let g = grid(rect, flip, 16, patch);
            for i in 0..g.len() {
                for j in (i + 1)..g.len() {
                    let a = g.map_patch_to_image(i).unwrap();
                    let b = g.map_patch_to_image(j).unwrap();
                    prop_assert!(intersection_area(&a, &b) < 1e-9 * a.area());
                }
            }
        }

        #[test]
        fn view_image_roundtrip((rect, flip) in arb_crop(), u in 0.0..16.0f64, v in 0.0..16.0f64) {
            let crop = CropBox::new(rect, flip, 16, (32., 32.)).unwrap();
            let (x, y) = crop.view_to_image(u, v);
            prop_assert!(x >= rect.x0 - 1e-9 && x <= rect.x1 + 1e-9);
            prop_assert!(y >= rect.y0 - 1e-9 && y <= rect.y1 + 1e-9);
            let (u2, v2) = crop.image_to_view(x, y);
            prop_assert!((u - u2).abs() < 1e-9 && (v - v2).abs() < 1e-9);
        }

        #[test]
        fn overlap_ratio_bounded_and_scale_invariant(
            (r1, f1) in arb_crop(), (r2, f2) in arb_crop(),
            mask in prop::collection::vec(any::<bool>(), 16),
            pick in 0usize..16, scale in 0.1..10.0f64, dx in -5.0..5.0f64,
        ) {
            let g1 = grid(r1, f1, 8, 2);
            let g2 = grid(r2, f2, 8, 2);
            let sampled: Vec<Rect> = (0..16).filter(|&i| mask[i]).map(|i| g1.patch_rect(i)).collect();
            let p2 = g2.patch_rect(pick);
            let ratio = overlap_ratio(&sampled, &p2);
            prop_assert!((0.0..=1.0).contains(&ratio));
            let scaled: Vec<Rect> = sampled.iter().map(|q| q.scaled(scale, dx, -dx)).collect();
            let ratio_s = overlap_ratio(&scaled, &p2.scaled(scale, dx, -dx));
            prop_assert!((ratio - ratio_s).abs() < 1e-9);
        }

        #[test]
        fn overlapping_area_is_conserved(
            (r1, f1) in arb_crop(), (r2, f2) in arb_crop(),
            mask in prop::collection::vec(any::<bool>(), 16),
        ) {
            let g1 = grid(r1, f1, 8, 2);
            let g2 = grid(r2, f2, 8, 2);
            let sampled: Vec<Rect> = (0..16).filter(|&i| mask[i]).map(|i| g1.patch_rect(i)).collect();
            let lhs: f64 = (0..g2.len())
                .map(|j| { let p = g2.patch_rect(j); overlap_ratio(&sampled, &p) * p.area() })
                .sum();
            let rhs: f64 = sampled.iter().map(|s| intersection_area(s, &g2.crop.rect)).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs));
        }

        #[test]
        fn candidates_cover_all_intersecting_patches((r1, f1) in arb_crop(), (r2, f2) in arb_crop(), pick in 0usize..16) {
            let g1 = grid(r1, f1, 8, 2);
            let g2 = grid(r2, f2, 8, 2);
            let p2 = g2.patch_rect(pick);
            let cands: Vec<usize> = g1.candidates(&p2).collect();
            for i in 0..g1.len() {
                if intersection_area(&g1.patch_rect(i), &p2) > 0.0 {
                    prop_assert!(cands.contains(&i));
                }
            }
        }
    }
}
