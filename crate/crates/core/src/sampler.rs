//! Asymmetric patch sampling.
//!
//! View 1 is drawn uniformly (sparse sampling). View 2 is drawn without
//! replacement with weights `(1 - r)^gamma`, where `r` is the fraction of each
//! view-2 patch covered by the sampled view-1 patches in image space.

use crate::error::{Error, Result};
use crate::geometry::{overlap_ratio, PatchGrid, Rect};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub s1: f64,
    pub s2: f64,
    pub gamma: f64,
    /// Disjoint views drawn from each crop.
    pub n_views: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            s1: 0.25,
            s2: 0.25,
            gamma: 3.0,
            n_views: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio("s1", self.s1)?;
        check_ratio("s2", self.s2)?;
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::invalid("gamma", format!("{} must be >= 0", self.gamma)));
        }
        if self.n_views == 0 {
            return Err(Error::invalid("n_views", "must be at least 1"));
        }
        if self.n_views > 1 {
            let worst = self.s1.max(self.s2);
            if self.n_views as f64 * worst > 1.0 + 1e-12 {
                return Err(Error::invalid(
                    "n_views",
                    format!("{} views at ratio {worst} exceed the grid", self.n_views),
                ));
            }
        }
        Ok(())
    }
}

fn check_ratio(arg: &'static str, s: f64) -> Result<()> {
    if s > 0.0 && s <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(arg, format!("{s} not in (0, 1]")))
    }
}

/// Number of patches kept at ratio `s` on a grid of `n` patches (round half up).
pub fn sample_count(s: f64, n: usize) -> usize {
    ((s * n as f64 + 0.5).floor() as usize).min(n)
}

/// A sorted, duplicate-free set of patch indices on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchIndexSet {
    pub grid: PatchGrid,
    indices: Vec<usize>,
}

impl PatchIndexSet {
    pub fn new(grid: PatchGrid, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        let before = indices.len();
        indices.dedup();
        if indices.len() != before {
            return Err(Error::invalid("indices", "duplicate patch index"));
        }
        if let Some(&last) = indices.last() {
            if last >= grid.len() {
                return Err(Error::IndexOutOfRange {
                    index: last,
                    len: grid.len(),
                });
            }
        }
        Ok(Self { grid, indices })
    }

    /// Every patch of the grid, in grid order.
    pub fn full(grid: PatchGrid) -> Self {
        Self {
            indices: (0..grid.len()).collect(),
            grid,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Boolean mask over the whole grid.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.grid.len()];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }

    /// Image-space footprints of the sampled patches.
    pub fn rects(&self) -> Vec<Rect> {
        self.indices.iter().map(|&i| self.grid.patch_rect(i)).collect()
    }
}

/// Per-patch overlap ratios of a grid against another view's sampled patches.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapProfile {
    pub ratios: Vec<f64>,
}

impl OverlapProfile {
    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.ratios.is_empty() {
            return 0.0;
        }
        self.ratios.iter().sum::<f64>() / self.ratios.len() as f64
    }
}

/// Uniform sampling of `round(s1 · N)` patches without replacement.
pub fn sample_sparse<R: Rng + ?Sized>(
    grid: &PatchGrid,
    s1: f64,
    rng: &mut R,
) -> Result<PatchIndexSet> {
    check_ratio("s1", s1)?;
    if grid.is_empty() {
        return Err(Error::invalid("grid", "empty grid"));
    }
    let n = grid.len();
    let k = sample_count(s1, n);
    let idx = rand::seq::index::sample(rng, n, k).into_vec();
    PatchIndexSet::new(*grid, idx)
}

/// Overlap ratio of every `grid2` patch against the sampled patches of `view1`.
pub fn overlap_profile(view1: &PatchIndexSet, grid2: &PatchGrid) -> Result<OverlapProfile> {
    overlap_profile_union(std::slice::from_ref(view1), grid2)
}

/// Like [`overlap_profile`], against the union of several disjoint views drawn
/// from the same grid.
pub fn overlap_profile_union(
    views: &[PatchIndexSet],
    grid2: &PatchGrid,
) -> Result<OverlapProfile> {
    let Some(first) = views.first() else {
        return Err(Error::invalid("views", "at least one view required"));
    };
    let grid1 = first.grid;
    if views.iter().any(|v| v.grid != grid1) {
        return Err(Error::invalid("views", "views must share one grid"));
    }
    if !grid1.crop.same_source(&grid2.crop) {
        return Err(Error::SourceMismatch {
            a: grid1.crop.image_size,
            b: grid2.crop.image_size,
        });
    }
    let mut mask = vec![false; grid1.len()];
    for v in views {
        for &i in v.indices() {
            mask[i] = true;
        }
    }
    let mut scratch = Vec::new();
    let ratios = (0..grid2.len())
        .map(|j| {
            let patch = grid2.patch_rect(j);
            scratch.clear();
            scratch.extend(
                grid1
                    .candidates(&patch)
                    .filter(|&i| mask[i])
                    .map(|i| grid1.patch_rect(i)),
            );
            overlap_ratio(&scratch, &patch)
        })
        .collect();
    Ok(OverlapProfile { ratios })
}

/// Selective sampling kernel `(1 - r)^gamma`.
///
/// The normalizing prefactor `(gamma + 1) · s1` is a common factor and cancels
/// in normalized weighted draws; see [`crate::analyzer::selective_density`].
pub fn selective_weights(profile: &OverlapProfile, gamma: f64) -> Vec<f64> {
    profile
        .ratios
        .iter()
        .map(|&r| (1.0 - r.clamp(0.0, 1.0)).powf(gamma))
        .collect()
}

/// Weighted sampling of `round(s2 · N)` patches without replacement.
///
/// Realized as sequential draws, each proportional to the weights of the
/// patches not yet taken. If fewer patches have positive weight than are
/// required, the remainder is filled uniformly from the zero-weight patches
/// and a warning is logged.
pub fn sample_selective<R: Rng + ?Sized>(
    grid2: &PatchGrid,
    weights: &[f64],
    s2: f64,
    rng: &mut R,
) -> Result<PatchIndexSet> {
    check_ratio("s2", s2)?;
    if weights.len() != grid2.len() {
        return Err(Error::ShapeMismatch {
            context: "selective weights",
            expected: vec![grid2.len()],
            actual: vec![weights.len()],
        });
    }
    let k = sample_count(s2, grid2.len());
    let picked = weighted_draw(weights, k, &[], rng)?;
    PatchIndexSet::new(*grid2, picked)
}

/// Draws `k` distinct indices by sequential renormalized weighted draws,
/// never picking anything in `exclude`.
pub(crate) fn weighted_draw<R: Rng + ?Sized>(
    weights: &[f64],
    k: usize,
    exclude: &[usize],
    rng: &mut R,
) -> Result<Vec<usize>> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("weights", "weights must be finite and >= 0"));
    }
    let mut tree = SumTree::new(weights);
    let mut taken = vec![false; weights.len()];
    for &e in exclude {
        taken[e] = true;
        tree.set(e, 0.0);
    }
    let available = taken.iter().filter(|t| !**t).count();
    if k > available {
        return Err(Error::InsufficientPatches {
            needed: k,
            available,
        });
    }
    let mut positive = weights
        .iter()
        .zip(&taken)
        .filter(|(w, t)| **w > 0.0 && !**t)
        .count();
    let mut out = Vec::with_capacity(k);
    while out.len() < k && positive > 0 {
        let u = rng.gen::<f64>() * tree.total();
        let i = tree.find(u);
        debug_assert!(!taken[i]);
        taken[i] = true;
        tree.set(i, 0.0);
        positive -= 1;
        out.push(i);
    }
    if out.len() < k {
        let need = k - out.len();
        log::warn!(
            "selective sampling: only {} positive weights for {} draws; padding {} uniformly",
            out.len(),
            k,
            need
        );
        let mut pool: Vec<usize> = (0..weights.len()).filter(|&i| !taken[i]).collect();
        let (chosen, _) = pool.partial_shuffle(rng, need);
        out.extend_from_slice(chosen);
    }
    Ok(out)
}

/// `n_views` pairwise-disjoint uniform samples at ratio `s`.
pub fn sample_multi_view<R: Rng + ?Sized>(
    grid: &PatchGrid,
    s: f64,
    n_views: usize,
    rng: &mut R,
) -> Result<Vec<PatchIndexSet>> {
    check_ratio("s", s)?;
    if n_views == 0 {
        return Err(Error::invalid("n_views", "must be at least 1"));
    }
    let n = grid.len();
    let k = sample_count(s, n);
    if n_views * k > n {
        return Err(Error::InsufficientPatches {
            needed: n_views * k,
            available: n,
        });
    }
    let mut pool: Vec<usize> = (0..n).collect();
    let (chosen, _) = pool.partial_shuffle(rng, n_views * k);
    chosen
        .chunks(k.max(1))
        .take(n_views)
        .map(|c| PatchIndexSet::new(*grid, c.to_vec()))
        .collect()
}

/// Selective counterpart of [`sample_multi_view`] for the second crop.
///
/// View `k` of the second crop is weighted against the union of views
/// `0..=k` of the first crop and drawn from the patches not used by earlier
/// second-crop views, so the returned sets are pairwise disjoint.
pub fn sample_selective_multi_view<R: Rng + ?Sized>(
    first: &[PatchIndexSet],
    grid2: &PatchGrid,
    s2: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<Vec<PatchIndexSet>> {
    check_ratio("s2", s2)?;
    let n = grid2.len();
    let k = sample_count(s2, n);
    if first.len() * k > n {
        return Err(Error::InsufficientPatches {
            needed: first.len() * k,
            available: n,
        });
    }
    let mut used: Vec<usize> = Vec::new();
    let mut views = Vec::with_capacity(first.len());
    for upto in 1..=first.len() {
        let profile = overlap_profile_union(&first[..upto], grid2)?;
        let weights = selective_weights(&profile, gamma);
        let picked = weighted_draw(&weights, k, &used, rng)?;
        used.extend_from_slice(&picked);
        views.push(PatchIndexSet::new(*grid2, picked)?);
    }
    Ok(views)
}

/// One asymmetric positive pair of index sets plus the profile that drove it.
#[derive(Debug, Clone)]
pub struct AsymmetricPair {
    pub view1: PatchIndexSet,
    pub profile: OverlapProfile,
    pub view2: PatchIndexSet,
}

/// Sparse view 1, overlap profile, then selective view 2.
pub fn sample_pair<R: Rng + ?Sized>(
    grid1: &PatchGrid,
    grid2: &PatchGrid,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<AsymmetricPair> {
    let view1 = sample_sparse(grid1, config.s1, rng)?;
    let profile = overlap_profile(&view1, grid2)?;
    let weights = selective_weights(&profile, config.gamma);
    let view2 = sample_selective(grid2, &weights, config.s2, rng)?;
    Ok(AsymmetricPair {
        view1,
        profile,
        view2,
    })
}

/// Binary sum tree over non-negative weights.
///
/// Parents are recomputed from their children on every update, so a subtree
/// whose leaves are all zero sums to exactly zero.
struct SumTree {
    size: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(weights: &[f64]) -> Self {
        let size = weights.len().next_power_of_two().max(1);
        let mut nodes = vec![0.0; 2 * size];
        nodes[size..size + weights.len()].copy_from_slice(weights);
        for i in (1..size).rev() {
            nodes[i] = nodes[2 * i] + nodes[2 * i + 1];
        }
        Self { size, nodes }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn set(&mut self, index: usize, w: f64) {
        let mut i = index + self.size;
        self.nodes[i] = w;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// Leaf whose cumulative interval contains `u`; never a zero-weight leaf
    /// while the total is positive.
    fn find(&self, mut u: f64) -> usize {
        let mut i = 1;
        while i < self.size {
            let left = self.nodes[2 * i];
            let right = self.nodes[2 * i + 1];
            if (u < left && left > 0.0) || right <= 0.0 {
                i *= 2;
            } else {
                u -= left;
                i = 2 * i + 1;
            }
        }
        i - self.size
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CropBox, Rect};
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn full_grid(view: usize, patch: usize) -> PatchGrid {
        PatchGrid::new(CropBox::full(32.0, 32.0, view).unwrap(), patch).unwrap()
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(sample_count(0.25, 256), 64);
        assert_eq!(sample_count(0.5, 3), 2);
        assert_eq!(sample_count(0.25, 2), 1);
        assert_eq!(sample_count(1.0, 7), 7);
    }

    #[test]
    fn sparse_full_ratio_takes_everything() {
        let g = full_grid(32, 8);
        let s = sample_sparse(&g, 1.0, &mut seeded(1)).unwrap();
        assert_eq!(s.indices(), (0..16).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn sparse_quarter_of_16x16() {
        let g = full_grid(32, 2);
        let s = sample_sparse(&g, 0.25, &mut seeded(7)).unwrap();
        assert_eq!(s.len(), 64);
        assert!(s.indices().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sparse_is_deterministic() {
        let g = full_grid(32, 2);
        let a = sample_sparse(&g, 0.25, &mut seeded(3)).unwrap();
        let b = sample_sparse(&g, 0.25, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        assert!(sample_sparse(&g, 0.0, &mut seeded(3)).is_err());
    }

    #[test]
    fn profile_examples() {
        let g = full_grid(32, 16);
        let all = PatchIndexSet::full(g);
        assert_eq!(overlap_profile(&all, &g).unwrap().ratios, vec![1.0; 4]);
        let one = PatchIndexSet::new(g, vec![0]).unwrap();
        assert_eq!(
            overlap_profile(&one, &g).unwrap().ratios,
            vec![1.0, 0.0, 0.0, 0.0]
        );
        let left = CropBox::new(Rect::new(0., 0., 10., 10.).unwrap(), false, 32, (32., 32.)).unwrap();
        let right = CropBox::new(Rect::new(20., 20., 32., 32.).unwrap(), true, 32, (32., 32.)).unwrap();
        let g1 = PatchGrid::new(left, 8).unwrap();
        let g2 = PatchGrid::new(right, 8).unwrap();
        let p = overlap_profile(&PatchIndexSet::full(g1), &g2).unwrap();
        assert!(p.ratios.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn profile_rejects_other_image() {
        let g = full_grid(32, 16);
        let other = PatchGrid::new(CropBox::full(64.0, 64.0, 32).unwrap(), 16).unwrap();
        assert!(matches!(
            overlap_profile(&PatchIndexSet::full(g), &other),
            Err(Error::SourceMismatch { .. })
        ));
    }

    #[test]
    fn weight_examples() {
        let p = OverlapProfile {
            ratios: vec![0.0, 0.5, 1.0],
        };
        assert_eq!(selective_weights(&p, 0.0), vec![1.0, 1.0, 1.0]);
        assert_eq!(selective_weights(&p, 3.0), vec![1.0, 0.125, 0.0]);
    }

    #[test]
    fn exact_positive_count_is_deterministic() {
        let g = full_grid(32, 8);
        let mut w = vec![0.0; 16];
        for i in [1, 5, 9, 13] {
            w[i] = 0.3 + i as f64;
        }
        for seed in 0..20 {
            let s = sample_selective(&g, &w, 0.25, &mut seeded(seed)).unwrap();
            assert_eq!(s.indices(), &[1, 5, 9, 13]);
        }
    }

    #[test]
    fn degenerate_weights_are_padded() {
        let g = full_grid(32, 8);
        let mut w = vec![0.0; 16];
        w[3] = 1.0;
        let s = sample_selective(&g, &w, 0.25, &mut seeded(2)).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.contains(3));
        let zeros = vec![0.0; 16];
        assert_eq!(sample_selective(&g, &zeros, 0.5, &mut seeded(2)).unwrap().len(), 8);
    }

    #[test]
    fn two_patch_draw_matches_enumeration() {
        // Sequential draw of one patch from weights (1, 1/8): P(patch 0) = 1 / (1 + 1/8).
        let expected = 1.0 / (1.0 + 0.125);
        let g = PatchGrid::new(CropBox::full(2.0, 2.0, 2).unwrap(), 1).unwrap();
        // 2x2 grid; isolate two live patches by zero weights elsewhere and k = 1 via s2 = 0.25
        let w = [1.0, 0.125, 0.0, 0.0];
        let trials = 100_000;
        let mut rng = seeded(11);
        let hits = (0..trials)
            .filter(|_| sample_selective(&g, &w, 0.25, &mut rng).unwrap().contains(0))
            .count();
        let p = hits as f64 / trials as f64;
        let se = (expected * (1.0 - expected) / trials as f64).sqrt();
        assert!((p - expected).abs() < 4.0 * se, "p = {p}, expected {expected}");
    }

    #[test]
    fn multi_view_partitions_grid() {
        let g = full_grid(32, 2);
        let views = sample_multi_view(&g, 0.25, 4, &mut seeded(5)).unwrap();
        assert_eq!(views.len(), 4);
        let mut all: Vec<usize> = views.iter().flat_map(|v| v.indices().to_vec()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..256).collect::<Vec<_>>());
        assert!(sample_multi_view(&g, 0.25, 5, &mut seeded(5)).is_err());
    }

    #[test]
    fn selective_multi_view_is_disjoint() {
        let g1 = full_grid(32, 4);
        let crop2 = CropBox::new(Rect::new(4., 4., 28., 28.).unwrap(), true, 32, (32., 32.)).unwrap();
        let g2 = PatchGrid::new(crop2, 4).unwrap();
        let mut rng = seeded(9);
        let first = sample_multi_view(&g1, 0.25, 4, &mut rng).unwrap();
        let second = sample_selective_multi_view(&first, &g2, 0.25, 3.0, &mut rng).unwrap();
        assert_eq!(second.len(), 4);
        let mut all: Vec<usize> = second.iter().flat_map(|v| v.indices().to_vec()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        let bad = SamplerConfig { n_views: 5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig { gamma: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn selective_cardinality_and_uniqueness(
            w in prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], 16),
            s in prop::sample::select(vec![0.125, 0.25, 0.5, 1.0]),
            seed in any::<u64>(),
        ) {
            let g = full_grid(32, 8);
            let a = sample_selective(&g, &w, s, &mut seeded(seed)).unwrap();
            prop_assert_eq!(a.len(), sample_count(s, 16));
            let b = sample_selective(&g, &w, s, &mut seeded(seed)).unwrap();
            prop_assert_eq!(a.clone(), b);
            let positive = w.iter().filter(|x| **x > 0.0).count();
            if positive >= a.len() {
                prop_assert!(a.indices().iter().all(|&i| w[i] > 0.0));
            }
        }
    }
}
