//! Global and semi-global image similarity, and atlas ranking.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

/// Joint-histogram size used for mutual information.
pub const DEFAULT_MI_BINS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMetric {
    /// Larger is more similar.
    MutualInformation,
    /// Sum of squared differences; smaller is more similar.
    Ssd,
}

impl std::str::FromStr for SimilarityMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mi" => Ok(Self::MutualInformation),
            "ssd" => Ok(Self::Ssd),
            other => Err(Error::Config(format!("unknown metric '{other}' (expected mi or ssd)"))),
        }
    }
}

fn masked_pairs<'a>(
    a: &'a Volume,
    b: &'a Volume,
    mask: Option<&'a LabelMap>,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    a.geometry().ensure_same(b.geometry(), "similarity inputs")?;
    if let Some(m) = mask {
        a.geometry().ensure_same(m.geometry(), "similarity mask")?;
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m.data()[*i]))
        .map(|(_, (&x, &y))| (x, y)))
}

/// Bin index of `v` under min–max binning; the max edge falls in the last bin.
#[inline]
fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

fn joint_histogram(pairs: &[(f64, f64)], bins: usize) -> Option<Vec<u64>> {
    let range = |sel: fn(&(f64, f64)) -> f64| {
        pairs.iter().map(sel).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)))
    };
    let (alo, ahi) = range(|p| p.0);
    let (blo, bhi) = range(|p| p.1);
    if alo == ahi || blo == bhi {
        return None;
    }
    let mut hist = vec![0u64; bins * bins];
    for &(x, y) in pairs {
        hist[bin_of(x, alo, ahi, bins) * bins + bin_of(y, blo, bhi, bins)] += 1;
    }
    Some(hist)
}

/// Mutual information (nats) from a `bins`×`bins` joint histogram over the
/// masked voxels. Returns 0 when either image is constant under the mask.
pub fn mutual_information(a: &Volume, b: &Volume, mask: Option<&LabelMap>, bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidInput("mutual information needs at least one bin".into()));
    }
    let pairs: Vec<(f64, f64)> = masked_pairs(a, b, mask)?.collect();
    if pairs.len() < bins {
        return Err(Error::InvalidInput(format!(
            "mutual information over {} voxels needs at least {bins}",
            pairs.len()
        )));
    }
    let Some(hist) = joint_histogram(&pairs, bins) else {
        return Ok(0.0);
    };
    let n = pairs.len() as f64;
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for i in 0..bins {
        for j in 0..bins {
            let p = hist[i * bins + j] as f64 / n;
            pa[i] += p;
            pb[j] += p;
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = hist[i * bins + j];
            if c > 0 {
                let p = c as f64 / n;
                mi += p * (p.ln() - pa[i].ln() - pb[j].ln());
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Shannon entropy (nats) of the min–max binned intensities under the mask.
pub fn binned_entropy(a: &Volume, mask: Option<&LabelMap>, bins: usize) -> Result<f64> {
    let vals: Vec<f64> = masked_pairs(a, a, mask)?.map(|p| p.0).collect();
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if vals.is_empty() || lo == hi {
        return Ok(0.0);
    }
    let mut hist = vec![0u64; bins];
    for &v in &vals {
        hist[bin_of(v, lo, hi, bins)] += 1;
    }
    let n = vals.len() as f64;
    Ok(hist.iter().filter(|&&c| c > 0).map(|&c| -(c as f64 / n) * (c as f64 / n).ln()).sum())
}

/// Sum of squared differences over the masked voxels.
pub fn ssd(a: &Volume, b: &Volume, mask: Option<&LabelMap>) -> Result<f64> {
    Ok(masked_pairs(a, b, mask)?.map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Per-atlas weight for the weighted-voting prior: mutual information
/// between target and warped atlas over the union of transferred labels.
pub fn semi_global_weight(target: &Volume, warped_atlas: &Volume, mask: &LabelMap) -> Result<f64> {
    mutual_information(target, warped_atlas, Some(mask), DEFAULT_MI_BINS)
}

/// Atlases ordered best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedAtlasList<Id> {
    pub metric: SimilarityMetric,
    pub entries: Vec<(Id, f64)>,
}

impl<Id: Clone> RankedAtlasList<Id> {
    pub fn ids(&self) -> Vec<Id> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn top(&self, n: usize) -> Vec<Id> {
        self.entries.iter().take(n).map(|(id, _)| id.clone()).collect()
    }
}

/// Scores every atlas against `target` and sorts best first, breaking ties
/// by ascending id.
pub fn rank_atlases<Id: Ord + Clone>(
    target: &Volume,
    atlases: &[(Id, &Volume)],
    metric: SimilarityMetric,
    mask: Option<&LabelMap>,
) -> Result<RankedAtlasList<Id>> {
    let mut ids: Vec<&Id> = atlases.iter().map(|(id, _)| id).collect();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("duplicate atlas id".into()));
    }
    let mut entries = atlases
        .iter()
        .map(|(id, vol)| {
            let score = match metric {
                SimilarityMetric::MutualInformation => {
                    mutual_information(target, vol, mask, DEFAULT_MI_BINS)?
                }
                SimilarityMetric::Ssd => ssd(target, vol, mask)?,
            };
            Ok((id.clone(), score))
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| {
        let by_score = match metric {
            SimilarityMetric::MutualInformation => b.1.total_cmp(&a.1),
            SimilarityMetric::Ssd => a.1.total_cmp(&b.1),
        };
        match by_score {
            Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        }
    });
    Ok(RankedAtlasList { metric, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn uniform(seed: u64, dims: [usize; 3]) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry::unit(dims);
        Volume::new(g, (0..g.len()).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Plug-in MI computed straight from the definition with a hash of bin pairs.
    fn mi_oracle(a: &[f64], b: &[f64], bins: usize) -> f64 {
        let bin = |v: &[f64], x: f64| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (((x - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1)
        };
        let n = a.len() as f64;
        let mut joint = std::collections::BTreeMap::new();
        let mut ma = vec![0.0; bins];
        let mut mb = vec![0.0; bins];
        for (&x, &y) in a.iter().zip(b) {
            let (i, j) = (bin(a, x), bin(b, y));
            *joint.entry((i, j)).or_insert(0.0) += 1.0 / n;
            ma[i] += 1.0 / n;
            mb[j] += 1.0 / n;
        }
        joint.iter().map(|(&(i, j), &p)| p * (p / (ma[i] * mb[j])).ln()).sum()
    }

    #[test]
    fn mi_of_identical_is_entropy() {
        let v = uniform(1, [10, 10, 10]);
        let mi = mutual_information(&v, &v, None, 32).unwrap();
        let h = binned_entropy(&v, None, 32).unwrap();
        assert!(h > 0.0);
        assert!((mi - h).abs() < 1e-12);
    }

    #[test]
    fn mi_with_constant_is_zero() {
        let v = uniform(2, [8, 8, 8]);
        let c = Volume::filled(*v.geometry(), 3.0);
        assert_eq!(mutual_information(&v, &c, None, 32).unwrap(), 0.0);
        assert_eq!(semi_global_weight(&v, &c, &LabelMap::from_fn(*v.geometry(), |_| true)).unwrap(), 0.0);
    }

    #[test]
    fn independent_uniform_volumes_have_small_mi() {
        let a = uniform(10, [32, 32, 32]);
        let b = uniform(11, [32, 32, 32]);
        let mi = mutual_information(&a, &b, None, 32).unwrap();
        let oracle = mi_oracle(a.data(), b.data(), 32);
        assert!((mi - oracle).abs() < 1e-10);
        assert!(mi < 0.05, "mi = {mi}");
    }

    #[test]
    fn mi_is_symmetric_and_non_negative() {
        for seed in 0..5 {
            let a = uniform(100 + seed, [9, 7, 5]);
            let b = a.map(|v| (v * 7.0).sin() + 0.1 * v).unwrap();
            let ab = mutual_information(&a, &b, None, 16).unwrap();
            let ba = mutual_information(&b, &a, None, 16).unwrap();
            assert!(ab >= 0.0);
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_masked_voxels_rejected() {
        let a = uniform(3, [4, 4, 1]);
        assert!(mutual_information(&a, &a, None, 32).is_err());
    }

    #[test]
    fn ssd_examples() {
        let g = Geometry::unit([3, 1, 1]);
        let a = Volume::new(g, vec![1.0, 2.0, 3.0]).unwrap();
        let b = Volume::new(g, vec![1.0, 5.0, 100.0]).unwrap();
        let mask = LabelMap::new(g, vec![false, true, false]).unwrap();
        assert_eq!(ssd(&a, &a, None).unwrap(), 0.0);
        assert_eq!(ssd(&a, &b, Some(&mask)).unwrap(), 9.0);
        let r1 = uniform(7, [6, 5, 4]);
        let r2 = uniform(8, [6, 5, 4]);
        let oracle: f64 = r1.data().iter().zip(r2.data()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!((ssd(&r1, &r2, None).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn exact_copy_ranks_first() {
        let t = uniform(20, [12, 12, 12]);
        let others: Vec<Volume> = (0..3).map(|s| uniform(30 + s, [12, 12, 12])).collect();
        let list: Vec<(usize, &Volume)> =
            vec![(0, &others[0]), (1, &others[1]), (2, &t), (3, &others[2])];
        for metric in [SimilarityMetric::MutualInformation, SimilarityMetric::Ssd] {
            let ranked = rank_atlases(&t, &list, metric, None).unwrap();
            assert_eq!(ranked.entries[0].0, 2);
            let mut ids = ranked.ids();
            ids.sort();
            assert_eq!(ids, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn mi_ranks_low_noise_copy_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let g = Geometry::unit([16, 16, 16]);
        let t = Volume::from_fn(g, |c| 50.0 + 40.0 * ((c[0] as f64) / 3.0).sin() + 2.0 * c[2] as f64).unwrap();
        let noisy = |sigma: f64, rng: &mut ChaCha8Rng| {
            let n = Normal::new(0.0, sigma).unwrap();
            Volume::new(g, t.data().iter().map(|v| v + n.sample(rng)).collect()).unwrap()
        };
        let low = noisy(1.0, &mut rng);
        let high = noisy(10.0, &mut rng);
        let ranked =
            rank_atlases(&t, &[("b", &high), ("a", &low)], SimilarityMetric::MutualInformation, None).unwrap();
        assert_eq!(ranked.ids(), vec!["a", "b"]);
    }

    #[test]
    fn ssd_ranking_ignores_mask_exterior() {
        let g = Geometry::unit([4, 1, 1]);
        let t = Volume::new(g, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let a = Volume::new(g, vec![1.0, 1.0, 1000.0, 1000.0]).unwrap();
        let b = Volume::new(g, vec![2.0, 2.0, 0.0, 0.0]).unwrap();
        let mask = LabelMap::new(g, vec![true, true, false, false]).unwrap();
        let ranked = rank_atlases(&t, &[(0, &a), (1, &b)], SimilarityMetric::Ssd, Some(&mask)).unwrap();
        assert_eq!(ranked.ids(), vec![0, 1]);
    }

    #[test]
    fn ranking_stable_under_reordering_and_ties() {
        let t = uniform(50, [8, 8, 8]);
        let a = uniform(51, [8, 8, 8]);
        let b = a.clone();
        let fwd = rank_atlases(&t, &[(5, &a), (2, &b)], SimilarityMetric::Ssd, None).unwrap();
        let rev = rank_atlases(&t, &[(2, &b), (5, &a)], SimilarityMetric::Ssd, None).unwrap();
        assert_eq!(fwd, rev);
        assert_eq!(fwd.ids(), vec![2, 5]);
        assert!(rank_atlases(&t, &[(1, &a), (1, &b)], SimilarityMetric::Ssd, None).is_err());
    }

    #[test]
    fn half_shuffled_copy_weighs_less() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Geometry::unit([16, 16, 8]);
        let t = Volume::from_fn(g, |c| ((c[0] * 7 + c[1] * 3 + c[2]) % 23) as f64).unwrap();
        let mut shuffled = t.data().to_vec();
        let half = shuffled.len() / 2;
        for i in (1..half).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        let s = Volume::new(g, shuffled).unwrap();
        let mask = LabelMap::from_fn(g, |_| true);
        let intact = semi_global_weight(&t, &t, &mask).unwrap();
        let broken = semi_global_weight(&t, &s, &mask).unwrap();
        assert!(broken < intact);
    }
}
