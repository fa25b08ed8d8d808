use super::Volume;
use crate::error::{Error, Result};

pub const DEFAULT_HISTOGRAM_LEVELS: usize = 256;

/// Monotone piecewise-linear intensity map that sends the quantiles of a
/// source sample onto the quantiles of a reference sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramMapping {
    src_q: Vec<f64>,
    ref_q: Vec<f64>,
}

/// `levels + 1` evenly spaced quantiles (linear interpolation between order
/// statistics).
fn quantiles(values: &[f64], levels: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = (sorted.len() - 1) as f64;
    (0..=levels)
        .map(|l| {
            let pos = last * l as f64 / levels as f64;
            let lo = pos.floor() as usize;
            let t = pos - lo as f64;
            if t == 0.0 || lo + 1 >= sorted.len() {
                sorted[lo]
            } else {
                sorted[lo] + t * (sorted[lo + 1] - sorted[lo])
            }
        })
        .collect()
}

fn is_constant(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

impl HistogramMapping {
    /// Fits the map from source samples to reference samples.
    pub fn fit(src: &[f64], reference: &[f64], levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidInput("histogram matching needs at least one level".into()));
        }
        if src.is_empty() || reference.is_empty() || is_constant(src) || is_constant(reference) {
            return Err(Error::Degenerate("histogram matching of a constant image".into()));
        }
        Ok(Self { src_q: quantiles(src, levels), ref_q: quantiles(reference, levels) })
    }

    #[inline]
    pub fn map_value(&self, v: f64) -> f64 {
        let q = &self.src_q;
        let n = q.len();
        if v <= q[0] {
            return self.ref_q[0];
        }
        if v >= q[n - 1] {
            return self.ref_q[n - 1];
        }
        // last knot with q[k] <= v; q[k + 1] > v so the segment is non-degenerate
        let k = q.partition_point(|&x| x <= v) - 1;
        let t = (v - q[k]) / (q[k + 1] - q[k]);
        self.ref_q[k] + t * (self.ref_q[k + 1] - self.ref_q[k])
    }

    pub fn apply(&self, vol: &Volume) -> Result<Volume> {
        vol.map(|v| self.map_value(v))
    }
}

/// Remaps `src` so its intensity distribution follows `reference`.
pub fn histogram_match(src: &Volume, reference: &Volume, levels: usize) -> Result<Volume> {
    HistogramMapping::fit(src.data(), reference.data(), levels)?.apply(src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64, n: usize) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry::unit([n, 1, 1]);
        Volume::new(g, (0..n).map(|_| rng.random_range(10.0..200.0)).collect()).unwrap()
    }

    #[test]
    fn self_match_within_one_step() {
        let v = random_volume(3, 500);
        let (lo, hi) = v.range();
        let step = (hi - lo) / DEFAULT_HISTOGRAM_LEVELS as f64;
        let out = histogram_match(&v, &v, DEFAULT_HISTOGRAM_LEVELS).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() <= step);
        }
    }

    #[test]
    fn offset_is_removed() {
        let r = random_volume(4, 400);
        let src = r.map(|v| v + 100.0).unwrap();
        let out = histogram_match(&src, &r, 64).unwrap();
        let (lo, hi) = r.range();
        let step = (hi - lo) / 64.0;
        for (a, b) in out.data().iter().zip(r.data()) {
            assert!((a - b).abs() <= step);
        }
    }

    #[test]
    fn scaling_removed_on_32_voxels() {
        // quantile-map oracle: with ref values 0..31 and 31 levels every knot
        // is an order statistic, so 2*ref maps back exactly.
        let g = Geometry::unit([32, 1, 1]);
        let r = Volume::from_fn(g, |c| ((c[0] * 7) % 32) as f64).unwrap();
        let src = r.map(|v| 2.0 * v).unwrap();
        let out = histogram_match(&src, &r, 31).unwrap();
        for (a, b) in out.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let out256 = histogram_match(&src, &r, 256).unwrap();
        for (a, b) in out256.data().iter().zip(r.data()) {
            assert!((a - b).abs() <= 31.0 / 256.0);
        }
    }

    #[test]
    fn output_inside_reference_range_and_monotone() {
        let src = random_volume(5, 300);
        let r = random_volume(6, 200).map(|v| v * 0.1 - 3.0).unwrap();
        let out = histogram_match(&src, &r, 256).unwrap();
        let (lo, hi) = r.range();
        assert!(out.data().iter().all(|&v| v >= lo && v <= hi));
        let mut pairs: Vec<(f64, f64)> = src.data().iter().copied().zip(out.data().iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn constant_inputs_rejected() {
        let g = Geometry::unit([4, 1, 1]);
        let c = Volume::filled(g, 2.0);
        let v = Volume::from_fn(g, |c| c[0] as f64).unwrap();
        assert!(histogram_match(&c, &v, 8).is_err());
        assert!(histogram_match(&v, &c, 8).is_err());
    }
}
