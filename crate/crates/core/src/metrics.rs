//! Benchmark metrics for depth (meters) and normals (degrees), with an
//! accumulator for exact pooling across samples.
//!
//! Everything here runs in f64 on host buffers, independent of the autodiff
//! engine, so it doubles as an oracle for the training losses. Means pool by
//! valid-pixel count; the median pools exactly by keeping every angle.

use crate::tensor::Scalar;
use crate::{Error, Result};

/// Predicted depth is clamped to at least this many meters before ratios and
/// logs, so a degenerate prediction yields a large finite error, not NaN.
pub const DEPTH_FLOOR_M: f64 = 1e-4;

/// Thresholds for the depth accuracy fractions: ratio < 1.25^(k+1).
pub const DEPTH_DELTA_BASE: f64 = 1.25;

/// Thresholds (degrees) for the normal accuracy fractions.
pub const NORMAL_DELTA_DEG: [f64; 5] = [5.0, 7.5, 11.25, 22.5, 30.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    /// Mean absolute error, meters.
    pub mae: f64,
    /// Mean |error| / truth, unitless.
    pub are: f64,
    /// Root mean squared error, meters.
    pub rmse: f64,
    /// Root mean squared log10 error.
    pub rmse_log: f64,
    /// Percent of pixels with max(pred/gt, gt/pred) under 1.25, 1.25^2, 1.25^3.
    pub delta: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalMetrics {
    /// Mean angular error, degrees.
    pub mean_deg: f64,
    /// Median angular error, degrees; for an even count this is the lower of
    /// the two middle order statistics.
    pub median_deg: f64,
    /// Mean squared angular error, degrees squared.
    pub mse_deg2: f64,
    /// Percent of pixels under 5, 7.5, 11.25, 22.5 and 30 degrees.
    pub delta: [f64; 5],
}

/// One evaluation summary. A half is absent when no pixels fed it (task
/// ablations evaluate a single branch).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub depth: Option<DepthMetrics>,
    pub normal: Option<NormalMetrics>,
    /// Valid pixels behind the report. Both halves see the same masks in the
    /// evaluation pipeline; with one half active this counts that half.
    pub valid: u64,
}

#[derive(Debug, Clone, Default)]
struct DepthAcc {
    m: u64,
    sum_abs: f64,
    sum_rel: f64,
    sum_sq: f64,
    sum_sq_log: f64,
    hits: [u64; 3],
}

#[derive(Debug, Clone, Default)]
struct NormalAcc {
    m: u64,
    sum_deg: f64,
    sum_sq_deg: f64,
    hits: [u64; 5],
    /// Every pooled angle, kept so the merged median is exact.
    angles: Vec<f64>,
}

/// Streams samples in and reports pooled metrics. Pooling sums the same
/// per-pixel quantities a single pass would, so accumulating chunks in order
/// reproduces the one-shot result bit for bit.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    depth: DepthAcc,
    normal: NormalAcc,
}

fn angle_deg(pred: [f64; 3], gt: [f64; 3]) -> f64 {
    let renorm = |v: [f64; 3]| -> [f64; 3] {
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
        [v[0] / len, v[1] / len, v[2] / len]
    };
    let a = renorm(pred);
    let b = renorm(gt);
    let dot: f64 = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one depth map in meters: `pred` and `gt` are `[n]` row-major.
    /// Ground truth must be positive on valid pixels.
    pub fn add_depth<S: Scalar>(&mut self, pred: &[S], gt: &[S], mask: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || pred.len() != mask.len() {
            return Err(Error::invalid("depth metric buffers differ in length"));
        }
        for i in 0..pred.len() {
            if !mask[i] {
                continue;
            }
            let g = gt[i].into_f64();
            if !(g > 0.0) {
                return Err(Error::invalid(format!("ground-truth depth {g} at valid pixel {i}")));
            }
            let p = pred[i].into_f64().max(DEPTH_FLOOR_M);
            let d = p - g;
            self.depth.m += 1;
            self.depth.sum_abs += d.abs();
            self.depth.sum_rel += d.abs() / g;
            self.depth.sum_sq += d * d;
            let dl = p.log10() - g.log10();
            self.depth.sum_sq_log += dl * dl;
            let ratio = (p / g).max(g / p);
            let mut bound = DEPTH_DELTA_BASE;
            for k in 0..3 {
                if ratio < bound {
                    self.depth.hits[k] += 1;
                }
                bound *= DEPTH_DELTA_BASE;
            }
        }
        Ok(())
    }

    /// Add one normal map: `pred` and `gt` are `[3*n]` channel-major. Both
    /// sides are rescaled to unit length before the angle.
    pub fn add_normal<S: Scalar>(&mut self, pred: &[S], gt: &[S], mask: &[bool]) -> Result<()> {
        let n = mask.len();
        if pred.len() != 3 * n || gt.len() != 3 * n {
            return Err(Error::invalid("normal metric buffers differ in length"));
        }
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let p = [
                pred[i].into_f64(),
                pred[n + i].into_f64(),
                pred[2 * n + i].into_f64(),
            ];
            let g = [gt[i].into_f64(), gt[n + i].into_f64(), gt[2 * n + i].into_f64()];
            let deg = angle_deg(p, g);
            self.normal.m += 1;
            self.normal.sum_deg += deg;
            self.normal.sum_sq_deg += deg * deg;
            for (k, t) in NORMAL_DELTA_DEG.iter().enumerate() {
                if deg < *t {
                    self.normal.hits[k] += 1;
                }
            }
            self.normal.angles.push(deg);
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let depth = (self.depth.m > 0).then(|| {
            let m = self.depth.m as f64;
            DepthMetrics {
                mae: self.depth.sum_abs / m,
                are: self.depth.sum_rel / m,
                rmse: (self.depth.sum_sq / m).sqrt(),
                rmse_log: (self.depth.sum_sq_log / m).sqrt(),
                delta: self.depth.hits.map(|h| 100.0 * h as f64 / m),
            }
        });
        let normal = (self.normal.m > 0).then(|| {
            let m = self.normal.m as f64;
            let mut sorted = self.normal.angles.clone();
            sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("angles are finite"));
            NormalMetrics {
                mean_deg: self.normal.sum_deg / m,
                median_deg: sorted[(sorted.len() - 1) / 2],
                mse_deg2: self.normal.sum_sq_deg / m,
                delta: self.normal.hits.map(|h| 100.0 * h as f64 / m),
            }
        });
        MetricsReport {
            depth,
            normal,
            valid: self.depth.m.max(self.normal.m),
        }
    }
}

/// Depth half of the suite for a single map.
pub fn depth_metrics<S: Scalar>(pred: &[S], gt: &[S], mask: &[bool]) -> Result<DepthMetrics> {
    let mut acc = MetricsAccumulator::new();
    acc.add_depth(pred, gt, mask)?;
    acc.report().depth.ok_or_else(|| Error::invalid("depth metrics: no valid pixels"))
}

/// Normal half of the suite for a single map.
pub fn normal_metrics<S: Scalar>(pred: &[S], gt: &[S], mask: &[bool]) -> Result<NormalMetrics> {
    let mut acc = MetricsAccumulator::new();
    acc.add_normal(pred, gt, mask)?;
    acc.report().normal.ok_or_else(|| Error::invalid("normal metrics: no valid pixels"))
}

impl MetricsReport {
    fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = Vec::new();
        if let Some(d) = &self.depth {
            rows.push(("depth.mae_m".to_string(), d.mae));
            rows.push(("depth.abs_rel".to_string(), d.are));
            rows.push(("depth.rmse_m".to_string(), d.rmse));
            rows.push(("depth.rmse_log10".to_string(), d.rmse_log));
            for (k, v) in d.delta.iter().enumerate() {
                rows.push((format!("depth.delta{}_pct", k + 1), *v));
            }
        }
        if let Some(n) = &self.normal {
            rows.push(("normal.mean_deg".to_string(), n.mean_deg));
            rows.push(("normal.median_deg".to_string(), n.median_deg));
            rows.push(("normal.mse_deg2".to_string(), n.mse_deg2));
            for (k, v) in n.delta.iter().enumerate() {
                rows.push((format!("normal.delta{}_pct", k + 1), *v));
            }
        }
        rows.push(("valid_px".to_string(), self.valid as f64));
        rows
    }

    /// One `key = value` line per metric.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.rows() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// A flat JSON object with the same keys as the text form.
    pub fn to_json(&self) -> String {
        let rows = self.rows();
        let mut out = String::from("{");
        for (i, (k, v)) in rows.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("\"{k}\":{v}"));
        }
        out.push('}');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_depth(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let mut r = rng(seed);
        let gt: Vec<f64> = (0..n).map(|_| r.gen_range(0.3..9.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * r.gen_range(0.6..1.6)).collect();
        let mask: Vec<bool> = (0..n).map(|_| r.gen_range(0..4) != 0).collect();
        (pred, gt, mask)
    }

    fn random_normals(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let mut r = rng(seed);
        let unit = |r: &mut ChaCha8Rng| -> [f64; 3] {
            loop {
                let v: [f64; 3] = [
                    r.gen_range(-1.0..1.0),
                    r.gen_range(-1.0..1.0),
                    r.gen_range(-1.0..1.0),
                ];
                let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if l > 0.2 {
                    return [v[0] / l, v[1] / l, v[2] / l];
                }
            }
        };
        let mut pred = vec![0.0; 3 * n];
        let mut gt = vec![0.0; 3 * n];
        for i in 0..n {
            let a = unit(&mut r);
            let b = unit(&mut r);
            for c in 0..3 {
                pred[c * n + i] = a[c];
                gt[c * n + i] = b[c];
            }
        }
        let mask: Vec<bool> = (0..n).map(|_| r.gen_range(0..5) != 0).collect();
        (pred, gt, mask)
    }

    #[test]
    fn perfect_depth_scores_zero_errors_full_accuracy() {
        let gt = vec![1.0, 2.5, 7.0, 0.4];
        let m = depth_metrics(&gt, &gt, &[true; 4]).unwrap();
        assert_eq!((m.mae, m.are, m.rmse, m.rmse_log), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(m.delta, [100.0; 3]);
    }

    #[test]
    fn closed_form_ratios_hit_the_documented_values() {
        let gt: Vec<f64> = vec![0.5, 1.0, 2.0, 4.0, 8.0];
        let double: Vec<f64> = gt.iter().map(|g| 2.0 * g).collect();
        let m = depth_metrics(&double, &gt, &[true; 5]).unwrap();
        assert!((m.are - 1.0).abs() < 1e-12);
        // Ratio 2 misses even the loosest bound, 1.25^3 = 1.953125.
        assert_eq!(m.delta, [0.0; 3]);
        let mae_want: f64 = gt.iter().sum::<f64>() / 5.0;
        assert!((m.mae - mae_want).abs() < 1e-12);

        let close: Vec<f64> = gt.iter().map(|g| 1.2 * g).collect();
        let m = depth_metrics(&close, &gt, &[true; 5]).unwrap();
        assert_eq!(m.delta, [100.0; 3]);
        assert!((m.rmse_log - 1.2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_predictions_clamp_to_the_floor() {
        let gt = vec![1.0];
        let m = depth_metrics(&[0.0], &gt, &[true]).unwrap();
        // Clamped to 1e-4 m: log ratio is exactly 4 decades.
        assert!((m.rmse_log - 4.0).abs() < 1e-12);
        assert_eq!(m.delta, [0.0; 3]);
        assert!((m.mae - (1.0 - DEPTH_FLOOR_M)).abs() < 1e-12);
        // Non-positive ground truth on a valid pixel is a caller bug.
        assert!(depth_metrics(&[1.0], &[0.0], &[true]).is_err());
        assert!(depth_metrics::<f64>(&[], &[], &[]).is_err());
    }

    #[test]
    fn depth_metrics_match_a_naive_loop() {
        let (pred, gt, mask) = random_depth(5, 512);
        let m = depth_metrics(&pred, &gt, &mask).unwrap();
        let px: Vec<usize> = (0..512).filter(|&i| mask[i]).collect();
        let cnt = px.len() as f64;
        let mae: f64 = px.iter().map(|&i| (pred[i] - gt[i]).abs()).sum::<f64>() / cnt;
        let are: f64 =
            px.iter().map(|&i| (pred[i] - gt[i]).abs() / gt[i]).sum::<f64>() / cnt;
        let rmse =
            (px.iter().map(|&i| (pred[i] - gt[i]).powi(2)).sum::<f64>() / cnt).sqrt();
        let rmse_log = (px
            .iter()
            .map(|&i| (pred[i].log10() - gt[i].log10()).powi(2))
            .sum::<f64>()
            / cnt)
            .sqrt();
        assert!((m.mae - mae).abs() < 1e-12);
        assert!((m.are - are).abs() < 1e-12);
        assert!((m.rmse - rmse).abs() < 1e-12);
        assert!((m.rmse_log - rmse_log).abs() < 1e-12);
        for k in 0..3 {
            let bound = DEPTH_DELTA_BASE.powi(k as i32 + 1);
            let hits = px
                .iter()
                .filter(|&&i| (pred[i] / gt[i]).max(gt[i] / pred[i]) < bound)
                .count() as f64;
            assert!((m.delta[k] - 100.0 * hits / cnt).abs() < 1e-12);
        }
    }

    #[test]
    fn ten_degree_tilt_scores_exactly_ten() {
        let n = 6;
        let mut gt = vec![0.0; 3 * n];
        let mut pred = vec![0.0; 3 * n];
        let t = 10f64.to_radians();
        for i in 0..n {
            gt[2 * n + i] = 1.0;
            pred[i] = t.sin();
            pred[2 * n + i] = t.cos();
        }
        let m = normal_metrics(&pred, &gt, &vec![true; n]).unwrap();
        assert!((m.mean_deg - 10.0).abs() < 1e-9);
        assert!((m.median_deg - 10.0).abs() < 1e-9);
        assert!((m.mse_deg2 - 100.0).abs() < 1e-8);
        assert_eq!(m.delta, [0.0, 0.0, 100.0, 100.0, 100.0]);

        let exact = normal_metrics(&gt, &gt, &vec![true; n]).unwrap();
        assert_eq!((exact.mean_deg, exact.median_deg, exact.mse_deg2), (0.0, 0.0, 0.0));
        assert_eq!(exact.delta, [100.0; 5]);
    }

    #[test]
    fn median_takes_the_lower_middle_for_even_counts() {
        // Two pixels at 0 and 10 degrees: the lower middle is 0.
        let n = 2;
        let mut gt = vec![0.0; 3 * n];
        let mut pred = vec![0.0; 3 * n];
        let t = 10f64.to_radians();
        gt[2 * n] = 1.0;
        gt[2 * n + 1] = 1.0;
        pred[2 * n] = 1.0;
        pred[1] = t.sin();
        pred[2 * n + 1] = t.cos();
        let m = normal_metrics(&pred, &gt, &[true, true]).unwrap();
        assert!(m.median_deg.abs() < 1e-9);
        assert!((m.mean_deg - 5.0).abs() < 1e-9);
    }

    #[test]
    fn normal_metrics_match_a_naive_loop() {
        let n = 512;
        let (pred, gt, mask) = random_normals(8, n);
        let m = normal_metrics(&pred, &gt, &mask).unwrap();
        let mut angles = Vec::new();
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let dot: f64 = (0..3).map(|c| pred[c * n + i] * gt[c * n + i]).sum();
            angles.push(dot.clamp(-1.0, 1.0).acos().to_degrees());
        }
        let cnt = angles.len() as f64;
        let mean = angles.iter().sum::<f64>() / cnt;
        let mse = angles.iter().map(|a| a * a).sum::<f64>() / cnt;
        let mut sorted = angles.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[(sorted.len() - 1) / 2];
        assert!((m.mean_deg - mean).abs() < 1e-9);
        assert!((m.mse_deg2 - mse).abs() < 1e-9);
        assert_eq!(m.median_deg, median);
        for (k, t) in NORMAL_DELTA_DEG.iter().enumerate() {
            let hits = angles.iter().filter(|a| **a < *t).count() as f64;
            assert!((m.delta[k] - 100.0 * hits / cnt).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_fractions_are_monotone_in_the_threshold() {
        for seed in 0..20 {
            let (pred, gt, mask) = random_depth(seed, 128);
            if mask.iter().all(|m| !m) {
                continue;
            }
            let m = depth_metrics(&pred, &gt, &mask).unwrap();
            assert!(m.delta[0] <= m.delta[1] && m.delta[1] <= m.delta[2]);
            assert!(m.mae >= 0.0 && m.are >= 0.0 && m.rmse >= 0.0 && m.rmse_log >= 0.0);
            let (pred, gt, mask) = random_normals(seed + 100, 128);
            let m = normal_metrics(&pred, &gt, &mask).unwrap();
            for k in 1..5 {
                assert!(m.delta[k - 1] <= m.delta[k]);
            }
            assert!(m.mean_deg >= 0.0 && m.median_deg >= 0.0 && m.mse_deg2 >= 0.0);
        }
    }

    #[test]
    fn invalid_pixels_cannot_move_any_metric() {
        let (mut pred, gt, mask) = random_depth(9, 256);
        let before = depth_metrics(&pred, &gt, &mask).unwrap();
        for i in 0..256 {
            if !mask[i] {
                pred[i] = -1e9;
            }
        }
        assert_eq!(before, depth_metrics(&pred, &gt, &mask).unwrap());

        let (mut pred, gt, mask) = random_normals(10, 256);
        let before = normal_metrics(&pred, &gt, &mask).unwrap();
        for i in 0..256 {
            if !mask[i] {
                for c in 0..3 {
                    pred[c * 256 + i] = 42.0;
                }
            }
        }
        assert_eq!(before, normal_metrics(&pred, &gt, &mask).unwrap());
    }

    #[test]
    fn chunked_accumulation_equals_one_shot() {
        let (dp, dg, dm) = random_depth(11, 300);
        let (np, ng, nm) = random_normals(12, 300);

        let mut one = MetricsAccumulator::new();
        one.add_depth(&dp, &dg, &dm).unwrap();
        one.add_normal(&np, &ng, &nm).unwrap();

        let mut chunks = MetricsAccumulator::new();
        for (lo, hi) in [(0usize, 100usize), (100, 250), (250, 300)] {
            chunks.add_depth(&dp[lo..hi], &dg[lo..hi], &dm[lo..hi]).unwrap();
            let mut p3 = Vec::new();
            let mut g3 = Vec::new();
            for c in 0..3 {
                p3.extend_from_slice(&np[c * 300 + lo..c * 300 + hi]);
                g3.extend_from_slice(&ng[c * 300 + lo..c * 300 + hi]);
            }
            chunks.add_normal(&p3, &g3, &nm[lo..hi]).unwrap();
        }
        assert_eq!(one.report(), chunks.report());
        assert_eq!(
            one.report().valid,
            dm.iter().filter(|v| **v).count().max(nm.iter().filter(|v| **v).count()) as u64
        );
    }

    #[test]
    fn report_serializes_to_text_and_flat_json() {
        let (dp, dg, dm) = random_depth(13, 64);
        let (np, ng, nm) = random_normals(14, 64);
        let mut acc = MetricsAccumulator::new();
        acc.add_depth(&dp, &dg, &dm).unwrap();
        acc.add_normal(&np, &ng, &nm).unwrap();
        let rep = acc.report();

        let text = rep.to_text();
        assert_eq!(text.lines().count(), 7 + 8 + 1);
        for key in [
            "depth.mae_m",
            "depth.rmse_log10",
            "depth.delta3_pct",
            "normal.median_deg",
            "normal.delta5_pct",
            "valid_px",
        ] {
            assert!(text.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key}");
        }
        // Text values parse back to the original numbers.
        let mae: f64 = text
            .lines()
            .find(|l| l.starts_with("depth.mae_m"))
            .and_then(|l| l.split(" = ").nth(1))
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!(mae, rep.depth.as_ref().unwrap().mae);

        let json = rep.to_json();
        assert!(json.starts_with('{') && json.ends_with('}'));
        assert_eq!(json.matches(':').count(), 16);
        assert_eq!(json.matches("\"depth.").count(), 7);
        assert_eq!(json.matches("\"normal.").count(), 8);

        // A depth-only report drops the normal half.
        let mut donly = MetricsAccumulator::new();
        donly.add_depth(&dp, &dg, &dm).unwrap();
        let rep = donly.report();
        assert!(rep.normal.is_none());
        assert!(!rep.to_text().contains("normal."));
    }
}
