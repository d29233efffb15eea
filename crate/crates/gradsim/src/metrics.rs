//! Reconstruction-quality scoring: per-image MSE, PSNR and SSIM, plus
//! optimal assignment between a recovered batch and the ground truth
//! (inversion returns images in arbitrary order).
//!
//! Direction conventions, mirroring "lower values suggest more privacy
//! leakage": lower MSE means more leakage; higher PSNR/SSIM mean more
//! leakage. "Best" aggregates take the most-leaking image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageScore {
    pub mse: f64,
    /// `10·log10(1/MSE)` for unit-range pixels; infinite when MSE is 0.
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageScore>,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Most-leaking single image per metric.
    pub best_mse: f64,
    pub best_psnr: f64,
    pub best_ssim: f64,
    /// `permutation[i]` is the ground-truth index matched to recovered
    /// image `i`.
    pub permutation: Vec<usize>,
}

/// Split a `(b, ...)` batch into per-image tensors.
pub fn split_batch(batch: &Tensor) -> Vec<Tensor> {
    let shape = batch.shape();
    if shape.is_empty() {
        return vec![batch.clone()];
    }
    let b = shape[0];
    let rest: Vec<usize> = shape[1..].to_vec();
    let stride: usize = rest.iter().product();
    (0..b)
        .map(|i| {
            Tensor::new(
                rest.clone(),
                batch.values()[i * stride..(i + 1) * stride].to_vec(),
            )
            .expect("slice matches shape")
        })
        .collect()
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.mse(b)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Mean SSIM over sliding 8×8 windows per channel, stabilizers
/// C1 = (0.01)², C2 = (0.03)² at unit dynamic range. Windows shrink to the
/// image when a side is smaller than 8. Anticorrelated windows floor at 0:
/// for leakage measurement they carry no more structure than uncorrelated
/// ones, and the score stays in [0, 1].
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let s = a.shape();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        2 => (1, s[0], s[1]),
        _ => {
            return Err(Error::InvalidShape {
                op: "ssim",
                shape: s.to_vec(),
                reason: "expected (channels, h, w) or (h, w)".into(),
            })
        }
    };
    let wh = SSIM_WINDOW.min(h);
    let ww = SSIM_WINDOW.min(w);
    let win = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for cc in 0..c {
        let plane = cc * h * w;
        for i0 in 0..=(h - wh) {
            for j0 in 0..=(w - ww) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..wh {
                    for j in 0..ww {
                        let idx = plane + (i0 + i) * w + (j0 + j);
                        ma += a.values()[idx];
                        mb += b.values()[idx];
                    }
                }
                ma /= win;
                mb /= win;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..wh {
                    for j in 0..ww {
                        let idx = plane + (i0 + i) * w + (j0 + j);
                        let da = a.values()[idx] - ma;
                        let db = b.values()[idx] - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= win;
                vb /= win;
                cov /= win;
                let v = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                total += v.max(0.0);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Minimum-cost assignment on a square cost matrix (shortest augmenting
/// paths with potentials). Returns `assign[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

/// Permutation minimizing total MSE between recovered and true batches.
pub fn match_batch(recovered: &Tensor, truth: &Tensor) -> Result<Vec<usize>> {
    if recovered.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "match_batch",
            lhs: recovered.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let rec = split_batch(recovered);
    let tru = split_batch(truth);
    let n = rec.len();
    if n == 1 {
        return Ok(vec![0]);
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = rec[i].mse(&tru[j])?;
        }
    }
    Ok(hungarian(&cost, n))
}

/// Score a recovered batch against ground truth under a fixed matching.
pub fn score(recovered: &Tensor, truth: &Tensor, permutation: &[usize]) -> Result<MetricReport> {
    if recovered.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "score",
            lhs: recovered.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let rec = split_batch(recovered);
    let tru = split_batch(truth);
    if permutation.len() != rec.len() {
        return Err(Error::Config(format!(
            "permutation of {} for batch of {}",
            permutation.len(),
            rec.len()
        )));
    }
    let mut per_image = Vec::with_capacity(rec.len());
    for (i, r) in rec.iter().enumerate() {
        let t = &tru[permutation[i]];
        let m = r.mse(t)?;
        per_image.push(ImageScore {
            mse: m,
            psnr: psnr_from_mse(m),
            ssim: ssim(r, t)?,
        });
    }
    let n = per_image.len() as f64;
    let mean_mse = per_image.iter().map(|s| s.mse).sum::<f64>() / n;
    let mean_psnr = per_image.iter().map(|s| s.psnr).sum::<f64>() / n;
    let mean_ssim = per_image.iter().map(|s| s.ssim).sum::<f64>() / n;
    Ok(MetricReport {
        best_mse: per_image.iter().map(|s| s.mse).fold(f64::INFINITY, f64::min),
        best_psnr: per_image.iter().map(|s| s.psnr).fold(f64::NEG_INFINITY, f64::max),
        best_ssim: per_image.iter().map(|s| s.ssim).fold(f64::NEG_INFINITY, f64::max),
        per_image,
        mean_mse,
        mean_psnr,
        mean_ssim,
        permutation: permutation.to_vec(),
    })
}

/// Convenience: match, then score under the matching.
pub fn match_and_score(recovered: &Tensor, truth: &Tensor) -> Result<MetricReport> {
    let perm = match_batch(recovered, truth)?;
    score(recovered, truth, &perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn identical_images_score_perfectly() {
        let x = random_batch(1, &[2, 1, 4, 4], 0.0, 1.0);
        let r = match_and_score(&x, &x).unwrap();
        assert_eq!(r.mean_mse, 0.0);
        assert!(r.mean_psnr.is_infinite());
        assert!((r.mean_ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_formula_at_20db() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!(psnr_from_mse(0.0).is_infinite());
    }

    #[test]
    fn psnr_strictly_decreasing_in_mse() {
        let mut prev = f64::INFINITY;
        for &m in &[1e-6, 1e-4, 1e-2, 0.1, 0.5, 1.0] {
            let p = psnr_from_mse(m);
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn shuffle_recovered_exactly() {
        let truth = random_batch(2, &[4, 1, 4, 4], 0.0, 1.0);
        let images = split_batch(&truth);
        let order = [2usize, 0, 3, 1];
        let mut shuffled = Vec::new();
        for &i in &order {
            shuffled.extend_from_slice(images[i].values());
        }
        let rec = Tensor::new(vec![4, 1, 4, 4], shuffled).unwrap();
        let perm = match_batch(&rec, &truth).unwrap();
        assert_eq!(perm, order.to_vec());
        let r = score(&rec, &truth, &perm).unwrap();
        assert_eq!(r.mean_mse, 0.0);
    }

    #[test]
    fn batch_of_one_is_identity() {
        let x = random_batch(3, &[1, 1, 4, 4], 0.0, 1.0);
        assert_eq!(match_batch(&x, &x).unwrap(), vec![0]);
    }

    #[test]
    fn hungarian_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = 4;
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
            let got = hungarian(&cost, n);
            let got_cost: f64 = got.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();

            // exhaustive 4! enumeration
            let mut best = f64::INFINITY;
            let mut perm = [0usize, 1, 2, 3];
            permute(&mut perm, 0, &mut |p| {
                let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
                if c < best {
                    best = c;
                }
            });
            assert!(
                (got_cost - best).abs() < 1e-12,
                "hungarian {} vs brute force {}",
                got_cost,
                best
            );
        }
    }

    fn permute(arr: &mut [usize; 4], k: usize, f: &mut impl FnMut(&[usize; 4])) {
        if k == arr.len() {
            f(arr);
            return;
        }
        for i in k..arr.len() {
            arr.swap(k, i);
            permute(arr, k + 1, f);
            arr.swap(k, i);
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let a = random_batch(5, &[1, 8, 8], 0.0, 1.0);
        let b = random_batch(6, &[1, 8, 8], 0.0, 1.0);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scores_invariant_under_joint_permutation() {
        let rec = random_batch(7, &[3, 1, 4, 4], 0.0, 1.0);
        let tru = random_batch(8, &[3, 1, 4, 4], 0.0, 1.0);
        let r1 = match_and_score(&rec, &tru).unwrap();

        let order = [2usize, 0, 1];
        let permute_batch = |t: &Tensor| {
            let imgs = split_batch(t);
            let mut v = Vec::new();
            for &i in &order {
                v.extend_from_slice(imgs[i].values());
            }
            Tensor::new(t.shape().to_vec(), v).unwrap()
        };
        let r2 = match_and_score(&permute_batch(&rec), &permute_batch(&tru)).unwrap();
        assert!((r1.mean_mse - r2.mean_mse).abs() < 1e-12);
        assert!((r1.mean_ssim - r2.mean_ssim).abs() < 1e-12);
    }
}
