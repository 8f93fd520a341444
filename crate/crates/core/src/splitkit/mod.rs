//! Band-power features per epoch, Kernel PCA projection to 2D, and Gaussian
//! summaries per recording, for judging whether a test split is
//! representative of the whole corpus.

use nalgebra::{DMatrix, Matrix2, SymmetricEigen, Vector2};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigio::{sample_at_or_after, Recording, Signal};

/// Frequency bands `(lo, hi)` in Hz; a bin at `f` belongs to a band when
/// `lo <= f < hi`.
pub const BANDS: [(f64, f64); 5] = [(1.0, 4.0), (4.0, 8.0), (8.0, 12.0), (12.0, 15.0), (15.0, 30.0)];

pub const DEFAULT_GAMMA: f64 = 0.1;

/// Kernel coefficients considered when choosing gamma by eye.
pub const GAMMA_CANDIDATES: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

/// Shortest epoch accepted by [`band_powers`], in seconds.
pub const MIN_EPOCH_SECONDS: f64 = 2.0;

/// Eigenvalues below this fraction of the largest are treated as zero.
const EIG_RELATIVE_FLOOR: f64 = 1e-10;

pub type BandPowers = [f64; 5];

/// Log of the mean DFT magnitude within each band.
pub fn band_powers(epoch: &Signal<f64>) -> Result<BandPowers> {
    if epoch.duration() + 1e-9 < MIN_EPOCH_SECONDS {
        return Err(Error::invalid(format!(
            "epoch of {:.3} s is shorter than {MIN_EPOCH_SECONDS} s",
            epoch.duration()
        )));
    }
    let n = epoch.len();
    let mut spec: Vec<Complex64> = epoch.samples().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut spec);
    let df = epoch.fs() / n as f64;
    let mut out = [0.0; 5];
    for (j, &(lo, hi)) in BANDS.iter().enumerate() {
        let (mut sum, mut count) = (0.0, 0usize);
        for (k, c) in spec.iter().enumerate().take(n / 2 + 1) {
            let f = k as f64 * df;
            if f >= lo && f < hi {
                sum += c.norm();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid(format!("no frequency bins in band ({lo}, {hi}) Hz")));
        }
        out[j] = (sum / count as f64).ln();
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("band power of a silent band".into()));
    }
    Ok(out)
}

/// Features of every epoch of a recording.
pub fn recording_features(rec: &Recording) -> Result<Vec<BandPowers>> {
    let fs = rec.signal.fs();
    rec.epochs
        .iter()
        .map(|&(s, e)| {
            let a = sample_at_or_after(s, fs);
            let b = sample_at_or_after(e, fs).min(rec.signal.len());
            band_powers(&rec.signal.slice(a, b))
        })
        .collect()
}

/// Zero mean and unit (population) variance per column.
pub fn standardize(rows: &[BandPowers]) -> Result<Vec<BandPowers>> {
    if rows.len() < 2 {
        return Err(Error::invalid("standardization needs at least two rows"));
    }
    let n = rows.len() as f64;
    let mut mean = [0.0; 5];
    let mut sd = [0.0; 5];
    for j in 0..5 {
        mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        sd[j] = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
        if !(sd[j] > 0.0) {
            return Err(Error::Degenerate(format!("feature {j} is constant")));
        }
    }
    Ok(rows
        .iter()
        .map(|r| std::array::from_fn(|j| (r[j] - mean[j]) / sd[j]))
        .collect())
}

pub fn rbf(x: &[f64], y: &[f64], gamma: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    (-gamma * d2).exp()
}

/// RBF kernel matrix with row and column means removed.
pub fn centered_kernel(rows: &[BandPowers], gamma: f64) -> DMatrix<f64> {
    let n = rows.len();
    let k = DMatrix::from_fn(n, n, |i, j| rbf(&rows[i], &rows[j], gamma));
    let row_mean: Vec<f64> = (0..n).map(|i| k.row(i).sum() / n as f64).collect();
    let all = row_mean.iter().sum::<f64>() / n as f64;
    // k is symmetric, so column means equal row means
    DMatrix::from_fn(n, n, |i, j| k[(i, j)] - row_mean[i] - row_mean[j] + all)
}

/// Two leading Kernel PCA components of standardized rows. Each coordinate
/// is the projection onto an eigenvector normalized by `1/sqrt(lambda)`,
/// i.e. `sqrt(lambda) * v`. Signs are fixed so the largest entry of each
/// eigenvector is positive.
pub fn kpca_project(rows: &[BandPowers], gamma: f64) -> Result<Vec<[f64; 2]>> {
    if rows.len() < 3 {
        return Err(Error::invalid("Kernel PCA needs at least three rows"));
    }
    if !(gamma > 0.0) {
        return Err(Error::invalid("kernel coefficient must be positive"));
    }
    let eig = SymmetricEigen::new(centered_kernel(rows, gamma));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let floor = EIG_RELATIVE_FLOOR * top.max(0.0);
    let lead: Vec<usize> = order.iter().copied().take(2).filter(|&k| eig.eigenvalues[k] > floor).collect();
    if top <= 0.0 || lead.len() < 2 {
        return Err(Error::Degenerate("fewer than two positive kernel eigenvalues".into()));
    }
    let comps: Vec<Vec<f64>> = lead
        .iter()
        .map(|&k| {
            let v = eig.eigenvectors.column(k);
            let lam = eig.eigenvalues[k].sqrt();
            let pivot = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            v.iter().map(|x| sign * lam * x).collect()
        })
        .collect();
    Ok((0..rows.len()).map(|i| [comps[0][i], comps[1][i]]).collect())
}

/// Quantile of the chi-square distribution with two degrees of freedom.
pub fn chi2_2dof_quantile(p: f64) -> f64 {
    -2.0 * (1.0 - p).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2D {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

/// Sample mean and unbiased sample covariance.
pub fn fit_gaussian(points: &[[f64; 2]]) -> Result<Gaussian2D> {
    if points.len() < 3 {
        return Err(Error::invalid("a Gaussian fit needs at least three points"));
    }
    let n = points.len() as f64;
    let mean = [0, 1].map(|d| points.iter().map(|p| p[d]).sum::<f64>() / n);
    let mut cov = [[0.0; 2]; 2];
    for p in points {
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] += (p[a] - mean[a]) * (p[b] - mean[b]) / (n - 1.0);
            }
        }
    }
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let tr = cov[0][0] + cov[1][1];
    if !(det > 1e-12 * tr * tr) {
        return Err(Error::Degenerate("singular covariance".into()));
    }
    Ok(Gaussian2D { mean, cov })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    /// Major then minor semi-axis.
    pub semi_axes: [f64; 2],
    /// Angle of the major axis from the first coordinate axis, radians in
    /// `(-pi/2, pi/2]`.
    pub rotation: f64,
}

/// Confidence ellipse holding `p` of the probability mass.
pub fn ellipse(g: &Gaussian2D, p: f64) -> Ellipse {
    let q = chi2_2dof_quantile(p);
    let m = Matrix2::new(g.cov[0][0], g.cov[0][1], g.cov[1][0], g.cov[1][1]);
    let eig = SymmetricEigen::new(m);
    let (major, minor) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let v: Vector2<f64> = eig.eigenvectors.column(major).into();
    let mut rotation = v[1].atan2(v[0]);
    if rotation <= -std::f64::consts::FRAC_PI_2 {
        rotation += std::f64::consts::PI;
    } else if rotation > std::f64::consts::FRAC_PI_2 {
        rotation -= std::f64::consts::PI;
    }
    Ellipse {
        center: g.mean,
        semi_axes: [
            (eig.eigenvalues[major].max(0.0) * q).sqrt(),
            (eig.eigenvalues[minor].max(0.0) * q).sqrt(),
        ],
        rotation,
    }
}

pub fn ellipse_95(g: &Gaussian2D) -> Ellipse {
    ellipse(g, 0.95)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn sine(freq: f64, secs: f64, amp: f64) -> Signal<f64> {
        let fs = 100.0;
        let n = (secs * fs) as usize;
        Signal::new((0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin()).collect(), fs).unwrap()
    }

    fn random_rows(seed: u64, n: usize) -> Vec<BandPowers> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-3.0..3.0))).collect()
    }

    #[test]
    fn ten_hz_sine_dominates_alpha_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noisy: Vec<f64> = sine(10.0, 20.0, 1.0).samples().iter().map(|v| v + 0.01 * rng.gen_range(-1.0..1.0)).collect();
        let b = band_powers(&Signal::new(noisy, 100.0).unwrap()).unwrap();
        assert_eq!(b.len(), 5);
        let best = (0..5).max_by(|&i, &j| b[i].total_cmp(&b[j])).unwrap();
        assert_eq!(BANDS[best], (8.0, 12.0));
    }

    #[test]
    fn scaling_shifts_by_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = band_powers(&Signal::new(x.clone(), 100.0).unwrap()).unwrap();
        let b = band_powers(&Signal::new(x.iter().map(|v| 3.5 * v).collect(), 100.0).unwrap()).unwrap();
        for j in 0..5 {
            assert!((b[j] - a[j] - 3.5f64.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn short_epochs_are_rejected() {
        assert!(band_powers(&sine(10.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn standardized_columns() {
        let z = standardize(&random_rows(2, 40)).unwrap();
        for j in 0..5 {
            let m = z.iter().map(|r| r[j]).sum::<f64>() / 40.0;
            let v = z.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / 40.0;
            assert!(m.abs() < 1e-10 && (v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_identities() {
        let rows = standardize(&random_rows(3, 30)).unwrap();
        assert_eq!(rbf(&rows[4], &rows[4], DEFAULT_GAMMA), 1.0);
        assert_eq!(DEFAULT_GAMMA, 0.1);
        let kc = centered_kernel(&rows, DEFAULT_GAMMA);
        for i in 0..30 {
            assert!(kc.row(i).sum().abs() < 1e-10);
        }
    }

    #[test]
    fn kpca_matches_eigenvalues() {
        let rows = standardize(&random_rows(4, 25)).unwrap();
        let y = kpca_project(&rows, 0.1).unwrap();
        // squared norm of each component equals its eigenvalue
        let kc = centered_kernel(&rows, 0.1);
        let mut ev: Vec<f64> = SymmetricEigen::new(kc).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        for c in 0..2 {
            let ss: f64 = y.iter().map(|p| p[c] * p[c]).sum();
            assert!((ss - ev[c]).abs() < 1e-9 * ev[0]);
        }
    }

    #[test]
    fn kpca_needs_spread() {
        let rows = vec![[1.0; 5]; 4];
        assert!(kpca_project(&rows, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn kpca_ignores_row_order(seed in 0u64..1000) {
            let rows = standardize(&random_rows(seed, 12)).unwrap();
            let mut perm: Vec<usize> = (0..12).collect();
            perm.reverse();
            perm.swap(0, 5);
            let shuffled: Vec<BandPowers> = perm.iter().map(|&i| rows[i]).collect();
            let a = kpca_project(&rows, 0.1).unwrap();
            let b = kpca_project(&shuffled, 0.1).unwrap();
            for c in 0..2 {
                let same = perm.iter().enumerate().all(|(k, &i)| (a[i][c] - b[k][c]).abs() < 1e-8);
                let flipped = perm.iter().enumerate().all(|(k, &i)| (a[i][c] + b[k][c]).abs() < 1e-8);
                prop_assert!(same || flipped);
            }
        }

        #[test]
        fn gaussian_shift_equivariance(seed in 0u64..1000, dx in -5.0f64..5.0, dy in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 2]> = (0..10).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            let moved: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
            let a = fit_gaussian(&pts).unwrap();
            let b = fit_gaussian(&moved).unwrap();
            prop_assert!((b.mean[0] - a.mean[0] - dx).abs() < 1e-10);
            prop_assert!((b.mean[1] - a.mean[1] - dy).abs() < 1e-10);
            for i in 0..2 {
                for j in 0..2 {
                    prop_assert!((a.cov[i][j] - b.cov[i][j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn chi_square_quantile() {
        assert!((chi2_2dof_quantile(0.95) - 5.991).abs() < 1e-3);
        // closed-form cdf inverts the quantile
        let q = chi2_2dof_quantile(0.95);
        assert!((1.0 - (-q / 2.0).exp() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn symmetric_cross_has_identity_covariance() {
        let a = 1.5f64.sqrt();
        let g = fit_gaussian(&[[a, 0.0], [-a, 0.0], [0.0, a], [0.0, -a]]).unwrap();
        assert_eq!(g.mean, [0.0, 0.0]);
        for (i, row) in g.cov.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let e = ellipse_95(&g);
        assert!((e.semi_axes[0] - 5.991f64.sqrt()).abs() < 1e-3);
    }

    #[test]
    fn rotation_equivariance() {
        let pts: Vec<[f64; 2]> = (0..40).map(|i| {
            let t = i as f64 * 0.7;
            [3.0 * t.cos(), 1.0 * t.sin()]
        }).collect();
        let base = ellipse_95(&fit_gaussian(&pts).unwrap());
        let theta = 0.4f64;
        let (c, s) = (theta.cos(), theta.sin());
        let rotated: Vec<[f64; 2]> = pts.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
        let turned = ellipse_95(&fit_gaussian(&rotated).unwrap());
        assert!((turned.semi_axes[0] - base.semi_axes[0]).abs() < 1e-9);
        assert!((turned.semi_axes[1] - base.semi_axes[1]).abs() < 1e-9);
        let mut d = turned.rotation - base.rotation - theta;
        while d > PI / 2.0 { d -= PI; }
        while d <= -PI / 2.0 { d += PI; }
        assert!(d.abs() < 1e-9);
    }

    #[test]
    fn collinear_points_are_singular() {
        assert!(fit_gaussian(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_err());
    }
}
