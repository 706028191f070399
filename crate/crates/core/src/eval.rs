//! Generation-quality metrics: Frechet distance between feature
//! distributions under a frozen, randomly-initialized extractor (a declared
//! proxy for the usual pretrained-network scores), plus report plumbing for
//! the ablation harness.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, OccError, Result};
use crate::kernels as k;
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Feature dimension of the frozen extractor.
    pub feature_dim: usize,
    /// Seed of the frozen extractor (never trained).
    pub feature_seed: u64,
    /// Generated/reference sample count per metric evaluation.
    pub fid_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { feature_dim: 16, feature_seed: 7_777, fid_samples: 24 }
    }
}

/// Frozen random conv stack pooled to a d_f-vector per image.
pub struct FeatureExtractor {
    w1: Tensor<f64>,
    w2: Tensor<f64>,
    pub feature_dim: usize,
    pub seed: u64,
}

impl FeatureExtractor {
    pub fn new(cfg: &EvalConfig) -> Self {
        let mut rng = RngStream::new(cfg.feature_seed).derive("feat");
        let mid = (cfg.feature_dim / 2).max(4);
        let w1 = Tensor::randn(&[mid, 3, 3, 3], (2.0 / 27.0f64).sqrt(), &mut rng);
        let w2 = Tensor::randn(
            &[cfg.feature_dim, mid, 3, 3],
            (2.0 / (9.0 * mid as f64)).sqrt(),
            &mut rng,
        );
        FeatureExtractor { w1, w2, feature_dim: cfg.feature_dim, seed: cfg.feature_seed }
    }

    /// One image (3 x H x W, any precision) to a d_f feature vector.
    pub fn features<T: Real>(&self, img: &Tensor<T>) -> Result<Vec<f64>> {
        if img.rank() != 3 || img.shape()[0] != 3 {
            return Err(shape_err(format!("extractor expects 3×H×W, got {:?}", img.shape())));
        }
        let x = img.cast::<f64>();
        let h1 = k::conv(&x, &self.w1, &[2, 2], &[1, 1])?
            .map(|v| if v > 0.0 { v } else { 0.01 * v });
        let h2 = k::conv(&h1, &self.w2, &[2, 2], &[1, 1])?
            .map(|v| if v > 0.0 { v } else { 0.01 * v });
        // global average pool per channel
        let c = h2.shape()[0];
        let sp: usize = h2.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(c);
        for ci in 0..c {
            let s: f64 = h2.data()[ci * sp..(ci + 1) * sp].iter().sum();
            out.push(s / sp as f64);
        }
        Ok(out)
    }

    /// Clip features: temporal mean pool over per-frame features.
    pub fn clip_features<T: Real>(&self, frames: &[Tensor<T>]) -> Result<Vec<f64>> {
        if frames.is_empty() {
            return Err(OccError::InsufficientSamples { needed: 1, got: 0 });
        }
        let mut acc = vec![0.0f64; self.feature_dim];
        for f in frames {
            for (a, v) in acc.iter_mut().zip(self.features(f)?) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= frames.len() as f64;
        }
        Ok(acc)
    }
}

fn mean_and_cov(feats: &[Vec<f64>]) -> (nalgebra::DVector<f64>, nalgebra::DMatrix<f64>) {
    let n = feats.len();
    let d = feats[0].len();
    let mut mean = nalgebra::DVector::zeros(d);
    for f in feats {
        for i in 0..d {
            mean[i] += f[i];
        }
    }
    mean /= n as f64;
    let mut cov = nalgebra::DMatrix::zeros(d, d);
    for f in feats {
        let diff = nalgebra::DVector::from_row_slice(f) - &mean;
        cov += &diff * diff.transpose();
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues in
/// [-1e-8, 0) are clamped to zero; anything lower is rejected.
pub fn psd_sqrt(m: &nalgebra::DMatrix<f64>) -> Result<nalgebra::DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-8 {
            return Err(OccError::NonPsd(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = nalgebra::DMatrix::from_diagonal(&vals);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Frechet distance between Gaussians fitted to two feature sets:
/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).
pub fn frechet_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    if feats_a.is_empty() || feats_b.is_empty() {
        return Err(OccError::InsufficientSamples { needed: 2, got: 0 });
    }
    let d = feats_a[0].len();
    for f in feats_a.iter().chain(feats_b) {
        if f.len() != d {
            return Err(shape_err("feature dimensions differ"));
        }
    }
    let needed = d + 1;
    if feats_a.len() < needed || feats_b.len() < needed {
        return Err(OccError::InsufficientSamples {
            needed,
            got: feats_a.len().min(feats_b.len()),
        });
    }
    let (mu1, s1) = mean_and_cov(feats_a);
    let (mu2, s2) = mean_and_cov(feats_b);
    let mean_term = (&mu1 - &mu2).norm_squared();
    // Tr((S1 S2)^(1/2)) = Tr((S2^(1/2) S1 S2^(1/2))^(1/2)), symmetric form
    let s2_half = psd_sqrt(&s2)?;
    let inner = &s2_half * &s1 * &s2_half;
    let cross = psd_sqrt(&inner)?;
    let dist = mean_term + s1.trace() + s2.trace() - 2.0 * cross.trace();
    // tiny negatives are numerical noise around zero
    Ok(if dist < 0.0 && dist > -1e-8 { 0.0 } else { dist })
}

/// Frechet distance over per-image features.
pub fn desk_fid<T: Real>(
    extractor: &FeatureExtractor,
    generated: &[Tensor<T>],
    reference: &[Tensor<T>],
) -> Result<f64> {
    let fa: Vec<Vec<f64>> =
        generated.iter().map(|i| extractor.features(i)).collect::<Result<_>>()?;
    let fb: Vec<Vec<f64>> =
        reference.iter().map(|i| extractor.features(i)).collect::<Result<_>>()?;
    frechet_distance(&fa, &fb)
}

/// Frechet distance over temporally pooled clip features.
pub fn desk_fvd<T: Real>(
    extractor: &FeatureExtractor,
    generated: &[Vec<Tensor<T>>],
    reference: &[Vec<Tensor<T>>],
) -> Result<f64> {
    let fa: Vec<Vec<f64>> =
        generated.iter().map(|c| extractor.clip_features(c)).collect::<Result<_>>()?;
    let fb: Vec<Vec<f64>> =
        reference.iter().map(|c| extractor.clip_features(c)).collect::<Result<_>>()?;
    frechet_distance(&fa, &fb)
}

/// One ablation row; serialized to CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub variant: String,
    pub desk_fid: f64,
    pub desk_fvd: f64,
    pub miou: f64,
    pub seconds: f64,
    pub config_hash: String,
}

impl AblationReport {
    pub fn csv_header() -> &'static str {
        "variant,desk_fid,desk_fvd,miou,seconds,config_hash"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.variant, self.desk_fid, self.desk_fvd, self.miou, self.seconds, self.config_hash
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("desk_fid", self.desk_fid),
            ("desk_fvd", self.desk_fvd),
            ("miou", self.miou),
            ("seconds", self.seconds),
        ] {
            if !v.is_finite() {
                return Err(OccError::NonFiniteValue(format!("ablation metric {name}")));
            }
        }
        Ok(())
    }
}

/// Write reports with one header row and LF line endings.
pub fn reports_to_csv(reports: &[AblationReport]) -> String {
    let mut out = String::from(AblationReport::csv_header());
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss_cloud(n: usize, d: usize, mean: f64, std: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = RngStream::new(seed);
        (0..n).map(|_| (0..d).map(|_| mean + std * rng.normal()).collect()).collect()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = gauss_cloud(40, 4, 0.0, 1.0, 1);
        let d = frechet_distance(&a, &a).unwrap();
        assert!(d.abs() < 1e-8, "self distance {d}");
    }

    #[test]
    fn distance_is_symmetric_and_nonnegative() {
        let a = gauss_cloud(40, 4, 0.0, 1.0, 2);
        let b = gauss_cloud(40, 4, 0.7, 1.3, 3);
        let dab = frechet_distance(&a, &b).unwrap();
        let dba = frechet_distance(&b, &a).unwrap();
        assert!(dab >= 0.0);
        assert!((dab - dba).abs() < 1e-9);
    }

    #[test]
    fn unit_covariance_distance_is_mean_gap() {
        // large samples of unit Gaussians: distance ~ |mu1 - mu2|^2
        let a = gauss_cloud(4000, 3, 0.0, 1.0, 4);
        let b = gauss_cloud(4000, 3, 1.0, 1.0, 5);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 3.0).abs() < 0.25, "got {d}, expected ~3");
    }

    #[test]
    fn diagonal_closed_form_2d() {
        // diag(1,1) vs diag(4,4), equal means: 2*(1 + 4 - 2*2) = 2
        // verified directly on the covariance path by synthetic exact inputs
        let s1 = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0]));
        let s2 = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 4.0]));
        let s2h = psd_sqrt(&s2).unwrap();
        let cross = psd_sqrt(&(&s2h * &s1 * &s2h)).unwrap();
        let d = s1.trace() + s2.trace() - 2.0 * cross.trace();
        assert!((d - 2.0).abs() < 1e-9);
    }

    #[test]
    fn sqrt_squares_back_to_input() {
        let mut rng = RngStream::new(6);
        for n in [2usize, 8, 32, 64] {
            let a = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| rng.normal());
            let psd = &a * a.transpose();
            let r = psd_sqrt(&psd).unwrap();
            let back = &r * &r;
            let err = (&back - &psd).abs().max();
            assert!(err < 1e-8 * psd.abs().max().max(1.0), "n={n}: {err}");
        }
    }

    #[test]
    fn non_psd_rejected() {
        let m = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(psd_sqrt(&m), Err(OccError::NonPsd(_))));
    }

    #[test]
    fn insufficient_samples_rejected() {
        let a = gauss_cloud(3, 4, 0.0, 1.0, 7);
        let b = gauss_cloud(40, 4, 0.0, 1.0, 8);
        assert!(matches!(
            frechet_distance(&a, &b),
            Err(OccError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn extractor_is_deterministic_per_seed() {
        let cfg = EvalConfig::default();
        let e1 = FeatureExtractor::new(&cfg);
        let e2 = FeatureExtractor::new(&cfg);
        let mut rng = RngStream::new(9);
        let img = Tensor::<f32>::rand_uniform(&[3, 32, 48], 0.0, 1.0, &mut rng);
        assert_eq!(e1.features(&img).unwrap(), e2.features(&img).unwrap());
        let e3 = FeatureExtractor::new(&EvalConfig { feature_seed: 1, ..cfg });
        assert_ne!(e1.features(&img).unwrap(), e3.features(&img).unwrap());
    }

    #[test]
    fn desk_fid_zero_on_identical_sets_and_symmetric() {
        let cfg = EvalConfig { feature_dim: 8, ..Default::default() };
        let ex = FeatureExtractor::new(&cfg);
        let mut rng = RngStream::new(10);
        let imgs: Vec<Tensor<f32>> = (0..12)
            .map(|_| Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng))
            .collect();
        let other: Vec<Tensor<f32>> = (0..12)
            .map(|_| Tensor::rand_uniform(&[3, 16, 16], 0.3, 1.0, &mut rng))
            .collect();
        let d_self = desk_fid(&ex, &imgs, &imgs).unwrap();
        assert!(d_self.abs() < 1e-8);
        let dab = desk_fid(&ex, &imgs, &other).unwrap();
        let dba = desk_fid(&ex, &other, &imgs).unwrap();
        assert!((dab - dba).abs() < 1e-9);
    }

    #[test]
    fn csv_schema_is_stable() {
        let r = AblationReport {
            variant: "full".into(),
            desk_fid: 1.25,
            desk_fvd: 2.5,
            miou: 0.4,
            seconds: 12.0,
            config_hash: "beef".into(),
        };
        let csv = reports_to_csv(&[r]);
        assert_eq!(
            csv,
            "variant,desk_fid,desk_fvd,miou,seconds,config_hash\nfull,1.25,2.5,0.4,12,beef\n"
        );
    }
}
