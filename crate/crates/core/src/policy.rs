//! Learnable soft spiral-arm profile and its regularizers.
//!
//! The MRI branch maps a profile `p` to `x_m = |u| / max|u|` with
//! `u = sum_c conj(S_c) A^H D (p . k_c)`. Its gradient with respect to `p` is
//! obtained with one forward NUFFT per coil: for a real upstream `g` on `|u|`,
//! `dL/dp_i = Re sum_c <A(S_c v), D_i k_c>` where `v = g . u / |u|`.

use ndarray::{Array2, Axis, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coil::{sense_combine_complex, KSpaceFrame, SensitivityMaps};
use crate::error::{Error, Result};
use crate::nufft::{ComplexImage, NufftPlan};
use crate::trajectory::ARMS_PER_FRAME;

const R: usize = ARMS_PER_FRAME;

/// Pre-sigmoid arm logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmLogits(pub [f64; R]);

impl Default for ArmLogits {
    fn default() -> Self {
        Self([0.0; R])
    }
}

impl ArmLogits {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|l| l.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("arm logits".into()))
        }
    }
}

/// Soft per-arm weights in `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmProfile(pub [f64; R]);

impl ArmProfile {
    /// Unit weights: every acquired arm kept as is.
    pub fn ones() -> Self {
        Self([1.0; R])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn profile(ell: &ArmLogits) -> ArmProfile {
    ArmProfile(ell.0.map(sigmoid))
}

/// Chains an upstream gradient on `p` through the sigmoid.
pub fn sigmoid_backward(upstream: &[f64; R], p: &ArmProfile) -> [f64; R] {
    std::array::from_fn(|i| upstream[i] * p.0[i] * (1.0 - p.0[i]))
}

/// Scales every sample of arm `i` by `p_i`.
pub fn apply_profile(frame: &KSpaceFrame, p: &ArmProfile) -> Result<KSpaceFrame> {
    if frame.arms() != R {
        return Err(Error::ArmCountMismatch {
            expected: R,
            got: frame.arms(),
        });
    }
    let mut data = frame.data().clone();
    for (i, mut arm) in data.axis_iter_mut(Axis(1)).enumerate() {
        arm.mapv_inplace(|z| z * p.0[i]);
    }
    Ok(frame.with_data(data))
}

/// Length-`n` inverse DFT with `1/n` scaling.
fn idft(p: &[f64]) -> Vec<Complex64> {
    let n = p.len();
    (0..n)
        .map(|j| {
            p.iter()
                .enumerate()
                .map(|(i, &v)| {
                    Complex64::from_polar(
                        v,
                        2.0 * std::f64::consts::PI * (i * j % n) as f64 / n as f64,
                    )
                })
                .sum::<Complex64>()
                / n as f64
        })
        .collect()
}

/// Mean energy of the inverse DFT of the profile.
pub fn psf_loss(p: &[f64]) -> f64 {
    let spec = idft(p);
    spec.iter().map(|z| z.norm_sqr()).sum::<f64>() / spec.len() as f64
}

/// Gradient of [`psf_loss`]; equal to `2 p / n^2` by Parseval.
pub fn psf_loss_grad(p: &[f64]) -> Vec<f64> {
    let n2 = (p.len() * p.len()) as f64;
    p.iter().map(|v| 2.0 * v / n2).collect()
}

/// `(sum p - K)^2 + sum p / n`.
pub fn budget_loss(p: &[f64], k: f64) -> f64 {
    let s: f64 = p.iter().sum();
    (s - k).powi(2) + s / p.len() as f64
}

pub fn budget_loss_grad(p: &[f64], k: f64) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    vec![2.0 * (s - k) + 1.0 / p.len() as f64; p.len()]
}

/// Cached forward state of the MRI branch for one frame.
#[derive(Debug, Clone)]
pub struct MriForward {
    profile: ArmProfile,
    u: ComplexImage,
    /// Normalized magnitude image in `[0, 1]`.
    pub image: Array2<f64>,
    max: f64,
    argmax: (usize, usize),
}

impl MriForward {
    pub fn profile(&self) -> &ArmProfile {
        &self.profile
    }

    /// Coil-combined complex image before the magnitude.
    pub fn combined(&self) -> &ComplexImage {
        &self.u
    }
}

/// Weighted SENSE combination followed by magnitude and max normalization.
pub fn mri_forward(
    frame: &KSpaceFrame,
    plan: &NufftPlan,
    maps: &SensitivityMaps,
    p: &ArmProfile,
) -> Result<MriForward> {
    if frame.arms() != R {
        return Err(Error::ArmCountMismatch {
            expected: R,
            got: frame.arms(),
        });
    }
    let u = sense_combine_complex(frame, plan, maps, Some(&p.0))?;
    let mut max = 0.0;
    let mut argmax = (0, 0);
    let mag = u.mapv(|z| z.norm());
    for ((i, j), &m) in mag.indexed_iter() {
        if m > max {
            max = m;
            argmax = (i, j);
        }
    }
    let image = if max > 0.0 {
        mag.mapv(|m| m / max)
    } else {
        mag
    };
    Ok(MriForward {
        profile: *p,
        u,
        image,
        max,
        argmax,
    })
}

/// Upstream gradient on `x_m` pulled back to `|u|`, and then to `v = g . u / |u|`.
fn magnitude_pullback(fwd: &MriForward, upstream: &Array2<f64>) -> Option<ComplexImage> {
    if fwd.max == 0.0 {
        return None;
    }
    let m = fwd.max;
    let dot: f64 = Zip::from(upstream)
        .and(&fwd.image)
        .fold(0.0, |acc, &g, &x| acc + g * x);
    let mut g_mag = upstream.mapv(|g| g / m);
    g_mag[fwd.argmax] -= dot / m;
    Some(Zip::from(&g_mag).and(&fwd.u).map_collect(|&g, &u| {
        let r = u.norm();
        if r > 0.0 {
            u * (g / r)
        } else {
            Complex64::new(0.0, 0.0)
        }
    }))
}

/// Gradient of a loss with respect to the profile, given its gradient on the
/// normalized MRI image. `p` must be the profile used in [`mri_forward`].
pub fn mri_backward(
    fwd: &MriForward,
    p: &ArmProfile,
    upstream: &Array2<f64>,
    frame: &KSpaceFrame,
    plan: &NufftPlan,
    maps: &SensitivityMaps,
) -> Result<[f64; R]> {
    if fwd.profile != *p {
        return Err(Error::StaleCache);
    }
    if upstream.dim() != fwd.image.dim() {
        return Err(Error::ShapeMismatch(
            "upstream gradient vs MRI image".into(),
        ));
    }
    let Some(v) = magnitude_pullback(fwd, upstream) else {
        return Ok([0.0; R]);
    };
    let dcf = plan.trajectory().dcf();
    let per_coil: Vec<[f64; R]> = (0..maps.coils())
        .into_par_iter()
        .map(|c| {
            let sv = &v * &maps.coil(c);
            let f = plan.forward(sv.view())?;
            let k = frame.coil(c);
            let mut g = [0.0; R];
            for ((arm, s), fz) in f.indexed_iter() {
                g[arm] += (fz.conj() * k[[arm, s]]).re * dcf[[arm, s]];
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut out = [0.0; R];
    for g in per_coil {
        for (o, v) in out.iter_mut().zip(g) {
            *o += v;
        }
    }
    Ok(out)
}

/// Per-arm coil-combined adjoint images `z_i`, so that `u = sum_i p_i z_i`.
pub fn arm_images(
    frame: &KSpaceFrame,
    plan: &NufftPlan,
    maps: &SensitivityMaps,
) -> Result<Vec<ComplexImage>> {
    (0..frame.arms())
        .map(|i| {
            let mut z = ComplexImage::zeros(plan.grid().dim());
            for c in 0..frame.coils() {
                let img = plan.adjoint_arm(frame.coil(c), i, true)?;
                Zip::from(&mut z)
                    .and(&img)
                    .and(maps.coil(c))
                    .for_each(|o, &x, &s| *o += s.conj() * x);
            }
            Ok(z)
        })
        .collect()
}

/// Same gradient as [`mri_backward`] through explicit per-arm adjoint images.
pub fn mri_backward_per_arm(
    fwd: &MriForward,
    upstream: &Array2<f64>,
    arms: &[ComplexImage],
) -> [f64; R] {
    let Some(v) = magnitude_pullback(fwd, upstream) else {
        return [0.0; R];
    };
    std::array::from_fn(|i| {
        Zip::from(&v)
            .and(&arms[i])
            .fold(0.0, |acc, &v, &z| acc + (v.conj() * z).re)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coil::{normalize_kspace, simulate_sensitivities};
    use crate::nufft::GridderConfig;
    use crate::trajectory::{gen_spiral, GridSize};
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn profile_examples() {
        assert_eq!(profile(&ArmLogits::default()).0, [0.5; R]);
        let mut l = [0.0; R];
        l[3] = 20.0;
        l[4] = -745.0;
        let p = profile(&ArmLogits(l));
        assert!(p.0[3] < 1.0 && (1.0 - p.0[3] - 2.061e-9).abs() < 1e-11);
        assert!(p.0[4] > 0.0);
    }

    #[test]
    fn psf_examples() {
        assert_eq!(psf_loss(&[0.0; R]), 0.0);
        assert!((psf_loss(&[0.5; R]) - 0.25 / 13.0).abs() < 1e-12);
    }

    #[test]
    fn budget_examples() {
        assert_eq!(budget_loss(&[0.0; R], 2.0), 4.0);
        let mut p = [0.0; R];
        p[0] = 1.0;
        p[5] = 1.0;
        assert!((budget_loss(&p, 2.0) - 2.0 / 13.0).abs() < 1e-15);
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, p: &[f64], h: f64) -> Vec<f64> {
        (0..p.len())
            .map(|i| {
                let (mut a, mut b) = (p.to_vec(), p.to_vec());
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
            / scale
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let p: Vec<f64> = (0..R).map(|i| 0.1 + 0.06 * i as f64).collect();
        // Both losses are quadratic, so central differences are exact up to rounding.
        assert!(max_rel(&psf_loss_grad(&p), &central_diff(psf_loss, &p, 1e-3)) < 1e-10);
        let b = |q: &[f64]| budget_loss(q, 2.0);
        assert!(max_rel(&budget_loss_grad(&p, 2.0), &central_diff(b, &p, 1e-3)) < 1e-10);
    }

    #[test]
    fn sigmoid_chain_matches_finite_differences() {
        let l: [f64; R] = std::array::from_fn(|i| -1.5 + 0.25 * i as f64);
        let up: [f64; R] = std::array::from_fn(|i| (i as f64 * 0.7).sin());
        let f = |x: &[f64]| x.iter().zip(&up).map(|(l, u)| sigmoid(*l) * u).sum::<f64>();
        let g = sigmoid_backward(&up, &profile(&ArmLogits(l)));
        assert!(max_rel(&g, &central_diff(f, &l, 1e-5)) < 1e-10);
        assert_eq!(
            sigmoid_backward(&[0.0; R], &profile(&ArmLogits(l))),
            [0.0; R]
        );
    }

    #[test]
    fn budget_descent_reaches_stationary_point() {
        let mut p = vec![0.9; R];
        for _ in 0..2000 {
            let g = budget_loss_grad(&p, 2.0);
            p.iter_mut().zip(&g).for_each(|(v, g)| *v -= 0.01 * g);
        }
        let s: f64 = p.iter().sum();
        assert!((s - (2.0 - 1.0 / 26.0)).abs() < 1e-4, "sum {s}");
    }

    fn frame(seed: u64) -> KSpaceFrame {
        let data = Array3::from_shape_fn((2, R, 5), |(c, i, s)| {
            Complex64::new(
                ((c + 3 * i + 7 * s) as f64 + seed as f64).sin(),
                (c * i + s) as f64 * 0.1,
            )
        });
        normalize_kspace(data).unwrap()
    }

    #[test]
    fn apply_profile_examples() {
        let f = frame(1);
        assert_eq!(apply_profile(&f, &ArmProfile::ones()).unwrap(), f);
        let half = apply_profile(&f, &ArmProfile([0.5; R])).unwrap();
        assert!(half.data().iter().zip(f.data()).all(|(a, b)| *a == b * 0.5));
        assert_eq!(half.norm_scale(), f.norm_scale());

        let eps = 1e-4;
        let mut sel = [eps; R];
        sel[0] = 1.0 - eps;
        sel[7] = 1.0 - eps;
        let out = apply_profile(&f, &ArmProfile(sel)).unwrap();
        for i in [1usize, 4, 12] {
            let before: f64 = f
                .data()
                .index_axis(Axis(1), i)
                .iter()
                .map(|z| z.norm_sqr())
                .sum();
            let after: f64 = out
                .data()
                .index_axis(Axis(1), i)
                .iter()
                .map(|z| z.norm_sqr())
                .sum();
            assert!((after - eps * eps * before).abs() <= 1e-12 * before);
        }
        let bad = KSpaceFrame::from_normalized(Array3::zeros((1, 12, 4)), 1.0).unwrap();
        assert!(matches!(
            apply_profile(&bad, &ArmProfile::ones()),
            Err(Error::ArmCountMismatch { .. })
        ));
    }

    struct Setup {
        plan: NufftPlan,
        maps: SensitivityMaps,
        frame: KSpaceFrame,
        target: Array2<f64>,
        w: Array2<f64>,
        xa: Array2<f64>,
    }

    fn setup() -> Setup {
        let g = GridSize::square(16);
        let traj = gen_spiral(R, 48, 2.0, g).unwrap();
        let plan = NufftPlan::new(&traj, &GridderConfig::default()).unwrap();
        let maps = simulate_sensitivities(3, g, 5).unwrap();
        let obj = Array2::from_shape_fn((16, 16), |(i, j)| {
            let r = ((i as f64 - 8.0).powi(2) + (j as f64 - 7.0).powi(2)).sqrt();
            if r < 5.0 {
                0.9
            } else {
                0.1 + 0.02 * i as f64
            }
        });
        let mut k = Array3::zeros((3, R, 48));
        for c in 0..3 {
            let img = obj.mapv(|v| Complex64::new(v, 0.0)) * maps.coil(c);
            k.index_axis_mut(Axis(0), c)
                .assign(&plan.forward(img.view()).unwrap());
        }
        let frame = normalize_kspace(k).unwrap();
        let w = Array2::from_shape_fn((16, 16), |(i, j)| ((i + j) as f64 / 30.0).min(1.0));
        let xa = Array2::from_shape_fn((16, 16), |(i, j)| 0.5 + 0.4 * ((i * j) as f64 * 0.3).sin());
        Setup {
            plan,
            maps,
            frame,
            target: obj,
            w,
            xa,
        }
    }

    fn recon_loss(s: &Setup, ell: &[f64]) -> f64 {
        let p = profile(&ArmLogits(ell.try_into().unwrap()));
        let xm = mri_forward(&s.frame, &s.plan, &s.maps, &p).unwrap().image;
        Zip::from(&s.w)
            .and(&s.xa)
            .and(&xm)
            .and(&s.target)
            .fold(0.0, |acc, &w, &a, &m, &x| {
                acc + (w * a + (1.0 - w) * m - x).powi(2)
            })
    }

    fn recon_grad(s: &Setup, ell: &[f64; R]) -> ([f64; R], [f64; R]) {
        let p = profile(&ArmLogits(*ell));
        let fwd = mri_forward(&s.frame, &s.plan, &s.maps, &p).unwrap();
        let up = Zip::from(&s.w)
            .and(&s.xa)
            .and(&fwd.image)
            .and(&s.target)
            .map_collect(|&w, &a, &m, &x| 2.0 * (w * a + (1.0 - w) * m - x) * (1.0 - w));
        let via_forward = mri_backward(&fwd, &p, &up, &s.frame, &s.plan, &s.maps).unwrap();
        let arms = arm_images(&s.frame, &s.plan, &s.maps).unwrap();
        let via_arms = mri_backward_per_arm(&fwd, &up, &arms);
        (
            sigmoid_backward(&via_forward, &p),
            sigmoid_backward(&via_arms, &p),
        )
    }

    #[test]
    fn full_chain_gradient_matches_finite_differences() {
        let s = setup();
        let ell: [f64; R] = std::array::from_fn(|i| -1.0 + 0.17 * i as f64);
        let (g, g_arms) = recon_grad(&s, &ell);
        assert!(max_rel(&g, &g_arms) < 1e-10, "forward vs per-arm route");
        let fd = central_diff(|l| recon_loss(&s, l), &ell, 1e-3);
        let rel = max_rel(&g, &fd);
        assert!(rel < 5e-3, "relative error {rel}");
    }

    #[test]
    fn arm_images_sum_to_combined_image() {
        let s = setup();
        let p = profile(&ArmLogits(std::array::from_fn(|i| 0.1 * i as f64)));
        let fwd = mri_forward(&s.frame, &s.plan, &s.maps, &p).unwrap();
        let arms = arm_images(&s.frame, &s.plan, &s.maps).unwrap();
        let mut u = ComplexImage::zeros((16, 16));
        for (z, w) in arms.iter().zip(p.0) {
            u.zip_mut_with(z, |a, b| *a += b * w);
        }
        let err = (&u - fwd.combined())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn unit_profile_matches_sense_combine() {
        let s = setup();
        let a = mri_forward(&s.frame, &s.plan, &s.maps, &ArmProfile::ones()).unwrap();
        let b = crate::coil::sense_combine(&s.frame, &s.plan, &s.maps).unwrap();
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn backward_rejects_stale_profile_and_handles_zero() {
        let s = setup();
        let p = ArmProfile([0.5; R]);
        let fwd = mri_forward(&s.frame, &s.plan, &s.maps, &p).unwrap();
        let up = Array2::ones((16, 16));
        let other = ArmProfile([0.6; R]);
        assert!(matches!(
            mri_backward(&fwd, &other, &up, &s.frame, &s.plan, &s.maps),
            Err(Error::StaleCache)
        ));
        let zero = mri_backward(
            &fwd,
            &p,
            &Array2::zeros((16, 16)),
            &s.frame,
            &s.plan,
            &s.maps,
        )
        .unwrap();
        assert_eq!(zero, [0.0; R]);
    }

    proptest! {
        #[test]
        fn profile_is_monotone_and_bounded(a in -30.0f64..30.0, b in -30.0f64..30.0) {
            prop_assume!(a != b);
            let (pa, pb) = (sigmoid(a), sigmoid(b));
            prop_assert!(pa > 0.0 && pa < 1.0);
            prop_assert_eq!(a > b, pa > pb);
        }

        #[test]
        fn psf_parseval(p in proptest::collection::vec(0.0f64..1.0, R)) {
            let mean_sq = p.iter().map(|v| v * v).sum::<f64>() / R as f64;
            prop_assert!((psf_loss(&p) - mean_sq / R as f64).abs() < 1e-12);
        }

        #[test]
        fn budget_gradient_is_constant(p in proptest::collection::vec(0.0f64..1.0, R)) {
            let g = budget_loss_grad(&p, 2.0);
            prop_assert!(g.iter().all(|v| *v == g[0]));
        }

        #[test]
        fn apply_profile_commutes_with_scaling(alpha in 0.01f64..1.0, seed in 0u64..50) {
            let f = frame(seed);
            let p = ArmProfile(std::array::from_fn(|i| 0.05 + 0.07 * i as f64));
            let scaled = f.with_data(f.data().mapv(|z| z * alpha));
            let a = apply_profile(&scaled, &p).unwrap();
            let b = apply_profile(&f, &p).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y * alpha).norm() <= 1e-15);
            }
        }
    }
}
