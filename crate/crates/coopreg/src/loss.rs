//! Loss terms and the combined cooperative objective
//! `Q = Loss(I_T, I_R) + alpha * |grad phi|^2 + beta * |phi - phi_hat|^2`.
//!
//! Every term is mean-normalized (not summed) so the weights transfer
//! across image sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{spatial_gradient, DisplacementField, Image};
use crate::tape;

/// Image matching loss selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    #[default]
    L2,
    Ncc,
}

/// Weights and options of the combined objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub matching: Matching,
    #[serde(default = "default_ncc_window")]
    pub ncc_window: usize,
}

pub(crate) fn default_ncc_window() -> usize {
    9
}

impl ObjectiveWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = ObjectiveWeights {
            alpha,
            beta,
            matching: Matching::L2,
            ncc_window: default_ncc_window(),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        if self.ncc_window % 2 == 0 || self.ncc_window < 3 {
            return Err(Error::InvalidArgument(format!(
                "ncc window must be odd and >= 3, got {}",
                self.ncc_window
            )));
        }
        Ok(())
    }
}

/// The evaluated objective, term by term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub matching: f64,
    pub smoothness: f64,
    pub cae_recon: f64,
}

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch(format!(
            "images are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean squared per-pixel difference between two images.
pub fn l2_image_loss(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = (a.height() * a.width()) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Local windowed normalized cross-correlation loss, `1 - mean(cc)` over
/// pixels, where cc is the squared windowed correlation with
/// epsilon-stabilized variances. Zero for perfectly (affinely) correlated
/// images, near one for unrelated ones.
pub fn ncc_loss(a: &Image, b: &Image, window: usize) -> Result<f64> {
    check_same_shape(a, b)?;
    if window % 2 == 0 || window < 3 {
        return Err(Error::InvalidArgument(format!(
            "ncc window must be odd and >= 3, got {window}"
        )));
    }
    Ok(tape::ncc_loss_value(
        &a.data().view(),
        &b.data().view(),
        window,
    ))
}

/// Mean over pixels of the squared Frobenius norm of the forward-difference
/// Jacobian from [`spatial_gradient`].
pub fn smoothness_penalty(field: &DisplacementField) -> f64 {
    let g = spatial_gradient(field);
    let n = (field.height() * field.width()) as f64;
    g.iter().map(|v| v * v).sum::<f64>() / n
}

/// Mean squared per-pixel-per-component difference between a field and its
/// autoencoder reconstruction.
pub fn field_mse(field: &DisplacementField, reconstruction: &DisplacementField) -> Result<f64> {
    if field.height() != reconstruction.height() || field.width() != reconstruction.width() {
        return Err(Error::ShapeMismatch(format!(
            "fields are {}x{} and {}x{}",
            field.height(),
            field.width(),
            reconstruction.height(),
            reconstruction.width()
        )));
    }
    let n = field.data().len() as f64;
    Ok(field
        .data()
        .iter()
        .zip(reconstruction.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Evaluates the full cooperative objective.
pub fn total_objective(
    target: &Image,
    registered: &Image,
    field: &DisplacementField,
    reconstruction: &DisplacementField,
    weights: &ObjectiveWeights,
) -> Result<ObjectiveValue> {
    weights.validate()?;
    check_same_shape(target, registered)?;
    if field.height() != target.height() || field.width() != target.width() {
        return Err(Error::ShapeMismatch(format!(
            "field is {}x{} but images are {}x{}",
            field.height(),
            field.width(),
            target.height(),
            target.width()
        )));
    }
    let matching = match weights.matching {
        Matching::L2 => l2_image_loss(target, registered)?,
        Matching::Ncc => ncc_loss(target, registered, weights.ncc_window)?,
    };
    let smoothness = smoothness_penalty(field);
    let cae_recon = field_mse(field, reconstruction)?;
    Ok(ObjectiveValue {
        total: matching + weights.alpha * smoothness + weights.beta * cae_recon,
        matching,
        smoothness,
        cae_recon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_error};
    use crate::tape::Tape;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3, ArrayD, IxDyn};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn l2_basics() {
        let a = rand_image(1, 16, 16);
        assert_eq!(l2_image_loss(&a, &a).unwrap(), 0.0);

        let zeros = Image::zeros(64, 64);
        let ones = Image::from_fn(64, 64, |_, _| 1.0).unwrap();
        assert_abs_diff_eq!(l2_image_loss(&zeros, &ones).unwrap(), 1.0, epsilon = 1e-15);

        let bad = Image::zeros(8, 9);
        assert!(l2_image_loss(&zeros, &bad).is_err());
    }

    #[test]
    fn ncc_perfect_and_affine_correlation() {
        let a = rand_image(2, 32, 32);
        let loss_self = ncc_loss(&a, &a, 9).unwrap();
        assert!(loss_self.abs() < 1e-3, "self-NCC loss {loss_self}");

        let b = Image::new(a.data().mapv(|v| 2.0 * v + 0.1)).unwrap();
        let loss_affine = ncc_loss(&a, &b, 9).unwrap();
        assert!(loss_affine.abs() < 1e-3, "affine-NCC loss {loss_affine}");
    }

    #[test]
    fn ncc_uncorrelated_images_near_one() {
        let a = rand_image(3, 64, 64);
        let b = rand_image(4, 64, 64);
        let loss = ncc_loss(&a, &b, 9).unwrap();
        assert!(loss > 0.9, "independent-noise NCC loss {loss}");
    }

    #[test]
    fn ncc_rejects_even_window() {
        let a = rand_image(5, 16, 16);
        assert!(ncc_loss(&a, &a, 8).is_err());
        assert!(ncc_loss(&a, &a, 1).is_err());
    }

    #[test]
    fn smoothness_basics() {
        let constant = DisplacementField::new(Array3::from_elem((5, 5, 2), 3.25)).unwrap();
        assert_eq!(smoothness_penalty(&constant), 0.0);

        // row-index field on 4x4: twelve unit differences over 16 pixels
        let field = DisplacementField::new(Array3::from_shape_fn((4, 4, 2), |(r, _, k)| {
            if k == 0 {
                r as f64
            } else {
                0.0
            }
        }))
        .unwrap();
        assert_abs_diff_eq!(smoothness_penalty(&field), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn smoothness_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = Array3::from_shape_fn((6, 7, 2), |_| rng.gen_range(-2.0..2.0));
        let field = DisplacementField::new(base.clone()).unwrap();
        let shifted = DisplacementField::new(base.mapv(|v| v + 11.5)).unwrap();
        assert_abs_diff_eq!(
            smoothness_penalty(&field),
            smoothness_penalty(&shifted),
            epsilon = 1e-10
        );
    }

    #[test]
    fn total_objective_composition() {
        let target = rand_image(7, 8, 8);
        let registered = rand_image(8, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field = DisplacementField::new(Array3::from_shape_fn((8, 8, 2), |_| {
            rng.gen_range(-1.0..1.0)
        }))
        .unwrap();
        let recon = DisplacementField::new(Array3::from_shape_fn((8, 8, 2), |_| {
            rng.gen_range(-1.0..1.0)
        }))
        .unwrap();

        // alpha = beta = 0 collapses to the matching term
        let w0 = ObjectiveWeights::new(0.0, 0.0).unwrap();
        let v0 = total_objective(&target, &registered, &field, &recon, &w0).unwrap();
        assert_eq!(v0.total, v0.matching);

        // perfect reconstruction zeroes the cae term
        let w = ObjectiveWeights::new(1.0, 8.0).unwrap();
        let v = total_objective(&target, &registered, &field, &field, &w).unwrap();
        assert_eq!(v.cae_recon, 0.0);

        // hand-compose the three reference terms
        let v = total_objective(&target, &registered, &field, &recon, &w).unwrap();
        let expect = l2_image_loss(&target, &registered).unwrap()
            + 1.0 * smoothness_penalty(&field)
            + 8.0 * field_mse(&field, &recon).unwrap();
        assert_abs_diff_eq!(v.total, expect, epsilon = 1e-12);
        assert!(v.matching >= 0.0 && v.smoothness >= 0.0 && v.cae_recon >= 0.0);
    }

    #[test]
    fn objective_gradients_wrt_field_and_recon_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let target = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |_| rng.gen_range(0.0..1.0));
        let registered = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |_| rng.gen_range(0.0..1.0));
        let field = ArrayD::from_shape_fn(IxDyn(&[2, 8, 8]), |_| rng.gen_range(-1.0..1.0));
        let recon = ArrayD::from_shape_fn(IxDyn(&[2, 8, 8]), |_| rng.gen_range(-1.0..1.0));
        let (alpha, beta) = (0.7, 5.0);

        let eval = |f: &ArrayD<f64>, r: &ArrayD<f64>| -> f64 {
            let mut tape = Tape::new();
            let t = tape.leaf(target.clone());
            let reg = tape.leaf(registered.clone());
            let fv = tape.leaf(f.clone());
            let rv = tape.leaf(r.clone());
            let matching = tape.mean_squared_diff(t, reg);
            let smooth = tape.smoothness(fv);
            let rec = tape.mean_squared_diff(fv, rv);
            let partial = tape.add_scaled(matching, smooth, alpha);
            let total = tape.add_scaled(partial, rec, beta);
            tape.scalar(total)
        };

        let mut tape = Tape::new();
        let t = tape.leaf(target.clone());
        let reg = tape.leaf(registered.clone());
        let fv = tape.leaf(field.clone());
        let rv = tape.leaf(recon.clone());
        let matching = tape.mean_squared_diff(t, reg);
        let smooth = tape.smoothness(fv);
        let rec = tape.mean_squared_diff(fv, rv);
        let partial = tape.add_scaled(matching, smooth, alpha);
        let total = tape.add_scaled(partial, rec, beta);
        let grads = tape.backward(total);

        let analytic_f = grads.get_or_zeros(fv, field.shape());
        let numeric_f = central_diff(&mut |x: &ArrayD<f64>| eval(x, &recon), &field, 1e-5);
        let err_f = max_rel_error(
            analytic_f.iter().copied().collect::<Vec<_>>().as_slice(),
            numeric_f.iter().copied().collect::<Vec<_>>().as_slice(),
        );
        assert!(err_f <= 1e-4, "field gradient rel error {err_f}");

        let analytic_r = grads.get_or_zeros(rv, recon.shape());
        let numeric_r = central_diff(&mut |x: &ArrayD<f64>| eval(&field, x), &recon, 1e-5);
        let err_r = max_rel_error(
            analytic_r.iter().copied().collect::<Vec<_>>().as_slice(),
            numeric_r.iter().copied().collect::<Vec<_>>().as_slice(),
        );
        assert!(err_r <= 1e-4, "recon gradient rel error {err_r}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn l2_is_symmetric(seed in 0u64..500) {
            let a = rand_image(seed, 12, 9);
            let b = rand_image(seed.wrapping_add(1), 12, 9);
            let ab = l2_image_loss(&a, &b).unwrap();
            let ba = l2_image_loss(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn objective_total_reconstructs_from_parts(
            seed in 0u64..500, alpha in 0.0f64..4.0, beta in 0.0f64..16.0
        ) {
            let target = rand_image(seed, 8, 8);
            let registered = rand_image(seed.wrapping_add(1), 8, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
            let field = DisplacementField::new(
                Array3::from_shape_fn((8, 8, 2), |_| rng.gen_range(-3.0..3.0))).unwrap();
            let recon = DisplacementField::new(
                Array3::from_shape_fn((8, 8, 2), |_| rng.gen_range(-3.0..3.0))).unwrap();
            let w = ObjectiveWeights { alpha, beta, matching: Matching::L2, ncc_window: 9 };
            let v = total_objective(&target, &registered, &field, &recon, &w).unwrap();
            let recombined = v.matching + alpha * v.smoothness + beta * v.cae_recon;
            prop_assert!((v.total - recombined).abs() <= 1e-12);
        }

        #[test]
        fn ncc_affine_invariance(seed in 0u64..200, scale in 0.2f64..4.0, offset in -0.5f64..0.5) {
            let a = rand_image(seed.wrapping_add(1000), 24, 24);
            let b = Image::new(a.data().mapv(|v| scale * v + offset)).unwrap();
            let loss = ncc_loss(&a, &b, 9).unwrap();
            prop_assert!(loss.abs() < 1e-3, "affine NCC loss {}", loss);
        }
    }
}
