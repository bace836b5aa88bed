//! Evaluation: Dice overlap, landmark transfer error, relative autoencoder
//! reconstruction error, post-hoc autoencoder fitting for baselines, and
//! rank correlation for the latent-space sweep.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{sample_field, Coordinate, DisplacementField, Image};
use crate::nets::{
    cae_forward, cae_forward_on_tape, field_to_tensor, init_cae, CaeConfig, CaeParams, TapeParams,
};
use crate::synth::RegistrationPair;
use crate::tape::Tape;
use crate::train::Adam;

/// Default foreground threshold for Dice on soft-rasterized images.
pub const DICE_THRESHOLD: f64 = 0.5;

/// Optimization budget of [`posthoc_ae_fit`], fixed for comparability
/// across methods.
pub const POSTHOC_ITERATIONS: usize = 5000;

/// One evaluation over a set of test pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dice_mean: f64,
    /// Mean landmark transfer error as a percentage of bump width.
    pub landmark_error_pct: f64,
    /// Autoencoder reconstruction error `|phi - phi_hat| / |phi|` in percent.
    pub ae_error_pct: f64,
    /// Mean wall-clock seconds per displacement-field forward pass.
    pub test_runtime_sec: f64,
    pub n_pairs: usize,
}

/// Dice coefficient `2|A on B| / (|A| + |B|)` of the thresholded foreground
/// sets. Two empty sets count as perfect overlap.
pub fn dice(a: &Image, b: &Image, threshold: f64) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch(format!(
            "images are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let fa = *x > threshold;
        let fb = *y > threshold;
        na += fa as usize;
        nb += fb as usize;
        inter += (fa && fb) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mean landmark transfer error as a percentage of bump width.
///
/// Under backward warping, target-grid point `x` corresponds to source
/// point `x + phi(x)`; each target landmark is mapped through the
/// bilinearly interpolated field and compared with the true source
/// landmark.
pub fn landmark_error(
    field: &DisplacementField,
    pair: &RegistrationPair,
    bump_width: f64,
) -> Result<f64> {
    if pair.source.landmarks.len() != pair.target.landmarks.len() {
        return Err(Error::InvalidArgument(
            "source and target landmark counts differ".into(),
        ));
    }
    if bump_width <= 0.0 {
        return Err(Error::InvalidArgument("bump_width must be positive".into()));
    }
    let (h, w) = (field.height() as f64, field.width() as f64);
    let mut total = 0.0;
    for (l_t, l_s) in pair.target.landmarks.iter().zip(&pair.source.landmarks) {
        if l_t.row < 0.0 || l_t.row > h - 1.0 || l_t.col < 0.0 || l_t.col > w - 1.0 {
            return Err(Error::InvalidArgument(format!(
                "landmark ({}, {}) lies outside the image",
                l_t.row, l_t.col
            )));
        }
        let (dr, dc) = sample_field(field, *l_t)?;
        let predicted = Coordinate::new(l_t.row + dr, l_t.col + dc);
        total += predicted.distance(l_s);
    }
    Ok(total / pair.target.landmarks.len() as f64 / bump_width * 100.0)
}

/// Mean over pairs of `|phi - phi_hat| / |phi|` in percent (Euclidean norms
/// over all pixels and components). Zero-norm fields are excluded with a
/// warning; an all-zero set is an error.
pub fn ae_relative_error(
    fields: &[DisplacementField],
    reconstructions: &[DisplacementField],
) -> Result<f64> {
    if fields.len() != reconstructions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} fields but {} reconstructions",
            fields.len(),
            reconstructions.len()
        )));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for (f, r) in fields.iter().zip(reconstructions) {
        let norm = f.norm();
        if norm == 0.0 {
            skipped += 1;
            continue;
        }
        let diff: f64 = f
            .data()
            .iter()
            .zip(r.data().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        total += diff / norm;
        counted += 1;
    }
    if skipped > 0 {
        eprintln!("warning: excluded {skipped} zero-norm field(s) from the AE error mean");
    }
    if counted == 0 {
        return Err(Error::InvalidArgument(
            "every field has zero norm; relative error undefined".into(),
        ));
    }
    Ok(total / counted as f64 * 100.0)
}

/// Trains a fresh bottleneck autoencoder on the given displacement fields
/// (mean squared reconstruction loss, Adam with the training-module
/// defaults, [`POSTHOC_ITERATIONS`] iterations) and reports the relative
/// reconstruction error on the same set.
pub fn posthoc_ae_fit(
    fields: &[DisplacementField],
    h: usize,
    seed: u64,
) -> Result<(CaeParams, f64)> {
    if fields.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one field to fit an autoencoder".into(),
        ));
    }
    let size = fields[0].height();
    if fields
        .iter()
        .any(|f| f.height() != size || f.width() != size)
    {
        return Err(Error::ShapeMismatch(
            "all fields must share one square size".into(),
        ));
    }
    let config = CaeConfig {
        h,
        input_size: size,
        ..CaeConfig::default()
    };
    let mut params = init_cae(&config, seed)?;
    let mut sampler = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let batch_size = 16usize;
    let lr = 1e-4;

    let tensors: Vec<ArrayD<f64>> = fields.iter().map(field_to_tensor).collect();
    let param_refs: Vec<&ArrayD<f64>> = params.set.values().iter().collect();
    let mut adam = Adam::new(lr, &param_refs);

    for it in 0..POSTHOC_ITERATIONS {
        let batch: Vec<usize> = (0..batch_size)
            .map(|_| sampler.gen_range(0..tensors.len()))
            .collect();
        let passes: Vec<(f64, Vec<ArrayD<f64>>)> = batch
            .par_iter()
            .map(|&fi| {
                let mut tape = Tape::new();
                let tc = TapeParams::register(&mut tape, &params.set);
                let input = tape.leaf(tensors[fi].clone());
                let (_, recon) = cae_forward_on_tape(&mut tape, &tc, &config, input);
                let loss = tape.mean_squared_diff(recon, input);
                let grads = tape.backward(loss);
                let g = tc
                    .vars()
                    .iter()
                    .zip(params.set.values())
                    .map(|(v, val)| grads.get_or_zeros(*v, val.shape()))
                    .collect();
                (tape.scalar(loss), g)
            })
            .collect();

        let mean_loss = passes.iter().map(|(l, _)| l).sum::<f64>() / batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged {
                term: "posthoc reconstruction".into(),
                iteration: it,
            });
        }
        let mut grads = Vec::with_capacity(params.set.len());
        for i in 0..params.set.len() {
            let mut acc = ArrayD::zeros(params.set.values()[i].raw_dim());
            for (_, g) in &passes {
                acc += &g[i];
            }
            acc.mapv_inplace(|v| v / batch_size as f64);
            grads.push(acc);
        }
        adam.step(params.set.values_mut().iter_mut().collect(), &grads);
    }

    if !params.set.all_finite() {
        return Err(Error::Diverged {
            term: "posthoc parameters".into(),
            iteration: POSTHOC_ITERATIONS,
        });
    }

    let recons: Vec<DisplacementField> = fields
        .par_iter()
        .map(|f| cae_forward(&params, f).map(|(_, r)| r))
        .collect::<Result<_>>()?;
    let err = ae_relative_error(fields, &recons)?;
    Ok((params, err))
}

/// Spearman rank correlation (ties get average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rx = ranks(x);
    let ry = ranks(y);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_linear_boxbump, linear_bump_column, BUMP_WIDTH};
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(h: usize, w: usize, r0: usize, c0: usize, side: usize) -> Image {
        Image::from_fn(h, w, |r, c| {
            if (r0..r0 + side).contains(&r) && (c0..c0 + side).contains(&c) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap()
    }

    #[test]
    fn dice_basics() {
        let a = square(20, 20, 5, 5, 10);
        assert_eq!(dice(&a, &a, DICE_THRESHOLD).unwrap(), 1.0);

        let b = square(20, 20, 5, 10, 10);
        // 10x10 squares overlapping in 5 columns: 2*50 / 200
        assert_abs_diff_eq!(dice(&a, &b, DICE_THRESHOLD).unwrap(), 0.5, epsilon = 1e-15);

        let far = square(20, 20, 0, 0, 3);
        let far2 = square(20, 20, 10, 10, 3);
        assert_eq!(dice(&far, &far2, DICE_THRESHOLD).unwrap(), 0.0);

        let empty = Image::zeros(20, 20);
        assert_eq!(dice(&empty, &empty, DICE_THRESHOLD).unwrap(), 1.0);

        assert!(dice(&a, &Image::zeros(10, 10), DICE_THRESHOLD).is_err());
    }

    #[test]
    fn dice_is_symmetric_and_maximal_iff_equal_sets() {
        let a = square(16, 16, 2, 2, 6);
        let b = square(16, 16, 2, 3, 6);
        assert_eq!(
            dice(&a, &b, DICE_THRESHOLD).unwrap(),
            dice(&b, &a, DICE_THRESHOLD).unwrap()
        );
        assert!(dice(&a, &b, DICE_THRESHOLD).unwrap() < 1.0);
    }

    #[test]
    fn landmark_error_identity_pair_is_zero() {
        let s = make_linear_boxbump(0.5).unwrap();
        let pair = RegistrationPair {
            source: s.clone(),
            target: s,
        };
        let field = DisplacementField::zeros(64, 64);
        assert_eq!(landmark_error(&field, &pair, BUMP_WIDTH).unwrap(), 0.0);
    }

    #[test]
    fn landmark_error_zero_for_ground_truth_shift() {
        let source = make_linear_boxbump(0.25).unwrap();
        let target = make_linear_boxbump(0.75).unwrap();
        let shift = linear_bump_column(0.25) - linear_bump_column(0.75);
        // the bump landmarks move by exactly `shift` columns; build the
        // field that transports target bump landmarks onto source ones
        let field = DisplacementField::new(Array3::from_shape_fn((64, 64, 2), |(_, _, k)| {
            if k == 1 {
                shift
            } else {
                0.0
            }
        }))
        .unwrap();
        let pair = RegistrationPair {
            source: source.clone(),
            target,
        };
        // only the three bump landmarks move; corners have zero true
        // displacement, so the uniform field misplaces them by |shift|
        let err = landmark_error(&field, &pair, BUMP_WIDTH).unwrap();
        let expect = 4.0 / 7.0 * shift.abs() / BUMP_WIDTH * 100.0;
        assert_abs_diff_eq!(err, expect, epsilon = 1e-9);

        // restricting to the bump-only landmarks gives exactly zero
        let bump_pair = RegistrationPair {
            source: crate::synth::ShapeSample {
                landmarks: source.landmarks[..3].to_vec(),
                ..source.clone()
            },
            target: crate::synth::ShapeSample {
                landmarks: pair.target.landmarks[..3].to_vec(),
                ..pair.target.clone()
            },
        };
        assert_abs_diff_eq!(
            landmark_error(&field, &bump_pair, BUMP_WIDTH).unwrap(),
            0.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn landmark_error_identity_field_with_one_bump_width_offset() {
        // c(t): offset of one bump width (10 px) between t = 0 and t = 0.3125
        let source = make_linear_boxbump(0.0).unwrap();
        let target = make_linear_boxbump(0.3125).unwrap();
        assert_abs_diff_eq!(
            linear_bump_column(0.3125) - linear_bump_column(0.0),
            BUMP_WIDTH,
            epsilon = 1e-12
        );
        let pair = RegistrationPair { source, target };
        let field = DisplacementField::zeros(64, 64);
        // three bump landmarks at 100% each, four corners at 0%
        let err = landmark_error(&field, &pair, BUMP_WIDTH).unwrap();
        assert_abs_diff_eq!(err, 300.0 / 7.0, epsilon = 1e-9);
    }

    #[test]
    fn landmark_outside_image_is_rejected() {
        let mut s = make_linear_boxbump(0.5).unwrap();
        s.landmarks[0] = Coordinate::new(-2.0, 5.0);
        let pair = RegistrationPair {
            source: s.clone(),
            target: s,
        };
        let field = DisplacementField::zeros(64, 64);
        assert!(landmark_error(&field, &pair, BUMP_WIDTH).is_err());
    }

    #[test]
    fn ae_relative_error_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fields: Vec<DisplacementField> = (0..3)
            .map(|_| {
                DisplacementField::new(Array3::from_shape_fn((4, 4, 2), |_| {
                    rng.gen_range(-1.0..1.0)
                }))
                .unwrap()
            })
            .collect();
        assert_abs_diff_eq!(
            ae_relative_error(&fields, &fields.clone()).unwrap(),
            0.0,
            epsilon = 1e-15
        );

        let zeros: Vec<DisplacementField> =
            fields.iter().map(|_| DisplacementField::zeros(4, 4)).collect();
        assert_abs_diff_eq!(
            ae_relative_error(&fields, &zeros).unwrap(),
            100.0,
            epsilon = 1e-9
        );

        // hand-computed 2x2x2 single pair
        let f = DisplacementField::new(
            Array3::from_shape_vec((2, 2, 2), vec![1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0])
                .unwrap(),
        )
        .unwrap();
        let r = DisplacementField::new(
            Array3::from_shape_vec((2, 2, 2), vec![0.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 0.0])
                .unwrap(),
        )
        .unwrap();
        // |f - r| = sqrt(2), |f| = sqrt(10)
        let expect = (2.0f64 / 10.0).sqrt() * 100.0;
        assert_abs_diff_eq!(
            ae_relative_error(&[f], &[r]).unwrap(),
            expect,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ae_relative_error_excludes_zero_norm_fields() {
        let nonzero = DisplacementField::new(Array3::from_elem((4, 4, 2), 1.0)).unwrap();
        let zero = DisplacementField::zeros(4, 4);
        let err = ae_relative_error(
            &[zero.clone(), nonzero.clone()],
            &[zero.clone(), zero.clone()],
        )
        .unwrap();
        assert_abs_diff_eq!(err, 100.0, epsilon = 1e-12);

        assert!(ae_relative_error(&[zero.clone()], &[zero]).is_err());
    }

    #[test]
    fn posthoc_fit_learns_a_constant_field_set() {
        // identical small constant fields are representable at any h
        let field = DisplacementField::new(Array3::from_shape_fn((16, 16, 2), |(_, _, k)| {
            if k == 0 {
                0.3
            } else {
                -0.2
            }
        }))
        .unwrap();
        let fields = vec![field; 8];
        let (_, err) = posthoc_ae_fit(&fields, 1, 7).unwrap();
        assert!(err >= 0.0);
        assert!(err <= 5.0, "constant-field fit error {err}%");
    }

    #[test]
    fn posthoc_fit_error_shrinks_with_wider_bottleneck() {
        // a three-mode family of smooth fields; h = 16 must do at least as
        // well as h = 1 up to 2% slack
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fields: Vec<DisplacementField> = (0..24)
            .map(|_| {
                let (a, b, c) = (
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                DisplacementField::new(Array3::from_shape_fn((16, 16, 2), |(r, col, k)| {
                    let (x, y) = (r as f64 / 15.0, col as f64 / 15.0);
                    if k == 0 {
                        a * (std::f64::consts::PI * x).sin() + b * y
                    } else {
                        c * (std::f64::consts::PI * y).cos() + a * x * y
                    }
                }))
                .unwrap()
            })
            .collect();
        let (_, err1) = posthoc_ae_fit(&fields, 1, 3).unwrap();
        let (_, err16) = posthoc_ae_fit(&fields, 16, 3).unwrap();
        assert!(
            err16 <= err1 + 2.0,
            "h=16 error {err16}% vs h=1 error {err1}%"
        );
    }

    #[test]
    fn spearman_detects_monotone_relations() {
        let x: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| (v * 0.3).exp()).collect();
        assert_abs_diff_eq!(spearman(&x, &y), 1.0, epsilon = 1e-12);
        let y_rev: Vec<f64> = x.iter().map(|v| -(v * 0.1).sinh()).collect();
        assert_abs_diff_eq!(spearman(&x, &y_rev), -1.0, epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ae_error_is_scale_invariant(seed in 0u64..300, scale in prop::sample::select(
            vec![-3.0f64, -0.5, 0.25, 2.0, 10.0])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = DisplacementField::new(
                Array3::from_shape_fn((5, 5, 2), |_| rng.gen_range(-2.0..2.0))).unwrap();
            let r = DisplacementField::new(
                Array3::from_shape_fn((5, 5, 2), |_| rng.gen_range(-2.0..2.0))).unwrap();
            let base = ae_relative_error(&[f.clone()], &[r.clone()]).unwrap();
            let fs = DisplacementField::new(f.data().mapv(|v| v * scale)).unwrap();
            let rs = DisplacementField::new(r.data().mapv(|v| v * scale)).unwrap();
            let scaled = ae_relative_error(&[fs], &[rs]).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }
    }
}
