//! Grid and displacement-field mathematics: bilinear sampling, backward
//! warping (the spatial transform unit), finite-difference gradients, and
//! signed-distance conversion.
//!
//! All functions here are pure; they can be called concurrently.

use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};

/// A 2D scalar image, row-major, `H x W`.
///
/// Intensities are conventionally in `[0, 1]` but only finiteness is
/// enforced; loss functions and warping work on arbitrary finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array2<f64>,
}

impl Image {
    /// Validates and wraps an `H x W` array. Requires `H, W >= 2` and all
    /// values finite.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (h, w) = data.dim();
        if h < 2 || w < 2 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 2x2, got {h}x{w}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "image contains non-finite values".into(),
            ));
        }
        Ok(Image { data })
    }

    /// Builds an image by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        Image::new(Array2::from_shape_fn((height, width), |(r, c)| f(r, c)))
    }

    /// All-zero image.
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A per-pixel displacement field `H x W x 2` in pixel units.
///
/// Component order is (row-offset, col-offset). Fields follow the backward
/// warping convention: the registered image samples the source at
/// `x + field(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    data: Array3<f64>,
}

impl DisplacementField {
    /// Validates and wraps an `H x W x 2` array of finite displacements.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 2 {
            return Err(Error::ShapeMismatch(format!(
                "displacement field must have 2 components, got {c}"
            )));
        }
        if h < 2 || w < 2 {
            return Err(Error::InvalidArgument(format!(
                "field must be at least 2x2, got {h}x{w}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "field contains non-finite values".into(),
            ));
        }
        Ok(DisplacementField { data })
    }

    /// The identity (all-zero) field.
    pub fn zeros(height: usize, width: usize) -> Self {
        DisplacementField {
            data: Array3::zeros((height, width, 2)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// Euclidean norm over all pixels and components.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Continuous pixel coordinate; (0, 0) is the center of the top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate {
    pub row: f64,
    pub col: f64,
}

impl Coordinate {
    pub fn new(row: f64, col: f64) -> Self {
        Coordinate { row, col }
    }

    pub fn is_finite(&self) -> bool {
        self.row.is_finite() && self.col.is_finite()
    }

    pub fn distance(&self, other: &Coordinate) -> f64 {
        ((self.row - other.row).powi(2) + (self.col - other.col).powi(2)).sqrt()
    }
}

/// Bilinear sample with border clamping on a raw array. Coordinates outside
/// `[0, H-1] x [0, W-1]` are clamped to the boundary before interpolation.
pub(crate) fn sample_clamped(data: &Array2<f64>, row: f64, col: f64) -> f64 {
    let (h, w) = data.dim();
    let r = row.clamp(0.0, (h - 1) as f64);
    let c = col.clamp(0.0, (w - 1) as f64);
    let r0 = (r.floor() as usize).min(h - 2);
    let c0 = (c.floor() as usize).min(w - 2);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let v00 = data[[r0, c0]];
    let v01 = data[[r0, c0 + 1]];
    let v10 = data[[r0 + 1, c0]];
    let v11 = data[[r0 + 1, c0 + 1]];
    v00 * (1.0 - fr) * (1.0 - fc) + v01 * (1.0 - fr) * fc + v10 * fr * (1.0 - fc) + v11 * fr * fc
}

/// Bilinearly interpolates both components of a displacement field at a
/// continuous point, with the same border clamping as [`bilinear_sample`].
pub fn sample_field(field: &DisplacementField, point: Coordinate) -> Result<(f64, f64)> {
    if !point.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sample point must be finite, got ({}, {})",
            point.row, point.col
        )));
    }
    let (h, w, _) = field.data.dim();
    let r = point.row.clamp(0.0, (h - 1) as f64);
    let c = point.col.clamp(0.0, (w - 1) as f64);
    let r0 = (r.floor() as usize).min(h - 2);
    let c0 = (c.floor() as usize).min(w - 2);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let mut out = [0.0; 2];
    for (k, val) in out.iter_mut().enumerate() {
        *val = field.data[[r0, c0, k]] * (1.0 - fr) * (1.0 - fc)
            + field.data[[r0, c0 + 1, k]] * (1.0 - fr) * fc
            + field.data[[r0 + 1, c0, k]] * fr * (1.0 - fc)
            + field.data[[r0 + 1, c0 + 1, k]] * fr * fc;
    }
    Ok((out[0], out[1]))
}

/// Bilinearly samples `image` at a continuous point with border clamping.
///
/// Grid points return the pixel value exactly; out-of-range coordinates are
/// clamped to the image boundary before interpolation.
pub fn bilinear_sample(image: &Image, point: Coordinate) -> Result<f64> {
    if !point.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sample point must be finite, got ({}, {})",
            point.row, point.col
        )));
    }
    Ok(sample_clamped(&image.data, point.row, point.col))
}

/// Backward-warps `image` by `field`: `output(x) = image(x + field(x))`
/// with bilinear interpolation and border clamping.
pub fn warp_image(image: &Image, field: &DisplacementField) -> Result<Image> {
    if image.height() != field.height() || image.width() != field.width() {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{} but field is {}x{}",
            image.height(),
            image.width(),
            field.height(),
            field.width()
        )));
    }
    let (h, w) = image.data.dim();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let pr = r as f64 + field.data[[r, c, 0]];
            let pc = c as f64 + field.data[[r, c, 1]];
            out[[r, c]] = sample_clamped(&image.data, pr, pc);
        }
    }
    Ok(Image { data: out })
}

/// Forward finite differences of a field, `H x W x 2 x 2`.
///
/// `out[r, c, comp, axis]` is the difference of component `comp` along
/// `axis` (0 = rows, 1 = cols). The last row/column along each axis uses
/// difference 0 (replicated boundary).
pub fn spatial_gradient(field: &DisplacementField) -> Array4<f64> {
    let (h, w, _) = field.data.dim();
    let mut grad = Array4::zeros((h, w, 2, 2));
    for r in 0..h {
        for c in 0..w {
            for comp in 0..2 {
                if r + 1 < h {
                    grad[[r, c, comp, 0]] = field.data[[r + 1, c, comp]] - field.data[[r, c, comp]];
                }
                if c + 1 < w {
                    grad[[r, c, comp, 1]] = field.data[[r, c + 1, comp]] - field.data[[r, c, comp]];
                }
            }
        }
    }
    grad
}

/// Clip radius, in pixels, for [`to_signed_distance`].
pub const SIGNED_DISTANCE_CLIP: f64 = 10.0;

/// Converts a (soft) binary image into a clipped, rescaled signed distance
/// transform.
///
/// Pixels above `threshold` are foreground. The boundary is the set of
/// foreground pixels with a background 4-neighbor (pixels outside the image
/// count as background). Each pixel gets the exact Euclidean distance to the
/// nearest boundary pixel, negated inside the shape, clipped to
/// `[-SIGNED_DISTANCE_CLIP, SIGNED_DISTANCE_CLIP]` and rescaled to `[0, 1]`,
/// so boundary pixels map to 0.5.
pub fn to_signed_distance(binary: &Image, threshold: f64) -> Result<Image> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let (h, w) = binary.data.dim();
    let fg = binary.data.mapv(|v| v > threshold);

    let mut boundary = Array2::from_elem((h, w), false);
    let mut any_boundary = false;
    for r in 0..h {
        for c in 0..w {
            if !fg[[r, c]] {
                continue;
            }
            let edge = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            let has_bg_neighbor = edge
                || !fg[[r - 1, c]]
                || !fg[[r + 1, c]]
                || !fg[[r, c - 1]]
                || !fg[[r, c + 1]];
            if has_bg_neighbor {
                boundary[[r, c]] = true;
                any_boundary = true;
            }
        }
    }
    if !any_boundary {
        return Err(Error::NoBoundary);
    }

    let sq = squared_edt(&boundary);
    let d = SIGNED_DISTANCE_CLIP;
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut dist = sq[[r, c]].sqrt();
            if fg[[r, c]] {
                dist = -dist;
            }
            out[[r, c]] = (dist.clamp(-d, d) + d) / (2.0 * d);
        }
    }
    Ok(Image { data: out })
}

/// Exact squared Euclidean distance to the nearest `true` site, computed by
/// the two-pass (rows, then columns) lower-envelope-of-parabolas transform.
fn squared_edt(sites: &Array2<bool>) -> Array2<f64> {
    let (h, w) = sites.dim();
    let inf = f64::INFINITY;

    let mut rowpass = Array2::from_elem((h, w), inf);
    for r in 0..h {
        let f: Vec<f64> = (0..w).map(|c| if sites[[r, c]] { 0.0 } else { inf }).collect();
        let d = edt_1d(&f);
        for c in 0..w {
            rowpass[[r, c]] = d[c];
        }
    }

    let mut out = Array2::from_elem((h, w), inf);
    for c in 0..w {
        let f: Vec<f64> = (0..h).map(|r| rowpass[[r, c]]).collect();
        let d = edt_1d(&f);
        for r in 0..h {
            out[[r, c]] = d[r];
        }
    }
    out
}

/// 1-D squared distance transform of a sampled function (Felzenszwalb-
/// Huttenlocher lower envelope).
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n]; // parabola sites
    let mut z = vec![0.0f64; n + 1]; // envelope boundaries
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;

    let sq = |x: f64| x * x;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            if f[p].is_infinite() {
                // first finite parabola
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            let s = ((f[q] + sq(q as f64)) - (f[p] + sq(p as f64))) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }

    let mut out = vec![f64::INFINITY; n];
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out[q] = if f[p].is_infinite() {
            f64::INFINITY
        } else {
            sq(q as f64 - p as f64) + f[p]
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quad_image() -> Image {
        Image::new(array![[0.0, 1.0], [2.0, 3.0]]).unwrap()
    }

    /// Naive per-pixel double-loop bilinear warp used as the independent
    /// oracle for `warp_image`.
    fn warp_oracle(image: &Image, field: &DisplacementField) -> Array2<f64> {
        let (h, w) = image.data().dim();
        let mut out = Array2::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let pr = (r as f64 + field.data()[[r, c, 0]]).clamp(0.0, (h - 1) as f64);
                let pc = (c as f64 + field.data()[[r, c, 1]]).clamp(0.0, (w - 1) as f64);
                let r0 = (pr.floor() as usize).min(h - 2);
                let c0 = (pc.floor() as usize).min(w - 2);
                let fr = pr - r0 as f64;
                let fc = pc - c0 as f64;
                let mut acc = 0.0;
                for (dr, wr) in [(0usize, 1.0 - fr), (1usize, fr)] {
                    for (dc, wc) in [(0usize, 1.0 - fc), (1usize, fc)] {
                        acc += wr * wc * image.data()[[r0 + dr, c0 + dc]];
                    }
                }
                out[[r, c]] = acc;
            }
        }
        out
    }

    #[test]
    fn bilinear_at_grid_point_returns_pixel() {
        let img = quad_image();
        assert_eq!(bilinear_sample(&img, Coordinate::new(0.0, 0.0)).unwrap(), 0.0);
        assert_eq!(bilinear_sample(&img, Coordinate::new(1.0, 1.0)).unwrap(), 3.0);
    }

    #[test]
    fn bilinear_at_cell_center() {
        // (0+1+2+3)/4
        let img = quad_image();
        let v = bilinear_sample(&img, Coordinate::new(0.5, 0.5)).unwrap();
        assert_abs_diff_eq!(v, 1.5, epsilon = 1e-15);
    }

    #[test]
    fn bilinear_clamps_out_of_range() {
        let img = quad_image();
        assert_eq!(bilinear_sample(&img, Coordinate::new(-5.0, 0.0)).unwrap(), 0.0);
        assert_eq!(bilinear_sample(&img, Coordinate::new(7.0, 9.0)).unwrap(), 3.0);
    }

    #[test]
    fn bilinear_rejects_non_finite_point() {
        let img = quad_image();
        assert!(bilinear_sample(&img, Coordinate::new(f64::NAN, 0.0)).is_err());
        assert!(bilinear_sample(&img, Coordinate::new(0.0, f64::INFINITY)).is_err());
    }

    #[test]
    fn warp_with_zero_field_is_identity() {
        let img = Image::from_fn(5, 7, |r, c| (r * 7 + c) as f64 / 34.0).unwrap();
        let warped = warp_image(&img, &DisplacementField::zeros(5, 7)).unwrap();
        assert_eq!(warped.data(), img.data());
    }

    #[test]
    fn warp_of_constant_image_is_constant() {
        let img = Image::from_fn(6, 6, |_, _| 0.7).unwrap();
        let field = DisplacementField::new(Array3::from_shape_fn((6, 6, 2), |(r, c, k)| {
            ((r + 2 * c + k) as f64 * 0.37).sin() * 3.0
        }))
        .unwrap();
        let warped = warp_image(&img, &field).unwrap();
        for v in warped.data() {
            assert_abs_diff_eq!(*v, 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn warp_shifts_ramp_left_with_clamped_last_column() {
        // Ramp over columns; uniform (0, 1) field samples one column to the
        // right, so content shifts left and the last column clamps.
        let img = Image::from_fn(4, 4, |_, c| c as f64).unwrap();
        let field = DisplacementField::new(Array3::from_shape_fn((4, 4, 2), |(_, _, k)| {
            if k == 1 {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let warped = warp_image(&img, &field).unwrap();
        let expect = warp_oracle(&img, &field);
        assert_eq!(warped.data(), &expect);
        for r in 0..4 {
            assert_eq!(warped.data()[[r, 0]], 1.0);
            assert_eq!(warped.data()[[r, 2]], 3.0);
            // last column clamps to column 3
            assert_eq!(warped.data()[[r, 3]], 3.0);
        }
    }

    #[test]
    fn warp_rejects_shape_mismatch() {
        let img = Image::zeros(4, 4);
        let field = DisplacementField::zeros(4, 5);
        assert!(matches!(
            warp_image(&img, &field),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn warp_matches_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let img =
                Image::new(Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0))).unwrap();
            let field = DisplacementField::new(Array3::from_shape_fn((8, 8, 2), |_| {
                rng.gen_range(-10.0..10.0)
            }))
            .unwrap();
            let warped = warp_image(&img, &field).unwrap();
            let oracle = warp_oracle(&img, &field);
            for (a, b) in warped.data().iter().zip(oracle.iter()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gradient_of_constant_field_is_zero() {
        let field = DisplacementField::new(Array3::from_elem((5, 5, 2), 2.5)).unwrap();
        let g = spatial_gradient(&field);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_of_row_index_field() {
        let field =
            DisplacementField::new(Array3::from_shape_fn((4, 4, 2), |(r, _, k)| {
                if k == 0 {
                    r as f64
                } else {
                    0.0
                }
            }))
            .unwrap();
        let g = spatial_gradient(&field);
        for r in 0..4 {
            for c in 0..4 {
                let expect = if r < 3 { 1.0 } else { 0.0 };
                assert_eq!(g[[r, c, 0, 0]], expect);
                assert_eq!(g[[r, c, 0, 1]], 0.0);
                assert_eq!(g[[r, c, 1, 0]], 0.0);
                assert_eq!(g[[r, c, 1, 1]], 0.0);
            }
        }
    }

    #[test]
    fn gradient_of_2x2_field_enumerated() {
        // component 0 laid out as [[a, b], [c, d]]
        let (a, b, c, d) = (0.3, -1.2, 2.0, 0.5);
        let mut data = Array3::zeros((2, 2, 2));
        data[[0, 0, 0]] = a;
        data[[0, 1, 0]] = b;
        data[[1, 0, 0]] = c;
        data[[1, 1, 0]] = d;
        let g = spatial_gradient(&DisplacementField::new(data).unwrap());
        assert_abs_diff_eq!(g[[0, 0, 0, 0]], c - a, epsilon = 1e-15);
        assert_abs_diff_eq!(g[[0, 0, 0, 1]], b - a, epsilon = 1e-15);
        assert_abs_diff_eq!(g[[0, 1, 0, 0]], d - b, epsilon = 1e-15);
        assert_abs_diff_eq!(g[[1, 0, 0, 1]], d - c, epsilon = 1e-15);
        // replicated boundary: zero difference on last row/col
        assert_eq!(g[[1, 0, 0, 0]], 0.0);
        assert_eq!(g[[0, 1, 0, 1]], 0.0);
        assert_eq!(g[[1, 1, 0, 0]], 0.0);
        assert_eq!(g[[1, 1, 0, 1]], 0.0);
    }

    #[test]
    fn gradient_of_affine_field_is_constant_in_interior() {
        let field = DisplacementField::new(Array3::from_shape_fn((7, 9, 2), |(r, c, k)| {
            let (r, c) = (r as f64, c as f64);
            if k == 0 {
                0.5 * r - 0.25 * c + 1.0
            } else {
                -0.75 * r + 2.0 * c
            }
        }))
        .unwrap();
        let g = spatial_gradient(&field);
        for r in 0..6 {
            for c in 0..8 {
                assert_abs_diff_eq!(g[[r, c, 0, 0]], 0.5, epsilon = 1e-12);
                assert_abs_diff_eq!(g[[r, c, 0, 1]], -0.25, epsilon = 1e-12);
                assert_abs_diff_eq!(g[[r, c, 1, 0]], -0.75, epsilon = 1e-12);
                assert_abs_diff_eq!(g[[r, c, 1, 1]], 2.0, epsilon = 1e-12);
            }
        }
    }

    /// Brute-force signed distance: min distance over all boundary pixels.
    fn sdt_oracle(fg: &Array2<bool>) -> Array2<f64> {
        let (h, w) = fg.dim();
        let mut boundary = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !fg[[r, c]] {
                    continue;
                }
                let edge = r == 0 || c == 0 || r == h - 1 || c == w - 1;
                if edge
                    || !fg[[r - 1, c]]
                    || !fg[[r + 1, c]]
                    || !fg[[r, c - 1]]
                    || !fg[[r, c + 1]]
                {
                    boundary.push((r as f64, c as f64));
                }
            }
        }
        Array2::from_shape_fn((h, w), |(r, c)| {
            let d = boundary
                .iter()
                .map(|&(br, bc)| ((r as f64 - br).powi(2) + (c as f64 - bc).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            if fg[[r, c]] {
                -d
            } else {
                d
            }
        })
    }

    #[test]
    fn signed_distance_matches_brute_force_on_disk() {
        let (h, w) = (32, 32);
        let img = Image::from_fn(h, w, |r, c| {
            let d = ((r as f64 - 16.0).powi(2) + (c as f64 - 16.0).powi(2)).sqrt();
            if d <= 9.0 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let sdt = to_signed_distance(&img, 0.5).unwrap();
        let fg = img.data().mapv(|v| v > 0.5);
        let oracle = sdt_oracle(&fg);
        let clip = SIGNED_DISTANCE_CLIP;
        for r in 0..h {
            for c in 0..w {
                let expect = (oracle[[r, c]].clamp(-clip, clip) + clip) / (2.0 * clip);
                assert_abs_diff_eq!(sdt.data()[[r, c]], expect, epsilon = 1e-9);
            }
        }
        // boundary pixels sit at the midpoint of the rescaled range
        assert_abs_diff_eq!(sdt.data()[[16, 25]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn signed_distance_three_inside_a_straight_edge() {
        // away from corners the nearest boundary pixel of a rectangle lies
        // straight up: a pixel 3 rows inside maps to (-3 + 10) / 20
        let img = Image::from_fn(32, 32, |r, c| {
            if (6..26).contains(&r) && (6..26).contains(&c) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let sdt = to_signed_distance(&img, 0.5).unwrap();
        assert_abs_diff_eq!(sdt.data()[[9, 16]], 0.35, epsilon = 1e-12);
        // and 3 outside maps to (3 + 10) / 20
        assert_abs_diff_eq!(sdt.data()[[3, 16]], 0.65, epsilon = 1e-12);
    }

    #[test]
    fn signed_distance_errors_without_boundary() {
        let ones = Image::from_fn(8, 8, |_, _| 1.0).unwrap();
        // an all-ones image still has edge pixels adjacent to the outside,
        // which count as background, so use the genuinely degenerate case
        let zeros = Image::zeros(8, 8);
        assert!(matches!(
            to_signed_distance(&zeros, 0.5),
            Err(Error::NoBoundary)
        ));
        // all-foreground has a boundary only because the image edge counts
        // as background; the interior is still negative
        let sdt = to_signed_distance(&ones, 0.5).unwrap();
        assert!(sdt.data()[[4, 4]] < 0.5);
    }

    #[test]
    fn signed_distance_rejects_bad_threshold() {
        let img = Image::zeros(4, 4);
        assert!(to_signed_distance(&img, 0.0).is_err());
        assert!(to_signed_distance(&img, 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn warp_identity_is_exact(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Image::new(Array2::from_shape_fn((6, 5), |_| rng.gen_range(-2.0..2.0))).unwrap();
            let warped = warp_image(&img, &DisplacementField::zeros(6, 5)).unwrap();
            prop_assert_eq!(warped.data(), img.data());
        }

        #[test]
        fn warp_preserves_value_range(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(77));
            let img = Image::new(Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0))).unwrap();
            let field = DisplacementField::new(
                Array3::from_shape_fn((8, 8, 2), |_| rng.gen_range(-12.0..12.0))).unwrap();
            let warped = warp_image(&img, &field).unwrap();
            let (lo, hi) = (img.min(), img.max());
            for v in warped.data() {
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }

        #[test]
        fn warp_equals_oracle(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(31));
            let img = Image::new(Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0))).unwrap();
            let field = DisplacementField::new(
                Array3::from_shape_fn((8, 8, 2), |_| rng.gen_range(-9.0..9.0))).unwrap();
            let warped = warp_image(&img, &field).unwrap();
            let oracle = warp_oracle(&img, &field);
            for (a, b) in warped.data().iter().zip(oracle.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
