//! Synthetic box-bump shape families with analytic landmarks, and ordered
//! pair datasets with a deterministic train/test split.
//!
//! Both families render 64x64 images by 4x4 supersampling, so edge pixels
//! carry fractional coverage and image-matching losses have usable
//! gradients at shape boundaries.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Coordinate, Image};
use crate::rawio;

/// Rendered image side length for both families.
pub const IMAGE_SIZE: usize = 64;
/// Protrusion radius in pixels; bump width is `2 * BUMP_RADIUS`.
pub const BUMP_RADIUS: f64 = 5.0;
/// Bump width in pixels, the unit for landmark-error percentages.
pub const BUMP_WIDTH: f64 = 2.0 * BUMP_RADIUS;

// Linear family geometry: a rectangle with a bump sliding along its top edge.
const RECT_TOP: f64 = 24.0;
const RECT_BOTTOM: f64 = 44.0;
const RECT_LEFT: f64 = 8.0;
const RECT_RIGHT: f64 = 56.0;

// Rotating family geometry: a disk with a bump riding on its boundary.
const DISK_ROW: f64 = 36.0;
const DISK_COL: f64 = 32.0;
const DISK_RADIUS: f64 = 16.0;

/// Shape family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Linear,
    Rotating,
}

impl ShapeFamily {
    /// Generator parameter range (inclusive).
    pub fn param_range(&self) -> (f64, f64) {
        match self {
            ShapeFamily::Linear => (0.0, 1.0),
            ShapeFamily::Rotating => (-50.0, 50.0),
        }
    }

    /// Parameter of the centered-bump sample used as the sweep target.
    pub fn centered_param(&self) -> f64 {
        match self {
            ShapeFamily::Linear => 0.5,
            ShapeFamily::Rotating => 0.0,
        }
    }

    /// Renders the sample for a parameter value.
    pub fn make(&self, param: f64) -> Result<ShapeSample> {
        match self {
            ShapeFamily::Linear => make_linear_boxbump(param),
            ShapeFamily::Rotating => make_rotating_boxbump(param),
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeFamily::Linear => write!(f, "linear"),
            ShapeFamily::Rotating => write!(f, "rotating"),
        }
    }
}

impl std::str::FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ShapeFamily::Linear),
            "rotating" => Ok(ShapeFamily::Rotating),
            other => Err(Error::InvalidArgument(format!(
                "unknown shape family '{other}' (expected 'linear' or 'rotating')"
            ))),
        }
    }
}

/// A rendered shape with its analytic landmarks and generating parameter.
#[derive(Debug, Clone)]
pub struct ShapeSample {
    pub image: Image,
    pub landmarks: Vec<Coordinate>,
    pub param: f64,
    pub family: ShapeFamily,
}

/// An ordered source/target pair from the same family.
#[derive(Debug, Clone)]
pub struct RegistrationPair {
    pub source: ShapeSample,
    pub target: ShapeSample,
}

/// Supersampled coverage rasterizer: pixel value = fraction of 16 sub-pixel
/// sample points inside the region.
fn rasterize(inside: impl Fn(f64, f64) -> bool) -> Image {
    const OFFSETS: [f64; 4] = [-0.375, -0.125, 0.125, 0.375];
    let data = Array2::from_shape_fn((IMAGE_SIZE, IMAGE_SIZE), |(r, c)| {
        let mut hits = 0u32;
        for dr in OFFSETS {
            for dc in OFFSETS {
                if inside(r as f64 + dr, c as f64 + dc) {
                    hits += 1;
                }
            }
        }
        hits as f64 / 16.0
    });
    Image::new(data).expect("rasterized image is always valid")
}

/// Linear family: rectangle plus a semicircular bump whose center slides
/// along the top edge, `c(t) = 16 + 32 t`.
///
/// Landmarks (7): bump apex, left base, right base, then the four rectangle
/// corners (top-left, top-right, bottom-left, bottom-right).
pub fn make_linear_boxbump(t: f64) -> Result<ShapeSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "linear box-bump parameter must lie in [0, 1], got {t}"
        )));
    }
    let cb = 16.0 + 32.0 * t;
    let r2 = BUMP_RADIUS * BUMP_RADIUS;
    let image = rasterize(|r, c| {
        let in_rect = r >= RECT_TOP && r < RECT_BOTTOM && c >= RECT_LEFT && c < RECT_RIGHT;
        let in_bump = (r - RECT_TOP).powi(2) + (c - cb).powi(2) <= r2;
        in_rect || in_bump
    });
    let landmarks = vec![
        Coordinate::new(RECT_TOP - BUMP_RADIUS, cb),
        Coordinate::new(RECT_TOP, cb - BUMP_RADIUS),
        Coordinate::new(RECT_TOP, cb + BUMP_RADIUS),
        Coordinate::new(RECT_TOP, RECT_LEFT),
        Coordinate::new(RECT_TOP, RECT_RIGHT),
        Coordinate::new(RECT_BOTTOM, RECT_LEFT),
        Coordinate::new(RECT_BOTTOM, RECT_RIGHT),
    ];
    Ok(ShapeSample {
        image,
        landmarks,
        param: t,
        family: ShapeFamily::Linear,
    })
}

/// Rotating family: disk plus a semicircular protrusion centered on the
/// disk boundary at angle `theta` (0 = straight up, positive clockwise on
/// screen, i.e. toward increasing columns).
///
/// Landmarks (3): bump apex, and the two points where the bump circle meets
/// the disk boundary (`theta -/+ asin(r/R)`).
pub fn make_rotating_boxbump(theta_deg: f64) -> Result<ShapeSample> {
    if !(-50.0..=50.0).contains(&theta_deg) {
        return Err(Error::InvalidArgument(format!(
            "rotating box-bump angle must lie in [-50, 50] degrees, got {theta_deg}"
        )));
    }
    let theta = theta_deg.to_radians();
    let on_circle = |radius: f64, angle: f64| {
        Coordinate::new(DISK_ROW - radius * angle.cos(), DISK_COL + radius * angle.sin())
    };
    let bump_center = on_circle(DISK_RADIUS, theta);
    let rr = DISK_RADIUS * DISK_RADIUS;
    let br = BUMP_RADIUS * BUMP_RADIUS;
    let image = rasterize(|r, c| {
        let in_disk = (r - DISK_ROW).powi(2) + (c - DISK_COL).powi(2) <= rr;
        let in_bump = (r - bump_center.row).powi(2) + (c - bump_center.col).powi(2) <= br;
        in_disk || in_bump
    });
    let base_offset = (BUMP_RADIUS / DISK_RADIUS).asin();
    let landmarks = vec![
        on_circle(DISK_RADIUS + BUMP_RADIUS, theta),
        on_circle(DISK_RADIUS, theta - base_offset),
        on_circle(DISK_RADIUS, theta + base_offset),
    ];
    Ok(ShapeSample {
        image,
        landmarks,
        param: theta_deg,
        family: ShapeFamily::Rotating,
    })
}

/// All ordered pairs of a shape family with a deterministic 25% test split.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub family: ShapeFamily,
    pub bump_width: f64,
    pub seed: u64,
    samples: Vec<ShapeSample>,
    train: Vec<(usize, usize)>,
    test: Vec<(usize, usize)>,
}

/// Generates `n_shapes` uniformly spaced samples, forms all `n (n - 1)`
/// ordered pairs, shuffles them with `seed`, and reserves 25% for testing.
/// `max_train_pairs` optionally truncates the training split.
pub fn build_pair_dataset(
    family: ShapeFamily,
    n_shapes: usize,
    seed: u64,
    max_train_pairs: Option<usize>,
) -> Result<PairDataset> {
    if n_shapes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 shapes, got {n_shapes}"
        )));
    }
    let (lo, hi) = family.param_range();
    let samples: Vec<ShapeSample> = (0..n_shapes)
        .map(|i| {
            let t = lo + (hi - lo) * i as f64 / (n_shapes - 1) as f64;
            family.make(t)
        })
        .collect::<Result<_>>()?;

    let mut pairs: Vec<(usize, usize)> = (0..n_shapes)
        .flat_map(|i| (0..n_shapes).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);

    let n_test = pairs.len() * 25 / 100;
    let test = pairs.split_off(pairs.len() - n_test);
    let mut train = pairs;
    if let Some(cap) = max_train_pairs {
        train.truncate(cap);
    }

    Ok(PairDataset {
        family,
        bump_width: BUMP_WIDTH,
        seed,
        samples,
        train,
        test,
    })
}

impl PairDataset {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn n_test(&self) -> usize {
        self.test.len()
    }

    pub fn samples(&self) -> &[ShapeSample] {
        &self.samples
    }

    pub fn train_indices(&self) -> &[(usize, usize)] {
        &self.train
    }

    pub fn test_indices(&self) -> &[(usize, usize)] {
        &self.test
    }

    fn pair(&self, (i, j): (usize, usize)) -> RegistrationPair {
        RegistrationPair {
            source: self.samples[i].clone(),
            target: self.samples[j].clone(),
        }
    }

    pub fn train_pair(&self, idx: usize) -> RegistrationPair {
        self.pair(self.train[idx])
    }

    pub fn test_pair(&self, idx: usize) -> RegistrationPair {
        self.pair(self.test[idx])
    }

    pub fn test_pairs(&self) -> impl Iterator<Item = RegistrationPair> + '_ {
        self.test.iter().map(move |&ij| self.pair(ij))
    }

    /// Returns a dataset with every sample image transformed in place
    /// (e.g. converted to a signed-distance representation); landmarks,
    /// parameters and splits are unchanged.
    pub fn map_images(&self, f: impl Fn(&Image) -> Result<Image>) -> Result<PairDataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(ShapeSample {
                    image: f(&s.image)?,
                    landmarks: s.landmarks.clone(),
                    param: s.param,
                    family: s.family,
                })
            })
            .collect::<Result<_>>()?;
        Ok(PairDataset {
            samples,
            ..self.clone()
        })
    }

    /// Directory name keyed by the generating content.
    pub fn cache_dir_name(&self) -> String {
        format!("{}_n{}_s{}", self.family, self.samples.len(), self.seed)
    }

    /// Writes the sample images (raw format) and a CSV manifest of
    /// parameters and landmark coordinates under
    /// `root/<family>_n<n>_s<seed>/`. Returns the cache directory.
    pub fn write_cache(&self, root: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = root.as_ref().join(self.cache_dir_name());
        std::fs::create_dir_all(&dir)?;
        let n_marks = self.samples[0].landmarks.len();
        let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
        let mut header = vec!["index".to_string(), "param".to_string()];
        for k in 0..n_marks {
            header.push(format!("landmark{k}_row"));
            header.push(format!("landmark{k}_col"));
        }
        manifest.write_record(&header)?;
        for (i, sample) in self.samples.iter().enumerate() {
            rawio::save_image(dir.join(format!("sample_{i:04}.raw")), &sample.image)?;
            let mut record = vec![i.to_string(), format!("{:.17e}", sample.param)];
            for lm in &sample.landmarks {
                record.push(format!("{:.17e}", lm.row));
                record.push(format!("{:.17e}", lm.col));
            }
            manifest.write_record(&record)?;
        }
        manifest.flush()?;
        Ok(dir)
    }

    /// Loads a cache written by [`write_cache`]. The train/test split is
    /// re-derived from `seed`, so it matches the split at write time.
    /// Cached images are 32-bit, per the raw image format.
    pub fn load_cache(
        root: impl AsRef<Path>,
        family: ShapeFamily,
        n_shapes: usize,
        seed: u64,
    ) -> Result<PairDataset> {
        let dir = root
            .as_ref()
            .join(format!("{family}_n{n_shapes}_s{seed}"));
        let mut reader = csv::Reader::from_path(dir.join("manifest.csv"))?;
        let mut samples = Vec::with_capacity(n_shapes);
        for record in reader.records() {
            let record = record?;
            let idx: usize = record[0]
                .parse()
                .map_err(|_| Error::Format("bad index in manifest".into()))?;
            let param: f64 = record[1]
                .parse()
                .map_err(|_| Error::Format("bad param in manifest".into()))?;
            let mut landmarks = Vec::new();
            let mut fields = record.iter().skip(2);
            while let (Some(r), Some(c)) = (fields.next(), fields.next()) {
                landmarks.push(Coordinate::new(
                    r.parse().map_err(|_| Error::Format("bad landmark".into()))?,
                    c.parse().map_err(|_| Error::Format("bad landmark".into()))?,
                ));
            }
            let image = rawio::load_image(dir.join(format!("sample_{idx:04}.raw")))?;
            samples.push(ShapeSample {
                image,
                landmarks,
                param,
                family,
            });
        }
        if samples.len() != n_shapes {
            return Err(Error::Format(format!(
                "cache holds {} samples, expected {n_shapes}",
                samples.len()
            )));
        }

        let mut pairs: Vec<(usize, usize)> = (0..n_shapes)
            .flat_map(|i| (0..n_shapes).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pairs.shuffle(&mut rng);
        let n_test = pairs.len() * 25 / 100;
        let test = pairs.split_off(pairs.len() - n_test);
        Ok(PairDataset {
            family,
            bump_width: BUMP_WIDTH,
            seed,
            samples,
            train: pairs,
            test,
        })
    }
}

/// Bump-center column for the linear family, `c(t) = 16 + 32 t`.
pub fn linear_bump_column(t: f64) -> f64 {
    16.0 + 32.0 * t
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::collections::HashSet;

    #[test]
    fn linear_centered_bump_and_apex() {
        let s = make_linear_boxbump(0.5).unwrap();
        assert_eq!(s.landmarks[0], Coordinate::new(19.0, 32.0));
        assert_eq!(s.landmarks[1], Coordinate::new(24.0, 27.0));
        assert_eq!(s.landmarks[2], Coordinate::new(24.0, 37.0));
        // bump crest above the rectangle has full coverage
        assert_eq!(s.image.data()[[21, 32]], 1.0);
        // outside the bump at the same height: background
        assert_eq!(s.image.data()[[21, 12]], 0.0);
    }

    #[test]
    fn linear_extremes() {
        let s0 = make_linear_boxbump(0.0).unwrap();
        assert_eq!(s0.landmarks[0].col, 16.0);
        let s1 = make_linear_boxbump(1.0).unwrap();
        assert_eq!(s1.landmarks[0].col, 48.0);
        assert!(make_linear_boxbump(-0.01).is_err());
        assert!(make_linear_boxbump(1.01).is_err());
    }

    #[test]
    fn linear_interior_pixel_is_full() {
        let s = make_linear_boxbump(0.3).unwrap();
        assert_eq!(s.image.data()[[34, 30]], 1.0);
        assert_eq!(s.image.data()[[25, 10]], 1.0);
    }

    #[test]
    fn rotating_apex_at_zero() {
        let s = make_rotating_boxbump(0.0).unwrap();
        assert_abs_diff_eq!(s.landmarks[0].row, 15.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.landmarks[0].col, 32.0, epsilon = 1e-12);
        // disk center fully covered
        assert_eq!(s.image.data()[[36, 32]], 1.0);
        assert!(make_rotating_boxbump(50.01).is_err());
        assert!(make_rotating_boxbump(-51.0).is_err());
    }

    #[test]
    fn rotating_zero_is_mirror_symmetric() {
        let s = make_rotating_boxbump(0.0).unwrap();
        let d = s.image.data();
        for r in 0..IMAGE_SIZE {
            for c in 1..IMAGE_SIZE {
                let m = IMAGE_SIZE - c;
                if m < IMAGE_SIZE {
                    assert_abs_diff_eq!(d[[r, c]], d[[r, m]], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn landmarks_stay_in_bounds() {
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            for lm in make_linear_boxbump(t).unwrap().landmarks {
                assert!(lm.row >= 0.0 && lm.row <= 63.0);
                assert!(lm.col >= 0.0 && lm.col <= 63.0);
            }
            let theta = -50.0 + 100.0 * i as f64 / 20.0;
            for lm in make_rotating_boxbump(theta).unwrap().landmarks {
                assert!(lm.row >= 0.0 && lm.row <= 63.0);
                assert!(lm.col >= 0.0 && lm.col <= 63.0);
            }
        }
    }

    #[test]
    fn landmark_displacement_is_horizontal_shift_in_linear_family() {
        let a = make_linear_boxbump(0.2).unwrap();
        let b = make_linear_boxbump(0.7).unwrap();
        let shift = linear_bump_column(0.2) - linear_bump_column(0.7);
        for k in 0..3 {
            assert_abs_diff_eq!(a.landmarks[k].row, b.landmarks[k].row, epsilon = 1e-12);
            assert_abs_diff_eq!(
                a.landmarks[k].col - b.landmarks[k].col,
                shift,
                epsilon = 1e-12
            );
        }
        // rectangle corners do not move
        for k in 3..7 {
            assert_eq!(a.landmarks[k], b.landmarks[k]);
        }
    }

    #[test]
    fn foreground_area_is_stable_across_each_family() {
        let areas: Vec<f64> = (0..=10)
            .map(|i| make_linear_boxbump(i as f64 / 10.0).unwrap().image.data().sum())
            .collect();
        let (lo, hi) = (
            areas.iter().cloned().fold(f64::INFINITY, f64::min),
            areas.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        assert!((hi - lo) / hi < 0.01, "linear area varies too much: {lo}..{hi}");

        let areas: Vec<f64> = (0..=10)
            .map(|i| {
                let th = -50.0 + 100.0 * i as f64 / 10.0;
                make_rotating_boxbump(th).unwrap().image.data().sum()
            })
            .collect();
        let (lo, hi) = (
            areas.iter().cloned().fold(f64::INFINITY, f64::min),
            areas.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        assert!((hi - lo) / hi < 0.01, "rotating area varies too much: {lo}..{hi}");
    }

    #[test]
    fn values_stay_in_unit_range() {
        for t in [0.0, 0.13, 0.5, 0.99] {
            let s = make_linear_boxbump(t).unwrap();
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dataset_pair_counts() {
        let ds = build_pair_dataset(ShapeFamily::Linear, 100, 7, None).unwrap();
        assert_eq!(ds.n_train() + ds.n_test(), 9900);
        assert_eq!(ds.n_test(), 2475);

        let tiny = build_pair_dataset(ShapeFamily::Linear, 2, 7, None).unwrap();
        assert_eq!(tiny.n_train() + tiny.n_test(), 2);

        assert!(build_pair_dataset(ShapeFamily::Linear, 1, 7, None).is_err());
    }

    #[test]
    fn dataset_split_is_deterministic_and_disjoint() {
        let a = build_pair_dataset(ShapeFamily::Rotating, 20, 42, None).unwrap();
        let b = build_pair_dataset(ShapeFamily::Rotating, 20, 42, None).unwrap();
        assert_eq!(a.train_indices(), b.train_indices());
        assert_eq!(a.test_indices(), b.test_indices());

        let train: HashSet<_> = a.train_indices().iter().collect();
        let test: HashSet<_> = a.test_indices().iter().collect();
        assert!(train.is_disjoint(&test));

        let c = build_pair_dataset(ShapeFamily::Rotating, 20, 43, None).unwrap();
        assert_ne!(a.train_indices(), c.train_indices());
    }

    #[test]
    fn max_train_pairs_truncates() {
        let ds = build_pair_dataset(ShapeFamily::Linear, 10, 1, Some(5)).unwrap();
        assert_eq!(ds.n_train(), 5);
        // test split unaffected: 90 pairs -> 22 test
        assert_eq!(ds.n_test(), 22);
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_pair_dataset(ShapeFamily::Linear, 5, 3, None).unwrap();
        let cache = ds.write_cache(dir.path()).unwrap();
        assert!(cache.join("manifest.csv").exists());
        let back = PairDataset::load_cache(dir.path(), ShapeFamily::Linear, 5, 3).unwrap();
        assert_eq!(back.n_train(), ds.n_train());
        assert_eq!(back.train_indices(), ds.train_indices());
        assert_eq!(back.samples()[2].param, ds.samples()[2].param);
        assert_eq!(back.samples()[2].landmarks, ds.samples()[2].landmarks);
        // images round-trip through f32
        for (a, b) in back.samples()[4]
            .image
            .data()
            .iter()
            .zip(ds.samples()[4].image.data().iter())
        {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
    }
}
