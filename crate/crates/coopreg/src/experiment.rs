//! End-to-end experiment driver: configure, train, evaluate on the held-out
//! pairs, run the latent-space sweep, render figures, and emit report rows.
//!
//! An experiment output directory always contains exactly:
//! `config.json`, `checkpoint/`, `history.csv`, `eval.csv` and `figures/`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{warp_image, DisplacementField, Image};
use crate::loss::Matching;
use crate::metrics::{
    ae_relative_error, dice, landmark_error, posthoc_ae_fit, spearman, EvalResult, DICE_THRESHOLD,
};
use crate::nets::{cae_forward, primary_forward};
use crate::synth::{build_pair_dataset, PairDataset, ShapeFamily};
use crate::train::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainedModel};
use crate::{rawio, synth};

/// Registration method roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cooperative autoencoder regularization.
    Cae,
    /// Smoothness-penalty baseline.
    Undr,
    /// Baseline with a dense bottleneck in the primary network.
    UndrBn,
    /// Dense bottleneck with the skip connections removed.
    UndrBnNoskip,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Cae => write!(f, "cae"),
            Method::Undr => write!(f, "undr"),
            Method::UndrBn => write!(f, "undr-bn"),
            Method::UndrBnNoskip => write!(f, "undr-bn-noskip"),
        }
    }
}

/// Dataset selector of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub family: ShapeFamily,
    #[serde(default = "default_n_shapes")]
    pub n_shapes: usize,
    pub seed: u64,
    #[serde(default)]
    pub max_train_pairs: Option<usize>,
}

fn default_n_shapes() -> usize {
    100
}

impl DatasetSpec {
    pub fn build(&self) -> Result<PairDataset> {
        build_pair_dataset(self.family, self.n_shapes, self.seed, self.max_train_pairs)
    }
}

/// A full experiment description (serialized as the JSON config the CLI
/// consumes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub method: Method,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    /// Bottleneck size for the post-hoc autoencoder comparison on baseline
    /// methods; defaults to the cooperative run's h.
    #[serde(default = "default_ae_compare_h")]
    pub ae_compare_h: usize,
}

fn default_ae_compare_h() -> usize {
    1
}

impl ExperimentSpec {
    /// Checks method/config consistency.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let p = &self.train.primary;
        match self.method {
            Method::Cae => {
                if self.train.cae.is_none() {
                    return Err(Error::InvalidArgument(
                        "method 'cae' requires train.cae".into(),
                    ));
                }
            }
            Method::Undr => {
                if self.train.cae.is_some() || p.bottleneck_dim.is_some() {
                    return Err(Error::InvalidArgument(
                        "method 'undr' must have neither train.cae nor a bottleneck".into(),
                    ));
                }
            }
            Method::UndrBn => {
                if p.bottleneck_dim.is_none() {
                    return Err(Error::InvalidArgument(
                        "method 'undr_bn' requires primary.bottleneck_dim".into(),
                    ));
                }
                if self.train.cae.is_some() {
                    return Err(Error::InvalidArgument(
                        "method 'undr_bn' must not have train.cae".into(),
                    ));
                }
            }
            Method::UndrBnNoskip => {
                if p.bottleneck_dim.is_none() || p.skip_connections {
                    return Err(Error::InvalidArgument(
                        "method 'undr_bn_noskip' requires a bottleneck and no skips".into(),
                    ));
                }
                if self.train.cae.is_some() {
                    return Err(Error::InvalidArgument(
                        "method 'undr_bn_noskip' must not have train.cae".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Report label, e.g. `cae(h=1,beta=8)`.
    pub fn method_label(&self) -> String {
        match self.method {
            Method::Cae => {
                let h = self.train.cae.as_ref().map(|c| c.h).unwrap_or(0);
                format!("cae(h={},beta={})", h, self.train.beta)
            }
            Method::Undr => "undr".to_string(),
            Method::UndrBn => format!(
                "undr-bn(d={})",
                self.train.primary.bottleneck_dim.unwrap_or(0)
            ),
            Method::UndrBnNoskip => format!(
                "undr-bn-noskip(d={})",
                self.train.primary.bottleneck_dim.unwrap_or(0)
            ),
        }
    }

    pub fn dataset_label(&self) -> String {
        format!("{}-boxbump", self.dataset.family)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoint")
    }
}

/// One Table-style result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub ae_error_pct: f64,
    pub dice: f64,
    pub landmark_error_pct: f64,
    pub test_runtime_sec: f64,
}

impl ReportRow {
    fn from_eval(spec: &ExperimentSpec, eval: &EvalResult) -> Self {
        ReportRow {
            dataset: spec.dataset_label(),
            method: spec.method_label(),
            ae_error_pct: eval.ae_error_pct,
            dice: eval.dice_mean,
            landmark_error_pct: eval.landmark_error_pct,
            test_runtime_sec: eval.test_runtime_sec,
        }
    }
}

/// Trains per the spec and writes `config.json`, `checkpoint/` and
/// `history.csv` into the output directory.
pub fn train_experiment(spec: &ExperimentSpec) -> Result<TrainedModel> {
    spec.validate().map_err(|e| e.context(spec.name.clone()))?;
    let dataset = spec.dataset.build()?;
    let model =
        train(&spec.train, &dataset).map_err(|e| e.context(format!("training {}", spec.name)))?;
    std::fs::create_dir_all(&spec.output_dir)?;
    std::fs::write(
        spec.output_dir.join("config.json"),
        serde_json::to_vec_pretty(spec)?,
    )?;
    save_checkpoint(&model, spec.checkpoint_dir())?;
    model.history.write_csv(spec.output_dir.join("history.csv"))?;
    Ok(model)
}

/// Evaluates a trained model on the held-out test pairs and writes
/// `eval.csv` and `figures/` into the output directory.
///
/// The AE error column uses the cooperative autoencoder's own
/// reconstructions for `cae` runs, and a post-hoc autoencoder fitted to the
/// produced fields (at `ae_compare_h`) for the baselines.
pub fn eval_experiment(spec: &ExperimentSpec, model: &TrainedModel) -> Result<ReportRow> {
    spec.validate().map_err(|e| e.context(spec.name.clone()))?;
    let dataset = spec.dataset.build()?;
    let n = dataset.n_test();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "dataset has no test pairs to evaluate".into(),
        ));
    }

    let mut fields = Vec::with_capacity(n);
    let mut dice_total = 0.0;
    let mut lm_total = 0.0;
    let mut runtime_total = 0.0;
    let mut registered_samples = Vec::new();

    for (i, pair) in dataset.test_pairs().enumerate() {
        let started = Instant::now();
        let field = primary_forward(&model.primary, &pair.source.image, &pair.target.image)
            .map_err(|e| e.context(format!("evaluating {}", spec.name)))?;
        runtime_total += started.elapsed().as_secs_f64();

        let registered = warp_image(&pair.source.image, &field)?;
        dice_total += dice(&registered, &pair.target.image, DICE_THRESHOLD)?;
        lm_total += landmark_error(&field, &pair, dataset.bump_width)?;
        if i < 3 {
            registered_samples.push((pair.target.image.clone(), registered));
        }
        fields.push(field);
    }

    let ae_error_pct = match &model.cae {
        Some(cae) => {
            let recons: Vec<DisplacementField> = fields
                .iter()
                .map(|f| cae_forward(cae, f).map(|(_, r)| r))
                .collect::<Result<_>>()?;
            ae_relative_error(&fields, &recons)?
        }
        None => {
            let (_, err) = posthoc_ae_fit(&fields, spec.ae_compare_h, spec.train.seed)?;
            err
        }
    };

    let eval = EvalResult {
        dice_mean: dice_total / n as f64,
        landmark_error_pct: lm_total / n as f64,
        ae_error_pct,
        test_runtime_sec: runtime_total / n as f64,
        n_pairs: n,
    };
    let row = ReportRow::from_eval(spec, &eval);

    std::fs::create_dir_all(&spec.output_dir)?;
    write_rows_csv(&[row.clone()], spec.output_dir.join("eval.csv"))?;
    let fig_dir = spec.output_dir.join("figures");
    std::fs::create_dir_all(&fig_dir)?;
    for (i, (target, registered)) in registered_samples.iter().enumerate() {
        let rgb = render_falsecolor(target, registered, DICE_THRESHOLD)?;
        rawio::save_png_rgb(fig_dir.join(format!("falsecolor_{i:02}.png")), &rgb)?;
    }
    Ok(row)
}

/// Builds the dataset, trains, evaluates on the held-out 25% of pairs, and
/// leaves config snapshot, checkpoint, history CSV, eval CSV and figures in
/// the output directory.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ReportRow> {
    let model = train_experiment(spec)?;
    eval_experiment(spec, &model)
}

/// Reloads the checkpoint of a previously trained experiment.
pub fn load_experiment_model(spec: &ExperimentSpec) -> Result<TrainedModel> {
    load_checkpoint(spec.checkpoint_dir())
        .map_err(|e| e.context(format!("loading checkpoint for {}", spec.name)))
}

/// Latent-sweep output: one (source parameter, latent value) row per source,
/// plus the strip figure of sampled sources and their fields.
#[derive(Debug, Clone)]
pub struct LatentSweep {
    pub rows: Vec<(f64, f64)>,
    pub strip: Array3<u8>,
}

/// Sweeps source images against the centered-bump target and records the
/// one-dimensional latent value of each predicted field. Requires a model
/// trained with an `h = 1` autoencoder.
pub fn latent_sweep(
    model: &TrainedModel,
    family: ShapeFamily,
    n_sources: usize,
) -> Result<LatentSweep> {
    let cae = model.cae.as_ref().ok_or_else(|| {
        Error::InvalidArgument("latent sweep needs a model trained with an autoencoder".into())
    })?;
    if cae.config.h != 1 {
        return Err(Error::InvalidArgument(format!(
            "latent sweep needs h = 1, model has h = {}",
            cae.config.h
        )));
    }
    if n_sources < 2 {
        return Err(Error::InvalidArgument("need at least 2 sources".into()));
    }

    let target = family.make(family.centered_param())?;
    let (lo, hi) = family.param_range();
    let mut rows = Vec::with_capacity(n_sources);
    let mut panels: Vec<(Image, DisplacementField)> = Vec::new();

    // ten evenly spaced sources make it into the strip figure
    let strip_count = 10.min(n_sources);
    let panel_indices: std::collections::BTreeSet<usize> = (0..strip_count)
        .map(|k| (k * (n_sources - 1) + (strip_count - 1) / 2) / (strip_count - 1).max(1))
        .collect();

    for i in 0..n_sources {
        let param = lo + (hi - lo) * i as f64 / (n_sources - 1) as f64;
        let source = family.make(param)?;
        let field = primary_forward(&model.primary, &source.image, &target.image)?;
        let (latent, _) = cae_forward(cae, &field)?;
        rows.push((param, latent[0]));
        if panel_indices.contains(&i) {
            panels.push((source.image.clone(), field));
        }
    }

    Ok(LatentSweep {
        strip: render_field_strip(&panels),
        rows,
    })
}

/// Writes sweep rows as CSV (`param,latent`).
pub fn write_sweep_csv(rows: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["param", "latent"])?;
    for (p, l) in rows {
        w.write_record(&[p.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Spearman rank correlation between source parameter and latent value.
pub fn sweep_monotonicity(rows: &[(f64, f64)]) -> f64 {
    let params: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let latents: Vec<f64> = rows.iter().map(|r| r.1).collect();
    spearman(&params, &latents)
}

/// False-color overlap image: white where both foregrounds agree, green for
/// registered-only pixels, magenta for target-only pixels, black elsewhere.
pub fn render_falsecolor(target: &Image, registered: &Image, threshold: f64) -> Result<Array3<u8>> {
    if target.height() != registered.height() || target.width() != registered.width() {
        return Err(Error::ShapeMismatch(format!(
            "target is {}x{}, registered is {}x{}",
            target.height(),
            target.width(),
            registered.height(),
            registered.width()
        )));
    }
    let (h, w) = (target.height(), target.width());
    let mut rgb = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let in_t = target.data()[[r, c]] > threshold;
            let in_r = registered.data()[[r, c]] > threshold;
            let color: [u8; 3] = match (in_r, in_t) {
                (true, true) => [255, 255, 255],
                (true, false) => [0, 255, 0],
                (false, true) => [255, 0, 255],
                (false, false) => [0, 0, 0],
            };
            for k in 0..3 {
                rgb[[r, c, k]] = color[k];
            }
        }
    }
    Ok(rgb)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = (h.rem_euclid(360.0)) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Direction-as-hue, magnitude-as-brightness rendering of a field.
fn flow_to_rgb(field: &DisplacementField, max_mag: f64) -> Array3<u8> {
    let (h, w) = (field.height(), field.width());
    let mut rgb = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let dr = field.data()[[r, c, 0]];
            let dc = field.data()[[r, c, 1]];
            let mag = (dr * dr + dc * dc).sqrt();
            let hue = dc.atan2(-dr).to_degrees();
            let val = if max_mag > 0.0 { (mag / max_mag).min(1.0) } else { 0.0 };
            let px = hsv_to_rgb(hue, 1.0, val);
            for k in 0..3 {
                rgb[[r, c, k]] = px[k];
            }
        }
    }
    rgb
}

/// Strip figure: one column per sampled source, image on top, its field
/// rendered as flow colors below.
fn render_field_strip(panels: &[(Image, DisplacementField)]) -> Array3<u8> {
    if panels.is_empty() {
        return Array3::zeros((1, 1, 3));
    }
    let (h, w) = (panels[0].0.height(), panels[0].0.width());
    let max_mag = panels
        .iter()
        .flat_map(|(_, f)| f.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        * std::f64::consts::SQRT_2;
    let mut strip = Array3::zeros((2 * h, w * panels.len(), 3));
    for (i, (img, field)) in panels.iter().enumerate() {
        let flow = flow_to_rgb(field, max_mag);
        for r in 0..h {
            for c in 0..w {
                let gray = (img.data()[[r, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
                for k in 0..3 {
                    strip[[r, i * w + c, k]] = gray;
                    strip[[h + r, i * w + c, k]] = flow[[r, c, k]];
                }
            }
        }
    }
    strip
}

fn write_rows_csv(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "dataset",
        "method",
        "ae_error_pct",
        "dice",
        "landmark_error_pct",
        "test_runtime_sec",
    ])?;
    for r in rows {
        w.write_record(&[
            r.dataset.clone(),
            r.method.clone(),
            r.ae_error_pct.to_string(),
            r.dice.to_string(),
            r.landmark_error_pct.to_string(),
            r.test_runtime_sec.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`emit_report`] or an experiment's `eval.csv`.
pub fn read_rows_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad number in report: {}", &rec[i])))
        };
        rows.push(ReportRow {
            dataset: rec[0].to_string(),
            method: rec[1].to_string(),
            ae_error_pct: parse(2)?,
            dice: parse(3)?,
            landmark_error_pct: parse(4)?,
            test_runtime_sec: parse(5)?,
        });
    }
    Ok(rows)
}

/// Writes a combined report: a CSV at `path` and an aligned plain-text
/// table beside it (`.txt`). Rows are sorted by (dataset, method).
pub fn emit_report(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to report".into()));
    }
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| (&a.dataset, &a.method).cmp(&(&b.dataset, &b.method)));

    let path = path.as_ref();
    write_rows_csv(&sorted, path)?;

    let headers = ["dataset", "method", "ae_error_pct", "dice", "landmark_error_pct", "test_runtime_sec"];
    let mut table: Vec<[String; 6]> = vec![headers.map(str::to_string)];
    for r in &sorted {
        table.push([
            r.dataset.clone(),
            r.method.clone(),
            format!("{:.2}", r.ae_error_pct),
            format!("{:.4}", r.dice),
            format!("{:.2}", r.landmark_error_pct),
            format!("{:.5}", r.test_runtime_sec),
        ]);
    }
    let widths: Vec<usize> = (0..6)
        .map(|c| table.iter().map(|row| row[c].len()).max().unwrap())
        .collect();
    let mut text = String::new();
    for row in &table {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                text.push_str("  ");
            }
            text.push_str(cell);
            for _ in cell.len()..widths[c] {
                text.push(' ');
            }
        }
        text.push('\n');
    }
    std::fs::write(path.with_extension("txt"), text)?;
    Ok(())
}

/// Checks that an experiment directory contains exactly the expected
/// entries: config snapshot, checkpoint, history CSV, eval CSV and figures.
pub fn check_output_manifest(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut expected: Vec<&str> = vec![
        "config.json",
        "checkpoint",
        "history.csv",
        "eval.csv",
        "figures",
    ];
    expected.sort_unstable();
    let mut found: Vec<String> = std::fs::read_dir(dir)?
        .map(|e| Ok(e?.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_>>()?;
    found.sort();
    if found != expected {
        return Err(Error::Format(format!(
            "unexpected experiment directory contents: {found:?} (expected {expected:?})"
        )));
    }
    Ok(())
}

/// The canonical experiment spec roster used by the synthetic-study runs:
/// a desk-scale configuration for a family and method.
pub fn desk_spec(
    family: ShapeFamily,
    method: Method,
    seed: u64,
    output_root: impl AsRef<Path>,
) -> ExperimentSpec {
    use crate::nets::{CaeConfig, PrimaryConfig};
    let primary = PrimaryConfig {
        levels: 4,
        base_channels: 8,
        skip_connections: method != Method::UndrBnNoskip,
        bottleneck_dim: matches!(method, Method::UndrBn | Method::UndrBnNoskip).then_some(1),
        input_size: synth::IMAGE_SIZE,
    };
    let cae = (method == Method::Cae).then(|| CaeConfig {
        h: 1,
        levels: 3,
        base_channels: 16,
        input_size: synth::IMAGE_SIZE,
    });
    let name = format!("{family}-{method}");
    ExperimentSpec {
        name: name.clone(),
        method,
        dataset: DatasetSpec {
            family,
            n_shapes: 100,
            seed,
            max_train_pairs: None,
        },
        train: TrainConfig {
            total_iterations: 20_000,
            batch_size: 8,
            seed,
            primary,
            cae,
            matching: Matching::L2,
            ..TrainConfig::default()
        },
        output_dir: output_root.as_ref().join(name),
        ae_compare_h: 1,
    }
}
