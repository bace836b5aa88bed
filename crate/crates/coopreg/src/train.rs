//! Two-phase cooperative training: a smoothness-only warm-up (the
//! autoencoder needs an initial population of fields before it can
//! regularize anything), then joint optimization of both networks with the
//! smoothness weight dropped to zero.
//!
//! One Adam instance covers the union of all trainable parameters.
//! Minibatch members are processed on independent tapes in parallel and
//! their gradients summed in index order, so runs are bitwise reproducible
//! for a fixed seed regardless of thread scheduling.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Image;
use crate::loss::{default_ncc_window, Matching};
use crate::nets::{
    cae_forward_on_tape, init_cae, init_primary, primary_forward_on_tape, stack_pair, CaeConfig,
    CaeParams, ParamSet, PrimaryConfig, PrimaryParams, TapeParams,
};
use crate::rawio;
use crate::synth::PairDataset;
use crate::tape::Tape;

/// All training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_total_iterations")]
    pub total_iterations: usize,
    /// Fraction of iterations spent in the warm-up phase.
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    /// Smoothness weight during warm-up (and throughout, for runs without
    /// an autoencoder).
    #[serde(default = "default_warmup_alpha")]
    pub warmup_alpha: f64,
    /// Autoencoder reconstruction weight in the joint phase.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub primary: PrimaryConfig,
    /// `None` trains the smoothness-only baselines.
    #[serde(default)]
    pub cae: Option<CaeConfig>,
    #[serde(default)]
    pub matching: Matching,
    #[serde(default = "default_ncc_window")]
    pub ncc_window: usize,
}

fn default_total_iterations() -> usize {
    20_000
}
fn default_warmup_fraction() -> f64 {
    0.05
}
fn default_warmup_alpha() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    8.0
}
fn default_learning_rate() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    16
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iterations: default_total_iterations(),
            warmup_fraction: default_warmup_fraction(),
            warmup_alpha: default_warmup_alpha(),
            beta: default_beta(),
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            seed: 0,
            primary: PrimaryConfig::default(),
            cae: None,
            matching: Matching::L2,
            ncc_window: default_ncc_window(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "warmup_fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.total_iterations < 20 {
            return Err(Error::InvalidArgument(
                "total_iterations must be >= 20".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument("beta must be >= 0".into()));
        }
        if self.ncc_window % 2 == 0 || self.ncc_window < 3 {
            return Err(Error::InvalidArgument(
                "ncc_window must be odd and >= 3".into(),
            ));
        }
        self.primary.validate()?;
        if let Some(cae) = &self.cae {
            cae.validate()?;
        }
        Ok(())
    }

    /// Number of warm-up iterations.
    pub fn warmup_iterations(&self) -> usize {
        (self.warmup_fraction * self.total_iterations as f64).round() as usize
    }

    /// Effective (alpha, beta) at an iteration.
    pub fn weights_at(&self, iteration: usize) -> (f64, f64) {
        if iteration < self.warmup_iterations() {
            (self.warmup_alpha, 0.0)
        } else if self.cae.is_some() {
            (0.0, self.beta)
        } else {
            // baselines keep their smoothness penalty throughout
            (self.warmup_alpha, 0.0)
        }
    }

    pub fn phase_at(&self, iteration: usize) -> Phase {
        if iteration < self.warmup_iterations() {
            Phase::Warmup
        } else {
            Phase::Main
        }
    }
}

/// Training phase label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Main,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Warmup => write!(f, "warmup"),
            Phase::Main => write!(f, "main"),
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Phase::Warmup),
            "main" => Ok(Phase::Main),
            other => Err(Error::Format(format!("unknown phase '{other}'"))),
        }
    }
}

/// One logged training step (batch means of the loss terms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub matching: f64,
    pub smoothness: f64,
    pub cae_recon: f64,
    pub total: f64,
}

/// Loss history, logged every 100 iterations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "phase", "matching", "smoothness", "cae_recon", "total"])?;
        for r in &self.records {
            w.write_record(&[
                r.iteration.to_string(),
                r.phase.to_string(),
                r.matching.to_string(),
                r.smoothness.to_string(),
                r.cae_recon.to_string(),
                r.total.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad number in history: {}", &rec[i])))
            };
            records.push(HistoryRecord {
                iteration: rec[0]
                    .parse()
                    .map_err(|_| Error::Format("bad iteration in history".into()))?,
                phase: rec[1].parse()?,
                matching: parse(2)?,
                smoothness: parse(3)?,
                cae_recon: parse(4)?,
                total: parse(5)?,
            });
        }
        Ok(TrainHistory { records })
    }
}

/// A trained primary network, its optional autoencoder, and the history.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub primary: PrimaryParams,
    pub cae: Option<CaeParams>,
    pub config: TrainConfig,
    pub history: TrainHistory,
}

/// Adam over a flat list of parameter arrays.
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub(crate) fn new(lr: f64, params: &[&ArrayD<f64>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    pub(crate) fn step(&mut self, params: Vec<&mut ArrayD<f64>>, grads: &[ArrayD<f64>]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

struct SamplePass {
    matching: f64,
    smoothness: f64,
    cae_recon: f64,
    total: f64,
    primary_grads: Vec<ArrayD<f64>>,
    cae_grads: Vec<ArrayD<f64>>,
}

/// Forward + backward for one pair on its own tape.
#[allow(clippy::too_many_arguments)]
fn sample_pass(
    primary: &ParamSet,
    primary_config: &PrimaryConfig,
    cae: Option<(&ParamSet, &CaeConfig)>,
    source: &Image,
    target: &Image,
    alpha: f64,
    beta: f64,
    matching: Matching,
    ncc_window: usize,
) -> SamplePass {
    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, primary);
    let input = tape.leaf(stack_pair(source, target));
    let field = primary_forward_on_tape(&mut tape, &tp, primary_config, input);

    let src = tape.leaf(source.data().clone().into_dyn());
    let tgt = tape.leaf(target.data().clone().into_dyn());
    let registered = tape.warp(src, field);
    let match_term = match matching {
        Matching::L2 => tape.mean_squared_diff(registered, tgt),
        Matching::Ncc => tape.ncc_loss(registered, tgt, ncc_window),
    };

    // the smoothness value is always logged; it only enters the objective
    // when alpha > 0
    let smooth_term = tape.smoothness(field);
    let mut total = match_term;
    if alpha > 0.0 {
        total = tape.add_scaled(total, smooth_term, alpha);
    }

    let mut cae_tp = None;
    let mut recon_term = None;
    if beta > 0.0 {
        if let Some((cae_set, cae_config)) = cae {
            let tc = TapeParams::register(&mut tape, cae_set);
            let (_, recon) = cae_forward_on_tape(&mut tape, &tc, cae_config, field);
            let rec = tape.mean_squared_diff(field, recon);
            total = tape.add_scaled(total, rec, beta);
            cae_tp = Some(tc);
            recon_term = Some(rec);
        }
    }

    let grads = tape.backward(total);
    let primary_grads = tp
        .vars()
        .iter()
        .zip(primary.values())
        .map(|(v, val)| grads.get_or_zeros(*v, val.shape()))
        .collect();
    let cae_grads = match (&cae_tp, cae) {
        (Some(tc), Some((cae_set, _))) => tc
            .vars()
            .iter()
            .zip(cae_set.values())
            .map(|(v, val)| grads.get_or_zeros(*v, val.shape()))
            .collect(),
        _ => Vec::new(),
    };

    SamplePass {
        matching: tape.scalar(match_term),
        smoothness: tape.scalar(smooth_term),
        cae_recon: recon_term.map(|r| tape.scalar(r)).unwrap_or(0.0),
        total: tape.scalar(total),
        primary_grads,
        cae_grads,
    }
}

fn check_finite(term: &str, value: f64, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            term: term.to_string(),
            iteration,
        })
    }
}

/// Trains per the two-phase schedule and returns the trained model with its
/// loss history. Deterministic given the config seed.
pub fn train(config: &TrainConfig, dataset: &PairDataset) -> Result<TrainedModel> {
    config.validate()?;
    if dataset.n_train() == 0 {
        return Err(Error::InvalidArgument(
            "dataset has no training pairs".into(),
        ));
    }

    let mut primary = init_primary(&config.primary, config.seed)?;
    let mut cae = match &config.cae {
        Some(c) => Some(init_cae(c, config.seed.wrapping_add(1))?),
        None => None,
    };
    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));

    let param_refs: Vec<&ArrayD<f64>> = primary
        .set
        .values()
        .iter()
        .chain(cae.iter().flat_map(|c| c.set.values().iter()))
        .collect();
    let mut adam = Adam::new(config.learning_rate, &param_refs);

    let samples = dataset.samples();
    let train_pairs = dataset.train_indices();
    let mut history = TrainHistory::default();

    for it in 0..config.total_iterations {
        let (alpha, beta) = config.weights_at(it);
        let batch: Vec<(usize, usize)> = (0..config.batch_size)
            .map(|_| train_pairs[sampler.gen_range(0..train_pairs.len())])
            .collect();

        let passes: Vec<SamplePass> = batch
            .par_iter()
            .map(|&(si, ti)| {
                sample_pass(
                    &primary.set,
                    &config.primary,
                    cae.as_ref().map(|c| (&c.set, &c.config)),
                    &samples[si].image,
                    &samples[ti].image,
                    alpha,
                    beta,
                    config.matching,
                    config.ncc_window,
                )
            })
            .collect();

        let b = config.batch_size as f64;
        let mean_matching = passes.iter().map(|p| p.matching).sum::<f64>() / b;
        let mean_smooth = passes.iter().map(|p| p.smoothness).sum::<f64>() / b;
        let mean_recon = passes.iter().map(|p| p.cae_recon).sum::<f64>() / b;
        let mean_total = passes.iter().map(|p| p.total).sum::<f64>() / b;
        check_finite("matching", mean_matching, it)?;
        check_finite("smoothness", mean_smooth, it)?;
        check_finite("cae_recon", mean_recon, it)?;

        // fixed-order gradient reduction keeps runs reproducible
        let n_primary = primary.set.len();
        let n_cae = cae.as_ref().map(|c| c.set.len()).unwrap_or(0);
        let mut grads: Vec<ArrayD<f64>> = Vec::with_capacity(n_primary + n_cae);
        for i in 0..n_primary {
            let mut acc = ArrayD::zeros(IxDyn(primary.set.values()[i].shape()));
            for p in &passes {
                acc += &p.primary_grads[i];
            }
            acc.mapv_inplace(|v| v / b);
            grads.push(acc);
        }
        if let Some(c) = &cae {
            for i in 0..n_cae {
                let mut acc = ArrayD::zeros(IxDyn(c.set.values()[i].shape()));
                if beta > 0.0 {
                    for p in &passes {
                        acc += &p.cae_grads[i];
                    }
                    acc.mapv_inplace(|v| v / b);
                }
                grads.push(acc);
            }
        }

        let params: Vec<&mut ArrayD<f64>> = primary
            .set
            .values_mut()
            .iter_mut()
            .chain(cae.iter_mut().flat_map(|c| c.set.values_mut().iter_mut()))
            .collect();
        adam.step(params, &grads);

        if (it + 1) % 100 == 0 {
            history.records.push(HistoryRecord {
                iteration: it + 1,
                phase: config.phase_at(it),
                matching: mean_matching,
                smoothness: mean_smooth,
                cae_recon: mean_recon,
                total: mean_total,
            });
        }
    }

    if !primary.set.all_finite() || cae.as_ref().map(|c| !c.set.all_finite()).unwrap_or(false) {
        return Err(Error::Diverged {
            term: "parameters".into(),
            iteration: config.total_iterations,
        });
    }

    Ok(TrainedModel {
        primary,
        cae,
        config: config.clone(),
        history,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ArraysMeta {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    seed: u64,
    iterations: usize,
    primary: ArraysMeta,
    cae: Option<ArraysMeta>,
}

fn arrays_meta(set: &ParamSet) -> ArraysMeta {
    ArraysMeta {
        names: set.names().to_vec(),
        shapes: set.values().iter().map(|v| v.shape().to_vec()).collect(),
    }
}

fn save_set(dir: &Path, prefix: &str, set: &ParamSet) -> Result<()> {
    for (name, value) in set.names().iter().zip(set.values()) {
        rawio::save_f64_array(dir.join(format!("{prefix}.{name}.raw")), value)?;
    }
    Ok(())
}

fn load_set(dir: &Path, prefix: &str, meta: &ArraysMeta) -> Result<Vec<(String, ArrayD<f64>)>> {
    let mut pairs = Vec::with_capacity(meta.names.len());
    for (name, shape) in meta.names.iter().zip(&meta.shapes) {
        let flat = rawio::load_f64_array(dir.join(format!("{prefix}.{name}.raw")))?;
        let arr = ArrayD::from_shape_vec(IxDyn(shape), flat).map_err(|e| {
            Error::Format(format!("array {prefix}.{name} does not match its shape: {e}"))
        })?;
        pairs.push((name.clone(), arr));
    }
    Ok(pairs)
}

/// Writes a checkpoint directory: `meta.json` plus one raw (64-bit) array
/// file per named parameter.
pub fn save_checkpoint(model: &TrainedModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        config: model.config.clone(),
        seed: model.config.seed,
        iterations: model.config.total_iterations,
        primary: arrays_meta(&model.primary.set),
        cae: model.cae.as_ref().map(|c| arrays_meta(&c.set)),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    save_set(dir, "primary", &model.primary.set)?;
    if let Some(cae) = &model.cae {
        save_set(dir, "cae", &cae.set)?;
    }
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`]. The returned model
/// carries an empty history (the history CSV lives beside the checkpoint).
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<TrainedModel> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let bytes = std::fs::read(&meta_path).map_err(|e| {
        Error::Format(format!(
            "cannot read checkpoint metadata {}: {e}",
            meta_path.display()
        ))
    })?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("corrupt checkpoint metadata: {e}")))?;

    let primary = PrimaryParams {
        config: meta.config.primary.clone(),
        set: ParamSet::from_pairs(load_set(dir, "primary", &meta.primary)?),
    };
    let cae = match (&meta.cae, &meta.config.cae) {
        (Some(cae_meta), Some(cae_config)) => Some(CaeParams {
            config: cae_config.clone(),
            set: ParamSet::from_pairs(load_set(dir, "cae", cae_meta)?),
        }),
        (None, None) => None,
        _ => {
            return Err(Error::Format(
                "checkpoint metadata disagrees about the autoencoder".into(),
            ))
        }
    };
    Ok(TrainedModel {
        primary,
        cae,
        config: meta.config,
        history: TrainHistory::default(),
    })
}
