//! The primary displacement-regression network (encoder-decoder with skip
//! connections) and the secondary cooperative autoencoder.
//!
//! The primary network stacks source and target as a two-channel input,
//! runs `levels` encoder stages (two 3x3 convolutions with leaky-rectifier
//! activations, 2x average-pool downsampling and channel doubling between
//! stages) and a mirrored decoder with nearest-neighbor upsampling and
//! optional skip concatenation. A 1x1 zero-initialized head emits the
//! two-channel displacement field, so an untrained network starts at the
//! identity transform. Setting `bottleneck_dim` threads the coarsest
//! feature map through a narrow dense layer (the hard-bottleneck variant);
//! disabling `skip_connections` additionally makes that bottleneck a hard
//! constraint on the field's degrees of freedom.
//!
//! The cooperative autoencoder encodes a displacement field through strided
//! convolutions into an `h`-unit linear latent, then decodes back with
//! transposed convolutions. Both networks run on the tape-based autodiff in
//! [`crate::tape`].

use std::collections::HashMap;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Image};
use crate::tape::{Tape, Var};

const LEAKY_SLOPE: f64 = 0.2;

/// Configuration of the primary registration network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimaryConfig {
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_true")]
    pub skip_connections: bool,
    /// Width of the dense bottleneck at the coarsest level; `None` is the
    /// standard architecture.
    #[serde(default)]
    pub bottleneck_dim: Option<usize>,
    /// Side length the network is built for; only consulted by the dense
    /// bottleneck, whose weight shapes depend on the coarsest map size.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
}

fn default_levels() -> usize {
    4
}
fn default_base_channels() -> usize {
    16
}
fn default_true() -> bool {
    true
}
fn default_input_size() -> usize {
    crate::synth::IMAGE_SIZE
}

impl Default for PrimaryConfig {
    fn default() -> Self {
        PrimaryConfig {
            levels: default_levels(),
            base_channels: default_base_channels(),
            skip_connections: true,
            bottleneck_dim: None,
            input_size: default_input_size(),
        }
    }
}

impl PrimaryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::InvalidArgument("levels must be >= 2".into()));
        }
        if self.base_channels < 4 {
            return Err(Error::InvalidArgument("base_channels must be >= 4".into()));
        }
        if let Some(d) = self.bottleneck_dim {
            if d < 1 {
                return Err(Error::InvalidArgument("bottleneck_dim must be >= 1".into()));
            }
            if self.input_size % (1 << (self.levels - 1)) != 0 {
                return Err(Error::InvalidArgument(format!(
                    "input_size {} not divisible by 2^(levels-1)",
                    self.input_size
                )));
            }
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn coarse_flat_dim(&self) -> usize {
        let side = self.input_size >> (self.levels - 1);
        self.channels(self.levels - 1) * side * side
    }
}

/// Configuration of the cooperative autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaeConfig {
    /// Bottleneck width (degrees of freedom of the latent space).
    pub h: usize,
    #[serde(default = "default_cae_levels")]
    pub levels: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
}

fn default_cae_levels() -> usize {
    3
}

impl Default for CaeConfig {
    fn default() -> Self {
        CaeConfig {
            h: 1,
            levels: default_cae_levels(),
            base_channels: default_base_channels(),
            input_size: default_input_size(),
        }
    }
}

impl CaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h < 1 {
            return Err(Error::InvalidArgument("bottleneck h must be >= 1".into()));
        }
        if self.levels < 1 {
            return Err(Error::InvalidArgument("cae levels must be >= 1".into()));
        }
        if self.input_size % (1 << self.levels) != 0 {
            return Err(Error::InvalidArgument(format!(
                "input_size {} not divisible by 2^levels",
                self.input_size
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn coarse_side(&self) -> usize {
        self.input_size >> self.levels
    }

    fn flat_dim(&self) -> usize {
        let side = self.coarse_side();
        self.channels(self.levels - 1) * side * side
    }
}

/// An ordered, named collection of parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    /// Rebuilds a set from ordered (name, value) pairs, e.g. a checkpoint.
    pub fn from_pairs(pairs: Vec<(String, ArrayD<f64>)>) -> Self {
        let mut set = ParamSet::new();
        for (name, value) in pairs {
            set.add(name, value);
        }
        set
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Parameter leaves registered on a tape, addressable by name.
pub struct TapeParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl TapeParams {
    /// Registers every array of a set as a tape leaf, in set order.
    pub fn register(tape: &mut Tape, set: &ParamSet) -> Self {
        let vars = set.values.iter().map(|v| tape.leaf(v.clone())).collect();
        TapeParams {
            vars,
            index: set.index.clone(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))]
    }

    /// Leaf handles in set order, aligned with `ParamSet::values`.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

fn add_conv(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    set.add(
        format!("{name}.w"),
        fan_in_uniform(rng, &[c_out, c_in, k, k], c_in * k * k),
    );
    set.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out])));
}

fn add_conv_transpose(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    set.add(
        format!("{name}.w"),
        fan_in_uniform(rng, &[c_in, c_out, k, k], c_in * k * k),
    );
    set.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out])));
}

fn add_dense(set: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, n_in: usize, n_out: usize) {
    set.add(format!("{name}.w"), fan_in_uniform(rng, &[n_out, n_in], n_in));
    set.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[n_out])));
}

/// Primary network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryParams {
    pub config: PrimaryConfig,
    pub set: ParamSet,
}

/// Cooperative autoencoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CaeParams {
    pub config: CaeConfig,
    pub set: ParamSet,
}

/// Initializes primary network parameters. Convolution and dense weights
/// are drawn from a fan-in-scaled uniform distribution; biases start at
/// zero; the displacement head is zero-initialized so the untrained network
/// outputs the identity field. Deterministic given `seed`.
pub fn init_primary(config: &PrimaryConfig, seed: u64) -> Result<PrimaryParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();

    let mut c_in = 2;
    for i in 0..config.levels {
        let ch = config.channels(i);
        add_conv(&mut set, &mut rng, &format!("enc{i}.conv0"), c_in, ch, 3);
        add_conv(&mut set, &mut rng, &format!("enc{i}.conv1"), ch, ch, 3);
        c_in = ch;
    }
    if let Some(bd) = config.bottleneck_dim {
        let flat = config.coarse_flat_dim();
        add_dense(&mut set, &mut rng, "bottleneck.down", flat, bd);
        add_dense(&mut set, &mut rng, "bottleneck.up", bd, flat);
    }
    for i in (0..config.levels - 1).rev() {
        let ch = config.channels(i);
        let up_ch = config.channels(i + 1);
        let in_ch = if config.skip_connections { ch + up_ch } else { up_ch };
        add_conv(&mut set, &mut rng, &format!("dec{i}.conv0"), in_ch, ch, 3);
        add_conv(&mut set, &mut rng, &format!("dec{i}.conv1"), ch, ch, 3);
    }
    set.add("head.w", ArrayD::zeros(IxDyn(&[2, config.base_channels, 1, 1])));
    set.add("head.b", ArrayD::zeros(IxDyn(&[2])));

    Ok(PrimaryParams { config: config.clone(), set })
}

/// Initializes autoencoder parameters (fan-in-scaled uniform weights, zero
/// biases, no zero-initialized head). Deterministic given `seed`.
pub fn init_cae(config: &CaeConfig, seed: u64) -> Result<CaeParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();

    let mut c_in = 2;
    for i in 0..config.levels {
        let ch = config.channels(i);
        add_conv(&mut set, &mut rng, &format!("enc{i}"), c_in, ch, 3);
        c_in = ch;
    }
    let flat = config.flat_dim();
    add_dense(&mut set, &mut rng, "latent.down", flat, config.h);
    add_dense(&mut set, &mut rng, "latent.up", config.h, flat);
    for i in (0..config.levels).rev() {
        let ch = config.channels(i);
        let c_out = if i == 0 { 2 } else { config.channels(i - 1) };
        add_conv_transpose(&mut set, &mut rng, &format!("dec{i}"), ch, c_out, 3);
    }

    Ok(CaeParams { config: config.clone(), set })
}

fn conv_block(tape: &mut Tape, tp: &TapeParams, name: &str, x: Var) -> Var {
    let y = tape.conv2d(x, tp.var(&format!("{name}.w")), tp.var(&format!("{name}.b")), 1, 1);
    tape.leaky_relu(y, LEAKY_SLOPE)
}

/// Tape-level primary forward: `input (2, H, W)` -> field `(2, H, W)`.
///
/// Building block for training loops and gradient checks; the plain
/// [`primary_forward`] wraps it for single evaluations.
pub fn primary_forward_on_tape(
    tape: &mut Tape,
    tp: &TapeParams,
    config: &PrimaryConfig,
    input: Var,
) -> Var {
    let mut x = input;
    let mut skips = Vec::new();
    for i in 0..config.levels {
        x = conv_block(tape, tp, &format!("enc{i}.conv0"), x);
        x = conv_block(tape, tp, &format!("enc{i}.conv1"), x);
        if i + 1 < config.levels {
            skips.push(x);
            x = tape.avg_pool2(x);
        }
    }
    if config.bottleneck_dim.is_some() {
        let shape = tape.value(x).shape().to_vec();
        let flat = tape.flatten(x);
        let z = tape.dense(flat, tp.var("bottleneck.down.w"), tp.var("bottleneck.down.b"));
        let up = tape.dense(z, tp.var("bottleneck.up.w"), tp.var("bottleneck.up.b"));
        let up = tape.leaky_relu(up, LEAKY_SLOPE);
        x = tape.reshape(up, &shape);
    }
    for i in (0..config.levels - 1).rev() {
        x = tape.upsample_nearest2(x);
        if config.skip_connections {
            x = tape.concat_channels(skips[i], x);
        }
        x = conv_block(tape, tp, &format!("dec{i}.conv0"), x);
        x = conv_block(tape, tp, &format!("dec{i}.conv1"), x);
    }
    tape.conv2d(x, tp.var("head.w"), tp.var("head.b"), 1, 0)
}

/// Tape-level autoencoder forward: field `(2, H, W)` -> (latent `(h,)`,
/// reconstruction `(2, H, W)`).
pub fn cae_forward_on_tape(
    tape: &mut Tape,
    tp: &TapeParams,
    config: &CaeConfig,
    field: Var,
) -> (Var, Var) {
    let mut x = field;
    for i in 0..config.levels {
        let y = tape.conv2d(
            x,
            tp.var(&format!("enc{i}.w")),
            tp.var(&format!("enc{i}.b")),
            2,
            1,
        );
        x = tape.leaky_relu(y, LEAKY_SLOPE);
    }
    let flat = tape.flatten(x);
    let latent = tape.dense(flat, tp.var("latent.down.w"), tp.var("latent.down.b"));
    let recon = cae_decode_on_tape(tape, tp, config, latent);
    (latent, recon)
}

/// Tape-level decoder: latent `(h,)` -> field `(2, H, W)`. The decoder sees
/// the input only through the latent, which is what makes the bottleneck an
/// information bottleneck.
pub fn cae_decode_on_tape(
    tape: &mut Tape,
    tp: &TapeParams,
    config: &CaeConfig,
    latent: Var,
) -> Var {
    let side = config.coarse_side();
    let up = tape.dense(latent, tp.var("latent.up.w"), tp.var("latent.up.b"));
    let up = tape.leaky_relu(up, LEAKY_SLOPE);
    let mut x = tape.reshape(up, &[config.channels(config.levels - 1), side, side]);
    for i in (0..config.levels).rev() {
        x = tape.conv_transpose2d(
            x,
            tp.var(&format!("dec{i}.w")),
            tp.var(&format!("dec{i}.b")),
            2,
            1,
            1,
        );
        if i > 0 {
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
    }
    x
}

/// Stacks a source/target pair into the network input layout `(2, H, W)`.
pub fn stack_pair(source: &Image, target: &Image) -> ArrayD<f64> {
    let (h, w) = (source.height(), source.width());
    let mut input = ArrayD::zeros(IxDyn(&[2, h, w]));
    for r in 0..h {
        for c in 0..w {
            input[[0, r, c]] = source.data()[[r, c]];
            input[[1, r, c]] = target.data()[[r, c]];
        }
    }
    input
}

/// Converts a `(2, H, W)` tape tensor into a displacement field `(H, W, 2)`.
pub fn tensor_to_field(t: &ArrayD<f64>) -> DisplacementField {
    let shape = t.shape();
    let (h, w) = (shape[1], shape[2]);
    let data = Array3::from_shape_fn((h, w, 2), |(r, c, k)| t[[k, r, c]]);
    DisplacementField::new(data).expect("network output must be finite")
}

/// Converts a displacement field `(H, W, 2)` into the `(2, H, W)` layout.
pub fn field_to_tensor(f: &DisplacementField) -> ArrayD<f64> {
    let (h, w) = (f.height(), f.width());
    ArrayD::from_shape_fn(IxDyn(&[2, h, w]), |d| f.data()[[d[1], d[2], d[0]]])
}

fn validate_primary_input(config: &PrimaryConfig, source: &Image, target: &Image) -> Result<()> {
    if source.height() != target.height() || source.width() != target.width() {
        return Err(Error::ShapeMismatch(format!(
            "source is {}x{}, target is {}x{}",
            source.height(),
            source.width(),
            target.height(),
            target.width()
        )));
    }
    let div = 1 << (config.levels - 1);
    if source.height() % div != 0 || source.width() % div != 0 {
        return Err(Error::InvalidArgument(format!(
            "input dims {}x{} must be divisible by 2^(levels-1) = {div}",
            source.height(),
            source.width()
        )));
    }
    if config.bottleneck_dim.is_some()
        && (source.height() != config.input_size || source.width() != config.input_size)
    {
        return Err(Error::ShapeMismatch(format!(
            "bottleneck network built for {0}x{0} inputs",
            config.input_size
        )));
    }
    Ok(())
}

/// Runs the primary network on an image pair, producing the displacement
/// field that warps `source` toward `target`.
pub fn primary_forward(
    params: &PrimaryParams,
    source: &Image,
    target: &Image,
) -> Result<DisplacementField> {
    validate_primary_input(&params.config, source, target)?;
    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, &params.set);
    let input = tape.leaf(stack_pair(source, target));
    let out = primary_forward_on_tape(&mut tape, &tp, &params.config, input);
    Ok(tensor_to_field(tape.value(out)))
}

fn validate_cae_input(config: &CaeConfig, field: &DisplacementField) -> Result<()> {
    if field.height() != config.input_size || field.width() != config.input_size {
        return Err(Error::ShapeMismatch(format!(
            "autoencoder built for {0}x{0} fields, got {1}x{2}",
            config.input_size,
            field.height(),
            field.width()
        )));
    }
    Ok(())
}

/// Runs the autoencoder on a displacement field, returning the latent code
/// and the reconstructed field.
pub fn cae_forward(
    params: &CaeParams,
    field: &DisplacementField,
) -> Result<(Vec<f64>, DisplacementField)> {
    validate_cae_input(&params.config, field)?;
    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, &params.set);
    let input = tape.leaf(field_to_tensor(field));
    let (latent, recon) = cae_forward_on_tape(&mut tape, &tp, &params.config, input);
    let latent_vec = tape.value(latent).iter().copied().collect();
    Ok((latent_vec, tensor_to_field(tape.value(recon))))
}

/// Decodes a latent vector back into a displacement field.
pub fn cae_decode(params: &CaeParams, latent: &[f64]) -> Result<DisplacementField> {
    if latent.len() != params.config.h {
        return Err(Error::InvalidArgument(format!(
            "latent has {} entries, expected h = {}",
            latent.len(),
            params.config.h
        )));
    }
    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, &params.set);
    let z = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[latent.len()]), latent.to_vec()).unwrap());
    let out = cae_decode_on_tape(&mut tape, &tp, &params.config, z);
    Ok(tensor_to_field(tape.value(out)))
}
