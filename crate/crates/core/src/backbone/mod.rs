//! Toy multimodal transformer over the packed latent sequence.
//!
//! One joint stream attends over image tokens (noisy target plus all
//! references) and symbolic instruction tokens. Reference identity enters
//! through segment embeddings, geometry through 2D rotary positions, and
//! the timestep through a sinusoidal embedding projected and added to every
//! token. The output head reads the leading `target_len` rows as the
//! predicted velocity. All forward passes are recorded on an
//! [`autodiff::Tape`], so gradients are exact for the implemented graph.

pub mod adapter;
pub mod checkpoint;
pub mod instruction;

pub use adapter::{adapter_targets, apply_adapter, merge_adapter, AdapterParams};
pub use instruction::{CellId, Directive, EditAction, Instruction, InstructionError};

use crate::autodiff::{GradMap, Tape, Var};
use crate::packing::PackedSequence;
use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("width {width} must split into heads of dimension divisible by 4 (heads={heads})")]
    IndivisibleWidth { width: usize, heads: usize },
    #[error("config field {0} must be positive")]
    NonPositiveConfig(&'static str),
    #[error("instruction token {id} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { id: u16, vocab: usize },
    #[error("segment {segment} exceeds the configured maximum of {max_refs} references")]
    SegmentOutOfRange { segment: usize, max_refs: usize },
    #[error("timestep {0} outside [0, 1]")]
    BadTimestep(f64),
    #[error("token channel mismatch: model expects {expected}, sequence has {got}")]
    TokenChannelMismatch { expected: usize, got: usize },
    #[error("array {name}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("unknown parameter array `{0}`")]
    UnknownArray(String),
    #[error("non-finite loss{}", .first_bad.as_ref().map(|n| format!(" (first non-finite array: {n})")).unwrap_or_default())]
    NonFiniteLoss { first_bad: Option<String> },
    #[error("non-finite forward output")]
    NonFiniteOutput,
    #[error(transparent)]
    Instruction(#[from] InstructionError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Instruction vocabulary size.
    pub vocab: usize,
    /// Channels per image token (3 * patch_pixels^2).
    pub token_channels: usize,
    /// Largest reference segment id the segment table covers.
    pub max_refs: usize,
    /// Rotary frequency base.
    pub rope_base: f64,
    /// Absolute position-table size; grid indices clamp to it. Rotary
    /// attention is translation-invariant, so these learned row/column
    /// embeddings are what lets a token localize itself on the canvas.
    pub max_position: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl BackboneConfig {
    /// Trains on a laptop CPU: 4 layers, width 64, 4 heads.
    pub fn desk_default() -> Self {
        Self {
            layers: 4,
            width: 64,
            heads: 4,
            vocab: instruction::VOCAB_SIZE,
            token_channels: 48,
            max_refs: 8,
            rope_base: 100.0,
            max_position: 64,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        for (value, name) in [
            (self.layers, "layers"),
            (self.width, "width"),
            (self.heads, "heads"),
            (self.vocab, "vocab"),
            (self.token_channels, "token_channels"),
            (self.max_refs, "max_refs"),
            (self.max_position, "max_position"),
        ] {
            if value == 0 {
                return Err(BackboneError::NonPositiveConfig(name));
            }
        }
        if self.width % self.heads != 0 || (self.width / self.heads) % 4 != 0 {
            return Err(BackboneError::IndivisibleWidth {
                width: self.width,
                heads: self.heads,
            });
        }
        Ok(())
    }

    fn ffn_dim(&self) -> usize {
        4 * self.width
    }

    /// Segment-embedding row used by instruction tokens.
    fn instruction_segment(&self) -> usize {
        self.max_refs + 1
    }
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

fn param_specs(cfg: &BackboneConfig) -> Vec<(String, (usize, usize), Init)> {
    let w = cfg.width;
    let mut specs = vec![
        ("embed.instr".to_string(), (cfg.vocab, w), Init::Normal),
        (
            "embed.segment".to_string(),
            (cfg.max_refs + 2, w),
            Init::Normal,
        ),
        (
            "embed.pos_row".to_string(),
            (cfg.max_position, w),
            Init::Normal,
        ),
        (
            "embed.pos_col".to_string(),
            (cfg.max_position, w),
            Init::Normal,
        ),
        (
            "in_proj.w".to_string(),
            (cfg.token_channels, w),
            Init::Normal,
        ),
        ("in_proj.b".to_string(), (1, w), Init::Zeros),
        ("time.w1".to_string(), (w, w), Init::Normal),
        ("time.b1".to_string(), (1, w), Init::Zeros),
        ("time.w2".to_string(), (w, w), Init::Normal),
        ("time.b2".to_string(), (1, w), Init::Zeros),
    ];
    for i in 0..cfg.layers {
        let l = |suffix: &str| format!("layers.{i}.{suffix}");
        specs.push((l("ln1.g"), (1, w), Init::Ones));
        specs.push((l("ln1.b"), (1, w), Init::Zeros));
        for proj in ["wq", "wk", "wv", "wo"] {
            specs.push((l(&format!("attn.{proj}")), (w, w), Init::Normal));
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            specs.push((l(&format!("attn.{bias}")), (1, w), Init::Zeros));
        }
        specs.push((l("ln2.g"), (1, w), Init::Ones));
        specs.push((l("ln2.b"), (1, w), Init::Zeros));
        specs.push((l("ffn.w1"), (w, cfg.ffn_dim()), Init::Normal));
        specs.push((l("ffn.b1"), (1, cfg.ffn_dim()), Init::Zeros));
        specs.push((l("ffn.w2"), (cfg.ffn_dim(), w), Init::Normal));
        specs.push((l("ffn.b2"), (1, w), Init::Zeros));
    }
    specs.push(("final_ln.g".to_string(), (1, w), Init::Ones));
    specs.push(("final_ln.b".to_string(), (1, w), Init::Zeros));
    // Output head starts at zero so the initial velocity field is the bias.
    specs.push(("head.w".to_string(), (w, cfg.token_channels), Init::Zeros));
    specs.push(("head.b".to_string(), (1, cfg.token_channels), Init::Zeros));
    // Direct linear path from the noisy target tokens to the correction;
    // the -x_t component of x0 - x_t lives here instead of threading
    // through the normalized trunk.
    specs.push((
        "head.skip".to_string(),
        (cfg.token_channels, cfg.token_channels),
        Init::Zeros,
    ));
    specs
}

/// Named parameter arrays plus the config they implement.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: BackboneConfig,
    arrays: BTreeMap<String, Array2<f64>>,
}

impl ModelParams {
    pub fn array(&self, name: &str) -> &Array2<f64> {
        &self.arrays[name]
    }

    pub fn array_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.arrays.get_mut(name).expect("known array name")
    }

    pub fn arrays(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.arrays.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub(crate) fn from_arrays(
        config: BackboneConfig,
        arrays: BTreeMap<String, Array2<f64>>,
    ) -> Self {
        Self { config, arrays }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    fn first_non_finite(&self) -> Option<String> {
        self.arrays
            .iter()
            .find(|(_, a)| a.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n.clone())
    }

    /// Stable hash over the flattened arrays in name order, computed on the
    /// 32-bit representation used by the checkpoint container.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, arr) in &self.arrays {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            hasher.update((arr.nrows() as u64).to_le_bytes());
            hasher.update((arr.ncols() as u64).to_le_bytes());
            for v in arr.iter() {
                hasher.update((*v as f32).to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Deterministic initialization: weights from N(0, 0.02²), biases and the
/// output head at zero, layer-norm scales at one.
pub fn init_params(config: &BackboneConfig, seed: u64) -> Result<ModelParams, BackboneError> {
    config.validate()?;
    let mut rng = crate::seeding::derive_rng(seed, "backbone.init", 0, 0);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut arrays = BTreeMap::new();
    for (name, (rows, cols), init) in param_specs(config) {
        let array = match init {
            Init::Normal => Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng)),
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::from_elem((rows, cols), 1.0),
        };
        arrays.insert(name, array);
    }
    Ok(ModelParams {
        config: config.clone(),
        arrays,
    })
}

/// Per-pair rotation angles for one position: the first half of a head's
/// pairs rotate by row angles, the second half by column angles.
pub fn pair_angles(head_dim: usize, rope_base: f64, position: (usize, usize)) -> Vec<f64> {
    assert!(head_dim % 4 == 0, "head dimension must be divisible by 4");
    let quarter = head_dim / 4;
    (0..head_dim / 2)
        .map(|j| {
            let (coord, idx) = if j < quarter {
                (position.0, j)
            } else {
                (position.1, j - quarter)
            };
            let omega = rope_base.powf(-(idx as f64) / quarter as f64);
            coord as f64 * omega
        })
        .collect()
}

/// Rotate one head-dimension vector by its 2D position. Position (0, 0) is
/// the identity; the map is an isometry.
pub fn rope_rotate(vector: &[f64], position: (usize, usize), rope_base: f64) -> Vec<f64> {
    let angles = pair_angles(vector.len(), rope_base, position);
    let mut out = vector.to_vec();
    for (j, theta) in angles.iter().enumerate() {
        let (c, s) = (theta.cos(), theta.sin());
        let x1 = vector[2 * j];
        let x2 = vector[2 * j + 1];
        out[2 * j] = c * x1 - s * x2;
        out[2 * j + 1] = s * x1 + c * x2;
    }
    out
}

/// How parameter arrays bind onto a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    /// Everything is constant; no gradients flow.
    Frozen,
    /// Base arrays are trainable leaves.
    TrainBase,
    /// Only adapter factors are trainable; base arrays are constant.
    TrainAdapter,
}

/// Lazily binds parameter arrays (optionally composed with a low-rank
/// adapter) onto a tape, caching one node per array.
pub struct ParamBinder<'p> {
    params: &'p ModelParams,
    adapter: Option<&'p AdapterParams>,
    mode: ParamMode,
    bound: BTreeMap<String, Var>,
}

impl<'p> ParamBinder<'p> {
    pub fn new(
        params: &'p ModelParams,
        adapter: Option<&'p AdapterParams>,
        mode: ParamMode,
    ) -> Self {
        Self {
            params,
            adapter,
            mode,
            bound: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Node for an array, creating it on first use. With an adapter present
    /// on a targeted array the node is `base + (alpha/r) * down·up`.
    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var, BackboneError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let Some(base) = self.params.arrays.get(name) else {
            return Err(BackboneError::UnknownArray(name.to_string()));
        };
        let base_var = match self.mode {
            ParamMode::TrainBase => tape.leaf(name, base.clone()),
            _ => tape.constant(base.clone()),
        };
        let var = match self.adapter.and_then(|a| a.factors(name)) {
            Some((down, up)) => {
                let adapter = self.adapter.unwrap();
                let (down_var, up_var) = if self.mode == ParamMode::TrainAdapter {
                    (
                        tape.leaf(&format!("adapter.{name}.down"), down.clone()),
                        tape.leaf(&format!("adapter.{name}.up"), up.clone()),
                    )
                } else {
                    (tape.constant(down.clone()), tape.constant(up.clone()))
                };
                let delta = tape.matmul(down_var, up_var);
                let scaled = tape.scale(delta, adapter.scale());
                tape.add(base_var, scaled)
            }
            None => base_var,
        };
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }
}

fn time_features(t: f64, width: usize) -> Array2<f64> {
    let half = width / 2;
    let mut out = Array2::zeros((1, width));
    for k in 0..half {
        let omega = 10_000f64.powf(-(k as f64) / half as f64);
        let arg = t * 1_000.0 * omega;
        out[(0, 2 * k)] = arg.sin();
        out[(0, 2 * k + 1)] = arg.cos();
    }
    out
}

fn rope_tables(
    cfg: &BackboneConfig,
    positions: &[(usize, usize)],
) -> (Array2<f64>, Array2<f64>) {
    let pairs = cfg.width / 2;
    let head_pairs = cfg.head_dim() / 2;
    let mut cos = Array2::zeros((positions.len(), pairs));
    let mut sin = Array2::zeros((positions.len(), pairs));
    for (i, &pos) in positions.iter().enumerate() {
        let angles = pair_angles(cfg.head_dim(), cfg.rope_base, pos);
        for p in 0..pairs {
            let theta = angles[p % head_pairs];
            cos[(i, p)] = theta.cos();
            sin[(i, p)] = theta.sin();
        }
    }
    (cos, sin)
}

/// Build the forward graph on `tape`, returning the `(target_len,
/// token_channels)` predicted-velocity node.
pub fn build_forward(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    packed: &PackedSequence,
    t: f64,
    instr: &Instruction,
) -> Result<Var, BackboneError> {
    let cfg = binder.params().config.clone();
    if !t.is_finite() || !(0.0..=1.0).contains(&t) {
        return Err(BackboneError::BadTimestep(t));
    }
    if packed.tokens.ncols() != cfg.token_channels {
        return Err(BackboneError::TokenChannelMismatch {
            expected: cfg.token_channels,
            got: packed.tokens.ncols(),
        });
    }
    for &segment in &packed.segments {
        if segment > cfg.max_refs {
            return Err(BackboneError::SegmentOutOfRange {
                segment,
                max_refs: cfg.max_refs,
            });
        }
    }
    for &id in instr.tokens() {
        if id as usize >= cfg.vocab {
            return Err(BackboneError::TokenOutOfVocab {
                id,
                vocab: cfg.vocab,
            });
        }
    }

    // Image tokens -> width.
    let image_tokens = tape.constant(packed.tokens.clone());
    let in_w = binder.var(tape, "in_proj.w")?;
    let in_b = binder.var(tape, "in_proj.b")?;
    let projected = tape.matmul(image_tokens, in_w);
    let projected = tape.add_row(projected, in_b);

    // Instruction tokens -> width via the embedding table.
    let instr_ids: Vec<usize> = instr.tokens().iter().map(|&t| t as usize).collect();
    let instr_table = binder.var(tape, "embed.instr")?;
    let mut h = if instr_ids.is_empty() {
        projected
    } else {
        let instr_emb = tape.gather_rows(instr_table, &instr_ids);
        tape.concat_rows(&[projected, instr_emb])
    };

    // Segment identities: 0 target, k references, final row instructions.
    let mut seg_ids: Vec<usize> = packed.segments.clone();
    seg_ids.extend(std::iter::repeat_n(cfg.instruction_segment(), instr_ids.len()));
    let seg_table = binder.var(tape, "embed.segment")?;
    let seg_emb = tape.gather_rows(seg_table, &seg_ids);
    h = tape.add(h, seg_emb);

    // Grid positions: image tokens use their latent cell, instruction
    // token i sits at (i, i) to keep order information.
    let mut positions = packed.positions.clone();
    positions.extend((0..instr_ids.len()).map(|i| (i, i)));

    // Absolute row/column embeddings; indices clamp to the table.
    let cap = cfg.max_position - 1;
    let row_ids: Vec<usize> = positions.iter().map(|&(r, _)| r.min(cap)).collect();
    let col_ids: Vec<usize> = positions.iter().map(|&(_, c)| c.min(cap)).collect();
    let row_table = binder.var(tape, "embed.pos_row")?;
    let col_table = binder.var(tape, "embed.pos_col")?;
    let row_emb = tape.gather_rows(row_table, &row_ids);
    let col_emb = tape.gather_rows(col_table, &col_ids);
    h = tape.add(h, row_emb);
    h = tape.add(h, col_emb);

    // Timestep conditioning added to every token.
    let tf = tape.constant(time_features(t, cfg.width));
    let t_w1 = binder.var(tape, "time.w1")?;
    let t_b1 = binder.var(tape, "time.b1")?;
    let t_w2 = binder.var(tape, "time.w2")?;
    let t_b2 = binder.var(tape, "time.b2")?;
    let time_row = tape.matmul(tf, t_w1);
    let time_row = tape.add_row(time_row, t_b1);
    let time_row = tape.gelu(time_row);
    let time_row = tape.matmul(time_row, t_w2);
    let time_row = tape.add_row(time_row, t_b2);
    h = tape.add_row(h, time_row);

    let (cos, sin) = rope_tables(&cfg, &positions);

    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    for layer in 0..cfg.layers {
        let name = |suffix: &str| format!("layers.{layer}.{suffix}");
        let ln1_g = binder.var(tape, &name("ln1.g"))?;
        let ln1_b = binder.var(tape, &name("ln1.b"))?;
        let normed = tape.layer_norm(h, ln1_g, ln1_b, 1e-5);

        let wq = binder.var(tape, &name("attn.wq"))?;
        let bq = binder.var(tape, &name("attn.bq"))?;
        let wk = binder.var(tape, &name("attn.wk"))?;
        let bk = binder.var(tape, &name("attn.bk"))?;
        let wv = binder.var(tape, &name("attn.wv"))?;
        let bv = binder.var(tape, &name("attn.bv"))?;
        let q = tape.matmul(normed, wq);
        let q = tape.add_row(q, bq);
        let k = tape.matmul(normed, wk);
        let k = tape.add_row(k, bk);
        let v = tape.matmul(normed, wv);
        let v = tape.add_row(v, bv);
        let q = tape.rotate_pairs(q, cos.clone(), sin.clone());
        let k = tape.rotate_pairs(k, cos.clone(), sin.clone());

        let mut head_outputs = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let start = head * head_dim;
            let qh = tape.slice_cols(q, start, head_dim);
            let kh = tape.slice_cols(k, start, head_dim);
            let vh = tape.slice_cols(v, start, head_dim);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            head_outputs.push(tape.matmul(attn, vh));
        }
        let merged = tape.concat_cols(&head_outputs);
        let wo = binder.var(tape, &name("attn.wo"))?;
        let bo = binder.var(tape, &name("attn.bo"))?;
        let attn_out = tape.matmul(merged, wo);
        let attn_out = tape.add_row(attn_out, bo);
        h = tape.add(h, attn_out);

        let ln2_g = binder.var(tape, &name("ln2.g"))?;
        let ln2_b = binder.var(tape, &name("ln2.b"))?;
        let normed = tape.layer_norm(h, ln2_g, ln2_b, 1e-5);
        let w1 = binder.var(tape, &name("ffn.w1"))?;
        let b1 = binder.var(tape, &name("ffn.b1"))?;
        let w2 = binder.var(tape, &name("ffn.w2"))?;
        let b2 = binder.var(tape, &name("ffn.b2"))?;
        let f = tape.matmul(normed, w1);
        let f = tape.add_row(f, b1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, b2);
        h = tape.add(h, f);
    }

    let fg = binder.var(tape, "final_ln.g")?;
    let fb = binder.var(tape, "final_ln.b")?;
    let normed = tape.layer_norm(h, fg, fb, 1e-5);
    let sliced = tape.slice_rows(normed, 0, packed.target_len);
    let head_w = binder.var(tape, "head.w")?;
    let head_b = binder.var(tape, "head.b")?;
    let out = tape.matmul(sliced, head_w);
    let out = tape.add_row(out, head_b);
    let target_tokens = tape.constant(
        packed
            .tokens
            .slice(ndarray::s![..packed.target_len, ..])
            .to_owned(),
    );
    let skip_w = binder.var(tape, "head.skip")?;
    let skip = tape.matmul(target_tokens, skip_w);
    let out = tape.add(out, skip);
    // The head output is read as the denoising correction x0 - x_t, which
    // carries (1-t) of the transport gap along the interpolation path; the
    // exact 1/(1-t) gain converts it to the velocity, so the network never
    // has to learn a multiplicative timestep interaction.
    let out = tape.scale(out, 1.0 / (1.0 - t).max(1e-6));
    Ok(out)
}

/// Predicted velocity tokens for the target slice: `(target_len, channels)`.
pub fn forward(
    params: &ModelParams,
    packed: &PackedSequence,
    t: f64,
    instr: &Instruction,
) -> Result<Array2<f64>, BackboneError> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(params, None, ParamMode::Frozen);
    let out = build_forward(&mut tape, &mut binder, packed, t, instr)?;
    let value = tape.value(out);
    if value.iter().any(|v| !v.is_finite()) {
        return Err(BackboneError::NonFiniteOutput);
    }
    Ok(value.clone())
}

/// Forward under an adapted parameter view without materializing the merge.
pub fn forward_adapted(
    params: &ModelParams,
    adapter: &AdapterParams,
    packed: &PackedSequence,
    t: f64,
    instr: &Instruction,
) -> Result<Array2<f64>, BackboneError> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(params, Some(adapter), ParamMode::Frozen);
    let out = build_forward(&mut tape, &mut binder, packed, t, instr)?;
    Ok(tape.value(out).clone())
}

/// Evaluate a scalar loss of the parameters and return `(loss, gradients)`,
/// exact for the recorded graph. The closure builds the loss from bound
/// parameter nodes, typically through [`build_forward`].
pub fn grad<F>(params: &ModelParams, loss_fn: F) -> Result<(f64, GradMap), BackboneError>
where
    F: FnOnce(&mut Tape, &mut ParamBinder) -> Result<Var, BackboneError>,
{
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(params, None, ParamMode::TrainBase);
    let loss = loss_fn(&mut tape, &mut binder)?;
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(BackboneError::NonFiniteLoss {
            first_bad: params.first_non_finite(),
        });
    }
    let mut grads = tape.backward(loss);
    // Arrays the loss never touched still get (zero) gradients.
    for (name, arr) in &params.arrays {
        grads
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(arr.raw_dim()));
    }
    Ok((value, grads))
}

/// As [`grad`], but only adapter factors are trainable.
pub fn grad_adapter<F>(
    params: &ModelParams,
    adapter: &AdapterParams,
    loss_fn: F,
) -> Result<(f64, GradMap), BackboneError>
where
    F: FnOnce(&mut Tape, &mut ParamBinder) -> Result<Var, BackboneError>,
{
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(params, Some(adapter), ParamMode::TrainAdapter);
    let loss = loss_fn(&mut tape, &mut binder)?;
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(BackboneError::NonFiniteLoss {
            first_bad: params.first_non_finite(),
        });
    }
    Ok((value, tape.backward(loss)))
}
