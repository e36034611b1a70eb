//! Encoders, decoders, and the closed-form baseline heads.
//!
//! The encoder is a shared tanh MLP backbone with two output heads: one for
//! the factor means and one whose softplus-mapped output is the factor
//! precision. Forcing the precision path to the constant one turns the whole
//! objective into a Prototypical Network (up to the view-count scaling
//! factors reproduced by [`unit_precision_probabilities`]), so the baseline
//! is the same code path with a frozen head rather than a second model.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Bindings, Graph, NodeId, Tensor};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::gaussian::{DiagGaussian, PriorSpec, PRECISION_MAX, PRECISION_MIN};
use crate::objective::{build_episode_scores, build_poem_nll, ItemNodes};
use crate::rng::{mix, rng_from, uniform};

/// Inverse softplus of 1: the initial bias of the precision head's output
/// layer, so a fresh encoder starts with tau near one.
const UNIT_PRECISION_BIAS: f64 = 0.5413248546129181;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    /// Precision head is live: the full fusion objective.
    Learned,
    /// Precisions pinned to one: the Prototypical-Network special case.
    FixedUnit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_width: usize,
    pub backbone_widths: Vec<usize>,
    /// Hidden widths of each head; the final head layer maps to `embed_dim`.
    pub head_hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl EncoderConfig {
    pub fn desk(input_width: usize) -> Self {
        EncoderConfig {
            input_width,
            backbone_widths: vec![128, 128, 128],
            head_hidden: vec![128, 128],
            embed_dim: 64,
        }
    }

    pub fn paper(input_width: usize) -> Self {
        EncoderConfig {
            input_width,
            backbone_widths: vec![256, 256, 256],
            head_hidden: vec![256, 256],
            embed_dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub input_dim: usize,
    /// Hidden widths; with the output layer this makes 4 dense layers.
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
}

impl DecoderConfig {
    pub fn desk(input_dim: usize, output_dim: usize) -> Self {
        DecoderConfig { input_dim, hidden_widths: vec![128, 128, 128], output_dim }
    }
}

/// Ordered named tensors; the unit the optimizer and checkpoints operate on.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, t: Tensor) -> usize {
        self.entries.push((name.to_string(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn tensor(&self, slot: usize) -> &Tensor {
        &self.entries[slot].1
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

fn dense_init(rng: &mut rand_chacha::ChaCha8Rng, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let limit = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out).map(|_| uniform(rng, -limit, limit)).collect();
    let b: Vec<f64> = (0..fan_out).map(|_| uniform(rng, -limit, limit)).collect();
    (
        Tensor::from_vec(vec![fan_in, fan_out], w).unwrap(),
        Tensor::from_vec(vec![fan_out], b).unwrap(),
    )
}

/// Per-layer slot indices of one MLP inside a ParamSet.
#[derive(Clone, Debug, PartialEq)]
struct MlpSlots {
    layers: Vec<(usize, usize)>, // (w slot, b slot)
}

fn push_mlp(
    set: &mut ParamSet,
    rng: &mut rand_chacha::ChaCha8Rng,
    prefix: &str,
    widths: &[usize],
) -> MlpSlots {
    let mut layers = Vec::new();
    for i in 0..widths.len() - 1 {
        let (w, b) = dense_init(rng, widths[i], widths[i + 1]);
        let ws = set.push(&format!("{prefix}.{i}.w"), w);
        let bs = set.push(&format!("{prefix}.{i}.b"), b);
        layers.push((ws, bs));
    }
    MlpSlots { layers }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub set: ParamSet,
    backbone: MlpSlots,
    mean_head: MlpSlots,
    precision_head: MlpSlots,
}

/// Fresh encoder with symmetric uniform fan-in init. The precision head's
/// output bias is set so that initial precisions sit near one.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> EncoderParams {
    let mut rng = rng_from(seed);
    let mut set = ParamSet::new();

    let mut bb_widths = vec![config.input_width];
    bb_widths.extend_from_slice(&config.backbone_widths);
    let backbone = push_mlp(&mut set, &mut rng, "backbone", &bb_widths);

    let feat = *bb_widths.last().unwrap();
    let mut head_widths = vec![feat];
    head_widths.extend_from_slice(&config.head_hidden);
    head_widths.push(config.embed_dim);
    let mean_head = push_mlp(&mut set, &mut rng, "mean_head", &head_widths);
    let precision_head = push_mlp(&mut set, &mut rng, "precision_head", &head_widths);

    let (_, out_bias) = precision_head.layers.last().unwrap();
    for v in set.tensor_mut(*out_bias).data_mut() {
        *v = UNIT_PRECISION_BIAS;
    }

    EncoderParams { config: config.clone(), set, backbone, mean_head, precision_head }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub set: ParamSet,
    mlp: MlpSlots,
}

pub fn init_decoder(config: &DecoderConfig, seed: u64) -> DecoderParams {
    let mut rng = rng_from(seed);
    let mut set = ParamSet::new();
    let mut widths = vec![config.input_dim];
    widths.extend_from_slice(&config.hidden_widths);
    widths.push(config.output_dim);
    let mlp = push_mlp(&mut set, &mut rng, "decoder", &widths);
    DecoderParams { config: config.clone(), set, mlp }
}

/// Mapping from graph param nodes back into ParamSet slots, for gradient
/// extraction and optimizer updates.
#[derive(Clone, Debug, Default)]
pub struct ParamBinding {
    pub nodes: Vec<NodeId>,
    pub slots: Vec<usize>,
}

impl ParamBinding {
    fn bind_slot(
        &mut self,
        g: &mut Graph,
        b: &mut Bindings,
        set: &ParamSet,
        slot: usize,
    ) -> NodeId {
        let t = set.tensor(slot);
        let id = g.param(t.shape(), set.name(slot));
        b.bind(id, t.clone());
        self.nodes.push(id);
        self.slots.push(slot);
        id
    }
}

fn build_mlp(
    g: &mut Graph,
    b: &mut Bindings,
    set: &ParamSet,
    slots: &MlpSlots,
    binding: &mut ParamBinding,
    mut x: NodeId,
    hidden_activation: fn(&mut Graph, NodeId) -> NodeId,
    activate_last: bool,
) -> Result<NodeId> {
    let n = slots.layers.len();
    for (i, &(ws, bs)) in slots.layers.iter().enumerate() {
        let w = binding.bind_slot(g, b, set, ws);
        let bias = binding.bind_slot(g, b, set, bs);
        x = g.matmul(x, w)?;
        x = g.add(x, bias)?;
        if i + 1 < n || activate_last {
            x = hidden_activation(g, x);
        }
    }
    Ok(x)
}

/// Encoder output nodes for one batch of views.
#[derive(Clone, Debug)]
pub struct EncoderNodes {
    /// [B, D] factor means.
    pub mean: NodeId,
    /// [B, D] factor precisions, already softplus-mapped and clamped.
    pub precision: NodeId,
}

/// Add the encoder to a graph and bind its current weights. In `FixedUnit`
/// mode the precision head is omitted entirely and the precision node is a
/// constant one, so no gradient ever reaches the head.
pub fn build_encoder(
    g: &mut Graph,
    b: &mut Bindings,
    enc: &EncoderParams,
    views: NodeId,
    mode: PrecisionMode,
    binding: &mut ParamBinding,
) -> Result<EncoderNodes> {
    let in_shape = g.shape(views).to_vec();
    if in_shape.len() != 2 || in_shape[1] != enc.config.input_width {
        return Err(Error::Model(format!(
            "encoder expects [B, {}], got {:?}",
            enc.config.input_width, in_shape
        )));
    }
    let batch = in_shape[0];
    let feat = build_mlp(g, b, &enc.set, &enc.backbone, binding, views, Graph::tanh, true)?;
    let mean = build_mlp(g, b, &enc.set, &enc.mean_head, binding, feat, Graph::tanh, false)?;
    let precision = match mode {
        PrecisionMode::Learned => {
            let raw =
                build_mlp(g, b, &enc.set, &enc.precision_head, binding, feat, Graph::tanh, false)?;
            let sp = g.softplus(raw);
            let shifted = g.affine(sp, 1.0, PRECISION_MIN);
            g.clamp(shifted, PRECISION_MIN, PRECISION_MAX)
        }
        PrecisionMode::FixedUnit => g.constant(Tensor::ones(&[batch, enc.config.embed_dim])),
    };
    Ok(EncoderNodes { mean, precision })
}

/// Encode a batch of flattened views into diagonal-Gaussian factors
/// (forward only; used for evaluation-side consumers like diagnostics and
/// the decoder pipeline).
pub fn encode(
    enc: &EncoderParams,
    views: &[Vec<f64>],
    mode: PrecisionMode,
) -> Result<Vec<DiagGaussian>> {
    if views.is_empty() {
        return Err(Error::Model("encode of zero views".into()));
    }
    let width = enc.config.input_width;
    let mut data = Vec::with_capacity(views.len() * width);
    for v in views {
        if v.len() != width {
            return Err(Error::Model(format!(
                "view width {} != encoder input width {width}",
                v.len()
            )));
        }
        data.extend_from_slice(v);
    }
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let mut binding = ParamBinding::default();
    let x = g.input(&[views.len(), width], "views");
    b.bind(x, Tensor::from_vec(vec![views.len(), width], data)?);
    let nodes = build_encoder(&mut g, &mut b, enc, x, mode, &mut binding)?;
    let vals = g.evaluate(&b)?;
    let d = enc.config.embed_dim;
    let means = vals.get(nodes.mean).data();
    let precs = vals.get(nodes.precision).data();
    (0..views.len())
        .map(|i| {
            DiagGaussian::new(
                means[i * d..(i + 1) * d].to_vec(),
                precs[i * d..(i + 1) * d].to_vec(),
            )
        })
        .collect()
}

/// A fully assembled episode objective: encode every support and query view,
/// fuse per item, score, and reduce to the mean NLL.
pub struct EpisodeObjective {
    pub graph: Graph,
    pub bindings: Bindings,
    pub binding: ParamBinding,
    pub scores: NodeId,
    pub loss: NodeId,
}

pub fn build_episode_objective(
    enc: &EncoderParams,
    episode: &Episode,
    prior: &PriorSpec,
    mode: PrecisionMode,
) -> Result<EpisodeObjective> {
    let width = enc.config.input_width;
    if episode.view_width() != width {
        return Err(Error::Model(format!(
            "episode view width {} != encoder input width {width}",
            episode.view_width()
        )));
    }
    let n_support = episode.total_support_views();
    let n_queries = episode.queries.len();
    let batch = n_support + n_queries;
    let mut data = Vec::with_capacity(batch * width);
    for v in episode.support.iter().flatten().chain(episode.queries.iter()) {
        data.extend_from_slice(v);
    }

    let mut g = Graph::new();
    let mut b = Bindings::new();
    let mut binding = ParamBinding::default();
    let x = g.input(&[batch, width], "views");
    b.bind(x, Tensor::from_vec(vec![batch, width], data)?);
    let nodes = build_encoder(&mut g, &mut b, enc, x, mode, &mut binding)?;

    let mut items = Vec::with_capacity(episode.support.len());
    let mut row = 0usize;
    for views in &episode.support {
        let idx: Vec<usize> = (row..row + views.len()).collect();
        row += views.len();
        let means = g.index_select(nodes.mean, 0, &idx)?;
        let precisions = g.index_select(nodes.precision, 0, &idx)?;
        items.push(ItemNodes { means, precisions });
    }
    let q_idx: Vec<usize> = (row..row + n_queries).collect();
    let q_means = g.index_select(nodes.mean, 0, &q_idx)?;
    let q_precisions = g.index_select(nodes.precision, 0, &q_idx)?;

    let scores = build_episode_scores(&mut g, &items, q_means, q_precisions, prior)?;
    let loss = build_poem_nll(&mut g, scores, &episode.targets)?;
    Ok(EpisodeObjective { graph: g, bindings: b, binding, scores, loss })
}

/// Decoder forward plus mean-squared-error against a fixed target.
pub struct DecoderObjective {
    pub graph: Graph,
    pub bindings: Bindings,
    pub binding: ParamBinding,
    pub output: NodeId,
    pub loss: NodeId,
}

pub fn build_decoder_objective(
    dec: &DecoderParams,
    embedding: &[f64],
    target: &[f64],
) -> Result<DecoderObjective> {
    if embedding.len() != dec.config.input_dim {
        return Err(Error::Model(format!(
            "embedding dim {} != decoder input {}",
            embedding.len(),
            dec.config.input_dim
        )));
    }
    if target.len() != dec.config.output_dim {
        return Err(Error::Model(format!(
            "target dim {} != decoder output {}",
            target.len(),
            dec.config.output_dim
        )));
    }
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let mut binding = ParamBinding::default();
    let x = g.input(&[1, dec.config.input_dim], "embedding");
    b.bind(x, Tensor::from_vec(vec![1, dec.config.input_dim], embedding.to_vec())?);
    let out = build_mlp(&mut g, &mut b, &dec.set, &dec.mlp, &mut binding, x, Graph::relu, false)?;
    let tgt = g.constant(Tensor::from_vec(vec![1, dec.config.output_dim], target.to_vec())?);
    let diff = g.sub(out, tgt)?;
    let sq = g.square(diff);
    let loss = g.mean(sq, &[], false)?;
    Ok(DecoderObjective { graph: g, bindings: b, binding, output: out, loss })
}

/// Decoder forward pass only.
pub fn decode(dec: &DecoderParams, embedding: &[f64]) -> Result<Vec<f64>> {
    let obj = build_decoder_objective(dec, embedding, &vec![0.0; dec.config.output_dim])?;
    let vals = obj.graph.evaluate(&obj.bindings)?;
    Ok(vals.get(obj.output).data().to_vec())
}

// ---------------------------------------------------------------------------
// Closed-form baseline heads
// ---------------------------------------------------------------------------

/// Prototypical-Network log scores: negative squared Euclidean distance from
/// the query mean to each class prototype (the mean of that class's support
/// means).
pub fn proto_scores(support_means: &[Vec<Vec<f64>>], query_mean: &[f64]) -> Result<Vec<f64>> {
    if support_means.iter().any(|s| s.is_empty()) {
        return Err(Error::Model("empty support set in proto_scores".into()));
    }
    let d = query_mean.len();
    let mut scores = Vec::with_capacity(support_means.len());
    for views in support_means {
        if views.iter().any(|v| v.len() != d) {
            return Err(Error::Model("dimension mismatch in proto_scores".into()));
        }
        let mut dist = 0.0;
        for k in 0..d {
            let proto: f64 = views.iter().map(|v| v[k]).sum::<f64>() / views.len() as f64;
            let delta = query_mean[k] - proto;
            dist += delta * delta;
        }
        scores.push(-dist);
    }
    Ok(scores)
}

/// Closed-form class probabilities of the unit-precision objective:
///
///   p_n propto (V_n / (V_n + 1))^(D/2)
///             * exp(-(V_n / (2 (V_n + 1))) * ||mu - proto_n||^2)
///
/// The prefactor exponent is D/2 because the per-dimension factor
/// (V/(V+1))^(1/2) multiplies across the D independent dimensions. This is
/// exactly the row softmax of the fusion objective's scores when every
/// factor precision equals one, so it doubles as an executable equivalence
/// check between the two routes.
pub fn unit_precision_probabilities(
    support_means: &[Vec<Vec<f64>>],
    query_mean: &[f64],
) -> Result<Vec<f64>> {
    if support_means.iter().any(|s| s.is_empty()) {
        return Err(Error::Model("empty support set".into()));
    }
    let d = query_mean.len() as f64;
    let mut logits = Vec::with_capacity(support_means.len());
    for views in support_means {
        let v = views.len() as f64;
        let mut dist = 0.0;
        for k in 0..query_mean.len() {
            let proto: f64 = views.iter().map(|x| x[k]).sum::<f64>() / v;
            let delta = query_mean[k] - proto;
            dist += delta * delta;
        }
        logits.push(0.5 * d * (v / (v + 1.0)).ln() - (v / (2.0 * (v + 1.0))) * dist);
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

// ---------------------------------------------------------------------------
// Checkpoints: flat binary, header then little-endian f64 weights
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"POECKPT1";

/// Write a ParamSet: magic, config hash, tensor count, then per tensor a
/// (name, shape) header followed by raw little-endian f64 data.
pub fn save_checkpoint(path: &Path, set: &ParamSet, config_hash: u64) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&config_hash.to_le_bytes())?;
    f.write_all(&(set.len() as u32).to_le_bytes())?;
    for (name, t) in set.iter() {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            f.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, u64)> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Model("not a checkpoint file".into()));
    }
    let mut u64buf = [0u8; 8];
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u64buf)?;
    let config_hash = u64::from_le_bytes(u64buf);
    f.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut set = ParamSet::new();
    for _ in 0..count {
        f.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Model("invalid tensor name in checkpoint".into()))?;
        f.read_exact(&mut u32buf)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            f.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            f.read_exact(&mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        set.push(&name, Tensor::from_vec(shape, data)?);
    }
    Ok((set, config_hash))
}

/// Replace an encoder's weights with a checkpointed set (names and shapes
/// must match the architecture exactly).
pub fn restore_encoder(enc: &mut EncoderParams, set: ParamSet) -> Result<()> {
    if set.len() != enc.set.len() {
        return Err(Error::Model(format!(
            "checkpoint has {} tensors, encoder has {}",
            set.len(),
            enc.set.len()
        )));
    }
    for slot in 0..set.len() {
        if set.name(slot) != enc.set.name(slot)
            || set.tensor(slot).shape() != enc.set.tensor(slot).shape()
        {
            return Err(Error::Model(format!(
                "checkpoint tensor '{}' does not match encoder tensor '{}'",
                set.name(slot),
                enc.set.name(slot)
            )));
        }
    }
    enc.set = set;
    Ok(())
}

/// Derive a fresh seed for a named weight stream.
pub fn stream_seed(run_seed: u64, tag: u64) -> u64 {
    mix(run_seed, tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::episodes::{Condition, EpisodeMeta};
    use crate::gaussian::{episode_scores, DiagGaussian};
    use crate::rng::standard_normal;
    use rand::Rng;

    fn tiny_encoder(seed: u64) -> EncoderParams {
        init_encoder(
            &EncoderConfig {
                input_width: 7,
                backbone_widths: vec![8, 8, 8],
                head_hidden: vec![8, 8],
                embed_dim: 4,
            },
            seed,
        )
    }

    fn random_views(seed: u64, count: usize, width: usize, scale: f64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed);
        (0..count)
            .map(|_| (0..width).map(|_| scale * standard_normal(&mut rng)).collect())
            .collect()
    }

    fn tiny_episode(seed: u64, ways: usize, views_per_item: &[usize], q_per_item: usize) -> Episode {
        let width = 7;
        let mut support = Vec::new();
        let mut queries = Vec::new();
        let mut targets = Vec::new();
        let mut k = 0u64;
        for m in 0..ways {
            let v = views_per_item[m % views_per_item.len()];
            support.push(random_views(mix(seed, k), v, width, 1.0));
            k += 1;
            for _ in 0..q_per_item {
                queries.extend(random_views(mix(seed, k), 1, width, 1.0));
                targets.push(m);
                k += 1;
            }
        }
        let shots = support.iter().map(|s: &Vec<Vec<f64>>| s.len()).collect();
        Episode {
            support,
            queries,
            targets,
            meta: EpisodeMeta { ways, shots, condition: Condition::Partial, episode_seed: seed },
        }
    }

    #[test]
    fn encode_is_deterministic_and_clamped() {
        let enc = tiny_encoder(1);
        let views = random_views(2, 3, 7, 1.0);
        let a = encode(&enc, &views, PrecisionMode::Learned).unwrap();
        let b = encode(&enc, &views, PrecisionMode::Learned).unwrap();
        assert_eq!(a, b);
        // Extreme inputs still produce finite means and in-range precisions.
        let extreme = vec![vec![1e3; 7], vec![-1e3; 7], vec![0.0; 7]];
        for g in encode(&enc, &extreme, PrecisionMode::Learned).unwrap() {
            assert!(g.mean().iter().all(|v| v.is_finite()));
            for &t in g.precision() {
                assert!((PRECISION_MIN..=PRECISION_MAX).contains(&t));
            }
        }
    }

    #[test]
    fn encoder_finite_on_moderate_box() {
        let enc = tiny_encoder(3);
        let mut rng = rng_from(4);
        let views: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..7).map(|_| uniform(&mut rng, -10.0, 10.0)).collect())
            .collect();
        for g in encode(&enc, &views, PrecisionMode::Learned).unwrap() {
            assert!(g.mean().iter().all(|v| v.is_finite()));
            assert!(g.precision().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn fixed_unit_mode_emits_unit_precisions() {
        let enc = tiny_encoder(5);
        let views = random_views(6, 4, 7, 1.0);
        for g in encode(&enc, &views, PrecisionMode::FixedUnit).unwrap() {
            assert!(g.precision().iter().all(|&t| t == 1.0));
        }
    }

    /// Random parameter point for gradient checking. Init weights are scaled
    /// up so the whole gradient spectrum sits well above the noise floor of
    /// central differences; near-zero true gradients would otherwise make
    /// the relative-error denominator meaningless.
    fn checkpoint_encoder(seed: u64) -> EncoderParams {
        let mut enc = tiny_encoder(seed);
        for slot in 0..enc.set.len() {
            for v in enc.set.tensor_mut(slot).data_mut() {
                *v *= 2.0;
            }
        }
        enc
    }

    #[test]
    fn full_objective_gradient_passes_finite_differences() {
        // Encoder -> fusion -> NLL, learned precisions, three parameter draws.
        for seed in [29u64, 30, 25] {
            let enc = checkpoint_encoder(seed);
            let ep = tiny_episode(seed, 3, &[2, 3], 2);
            let obj =
                build_episode_objective(&enc, &ep, &PriorSpec::neglect(), PrecisionMode::Learned)
                    .unwrap();
            let err = finite_diff_check(
                &obj.graph,
                obj.loss,
                &obj.binding.nodes,
                &obj.bindings,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn objective_with_gaussian_prior_also_checks() {
        for seed in [29u64, 30, 25] {
            let enc = checkpoint_encoder(seed);
            let ep = tiny_episode(seed, 3, &[2, 3], 2);
            let prior = PriorSpec::gaussian(4);
            let obj = build_episode_objective(&enc, &ep, &prior, PrecisionMode::Learned).unwrap();
            let err =
                finite_diff_check(&obj.graph, obj.loss, &obj.binding.nodes, &obj.bindings, 1e-5)
                    .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn decoder_gradient_passes_finite_differences() {
        for seed in [31u64, 32, 33] {
            let dec = init_decoder(
                &DecoderConfig { input_dim: 5, hidden_widths: vec![8, 8, 8], output_dim: 12 },
                seed,
            );
            let mut rng = rng_from(seed);
            let emb: Vec<f64> = (0..5).map(|_| standard_normal(&mut rng)).collect();
            let mut target = vec![0.0; 12];
            for i in 0..4 {
                target[i * 3 + (i % 3)] = 1.0;
            }
            let obj = build_decoder_objective(&dec, &emb, &target).unwrap();
            let err = finite_diff_check(
                &obj.graph,
                obj.loss,
                &obj.binding.nodes,
                &obj.bindings,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn zero_weight_decoder_mse_is_one_over_channels() {
        let mut dec = init_decoder(
            &DecoderConfig { input_dim: 4, hidden_widths: vec![6, 6, 6], output_dim: 20 },
            0,
        );
        for slot in 0..dec.set.len() {
            for v in dec.set.tensor_mut(slot).data_mut() {
                *v = 0.0;
            }
        }
        // 5 cells x 4 channels, one-hot per cell.
        let channels = 4;
        let mut target = vec![0.0; 20];
        for cell in 0..5 {
            target[cell * channels] = 1.0;
        }
        let emb = vec![0.3, -0.1, 0.7, 0.2];
        let obj = build_decoder_objective(&dec, &emb, &target).unwrap();
        let vals = obj.graph.evaluate(&obj.bindings).unwrap();
        assert!(vals.get(obj.output).data().iter().all(|&v| v == 0.0));
        let mse = vals.scalar(obj.loss).unwrap();
        assert!((mse - 1.0 / channels as f64).abs() < 1e-15);
    }

    #[test]
    fn proto_scores_match_reference_loop() {
        let mut rng = rng_from(7);
        for _ in 0..20 {
            let d = 6;
            let supports: Vec<Vec<Vec<f64>>> = (0..4)
                .map(|_| {
                    (0..rng.gen_range(1..=4))
                        .map(|_| (0..d).map(|_| standard_normal(&mut rng)).collect())
                        .collect()
                })
                .collect();
            let query: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
            let scores = proto_scores(&supports, &query).unwrap();

            // Independent implementation.
            for (m, views) in supports.iter().enumerate() {
                let mut proto = vec![0.0; d];
                for v in views {
                    for k in 0..d {
                        proto[k] += v[k];
                    }
                }
                for p in proto.iter_mut() {
                    *p /= views.len() as f64;
                }
                let dist: f64 = (0..d).map(|k| (query[k] - proto[k]).powi(2)).sum();
                assert!((scores[m] - (-dist)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn proto_argmax_at_exact_prototype_and_symmetry() {
        let supports = vec![
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
        ];
        let scores = proto_scores(&supports, &[1.0, 0.0]).unwrap();
        assert!(scores[0] > scores[1]);
        assert_eq!(scores[0], 0.0);

        // Equidistant prototypes give a uniform softmax.
        let probs = unit_precision_probabilities(
            &[vec![vec![1.0, 0.0]], vec![vec![-1.0, 0.0]]],
            &[0.0, 0.0],
        )
        .unwrap();
        assert!((probs[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unit_precision_probabilities_match_fusion_scores() {
        // Force every factor precision to one and compare the fusion-route
        // softmax with the closed form, on ragged view counts.
        let mut rng = rng_from(17);
        for _ in 0..50 {
            let d = 5;
            let m = 4;
            let mut supports_mean: Vec<Vec<Vec<f64>>> = Vec::new();
            let mut supports_g: Vec<Vec<DiagGaussian>> = Vec::new();
            for _ in 0..m {
                let v = rng.gen_range(1..=4);
                let means: Vec<Vec<f64>> = (0..v)
                    .map(|_| (0..d).map(|_| standard_normal(&mut rng)).collect())
                    .collect();
                supports_g.push(
                    means
                        .iter()
                        .map(|mu| DiagGaussian::new(mu.clone(), vec![1.0; d]).unwrap())
                        .collect(),
                );
                supports_mean.push(means);
            }
            let qmean: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
            let query = DiagGaussian::new(qmean.clone(), vec![1.0; d]).unwrap();

            let scores =
                episode_scores(&supports_g, &[query], &[0], &PriorSpec::neglect()).unwrap();
            let fusion_probs = scores.softmax_row(0);
            let closed = unit_precision_probabilities(&supports_mean, &qmean).unwrap();
            for (a, b) in fusion_probs.iter().zip(closed.iter()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn equal_view_counts_agree_with_plain_protonet_argmax() {
        let mut rng = rng_from(23);
        for _ in 0..100 {
            let d = 4;
            let v = 3;
            let supports: Vec<Vec<Vec<f64>>> = (0..5)
                .map(|_| {
                    (0..v)
                        .map(|_| (0..d).map(|_| standard_normal(&mut rng)).collect())
                        .collect()
                })
                .collect();
            let query: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
            let probs = unit_precision_probabilities(&supports, &query).unwrap();
            let scores = proto_scores(&supports, &query).unwrap();
            let argmax_p = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let argmax_s = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax_p, argmax_s);
        }
    }

    #[test]
    fn probabilities_stabilize_as_view_count_grows() {
        // With V -> infinity the scaling factors converge, so the closed-form
        // probabilities converge to a fixed vector.
        let proto_a = vec![0.5, -0.2];
        let proto_b = vec![-0.3, 0.4];
        let query = vec![0.1, 0.1];
        let at = |v: usize| {
            let supports = vec![vec![proto_a.clone(); v], vec![proto_b.clone(); v]];
            unit_precision_probabilities(&supports, &query).unwrap()
        };
        let big = at(1_000);
        let bigger = at(100_000);
        for (a, b) in big.iter().zip(bigger.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let enc = tiny_encoder(42);
        let path = dir.path().join("enc.ckpt");
        save_checkpoint(&path, &enc.set, 0xDEADBEEF).unwrap();
        let (set, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(hash, 0xDEADBEEF);
        assert_eq!(set, enc.set);

        let mut enc2 = tiny_encoder(43);
        assert_ne!(enc2.set, enc.set);
        restore_encoder(&mut enc2, set).unwrap();
        assert_eq!(enc2.set, enc.set);
    }

    #[test]
    fn restore_rejects_mismatched_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let enc = tiny_encoder(1);
        let path = dir.path().join("enc.ckpt");
        save_checkpoint(&path, &enc.set, 0).unwrap();
        let (set, _) = load_checkpoint(&path).unwrap();
        let mut other = init_encoder(
            &EncoderConfig {
                input_width: 9,
                backbone_widths: vec![8, 8, 8],
                head_hidden: vec![8, 8],
                embed_dim: 4,
            },
            1,
        );
        assert!(restore_encoder(&mut other, set).is_err());
    }
}
