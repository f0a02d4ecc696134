//! Encoder / feature-pyramid decoder segmentation network.
//!
//! The encoder is a stack of stages that each halve the resolution. A stage
//! is either a pair of 3x3 convolutions or a hierarchical-transformer block
//! (overlapping patch embedding, spatially reduced self-attention, mix-FFN).
//! The decoder projects every stage to a common width with 1x1 laterals,
//! fuses them top-down, smooths each level with a 3x3 convolution, merges
//! the levels at the finest scale, upsamples to the input size and applies
//! a 1x1 prediction head producing one logit per pixel.

mod params;

pub use params::{Fingerprint, ParameterSet};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{ConvSpec, Graph, Tensor, Var};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ConvStage,
    AttentionStage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_stages: usize,
    pub stage_widths: Vec<usize>,
    pub encoder_kinds: Vec<EncoderKind>,
    /// Heads per stage; only read for attention stages.
    pub attention_heads: Vec<usize>,
    /// Hidden expansion of the mix-FFN in attention stages.
    pub mlp_ratio: usize,
    pub pyramid_width: usize,
    pub use_pretrained_encoder: bool,
}

impl ModelConfig {
    fn uniform(widths: &[usize], kind: EncoderKind, pyramid_width: usize) -> Self {
        ModelConfig {
            encoder_stages: widths.len(),
            stage_widths: widths.to_vec(),
            encoder_kinds: vec![kind; widths.len()],
            attention_heads: vec![1; widths.len()],
            mlp_ratio: 4,
            pyramid_width,
            use_pretrained_encoder: false,
        }
    }

    /// Three convolutional stages, roughly 28k parameters.
    pub fn desk() -> Self {
        Self::uniform(&[8, 16, 32], EncoderKind::ConvStage, 16)
    }

    /// Four attention stages with the smallest hierarchical-transformer widths.
    pub fn paper() -> Self {
        ModelConfig {
            attention_heads: vec![1, 2, 5, 8],
            ..Self::uniform(&[32, 64, 160, 256], EncoderKind::AttentionStage, 128)
        }
    }

    /// Under a thousand parameters; used for finite-difference checks.
    pub fn tiny() -> Self {
        Self::uniform(&[2, 3, 4], EncoderKind::ConvStage, 3)
    }

    /// Like [`ModelConfig::tiny`] but with attention in the deepest stage.
    pub fn tiny_attention() -> Self {
        ModelConfig {
            encoder_kinds: vec![EncoderKind::ConvStage, EncoderKind::ConvStage, EncoderKind::AttentionStage],
            attention_heads: vec![1, 1, 2],
            mlp_ratio: 2,
            ..Self::uniform(&[2, 3, 4], EncoderKind::ConvStage, 2)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            "tiny_attention" => Ok(Self::tiny_attention()),
            other => Err(Error::config("model_preset", format!("unknown model preset {other:?}"))),
        }
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.encoder_stages
    }

    /// Spatial reduction of keys and values in attention stage `i`.
    pub fn reduction_ratio(&self, stage: usize) -> usize {
        1 << (self.encoder_stages - 1 - stage)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.encoder_stages;
        if n < 3 {
            return Err(Error::config("encoder_stages", "need at least 3 stages"));
        }
        if n > 12 {
            return Err(Error::config("encoder_stages", "more than 12 stages"));
        }
        for (field, len) in [
            ("stage_widths", self.stage_widths.len()),
            ("encoder_kinds", self.encoder_kinds.len()),
            ("attention_heads", self.attention_heads.len()),
        ] {
            if len != n {
                return Err(Error::config(field, format!("has {len} entries for {n} stages")));
            }
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::config("stage_widths", "widths must be at least 1"));
        }
        if self.pyramid_width == 0 {
            return Err(Error::config("pyramid_width", "must be at least 1"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio", "must be at least 1"));
        }
        for i in 0..n {
            if self.encoder_kinds[i] == EncoderKind::AttentionStage {
                let heads = self.attention_heads[i];
                if heads == 0 || self.stage_widths[i] % heads != 0 {
                    return Err(Error::config(
                        "attention_heads",
                        format!("stage {i}: {heads} heads do not divide width {}", self.stage_widths[i]),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    FanIn,
    Zeros,
    Ones,
}

struct Layout {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl Layout {
    fn conv(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize) {
        self.entries.push((format!("{name}.weight"), vec![cout, cin_per_group, k, k], Init::FanIn));
        self.entries.push((format!("{name}.bias"), vec![cout], Init::Zeros));
    }

    fn linear(&mut self, name: &str, cout: usize, cin: usize) {
        self.entries.push((format!("{name}.weight"), vec![cout, cin], Init::FanIn));
        self.entries.push((format!("{name}.bias"), vec![cout], Init::Zeros));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.entries.push((format!("{name}.weight"), vec![c], Init::Ones));
        self.entries.push((format!("{name}.bias"), vec![c], Init::Zeros));
    }
}

/// Every parameter of `config`, in construction order.
fn layout(config: &ModelConfig) -> Layout {
    let mut l = Layout { entries: Vec::new() };
    let mut cin = 3;
    for (i, (&c, &kind)) in config.stage_widths.iter().zip(&config.encoder_kinds).enumerate() {
        let s = format!("encoder.stages.{i}");
        match kind {
            EncoderKind::ConvStage => {
                l.conv(&format!("{s}.conv1"), c, cin, 3);
                l.conv(&format!("{s}.conv2"), c, c, 3);
            }
            EncoderKind::AttentionStage => {
                let r = config.reduction_ratio(i);
                let hidden = c * config.mlp_ratio;
                l.conv(&format!("{s}.patch_embed"), c, cin, 3);
                l.norm(&format!("{s}.embed_norm"), c);
                l.norm(&format!("{s}.attn_norm"), c);
                l.linear(&format!("{s}.attn.q"), c, c);
                if r > 1 {
                    l.conv(&format!("{s}.attn.sr"), c, c, r);
                    l.norm(&format!("{s}.attn.sr_norm"), c);
                }
                l.linear(&format!("{s}.attn.k"), c, c);
                l.linear(&format!("{s}.attn.v"), c, c);
                l.linear(&format!("{s}.attn.proj"), c, c);
                l.norm(&format!("{s}.ffn_norm"), c);
                l.linear(&format!("{s}.ffn.fc1"), hidden, c);
                l.conv(&format!("{s}.ffn.dwconv"), hidden, 1, 3);
                l.linear(&format!("{s}.ffn.fc2"), c, hidden);
                l.norm(&format!("{s}.norm"), c);
            }
        }
        cin = c;
    }
    let p = config.pyramid_width;
    for (i, &c) in config.stage_widths.iter().enumerate() {
        l.conv(&format!("decoder.lateral.{i}"), p, c, 1);
    }
    for i in 0..config.encoder_stages {
        l.conv(&format!("decoder.smooth.{i}"), p, p, 3);
    }
    l.conv("head", 1, p, 1);
    l
}

/// Names and shapes of every parameter `config` defines, in construction
/// order.
pub fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(config).entries.into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Hash of the canonical config serialization plus every parameter name
/// and shape.
pub fn fingerprint(config: &ModelConfig) -> Fingerprint {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(config).expect("config serializes").as_bytes());
    for (name, shape) in parameter_shapes(config) {
        h.update(b"\n");
        h.update(name.as_bytes());
        for d in shape {
            h.update(b":");
            h.update(d.to_string().as_bytes());
        }
    }
    Fingerprint::from_digest(&h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    config: ModelConfig,
    fingerprint: Fingerprint,
    params: ParameterSet,
}

/// Builds a model with seeded fan-in initialization. With
/// `use_pretrained_encoder`, every `encoder.*` parameter is copied from
/// `pretrained`, which must supply all of them with matching shapes.
pub fn build_model(
    config: &ModelConfig,
    init_seed: u64,
    pretrained: Option<&ParameterSet>,
) -> Result<SegmentationModel> {
    config.validate()?;
    let mut params = ParameterSet::new();
    for (name, shape, init) in layout(config).entries {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn => {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut r = rng::stream(rng::derive(init_seed, &name));
                (0..n).map(|_| r.random_range(-bound..bound)).collect()
            }
        };
        params.insert(name, Tensor::new(shape, data));
    }
    if config.use_pretrained_encoder {
        let weights = pretrained.ok_or_else(|| Error::PretrainedUnavailable("no weight file was supplied".into()))?;
        let names: Vec<String> = params.names().filter(|n| n.starts_with("encoder.")).cloned().collect();
        for name in names {
            let src = weights
                .get(&name)
                .ok_or_else(|| Error::PretrainedUnavailable(format!("weight file lacks {name:?}")))?;
            let dst = params.get_mut(&name).expect("name from own layout");
            if src.shape != dst.shape {
                return Err(Error::shape(format!("pretrained {name}"), &dst.shape, &src.shape));
            }
            dst.data.clone_from(&src.data);
        }
    }
    Ok(SegmentationModel {
        config: config.clone(),
        fingerprint: fingerprint(config),
        params,
    })
}

/// What a non-strict load did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model parameters absent from the checkpoint; left untouched.
    pub missing: Vec<String>,
    /// Checkpoint entries the model does not have.
    pub unexpected: Vec<String>,
}

impl LoadReport {
    pub fn skipped(&self) -> Vec<String> {
        self.missing.iter().chain(&self.unexpected).cloned().collect()
    }
}

impl SegmentationModel {
    /// Rebuilds the model a checkpoint was saved from.
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let config = &checkpoint.meta.config;
        config.validate()?;
        let fp = fingerprint(config);
        if fp != checkpoint.meta.fingerprint {
            return Err(Error::FingerprintMismatch {
                model: fp.to_string(),
                checkpoint: checkpoint.meta.fingerprint.to_string(),
            });
        }
        let mut params = ParameterSet::new();
        for (name, shape) in parameter_shapes(config) {
            let src = checkpoint.params.get(&name).ok_or_else(|| Error::Checkpoint {
                path: Default::default(),
                message: format!("missing parameter {name}"),
            })?;
            if src.shape != shape {
                return Err(Error::shape(format!("parameter {name}"), &shape, &src.shape));
            }
            params.insert(name, src.clone());
        }
        if params.len() != checkpoint.params.len() {
            return Err(Error::Checkpoint {
                path: Default::default(),
                message: "checkpoint has parameters the model does not".into(),
            });
        }
        Ok(SegmentationModel {
            config: config.clone(),
            fingerprint: fp,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let d = self.config.divisor();
        if height == 0 || width == 0 || height % d != 0 || width % d != 0 {
            return Err(Error::IndivisibleInput {
                height,
                width,
                divisor: d,
            });
        }
        Ok(())
    }

    /// Copies checkpoint arrays into the model.
    ///
    /// Strict loads require matching fingerprints and replace every
    /// parameter. Non-strict loads copy entries whose names match and
    /// report the rest; a matching name with a different shape is an error
    /// either way.
    pub fn load_parameters(&mut self, checkpoint: &Checkpoint, strict: bool) -> Result<LoadReport> {
        if strict && checkpoint.meta.fingerprint != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                model: self.fingerprint.to_string(),
                checkpoint: checkpoint.meta.fingerprint.to_string(),
            });
        }
        let mut report = LoadReport::default();
        for (name, src) in checkpoint.params.iter() {
            if let Some(dst) = self.params.get(name) {
                if dst.shape != src.shape {
                    return Err(Error::shape(format!("parameter {name}"), &dst.shape, &src.shape));
                }
            } else {
                report.unexpected.push(name.clone());
            }
        }
        for name in self.params.names().cloned().collect::<Vec<_>>() {
            match checkpoint.params.get(&name) {
                Some(src) => {
                    self.params.get_mut(&name).expect("own name").data.clone_from(&src.data);
                    report.loaded.push(name);
                }
                None => report.missing.push(name),
            }
        }
        if strict && !(report.missing.is_empty() && report.unexpected.is_empty()) {
            return Err(Error::Checkpoint {
                path: Default::default(),
                message: format!("strict load left {:?} unmatched", report.skipped()),
            });
        }
        Ok(report)
    }

    /// Records the forward pass on `g`. Parameters become trainable leaves
    /// when `trainable`, constants otherwise.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, BTreeMap<String, Var>)> {
        let shape = g.value(x).shape.clone();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("model input [b, 3, h, w]", &[shape.first().copied().unwrap_or(0), 3, 0, 0], &shape));
        }
        let (h, w) = (shape[2], shape[3]);
        self.check_input(h, w)?;

        let mut vars = BTreeMap::new();
        for (name, t) in self.params.iter() {
            let v = if trainable { g.param(t.clone()) } else { g.input(t.clone()) };
            vars.insert(name.clone(), v);
        }
        let p = |name: &str| vars[name];
        let conv = |g: &mut Graph, x: Var, name: &str, stride: usize, pad: usize, groups: usize| {
            g.conv2d(x, p(&format!("{name}.weight")), Some(p(&format!("{name}.bias"))), ConvSpec { stride, pad, groups })
        };
        let linear = |g: &mut Graph, x: Var, name: &str| g.linear(x, p(&format!("{name}.weight")), p(&format!("{name}.bias")));
        let norm = |g: &mut Graph, x: Var, name: &str| g.layer_norm(x, p(&format!("{name}.weight")), p(&format!("{name}.bias")));

        let mut features = Vec::with_capacity(self.config.encoder_stages);
        let mut cur = x;
        for (i, &kind) in self.config.encoder_kinds.iter().enumerate() {
            let s = format!("encoder.stages.{i}");
            cur = match kind {
                EncoderKind::ConvStage => {
                    let y = conv(g, cur, &format!("{s}.conv1"), 2, 1, 1);
                    let y = g.gelu(y);
                    let y = conv(g, y, &format!("{s}.conv2"), 1, 1, 1);
                    g.gelu(y)
                }
                EncoderKind::AttentionStage => {
                    let c = self.config.stage_widths[i];
                    let hidden = c * self.config.mlp_ratio;
                    let r = self.config.reduction_ratio(i);
                    let heads = self.config.attention_heads[i];

                    let m = conv(g, cur, &format!("{s}.patch_embed"), 2, 1, 1);
                    let (_, _, sh, sw) = g.value(m).dims4();
                    let t = g.to_tokens(m);
                    let t = norm(g, t, &format!("{s}.embed_norm"));

                    let a = norm(g, t, &format!("{s}.attn_norm"));
                    let q = linear(g, a, &format!("{s}.attn.q"));
                    let kv_src = if r > 1 {
                        let am = g.from_tokens(a, sh, sw);
                        let red = conv(g, am, &format!("{s}.attn.sr"), r, 0, 1);
                        let rt = g.to_tokens(red);
                        norm(g, rt, &format!("{s}.attn.sr_norm"))
                    } else {
                        a
                    };
                    let k = linear(g, kv_src, &format!("{s}.attn.k"));
                    let v = linear(g, kv_src, &format!("{s}.attn.v"));
                    let o = g.attention(q, k, v, heads);
                    let o = linear(g, o, &format!("{s}.attn.proj"));
                    let t = g.add(t, o);

                    let f = norm(g, t, &format!("{s}.ffn_norm"));
                    let f = linear(g, f, &format!("{s}.ffn.fc1"));
                    let fm = g.from_tokens(f, sh, sw);
                    let fm = conv(g, fm, &format!("{s}.ffn.dwconv"), 1, 1, hidden);
                    let fm = g.gelu(fm);
                    let f = g.to_tokens(fm);
                    let f = linear(g, f, &format!("{s}.ffn.fc2"));
                    let t = g.add(t, f);

                    let t = norm(g, t, &format!("{s}.norm"));
                    g.from_tokens(t, sh, sw)
                }
            };
            features.push(cur);
        }

        let laterals: Vec<Var> = features
            .iter()
            .enumerate()
            .map(|(i, &f)| conv(g, f, &format!("decoder.lateral.{i}"), 1, 0, 1))
            .collect();
        let mut pyramid = vec![laterals[laterals.len() - 1]; laterals.len()];
        for i in (0..laterals.len() - 1).rev() {
            let (_, _, lh, lw) = g.value(laterals[i]).dims4();
            let up = g.resize(pyramid[i + 1], lh, lw);
            pyramid[i] = g.add(laterals[i], up);
        }
        let (_, _, fh, fw) = g.value(pyramid[0]).dims4();
        let mut merged = None;
        for (i, &level) in pyramid.iter().enumerate() {
            let sm = conv(g, level, &format!("decoder.smooth.{i}"), 1, 1, 1);
            let sm = g.resize(sm, fh, fw);
            merged = Some(match merged {
                None => sm,
                Some(acc) => g.add(acc, sm),
            });
        }
        let merged = g.gelu(merged.expect("at least one stage"));
        let up = g.resize(merged, h, w);
        let logits = conv(g, up, "head", 1, 0, 1);
        Ok((logits, vars))
    }

    /// Logits `[b, 1, h, w]` for a batch `[b, 3, h, w]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let (logits, _) = self.forward_graph(&mut g, x, false)?;
        Ok(g.value(logits).clone())
    }

    /// Mean BCE of the batch against `targets` (`[b, 1, h, w]`) and its
    /// gradient with respect to every parameter.
    pub fn loss_and_grads(&self, batch: &Tensor, targets: &Tensor) -> Result<(f64, ParameterSet)> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let (logits, vars) = self.forward_graph(&mut g, x, true)?;
        if g.value(logits).shape != targets.shape {
            return Err(Error::shape("targets", &g.value(logits).shape, &targets.shape));
        }
        let loss = g.bce_mean(logits, targets);
        let value = g.value(loss).data[0];
        let mut grads = g.backward(loss);
        let mut out = ParameterSet::new();
        for (name, v) in vars {
            let grad = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(&self.params.get(&name).expect("own name").shape));
            out.insert(name, grad);
        }
        Ok((value, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed);
        Tensor::new(vec![b, 3, h, w], (0..b * 3 * h * w).map(|_| r.random::<f64>()).collect())
    }

    #[test]
    fn desk_preset_is_deterministic_and_seed_sensitive() {
        let a = build_model(&ModelConfig::desk(), 0, None).unwrap();
        let b = build_model(&ModelConfig::desk(), 0, None).unwrap();
        assert_eq!(a.params(), b.params());
        let c = build_model(&ModelConfig::desk(), 1, None).unwrap();
        assert!(a.params().iter().zip(c.params().iter()).any(|((_, x), (_, y))| x != y));
    }

    #[test]
    fn output_matches_input_size() {
        let m = build_model(&ModelConfig::desk(), 0, None).unwrap();
        let out = m.forward(&batch(2, 64, 64, 3)).unwrap();
        assert_eq!(out.shape, vec![2, 1, 64, 64]);
        assert!(out.is_finite());
    }

    #[test]
    fn indivisible_input_names_divisor() {
        let m = build_model(&ModelConfig::desk(), 0, None).unwrap();
        match m.forward(&batch(1, 60, 60, 3)) {
            Err(Error::IndivisibleInput { divisor, .. }) => assert_eq!(divisor, 8),
            other => panic!("expected divisibility error, got {other:?}"),
        }
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = build_model(&ModelConfig::desk(), 0, None).unwrap();
        for name in ["head.weight", "head.bias"] {
            m.params_mut().get_mut(name).unwrap().data.fill(0.0);
        }
        let out = m.forward(&batch(1, 16, 16, 9)).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fingerprints_follow_config() {
        let a = ModelConfig::desk();
        assert_eq!(fingerprint(&a), fingerprint(&a.clone()));
        let mut b = a.clone();
        b.stage_widths = vec![8, 16, 64];
        assert_ne!(fingerprint(&a), fingerprint(&b));
        let json = serde_json::to_string(&a).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(fingerprint(&a), fingerprint(&back));
    }

    #[test]
    fn attention_preset_runs_and_respects_shapes() {
        let m = build_model(&ModelConfig::tiny_attention(), 4, None).unwrap();
        let out = m.forward(&batch(2, 16, 16, 1)).unwrap();
        assert_eq!(out.shape, vec![2, 1, 16, 16]);
        let paper = ModelConfig::paper();
        paper.validate().unwrap();
        assert!(parameter_shapes(&paper).iter().any(|(n, _)| n == "encoder.stages.0.attn.sr.weight"));
    }

    #[test]
    fn pretrained_hook() {
        let mut cfg = ModelConfig::tiny();
        cfg.use_pretrained_encoder = true;
        assert!(matches!(build_model(&cfg, 0, None), Err(Error::PretrainedUnavailable(_))));

        let donor = build_model(&ModelConfig::tiny(), 42, None).unwrap();
        let m = build_model(&cfg, 0, Some(donor.params())).unwrap();
        for (name, t) in m.params().iter() {
            if name.starts_with("encoder.") {
                assert_eq!(t, donor.params().get(name).unwrap());
            }
        }

        let mut bad = donor.params().clone();
        bad.insert("encoder.stages.0.conv1.bias".into(), Tensor::zeros(&[5]));
        assert!(matches!(build_model(&cfg, 0, Some(&bad)), Err(Error::ShapeMismatch { .. })));
    }
}
