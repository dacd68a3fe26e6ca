//! Model geometry, hyperparameters and the ablation-ladder presets.
//!
//! Every other module reads shapes from a [`ValidatedConfig`], which carries
//! the per-feature geometry derived from the stream specs.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One video input pathway: clip geometry plus how many backbone blocks it
/// runs and how many of the final blocks emit a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub scale_taps: usize,
    /// Conv blocks in this stream's backbone; taps sit on the last
    /// `scale_taps` of them.
    pub blocks: usize,
}

impl StreamSpec {
    /// A stream with one block per tap.
    pub fn new(frames: usize, height: usize, width: usize, scale_taps: usize) -> Self {
        StreamSpec {
            frames,
            height,
            width,
            scale_taps,
            blocks: scale_taps,
        }
    }

    pub fn with_blocks(mut self, blocks: usize) -> Self {
        self.blocks = blocks;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    DenseConcat,
    StaticTokenize,
    IterativeCoTok,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Normalise over the N tokens at every space-time cell.
    Token,
    /// Normalise over space-time for every token.
    Spatial,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $kw:literal),+ $(,)? }) => {
        impl $ty {
            pub fn keyword(self) -> &'static str {
                match self { $($ty::$variant => $kw),+ }
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($kw => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(
                        "`{s}` is not one of: {}",
                        [$($kw),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(FusionMode {
    DenseConcat => "dense_concat",
    StaticTokenize => "static_tokenize",
    IterativeCoTok => "iterative_cotok",
});

keyword_enum!(SoftmaxAxis {
    Token => "token_axis",
    Spatial => "spatial_axis",
});

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lr: 3e-4,
            finetune_lr: 3e-4,
            batch_size: 8,
            steps: 2000,
            weight_decay: 0.01,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    /// Pretraining schedule used at full scale; finetuning drops to 1e-6.
    pub fn full_scale() -> Self {
        TrainConfig {
            lr: 1e-3,
            finetune_lr: 1e-6,
            batch_size: 256,
            steps: 500_000,
            ..TrainConfig::desk()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub streams: Vec<StreamSpec>,
    pub tokens_per_feature: usize,
    pub channels: usize,
    pub fusion_layers: usize,
    pub text_max_len: usize,
    pub vocab_size: usize,
    pub answer_vocab_size: usize,
    pub seed: u64,
    pub fusion_mode: FusionMode,
    pub softmax_axis: SoftmaxAxis,
    pub backbone_width: usize,
    pub heads: usize,
    /// Spatial-temporal extent of the attention-logit convolution (1 or 3).
    pub score_kernel: usize,
    pub share_fusion_layers: bool,
    pub decoder_layers: usize,
    pub beam_width: usize,
    /// Cap on any transformer sequence length, tokenized or dense.
    pub max_seq_len: usize,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Preset::DeskDefault.config(Scale::Desk)
    }
}

/// Space-time geometry of one emitted feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureGeom {
    pub stream: usize,
    pub scale: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureGeom {
    pub fn cells(&self) -> usize {
        self.frames * self.height * self.width
    }
}

/// A config whose geometry has been checked, with derived shapes attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    config: ModelConfig,
    features: Vec<FeatureGeom>,
    /// Per stream, per block: (height, width) entering the block.
    block_inputs: Vec<Vec<(usize, usize)>>,
}

impl std::ops::Deref for ValidatedConfig {
    type Target = ModelConfig;
    fn deref(&self) -> &ModelConfig {
        &self.config
    }
}

impl ValidatedConfig {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn into_config(self) -> ModelConfig {
        self.config
    }

    /// Feature maps in (stream, scale) order; length S.
    pub fn features(&self) -> &[FeatureGeom] {
        &self.features
    }

    pub fn block_inputs(&self, stream: usize) -> &[(usize, usize)] {
        &self.block_inputs[stream]
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens_per_feature * self.features.len()
    }

    /// `L_text + N·S`.
    pub fn fused_len(&self) -> usize {
        self.text_max_len + self.num_tokens()
    }

    /// `L_text + Σ T'·H'·W'`, the sequence length under dense concatenation.
    pub fn dense_len(&self) -> usize {
        self.text_max_len + self.features.iter().map(FeatureGeom::cells).sum::<usize>()
    }

    /// Length of the visual part of the fused sequence under the configured mode.
    pub fn visual_len(&self) -> usize {
        match self.fusion_mode {
            FusionMode::DenseConcat => self.dense_len() - self.text_max_len,
            _ => self.num_tokens(),
        }
    }

    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.config.to_text().as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

impl ModelConfig {
    pub fn validate(self) -> Result<ValidatedConfig> {
        validate(self)
    }

    pub fn num_features(&self) -> usize {
        self.streams.iter().map(|s| s.scale_taps).sum()
    }

    /// Flat `key=value` rendering, one key per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_streams={}", self.streams.len());
        for (i, st) in self.streams.iter().enumerate() {
            let _ = writeln!(s, "streams.{i}.frames={}", st.frames);
            let _ = writeln!(s, "streams.{i}.height={}", st.height);
            let _ = writeln!(s, "streams.{i}.width={}", st.width);
            let _ = writeln!(s, "streams.{i}.scale_taps={}", st.scale_taps);
            let _ = writeln!(s, "streams.{i}.blocks={}", st.blocks);
        }
        let t = &self.train;
        let pairs: [(&str, String); 25] = [
            ("tokens_per_feature", self.tokens_per_feature.to_string()),
            ("channels", self.channels.to_string()),
            ("fusion_layers", self.fusion_layers.to_string()),
            ("text_max_len", self.text_max_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("answer_vocab_size", self.answer_vocab_size.to_string()),
            ("seed", self.seed.to_string()),
            ("fusion_mode", self.fusion_mode.keyword().to_string()),
            ("softmax_axis", self.softmax_axis.keyword().to_string()),
            ("backbone_width", self.backbone_width.to_string()),
            ("heads", self.heads.to_string()),
            ("score_kernel", self.score_kernel.to_string()),
            ("share_fusion_layers", self.share_fusion_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("beam_width", self.beam_width.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.finetune_lr", t.finetune_lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Parses the flat `key=value` format. A `preset=<name>` line, wherever it
    /// appears, seeds the config before the other keys are applied.
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut base = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `key=value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                base = Some(preset(v).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
            } else {
                entries.push((i + 1, k.to_string(), v.to_string()));
            }
        }
        let defines_streams = entries.iter().any(|(_, k, _)| k.starts_with("streams."));
        let mut cfg = match base {
            Some(b) => b,
            // Without a preset the file's stream keys are the whole list.
            None if defines_streams => ModelConfig {
                streams: Vec::new(),
                ..ModelConfig::default()
            },
            None => ModelConfig::default(),
        };
        for (line, k, v) in entries {
            cfg.set(&k, &v)
                .map_err(|e| Error::parse(path, line, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{v}` is not a valid value for {key}")))
        }
        if let Some(rest) = key.strip_prefix("streams.") {
            let (idx, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("bad stream key `{key}`")))?;
            let idx: usize = num(key, idx)?;
            if idx > self.streams.len() {
                return Err(Error::Config(format!(
                    "stream {idx} defined before stream {}",
                    self.streams.len()
                )));
            }
            if idx == self.streams.len() {
                self.streams.push(StreamSpec::new(1, 1, 1, 1));
            }
            let st = &mut self.streams[idx];
            match field {
                "frames" => st.frames = num(key, value)?,
                "height" => st.height = num(key, value)?,
                "width" => st.width = num(key, value)?,
                "scale_taps" => st.scale_taps = num(key, value)?,
                "blocks" => st.blocks = num(key, value)?,
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "num_streams" => {
                let k: usize = num(key, value)?;
                self.streams.truncate(k);
            }
            "tokens_per_feature" => self.tokens_per_feature = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "fusion_layers" => self.fusion_layers = num(key, value)?,
            "text_max_len" => self.text_max_len = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "answer_vocab_size" => self.answer_vocab_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "fusion_mode" => self.fusion_mode = value.parse()?,
            "softmax_axis" => self.softmax_axis = value.parse()?,
            "backbone_width" => self.backbone_width = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "score_kernel" => self.score_kernel = num(key, value)?,
            "share_fusion_layers" => self.share_fusion_layers = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "beam_width" => self.beam_width = num(key, value)?,
            "max_seq_len" => self.max_seq_len = num(key, value)?,
            "train.lr" => t.lr = num(key, value)?,
            "train.finetune_lr" => t.finetune_lr = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.steps" => t.steps = num(key, value)?,
            "train.weight_decay" => t.weight_decay = num(key, value)?,
            "train.clip_norm" => t.clip_norm = num(key, value)?,
            "train.beta1" => t.beta1 = num(key, value)?,
            "train.beta2" => t.beta2 = num(key, value)?,
            "train.adam_eps" => t.adam_eps = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

pub fn validate(config: ModelConfig) -> Result<ValidatedConfig> {
    let bad = |msg: String| Err(Error::Config(msg));
    if config.streams.is_empty() {
        return bad("at least one stream is required".into());
    }
    let positive = [
        ("tokens_per_feature", config.tokens_per_feature),
        ("channels", config.channels),
        ("text_max_len", config.text_max_len),
        ("backbone_width", config.backbone_width),
        ("heads", config.heads),
        ("decoder_layers", config.decoder_layers),
        ("beam_width", config.beam_width),
        ("answer_vocab_size", config.answer_vocab_size),
    ];
    for (name, v) in positive {
        if v == 0 {
            return bad(format!("{name} must be at least 1"));
        }
    }
    if config.vocab_size < 4 {
        return bad("vocab_size must leave room beyond the 3 reserved ids".into());
    }
    if config.fusion_layers == 0 && config.fusion_mode == FusionMode::IterativeCoTok {
        return bad("iterative_cotok needs at least one fusion layer".into());
    }
    if config.channels % config.heads != 0 {
        return bad(format!(
            "heads ({}) must divide channels ({})",
            config.heads, config.channels
        ));
    }
    if config.score_kernel != 1 && config.score_kernel != 3 {
        return bad(format!("score_kernel must be 1 or 3, got {}", config.score_kernel));
    }

    let mut features = Vec::new();
    let mut block_inputs = Vec::new();
    for (si, st) in config.streams.iter().enumerate() {
        if st.frames == 0 || st.height == 0 || st.width == 0 || st.scale_taps == 0 {
            return bad(format!(
                "stream {si}: frames, height, width and scale_taps must be at least 1"
            ));
        }
        if st.blocks < st.scale_taps {
            return bad(format!(
                "stream {si}: {} taps need at least as many blocks, got {}",
                st.scale_taps, st.blocks
            ));
        }
        let (mut h, mut w) = (st.height, st.width);
        let mut inputs = Vec::with_capacity(st.blocks);
        for b in 0..st.blocks {
            inputs.push((h, w));
            if h < 2 || w < 2 {
                return bad(format!(
                    "stream {si}: block {b} downsamples {h}x{w} to zero spatial size"
                ));
            }
            h /= 2;
            w /= 2;
            let first_tap = st.blocks - st.scale_taps;
            if b >= first_tap {
                features.push(FeatureGeom {
                    stream: si,
                    scale: b - first_tap,
                    frames: st.frames,
                    height: h,
                    width: w,
                });
            }
        }
        block_inputs.push(inputs);
    }

    let v = ValidatedConfig {
        config,
        features,
        block_inputs,
    };
    if v.fused_len() > v.max_seq_len {
        return bad(format!(
            "fused length {} (L_text {} + N·S {}) exceeds max_seq_len {}",
            v.fused_len(),
            v.text_max_len,
            v.num_tokens(),
            v.max_seq_len
        ));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Paper-scale geometry; only used for FLOP estimates.
    Full,
    /// Proportionally shrunk geometry that trains in seconds.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    SingleStream,
    TwoStream,
    PlusTransformer,
    PlusTokenization,
    PlusMultiscale,
    PlusCoTok,
    DeskDefault,
    /// Tiny geometry used by the synthetic-task experiments.
    Toy,
}

keyword_enum!(Preset {
    SingleStream => "single_stream",
    TwoStream => "two_stream",
    PlusTransformer => "plus_transformer",
    PlusTokenization => "plus_tokenization",
    PlusMultiscale => "plus_multiscale",
    PlusCoTok => "plus_cotok",
    DeskDefault => "desk_default",
    Toy => "toy",
});

impl Preset {
    pub const LADDER: [Preset; 6] = [
        Preset::SingleStream,
        Preset::TwoStream,
        Preset::PlusTransformer,
        Preset::PlusTokenization,
        Preset::PlusMultiscale,
        Preset::PlusCoTok,
    ];

    pub const ALL: [Preset; 8] = [
        Preset::SingleStream,
        Preset::TwoStream,
        Preset::PlusTransformer,
        Preset::PlusTokenization,
        Preset::PlusMultiscale,
        Preset::PlusCoTok,
        Preset::DeskDefault,
        Preset::Toy,
    ];

    /// Builds the preset. Ladder rungs honour `scale`; the desk default and
    /// toy presets are desk-sized regardless.
    pub fn config(self, scale: Scale) -> ModelConfig {
        match self {
            Preset::DeskDefault => desk_default(),
            Preset::Toy => toy(),
            rung => ladder(rung, scale),
        }
    }
}

/// Full-scale preset by name (desk-sized for `desk_default` and `toy`).
pub fn preset(name: &str) -> Result<ModelConfig> {
    let p: Preset = name
        .parse()
        .map_err(|_| Error::UnknownPreset(name.to_string()))?;
    Ok(p.config(Scale::Full))
}

pub fn preset_at(name: &str, scale: Scale) -> Result<ModelConfig> {
    let p: Preset = name
        .parse()
        .map_err(|_| Error::UnknownPreset(name.to_string()))?;
    Ok(p.config(scale))
}

fn desk_default() -> ModelConfig {
    ModelConfig {
        streams: vec![StreamSpec::new(8, 32, 32, 2), StreamSpec::new(4, 64, 64, 2)],
        tokens_per_feature: 4,
        channels: 64,
        fusion_layers: 2,
        text_max_len: 16,
        vocab_size: 64,
        answer_vocab_size: 16,
        seed: 0,
        fusion_mode: FusionMode::IterativeCoTok,
        softmax_axis: SoftmaxAxis::Token,
        backbone_width: 16,
        heads: 4,
        score_kernel: 1,
        share_fusion_layers: false,
        decoder_layers: 1,
        beam_width: 4,
        max_seq_len: 1024,
        train: TrainConfig::desk(),
    }
}

fn toy() -> ModelConfig {
    ModelConfig {
        streams: vec![
            StreamSpec::new(8, 8, 8, 1),
            StreamSpec::new(2, 16, 16, 1).with_blocks(2),
        ],
        tokens_per_feature: 4,
        channels: 32,
        fusion_layers: 2,
        text_max_len: 8,
        vocab_size: 32,
        answer_vocab_size: 8,
        backbone_width: 8,
        heads: 2,
        train: TrainConfig {
            lr: 1e-3,
            ..TrainConfig::desk()
        },
        ..desk_default()
    }
}

/// Cumulative ablation ladder: each rung adds one component to the previous.
fn ladder(rung: Preset, scale: Scale) -> ModelConfig {
    let (frames, big, small, blocks, channels, tokens, layers, text) = match scale {
        Scale::Full => (32, 224, 128, 5, 768, 8, 4, 32),
        // Spatial dims scaled by 32/224 (128 -> 18), frames by 1/4.
        Scale::Desk => (8, 32, 18, 2, 64, 4, 2, 16),
    };
    let taps = if matches!(rung, Preset::PlusMultiscale | Preset::PlusCoTok) {
        2
    } else {
        1
    };
    let mut streams = vec![StreamSpec::new(frames, big, big, taps).with_blocks(blocks)];
    if rung != Preset::SingleStream {
        streams.push(StreamSpec::new(frames, small, small, taps).with_blocks(blocks));
    }
    let (fusion_mode, fusion_layers) = match rung {
        Preset::SingleStream | Preset::PlusTransformer => (FusionMode::DenseConcat, layers),
        Preset::TwoStream => (FusionMode::DenseConcat, 0),
        Preset::PlusTokenization | Preset::PlusMultiscale => (FusionMode::StaticTokenize, layers),
        _ => (FusionMode::IterativeCoTok, layers),
    };
    let base = desk_default();
    ModelConfig {
        streams,
        tokens_per_feature: tokens,
        channels,
        fusion_layers,
        text_max_len: text,
        heads: if scale == Scale::Full { 12 } else { base.heads },
        // Wide enough that the backbone dominates total cost, as at full scale.
        backbone_width: if scale == Scale::Full { 24 } else { 48 },
        vocab_size: if scale == Scale::Full { 32_000 } else { base.vocab_size },
        answer_vocab_size: if scale == Scale::Full { 4000 } else { base.answer_vocab_size },
        fusion_mode,
        max_seq_len: if scale == Scale::Full { 4096 } else { base.max_seq_len },
        train: if scale == Scale::Full {
            TrainConfig::full_scale()
        } else {
            TrainConfig::desk()
        },
        ..base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fused_length_with_reported_constants() {
        let cfg = ModelConfig {
            streams: vec![
                StreamSpec::new(32, 224, 224, 2).with_blocks(5),
                StreamSpec::new(32, 128, 128, 1).with_blocks(5),
                StreamSpec::new(8, 224, 224, 1).with_blocks(5),
            ],
            tokens_per_feature: 8,
            channels: 768,
            text_max_len: 32,
            heads: 12,
            ..ModelConfig::default()
        };
        let v = cfg.validate().unwrap();
        assert_eq!(v.num_features(), 4);
        assert_eq!(v.fused_len(), 64);
    }

    #[test]
    fn minimal_config_has_length_two() {
        let cfg = ModelConfig {
            streams: vec![StreamSpec::new(1, 2, 2, 1)],
            tokens_per_feature: 1,
            text_max_len: 1,
            channels: 4,
            heads: 1,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.validate().unwrap().fused_len(), 2);
    }

    #[test]
    fn zero_height_is_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.streams[0].height = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn downsampling_to_nothing_is_rejected() {
        let cfg = ModelConfig {
            streams: vec![StreamSpec::new(4, 4, 4, 1).with_blocks(3)],
            ..ModelConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("zero spatial size"), "{err}");
    }

    #[test]
    fn sequence_cap_is_enforced() {
        let cfg = ModelConfig {
            max_seq_len: 20,
            ..ModelConfig::default()
        };
        // 16 text + 4 tokens x 4 features = 32 > 20
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn heads_must_divide_channels() {
        let cfg = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn two_stream_full_geometry() {
        let cfg = preset("two_stream").unwrap();
        let dims: Vec<_> = cfg
            .streams
            .iter()
            .map(|s| (s.frames, s.height, s.width))
            .collect();
        assert_eq!(dims, vec![(32, 224, 224), (32, 128, 128)]);
    }

    #[test]
    fn single_stream_has_one_stream() {
        assert_eq!(preset("single_stream").unwrap().streams.len(), 1);
    }

    #[test]
    fn desk_default_geometry_validates() {
        let cfg = preset("desk_default").unwrap();
        let dims: Vec<_> = cfg
            .streams
            .iter()
            .map(|s| (s.frames, s.height, s.width))
            .collect();
        assert_eq!(dims, vec![(8, 32, 32), (4, 64, 64)]);
        assert_eq!((cfg.channels, cfg.tokens_per_feature), (64, 4));
        let v = cfg.validate().unwrap();
        assert_eq!(v.num_features(), 4);
    }

    #[test]
    fn every_preset_validates_at_both_scales() {
        for p in Preset::ALL {
            for scale in [Scale::Full, Scale::Desk] {
                p.config(scale)
                    .validate()
                    .unwrap_or_else(|e| panic!("{} {scale:?}: {e}", p.keyword()));
            }
        }
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(matches!(preset("three_stream"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn full_scale_training_constants() {
        let t = preset("plus_cotok").unwrap().train;
        assert_eq!((t.lr, t.finetune_lr), (1e-3, 1e-6));
        assert_eq!((t.batch_size, t.steps), (256, 500_000));
        assert_eq!(t.weight_decay, 0.01);
    }

    #[test]
    fn text_round_trip() {
        let cfg = preset("plus_multiscale").unwrap();
        let back = ModelConfig::from_text(&cfg.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn text_with_preset_base_and_override() {
        let text = "# tiny\nstreams.0.frames=2\npreset=toy\nchannels=16\n";
        let cfg = ModelConfig::from_text(text, Path::new("c.txt")).unwrap();
        assert_eq!(cfg.channels, 16);
        assert_eq!(cfg.streams[0].frames, 2);
        assert_eq!(cfg.streams[1], preset("toy").unwrap().streams[1]);
    }

    #[test]
    fn text_errors_carry_line_numbers() {
        let err = ModelConfig::from_text("channels=8\nbogus=1\n", Path::new("c.txt")).unwrap_err();
        assert_eq!(err.to_string(), "c.txt:2: invalid config: unknown key `bogus`");
    }
}
