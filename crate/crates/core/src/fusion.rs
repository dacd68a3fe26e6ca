//! Transformer layers, the text encoder, and video-text fusion.
//!
//! Fusion modes:
//!
//! * `dense_concat`: every feature cell joins the text sequence.
//! * `static_tokenize`: tokens are computed once from the text and the stack
//!   runs on `[text, tokens]`.
//! * `iterative_cotok`: before each layer past the first, every feature is
//!   re-tokenized with the previous layer's output as context, and the layer
//!   input is `[text, fresh tokens] + previous output`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::FeatureMap;
use crate::config::{FeatureGeom, FusionMode, SoftmaxAxis, ValidatedConfig};
use crate::cotokenizer::{tokenize_all_graph, AttentionMaps, TokenizerParams};
use crate::error::{Error, Result};
use crate::ingest::TextSequence;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn init(prefix: &str, c: usize, store: &mut ParamStore) -> Self {
        NormParams {
            gamma: store.add_ones(format!("{prefix}.gamma"), &[c]),
            beta: store.add_zeros(format!("{prefix}.beta"), &[c]),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

fn linear<R: Rng>(
    prefix: &str,
    cin: usize,
    cout: usize,
    store: &mut ParamStore,
    rng: &mut R,
) -> (ParamId, ParamId) {
    (
        store.add_glorot(format!("{prefix}.weight"), &[cin, cout], cin, cout, rng),
        store.add_zeros(format!("{prefix}.bias"), &[cout]),
    )
}

fn apply_linear(g: &mut Graph<'_>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let (w, b) = (g.param(w), g.param(b));
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub q: (ParamId, ParamId),
    /// No bias: a shift shared by every key leaves the softmax unchanged.
    pub k: ParamId,
    pub v: (ParamId, ParamId),
    pub out: (ParamId, ParamId),
    pub heads: usize,
}

impl AttnParams {
    pub fn init<R: Rng>(prefix: &str, c: usize, heads: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        AttnParams {
            q: linear(&format!("{prefix}.q"), c, c, store, rng),
            k: store.add_glorot(format!("{prefix}.k.weight"), &[c, c], c, c, rng),
            v: linear(&format!("{prefix}.v"), c, c, store, rng),
            out: linear(&format!("{prefix}.out"), c, c, store, rng),
            heads,
        }
    }

    /// Multi-head attention of `queries` over `keys`; `mask` is additive
    /// (`0` or `-∞`) with shape `[M_q, M_k]`.
    pub fn apply(&self, g: &mut Graph<'_>, queries: Var, keys: Var, mask: &Tensor) -> Result<Var> {
        let q = apply_linear(g, queries, self.q)?;
        let kw = g.param(self.k);
        let k = g.matmul(keys, kw)?;
        let v = apply_linear(g, keys, self.v)?;
        let c = g.shape(q)[1];
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let m = g.constant(mask.clone());
            let s = g.add(s, m)?;
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        apply_linear(g, joined, self.out)
    }
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub up: (ParamId, ParamId),
    pub down: (ParamId, ParamId),
}

impl MlpParams {
    pub fn init<R: Rng>(prefix: &str, c: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        MlpParams {
            up: linear(&format!("{prefix}.up"), c, 4 * c, store, rng),
            down: linear(&format!("{prefix}.down"), 4 * c, c, store, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = apply_linear(g, x, self.up)?;
        let h = g.relu(h);
        apply_linear(g, h, self.down)
    }
}

/// Pre-norm encoder layer: `x + MHA(LN x)`, then `x + MLP(LN x)`.
#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub norm1: NormParams,
    pub attn: AttnParams,
    pub norm2: NormParams,
    pub mlp: MlpParams,
}

impl TransformerParams {
    pub fn init<R: Rng>(prefix: &str, c: usize, heads: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        TransformerParams {
            norm1: NormParams::init(&format!("{prefix}.norm1"), c, store),
            attn: AttnParams::init(&format!("{prefix}.attn"), c, heads, store, rng),
            norm2: NormParams::init(&format!("{prefix}.norm2"), c, store),
            mlp: MlpParams::init(&format!("{prefix}.mlp"), c, store, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var, key_pad: &[bool]) -> Result<Var> {
        let m = g.shape(x)[0];
        if key_pad.len() != m {
            return Err(Error::Shape(format!(
                "pad mask of length {} for a sequence of {m}",
                key_pad.len()
            )));
        }
        let mask = self_attention_mask(key_pad);
        let h = self.norm1.apply(g, x)?;
        let h = self.attn.apply(g, h, h, &mask)?;
        let x = g.add(x, h)?;
        let h = self.norm2.apply(g, x)?;
        let h = self.mlp.apply(g, h)?;
        g.add(x, h)
    }
}

/// Key `j` is hidden from query `i` when it is padding, except `i == j`.
pub fn self_attention_mask(key_pad: &[bool]) -> Tensor {
    let m = key_pad.len();
    Tensor::from_fn(&[m, m], |k| {
        let (i, j) = (k / m, k % m);
        if key_pad[j] && i != j {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    })
}

/// Sinusoidal position table `[len, c]`.
pub fn sinusoid(len: usize, c: usize) -> Tensor {
    Tensor::from_fn(&[len, c], |k| {
        let (pos, i) = (k / c, k % c);
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / c as f64);
        let a = pos as f64 / rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Word embedding (shared with the decoder) plus one encoder layer.
#[derive(Debug, Clone)]
pub struct TextEncoderParams {
    pub embed: ParamId,
    pub layer: TransformerParams,
}

impl TextEncoderParams {
    pub fn init<R: Rng>(cfg: &ValidatedConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let embed = store.add(
            "text.embed",
            Tensor::uniform(&[cfg.vocab_size, cfg.channels], 1.0, rng),
        );
        TextEncoderParams {
            embed,
            layer: TransformerParams::init("text.layer", cfg.channels, cfg.heads, store, rng),
        }
    }
}

/// Embeds ids (with positions) as `[len, C]`.
pub fn embed_ids(g: &mut Graph<'_>, embed: ParamId, ids: &[usize]) -> Result<Var> {
    let table = g.param(embed);
    let x = g.gather(table, ids)?;
    let c = g.shape(x)[1];
    let pos = g.constant(sinusoid(ids.len(), c));
    g.add(x, pos)
}

/// `f_t`: `[L_text, C]`.
pub fn encode_text_graph(g: &mut Graph<'_>, text: &TextSequence, params: &TextEncoderParams) -> Result<Var> {
    let x = embed_ids(g, params.embed, &text.ids)?;
    params.layer.apply(g, x, &text.pad_mask)
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub mode: FusionMode,
    pub axis: SoftmaxAxis,
    pub num_layers: usize,
    pub layers: Vec<TransformerParams>,
    /// Per tokenization round, per feature.
    pub tokenizers: Vec<Vec<TokenizerParams>>,
    pub max_seq_len: usize,
}

impl FusionParams {
    pub fn init<R: Rng>(cfg: &ValidatedConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let stored = if cfg.share_fusion_layers {
            cfg.fusion_layers.min(1)
        } else {
            cfg.fusion_layers
        };
        let layers = (0..stored)
            .map(|l| TransformerParams::init(&format!("fusion.layer{l}"), cfg.channels, cfg.heads, store, rng))
            .collect();
        let rounds = match cfg.fusion_mode {
            FusionMode::DenseConcat => 0,
            FusionMode::StaticTokenize => 1,
            FusionMode::IterativeCoTok => cfg.fusion_layers,
        };
        let tokenizers = (0..rounds)
            .map(|it| {
                let context = if it == 0 { cfg.text_max_len } else { cfg.fused_len() };
                cfg.features()
                    .iter()
                    .map(|geom| {
                        let prefix = format!("fusion.tok{it}.s{}.k{}", geom.stream, geom.scale);
                        TokenizerParams::init(&prefix, *geom, context, cfg, store, rng)
                    })
                    .collect()
            })
            .collect();
        FusionParams {
            mode: cfg.fusion_mode,
            axis: cfg.softmax_axis,
            num_layers: cfg.fusion_layers,
            layers,
            tokenizers,
            max_seq_len: cfg.max_seq_len,
        }
    }

    /// Layer `l` (0-based) of the stack.
    pub fn layer(&self, l: usize) -> &TransformerParams {
        &self.layers[l.min(self.layers.len() - 1)]
    }
}

/// Fused sequence on the tape.
#[derive(Debug, Clone)]
pub struct FuseVars {
    /// `r_L`: `[L_text + visual, C]`.
    pub r: Var,
    pub key_pad: Vec<bool>,
    /// `(round, feature, [N, P] attention)` per tokenization.
    pub attention: Vec<(usize, FeatureGeom, Var)>,
}

/// Runs the configured recurrence with `layer(g, l, x, pad)` as the `l`-th
/// fusion layer.
pub fn fuse_with<F>(
    g: &mut Graph<'_>,
    text: Var,
    text_pad: &[bool],
    features: &[(Var, FeatureGeom)],
    params: &FusionParams,
    mut layer: F,
) -> Result<FuseVars>
where
    F: FnMut(&mut Graph<'_>, usize, Var, &[bool]) -> Result<Var>,
{
    let feats: Vec<Var> = features.iter().map(|(v, _)| *v).collect();
    let mut attention = Vec::new();
    let mut tokenize_round = |g: &mut Graph<'_>, it: usize, ctx: Var| -> Result<Var> {
        let (tokens, maps) = tokenize_all_graph(g, ctx, &feats, &params.tokenizers[it], params.axis)?;
        for (m, (_, geom)) in maps.into_iter().zip(features) {
            attention.push((it, *geom, m));
        }
        Ok(tokens)
    };
    let visual_pad = |n: usize| text_pad.iter().copied().chain(std::iter::repeat(false).take(n));

    let (r, key_pad) = match params.mode {
        FusionMode::DenseConcat => {
            let mut rows = vec![text];
            for (v, geom) in features {
                let c = g.shape(*v)[3];
                rows.push(g.reshape(*v, &[geom.cells(), c])?);
            }
            let x = g.concat_rows(&rows)?;
            let m = g.shape(x)[0];
            if m > params.max_seq_len {
                return Err(Error::Shape(format!(
                    "dense sequence length {m} exceeds max_seq_len {}",
                    params.max_seq_len
                )));
            }
            let pad: Vec<bool> = visual_pad(m - text_pad.len()).collect();
            let mut r = x;
            for l in 0..params.num_layers {
                r = layer(g, l, r, &pad)?;
            }
            (r, pad)
        }
        FusionMode::StaticTokenize => {
            let tokens = tokenize_round(g, 0, text)?;
            let x = g.concat_rows(&[text, tokens])?;
            let pad: Vec<bool> = visual_pad(g.shape(tokens)[0]).collect();
            let mut r = x;
            for l in 0..params.num_layers {
                r = layer(g, l, r, &pad)?;
            }
            (r, pad)
        }
        FusionMode::IterativeCoTok => {
            let tokens = tokenize_round(g, 0, text)?;
            let x = g.concat_rows(&[text, tokens])?;
            let pad: Vec<bool> = visual_pad(g.shape(tokens)[0]).collect();
            let mut r = layer(g, 0, x, &pad)?;
            for l in 1..params.num_layers {
                let tokens = tokenize_round(g, l, r)?;
                let x = g.concat_rows(&[text, tokens])?;
                let x = g.add(x, r)?;
                r = layer(g, l, x, &pad)?;
            }
            (r, pad)
        }
    };
    Ok(FuseVars {
        r,
        key_pad,
        attention,
    })
}

pub fn fuse_graph(
    g: &mut Graph<'_>,
    text: Var,
    text_pad: &[bool],
    features: &[(Var, FeatureGeom)],
    params: &FusionParams,
) -> Result<FuseVars> {
    fuse_with(g, text, text_pad, features, params, |g, l, x, pad| {
        params.layer(l).apply(g, x, pad)
    })
}

/// Fusion output detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSequence {
    pub values: Tensor,
    pub key_pad: Vec<bool>,
    pub attention: Vec<AttentionMaps>,
}

pub fn fuse(
    store: &ParamStore,
    text: &Tensor,
    text_pad: &[bool],
    features: &[FeatureMap],
    geoms: &[FeatureGeom],
    params: &FusionParams,
) -> Result<FusedSequence> {
    let mut g = Graph::new(store);
    let t = g.constant(text.clone());
    let feats: Vec<(Var, FeatureGeom)> = features
        .iter()
        .zip(geoms)
        .map(|(f, geom)| (g.constant(f.values.clone()), *geom))
        .collect();
    let out = fuse_graph(&mut g, t, text_pad, &feats, params)?;
    detach(&g, &out)
}

pub(crate) fn detach(g: &Graph<'_>, out: &FuseVars) -> Result<FusedSequence> {
    let attention = out
        .attention
        .iter()
        .map(|(it, geom, v)| AttentionMaps::from_matrix(g.value(*v), *geom, *it))
        .collect::<Result<_>>()?;
    Ok(FusedSequence {
        values: g.value(out.r).clone(),
        key_pad: out.key_pad.clone(),
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, StreamSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(mode: FusionMode, layers: usize) -> ValidatedConfig {
        ModelConfig {
            streams: vec![StreamSpec::new(2, 4, 4, 1), StreamSpec::new(1, 8, 8, 1)],
            tokens_per_feature: 2,
            channels: 4,
            heads: 2,
            fusion_layers: layers,
            text_max_len: 3,
            vocab_size: 8,
            fusion_mode: mode,
            ..ModelConfig::default()
        }
        .validate()
        .unwrap()
    }

    struct Case {
        store: ParamStore,
        params: FusionParams,
        text: Tensor,
        feats: Vec<FeatureMap>,
        geoms: Vec<FeatureGeom>,
    }

    fn case(cfg: &ValidatedConfig, seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = FusionParams::init(cfg, &mut store, &mut rng);
        let text = Tensor::uniform(&[cfg.text_max_len, cfg.channels], 1.0, &mut rng);
        let geoms = cfg.features().to_vec();
        let feats = geoms
            .iter()
            .map(|gm| FeatureMap {
                values: Tensor::uniform(&[gm.frames, gm.height, gm.width, cfg.channels], 1.0, &mut rng),
                stream_index: gm.stream,
                scale_index: gm.scale,
            })
            .collect();
        Case {
            store,
            params,
            text,
            feats,
            geoms,
        }
    }

    fn run_identity(c: &Case, pad: &[bool]) -> (Tensor, Tensor) {
        let mut g = Graph::new(&c.store);
        let t = g.constant(c.text.clone());
        let feats: Vec<_> = c
            .feats
            .iter()
            .zip(&c.geoms)
            .map(|(f, gm)| (g.constant(f.values.clone()), *gm))
            .collect();
        let out = fuse_with(&mut g, t, pad, &feats, &c.params, |_, _, x, _| Ok(x)).unwrap();
        let fv: Vec<Var> = feats.iter().map(|(v, _)| *v).collect();
        let (f0, _) = tokenize_all_graph(&mut g, t, &fv, &c.params.tokenizers[0], c.params.axis).unwrap();
        let first = g.concat_rows(&[t, f0]).unwrap();
        (g.value(out.r).clone(), g.value(first).clone())
    }

    #[test]
    fn identity_layers_with_zeroed_projection_accumulate() {
        // Identity layers, a zero context projection and one score head for every
        // round: the tokens never change, so each round adds another copy of [text, tokens].
        let cfg = small(FusionMode::IterativeCoTok, 3);
        let mut c = case(&cfg, 1);
        for round in &c.params.tokenizers {
            for (k, tp) in round.iter().enumerate() {
                let shape = c.store.get(tp.w_feat).shape().to_vec();
                *c.store.get_mut(tp.w_feat) = Tensor::zeros(&shape);
                let first = &c.params.tokenizers[0][k];
                *c.store.get_mut(tp.score_w) = c.store.get(first.score_w).clone();
                *c.store.get_mut(tp.score_b) = c.store.get(first.score_b).clone();
            }
        }
        let (r, first) = run_identity(&c, &[false; 3]);
        let mut expect = first.clone();
        expect.scale(3.0);
        assert!(r.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn single_layer_cotok_equals_static() {
        let cfg = small(FusionMode::IterativeCoTok, 1);
        let c = case(&cfg, 2);
        let a = fuse(&c.store, &c.text, &[false; 3], &c.feats, &c.geoms, &c.params).unwrap();
        let mut p = c.params.clone();
        p.mode = FusionMode::StaticTokenize;
        let b = fuse(&c.store, &c.text, &[false; 3], &c.feats, &c.geoms, &p).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn output_lengths_per_mode() {
        for (mode, layers) in [
            (FusionMode::IterativeCoTok, 2),
            (FusionMode::StaticTokenize, 2),
            (FusionMode::DenseConcat, 1),
            (FusionMode::DenseConcat, 0),
        ] {
            let cfg = small(mode, layers);
            let c = case(&cfg, 3);
            let out = fuse(&c.store, &c.text, &[false, false, true], &c.feats, &c.geoms, &c.params).unwrap();
            let m = match mode {
                FusionMode::DenseConcat => cfg.dense_len(),
                _ => cfg.fused_len(),
            };
            assert_eq!(out.values.shape(), &[m, 4]);
            assert_eq!(out.key_pad.len(), m);
            assert_eq!(out.key_pad.iter().filter(|p| **p).count(), 1);
        }
    }

    #[test]
    fn attention_is_exported_per_round() {
        let cfg = small(FusionMode::IterativeCoTok, 3);
        let c = case(&cfg, 4);
        let out = fuse(&c.store, &c.text, &[false; 3], &c.feats, &c.geoms, &c.params).unwrap();
        assert_eq!(out.attention.len(), 3 * 2);
        assert_eq!(out.attention[5].iteration, 2);
        assert_eq!(out.attention[5].values.shape(), &[2, 1, 4, 4]);
    }

    #[test]
    fn later_rounds_depend_on_fused_context() {
        let cfg = small(FusionMode::IterativeCoTok, 2);
        let c = case(&cfg, 5);
        let mut other = c.params.clone();
        other.mode = FusionMode::StaticTokenize;
        let a = fuse(&c.store, &c.text, &[false; 3], &c.feats, &c.geoms, &c.params).unwrap();
        let b = fuse(&c.store, &c.text, &[false; 3], &c.feats, &c.geoms, &other).unwrap();
        assert!(a.values.max_abs_diff(&b.values) > 1e-6);
    }

    #[test]
    fn dense_length_cap_is_enforced() {
        let cfg = small(FusionMode::DenseConcat, 1);
        let mut c = case(&cfg, 6);
        c.params.max_seq_len = cfg.dense_len() - 1;
        let err = fuse(&c.store, &c.text, &[false; 3], &c.feats, &c.geoms, &c.params);
        assert!(err.is_err());
    }

    #[test]
    fn self_mask_keeps_diagonal() {
        let m = self_attention_mask(&[false, true]);
        assert_eq!(m.data(), &[0.0, f64::NEG_INFINITY, 0.0, 0.0]);
    }

    #[test]
    fn transformer_layer_ignores_padded_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let layer = TransformerParams::init("l", 4, 2, &mut store, &mut rng);
        let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let mut y = x.clone();
        for v in &mut y.data_mut()[8..] {
            *v = -5.0;
        }
        let run = |t: &Tensor| {
            let mut g = Graph::new(&store);
            let v = g.constant(t.clone());
            let o = layer.apply(&mut g, v, &[false, false, true]).unwrap();
            g.value(o).clone()
        };
        let (a, b) = (run(&x), run(&y));
        assert_eq!(&a.data()[..8], &b.data()[..8]);
    }

    #[test]
    fn sinusoid_first_rows() {
        let p = sinusoid(2, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.row(1)[0] - 1f64.sin()).abs() < 1e-15);
        assert!((p.row(1)[3] - (0.01f64).cos()).abs() < 1e-15);
    }
}
