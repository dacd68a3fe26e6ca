//! Text-conditioned learned tokenization of a video feature.
//!
//! The context sequence `r` (length `L_r`) is projected onto the feature grid
//! as `(r·W_feat)ᵀ·W_seq`, added to the feature, and scored per cell into `N`
//! attention logits. Each token is an attention-weighted sum of
//! the original feature cells.

use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::FeatureMap;
use crate::config::{FeatureGeom, SoftmaxAxis, ValidatedConfig};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TokenizerParams {
    /// `[C, P]`: context channel to feature cell.
    pub w_feat: ParamId,
    /// `[L_r, C]`: context position to feature channel.
    pub w_seq: ParamId,
    /// `[C, N]` for a pointwise score head, `[3, 3, 3, C, N]` otherwise.
    pub score_w: ParamId,
    pub score_b: ParamId,
    pub context_len: usize,
    pub geom: FeatureGeom,
    pub score_kernel: usize,
}

impl TokenizerParams {
    pub fn init<R: Rng>(
        prefix: &str,
        geom: FeatureGeom,
        context_len: usize,
        cfg: &ValidatedConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let (c, n, p) = (cfg.channels, cfg.tokens_per_feature, geom.cells());
        let k = cfg.score_kernel;
        let score_shape: Vec<usize> = if k == 1 { vec![c, n] } else { vec![k, k, k, c, n] };
        let kvol = k * k * k;
        TokenizerParams {
            w_feat: store.add_glorot(format!("{prefix}.w_feat"), &[c, p], c, p, rng),
            w_seq: store.add_glorot(format!("{prefix}.w_seq"), &[context_len, c], context_len, c, rng),
            score_w: store.add_glorot(format!("{prefix}.score_w"), &score_shape, kvol * c, kvol * n, rng),
            score_b: store.add_zeros(format!("{prefix}.score_b"), &[n]),
            context_len,
            geom,
            score_kernel: k,
        }
    }
}

/// Output of one tokenization on the tape.
#[derive(Debug, Clone, Copy)]
pub struct TokenizeVars {
    /// `[N, C]`.
    pub tokens: Var,
    /// `[N, P]`, normalised along the configured axis.
    pub attention: Var,
}

/// `r: [L_r, C]`, `feature: [T', H', W', C]`.
pub fn tokenize_graph(
    g: &mut Graph<'_>,
    r: Var,
    feature: Var,
    params: &TokenizerParams,
    axis: SoftmaxAxis,
) -> Result<TokenizeVars> {
    let fs = g.shape(feature).to_vec();
    let geom = params.geom;
    if fs.len() != 4 || fs[..3] != [geom.frames, geom.height, geom.width] {
        return Err(Error::Shape(format!(
            "tokenizer expects a {}x{}x{}xC feature, got {fs:?}",
            geom.frames, geom.height, geom.width
        )));
    }
    let rs = g.shape(r).to_vec();
    if rs.len() != 2 || rs[0] != params.context_len || rs[1] != fs[3] {
        return Err(Error::Shape(format!(
            "tokenizer expects a {}x{} context, got {rs:?}",
            params.context_len, fs[3]
        )));
    }
    let (p, c) = (geom.cells(), fs[3]);
    let flat = g.reshape(feature, &[p, c])?;

    let w_feat = g.param(params.w_feat);
    let w_seq = g.param(params.w_seq);
    let per_cell = g.matmul(r, w_feat)?;
    let per_cell = g.transpose(per_cell);
    let context_bias = g.matmul(per_cell, w_seq)?;
    let conditioned = g.add(context_bias, flat)?;

    let (score_w, score_b) = (g.param(params.score_w), g.param(params.score_b));
    let logits = if params.score_kernel == 1 {
        let l = g.matmul(conditioned, score_w)?;
        g.add_bias(l, score_b)?
    } else {
        let grid = g.reshape(conditioned, &[geom.frames, geom.height, geom.width, c])?;
        let l = g.conv3d(grid, score_w, score_b)?;
        let n = g.shape(l)[3];
        g.reshape(l, &[p, n])?
    };
    if !g.value(logits).is_finite() {
        return Err(Error::NonFinite(format!(
            "tokenizer logits for stream {} scale {}",
            geom.stream, geom.scale
        )));
    }
    let attention = match axis {
        SoftmaxAxis::Token => {
            let s = g.softmax_rows(logits);
            g.transpose(s)
        }
        SoftmaxAxis::Spatial => {
            let t = g.transpose(logits);
            g.softmax_rows(t)
        }
    };
    let tokens = g.matmul(attention, flat)?;
    Ok(TokenizeVars { tokens, attention })
}

/// Tokenizes every feature with the same context; tokens are concatenated
/// in feature order into `[N·S, C]`.
pub fn tokenize_all_graph(
    g: &mut Graph<'_>,
    r: Var,
    features: &[Var],
    params: &[TokenizerParams],
    axis: SoftmaxAxis,
) -> Result<(Var, Vec<Var>)> {
    if features.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} features for {} tokenizers",
            features.len(),
            params.len()
        )));
    }
    let mut tokens = Vec::with_capacity(features.len());
    let mut maps = Vec::with_capacity(features.len());
    for (f, p) in features.iter().zip(params) {
        let out = tokenize_graph(g, r, *f, p, axis)?;
        tokens.push(out.tokens);
        maps.push(out.attention);
    }
    Ok((g.concat_rows(&tokens)?, maps))
}

/// Attention of `N` tokens over one feature's `T'×H'×W'` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    /// `[N, T', H', W']`.
    pub values: Tensor,
    pub iteration: usize,
    pub stream_index: usize,
    pub scale_index: usize,
}

impl AttentionMaps {
    pub(crate) fn from_matrix(a: &Tensor, geom: FeatureGeom, iteration: usize) -> Result<Self> {
        let n = a.rows();
        Ok(AttentionMaps {
            values: a.clone().reshape(&[n, geom.frames, geom.height, geom.width])?,
            iteration,
            stream_index: geom.stream,
            scale_index: geom.scale,
        })
    }

    /// `iter{i}_s{stream}_k{scale}`, unique per (iteration, feature).
    pub fn stem(&self) -> String {
        format!("iter{}_s{}_k{}", self.iteration, self.stream_index, self.scale_index)
    }

    /// Header line `N T H W`, then one line of row-major values.
    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.values.shape().iter().map(|d| d.to_string()).collect();
        let vals: Vec<String> = self.values.data().iter().map(|v| format!("{v:e}")).collect();
        format!("{}\n{}\n", dims.join(" "), vals.join(" "))
    }

    /// Parses [`AttentionMaps::to_text`] output; identity fields are left at 0.
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(path, 1, "empty attention file"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| Error::parse(path, 1, format!("bad dimension `{d}`"))))
            .collect::<Result<_>>()?;
        if dims.len() != 4 {
            return Err(Error::parse(path, 1, "header must be `N T H W`"));
        }
        let vals: Vec<f64> = lines
            .flat_map(str::split_whitespace)
            .map(|v| v.parse().map_err(|_| Error::parse(path, 2, format!("bad value `{v}`"))))
            .collect::<Result<_>>()?;
        Ok(AttentionMaps {
            values: Tensor::new(&dims, vals).map_err(|e| Error::parse(path, 2, e.to_string()))?,
            iteration: 0,
            stream_index: 0,
            scale_index: 0,
        })
    }

    /// Writes `<stem>.txt` plus one graymap per token and frame,
    /// `<stem>_tok{n}_t{t}.pgm`, each token scaled so its peak is white.
    /// Returns the paths written.
    pub fn export(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let stem = self.stem();
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        let mut written = vec![txt];
        let [n, t, h, w] = self.values.shape() else {
            return Err(Error::Shape("attention maps must be 4-D".into()));
        };
        let (n, t, h, w) = (*n, *t, *h, *w);
        let data = self.values.data();
        for tok in 0..n {
            let map = &data[tok * t * h * w..(tok + 1) * t * h * w];
            let peak = map.iter().cloned().fold(0.0f64, f64::max);
            for f in 0..t {
                let frame = &map[f * h * w..(f + 1) * h * w];
                let bytes: Vec<u8> = frame
                    .iter()
                    .map(|v| if peak > 0.0 { (v / peak * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
                    .collect();
                let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
                    .ok_or_else(|| Error::Shape("graymap buffer size".into()))?;
                let path = dir.join(format!("{stem}_tok{tok}_t{f}.pgm"));
                let image_err = |e: &dyn std::fmt::Display| Error::Image { path: path.clone(), msg: e.to_string() };
                let file = std::fs::File::create(&path).map_err(|e| image_err(&e))?;
                let encoder = PnmEncoder::new(std::io::BufWriter::new(file))
                    .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
                img.write_with_encoder(encoder).map_err(|e| image_err(&e))?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

pub fn tokenize(
    store: &ParamStore,
    r: &Tensor,
    feature: &FeatureMap,
    params: &TokenizerParams,
    axis: SoftmaxAxis,
) -> Result<(Tensor, AttentionMaps)> {
    let mut g = Graph::new(store);
    let rv = g.constant(r.clone());
    let fv = g.constant(feature.values.clone());
    let out = tokenize_graph(&mut g, rv, fv, params, axis)?;
    let maps = AttentionMaps::from_matrix(g.value(out.attention), params.geom, 0)?;
    Ok((g.value(out.tokens).clone(), maps))
}

pub fn tokenize_all(
    store: &ParamStore,
    r: &Tensor,
    features: &[FeatureMap],
    params: &[TokenizerParams],
    axis: SoftmaxAxis,
) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let rv = g.constant(r.clone());
    let fv: Vec<Var> = features.iter().map(|f| g.constant(f.values.clone())).collect();
    let (tokens, _) = tokenize_all_graph(&mut g, rv, &fv, params, axis)?;
    Ok(g.value(tokens).clone())
}
