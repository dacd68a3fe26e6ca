//! Central-difference gradient checking against the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::{encode_stream_graph, BackboneParams};
use crate::config::{FusionMode, ModelConfig, SoftmaxAxis, StreamSpec, ValidatedConfig};
use crate::cotokenizer::{tokenize_graph, TokenizerParams};
use crate::decoder::{decoder_logits_graph, DecoderParams};
use crate::error::{Error, Result};
use crate::fusion::{fuse_graph, FusionParams, TransformerParams};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `|g − ĝ| / max(|g|, |ĝ|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between `grad` and central differences of `f` at
/// `point`.
pub fn grad_check_fn(f: impl Fn(&[f64]) -> f64, grad: &[f64], point: &[f64], eps: f64) -> Result<f64> {
    if grad.len() != point.len() {
        return Err(Error::Shape(format!("{} gradients for {} coordinates", grad.len(), point.len())));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let x0 = x[i];
        x[i] = x0 + eps;
        let fp = f(&x);
        x[i] = x0 - eps;
        let fm = f(&x);
        x[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("function value near coordinate {i}")));
        }
        worst = worst.max(relative_error(grad[i], (fp - fm) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Which part of the network to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subgraph {
    Tokenize,
    TransformerLayer,
    /// Two iterative co-tokenization layers over two features.
    Fuse,
    DecodeStep,
    Backbone,
}

impl Subgraph {
    pub const ALL: [Subgraph; 5] = [
        Subgraph::Tokenize,
        Subgraph::TransformerLayer,
        Subgraph::Fuse,
        Subgraph::DecodeStep,
        Subgraph::Backbone,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            Subgraph::Tokenize => "tokenize",
            Subgraph::TransformerLayer => "transformer_layer",
            Subgraph::Fuse => "fuse",
            Subgraph::DecodeStep => "decode_step",
            Subgraph::Backbone => "backbone",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of scalars compared.
    pub coords: usize,
    /// Tensor holding the worst coordinate.
    pub worst: String,
}

fn tiny_config() -> ValidatedConfig {
    ModelConfig {
        streams: vec![StreamSpec::new(2, 4, 4, 1), StreamSpec::new(1, 4, 6, 1)],
        tokens_per_feature: 2,
        channels: 4,
        heads: 2,
        fusion_layers: 2,
        text_max_len: 3,
        vocab_size: 6,
        backbone_width: 3,
        decoder_layers: 1,
        fusion_mode: FusionMode::IterativeCoTok,
        softmax_axis: SoftmaxAxis::Token,
        ..ModelConfig::default()
    }
    .validate()
    .expect("tiny geometry is valid")
}

/// Shifts every parameter off its initial value so biases and gains are
/// generic.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        let noise = Tensor::uniform(t.shape(), 0.3, rng);
        t.add_assign(&noise);
    }
}

type Build<'a> = dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var> + 'a;

/// Compares tape gradients of `Σ w ⊙ build(inputs)` for random `w` against
/// central differences in every parameter and input coordinate.
fn check(store: &ParamStore, inputs: &[Tensor], build: &Build<'_>, eps: f64, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let weights = {
        let mut g = Graph::new(store);
        let xs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &xs)?;
        Tensor::uniform(g.shape(out), 1.0, rng)
    };
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(store);
        let xs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &xs)?;
        let s = g.weighted_sum(out, weights.clone())?;
        Ok(g.value(s).data()[0])
    };

    let mut g = Graph::new(store);
    let xs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &xs)?;
    let s = g.weighted_sum(out, weights.clone())?;
    let grads = g.backward(s)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords: 0,
        worst: String::new(),
    };
    let note = |err: f64, name: &str, report: &mut GradCheckReport| {
        report.coords += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = name.to_string();
        }
    };
    let central = |fp: f64, fm: f64| -> Result<f64> {
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("perturbed evaluation".into()));
        }
        Ok((fp - fm) / (2.0 * eps))
    };

    let mut work = store.clone();
    for id in store.ids() {
        let zero = Tensor::zeros(store.get(id).shape());
        let analytic = grads.param(id).unwrap_or(&zero).clone();
        for j in 0..analytic.len() {
            let x0 = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = x0 + eps;
            let fp = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[j] = x0 - eps;
            let fm = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[j] = x0;
            let err = relative_error(analytic.data()[j], central(fp, fm)?);
            note(err, store.name(id), &mut report);
        }
    }
    let mut moved = inputs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = grads.wrt(*x).unwrap_or(&zero).clone();
        for j in 0..analytic.len() {
            let x0 = moved[k].data()[j];
            moved[k].data_mut()[j] = x0 + eps;
            let fp = eval(store, &moved)?;
            moved[k].data_mut()[j] = x0 - eps;
            let fm = eval(store, &moved)?;
            moved[k].data_mut()[j] = x0;
            let err = relative_error(analytic.data()[j], central(fp, fm)?);
            note(err, &format!("input{k}"), &mut report);
        }
    }
    Ok(report)
}

/// Builds a tiny random instance of `which` and checks every parameter and
/// input coordinate.
pub fn check_subgraph(which: Subgraph, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config();
    let c = cfg.channels;
    let mut store = ParamStore::new();
    match which {
        Subgraph::Tokenize => {
            let geom = cfg.features()[0];
            let tp = TokenizerParams::init("tok", geom, cfg.text_max_len, &cfg, &mut store, &mut rng);
            jitter(&mut store, &mut rng);
            let inputs = [
                Tensor::uniform(&[cfg.text_max_len, c], 1.0, &mut rng),
                Tensor::uniform(&[geom.frames, geom.height, geom.width, c], 1.0, &mut rng),
            ];
            let build = |g: &mut Graph<'_>, xs: &[Var]| -> Result<Var> {
                let out = tokenize_graph(g, xs[0], xs[1], &tp, cfg.softmax_axis)?;
                let n = g.value(out.tokens).len();
                let tokens = g.reshape(out.tokens, &[1, n])?;
                let n = g.value(out.attention).len();
                let attention = g.reshape(out.attention, &[1, n])?;
                g.concat_cols(&[tokens, attention])
            };
            check(&store, &inputs, &build, eps, &mut rng)
        }
        Subgraph::TransformerLayer => {
            let layer = TransformerParams::init("layer", c, cfg.heads, &mut store, &mut rng);
            jitter(&mut store, &mut rng);
            let inputs = [Tensor::uniform(&[5, c], 1.0, &mut rng)];
            let pad = [false, false, true, false, true];
            let build = |g: &mut Graph<'_>, xs: &[Var]| layer.apply(g, xs[0], &pad);
            check(&store, &inputs, &build, eps, &mut rng)
        }
        Subgraph::Fuse => {
            let fusion = FusionParams::init(&cfg, &mut store, &mut rng);
            jitter(&mut store, &mut rng);
            let geoms = cfg.features().to_vec();
            let mut inputs = vec![Tensor::uniform(&[cfg.text_max_len, c], 1.0, &mut rng)];
            for gm in &geoms {
                inputs.push(Tensor::uniform(&[gm.frames, gm.height, gm.width, c], 1.0, &mut rng));
            }
            let pad = [false, false, true];
            let build = |g: &mut Graph<'_>, xs: &[Var]| -> Result<Var> {
                let feats: Vec<_> = xs[1..].iter().copied().zip(geoms.iter().copied()).collect();
                Ok(fuse_graph(g, xs[0], &pad, &feats, &fusion)?.r)
            };
            check(&store, &inputs, &build, eps, &mut rng)
        }
        Subgraph::DecodeStep => {
            let embed = store.add("embed", Tensor::uniform(&[cfg.vocab_size, c], 1.0, &mut rng));
            let dec = DecoderParams::init(&cfg, embed, &mut store, &mut rng);
            jitter(&mut store, &mut rng);
            let inputs = [Tensor::uniform(&[6, c], 1.0, &mut rng)];
            let pad = [false, true, false, false, true, false];
            let build = |g: &mut Graph<'_>, xs: &[Var]| -> Result<Var> {
                let logits = decoder_logits_graph(g, xs[0], &pad, &[0, 4, 3], &dec)?;
                g.slice_rows(logits, 2, 1)
            };
            check(&store, &inputs, &build, eps, &mut rng)
        }
        Subgraph::Backbone => {
            let bb = BackboneParams::init(&cfg, &mut store, &mut rng);
            jitter(&mut store, &mut rng);
            let spec = cfg.streams[0];
            let inputs = [Tensor::uniform(&[spec.frames, spec.height, spec.width, 3], 1.0, &mut rng)];
            let build = |g: &mut Graph<'_>, xs: &[Var]| -> Result<Var> {
                Ok(encode_stream_graph(g, xs[0], &bb.streams[0], 0)?[0].0)
            };
            check(&store, &inputs, &build, eps, &mut rng)
        }
    }
}
