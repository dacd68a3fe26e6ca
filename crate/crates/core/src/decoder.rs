//! Autoregressive answer decoder, beam search, and the classification head.
//!
//! Decoding starts from the PAD id as the begin token. PAD is never produced;
//! EOS ends a hypothesis and is not part of the returned tokens.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ValidatedConfig;
use crate::error::{Error, Result};
use crate::fusion::{embed_ids, AttnParams, FusedSequence, MlpParams, NormParams};
use crate::ingest::{TextSequence, EOS, PAD};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{log_softmax, Tensor};

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub norm1: NormParams,
    pub self_attn: AttnParams,
    pub norm2: NormParams,
    pub cross_attn: AttnParams,
    pub norm3: NormParams,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    /// Shared with the text encoder.
    pub embed: ParamId,
    pub memory_norm: NormParams,
    pub layers: Vec<DecoderLayerParams>,
    pub final_norm: NormParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
    /// Longest decoder input, begin token included.
    pub max_len: usize,
    pub vocab_size: usize,
}

impl DecoderParams {
    pub fn init<R: Rng>(cfg: &ValidatedConfig, embed: ParamId, store: &mut ParamStore, rng: &mut R) -> Self {
        let (c, h) = (cfg.channels, cfg.heads);
        let layers = (0..cfg.decoder_layers)
            .map(|l| {
                let p = format!("decoder.layer{l}");
                DecoderLayerParams {
                    norm1: NormParams::init(&format!("{p}.norm1"), c, store),
                    self_attn: AttnParams::init(&format!("{p}.self_attn"), c, h, store, rng),
                    norm2: NormParams::init(&format!("{p}.norm2"), c, store),
                    cross_attn: AttnParams::init(&format!("{p}.cross_attn"), c, h, store, rng),
                    norm3: NormParams::init(&format!("{p}.norm3"), c, store),
                    mlp: MlpParams::init(&format!("{p}.mlp"), c, store, rng),
                }
            })
            .collect();
        DecoderParams {
            embed,
            memory_norm: NormParams::init("decoder.memory_norm", c, store),
            layers,
            final_norm: NormParams::init("decoder.final_norm", c, store),
            out_w: store.add_glorot("decoder.out.weight", &[c, cfg.vocab_size], c, cfg.vocab_size, rng),
            out_b: store.add_zeros("decoder.out.bias", &[cfg.vocab_size]),
            max_len: cfg.text_max_len,
            vocab_size: cfg.vocab_size,
        }
    }
}

fn causal_mask(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |k| if k % n > k / n { f64::NEG_INFINITY } else { 0.0 })
}

fn memory_mask(rows: usize, pad: &[bool]) -> Tensor {
    let all_pad = pad.iter().all(|p| *p);
    let m = pad.len();
    Tensor::from_fn(&[rows, m], |k| {
        if pad[k % m] && !all_pad {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    })
}

/// Next-token logits `[len, V]` for every decoder input position.
pub fn decoder_logits_graph(
    g: &mut Graph<'_>,
    memory: Var,
    memory_pad: &[bool],
    inputs: &[usize],
    p: &DecoderParams,
) -> Result<Var> {
    if inputs.is_empty() || inputs.len() > p.max_len {
        return Err(Error::Input(format!(
            "decoder input length {} outside 1..={}",
            inputs.len(),
            p.max_len
        )));
    }
    if let Some(bad) = inputs.iter().find(|i| **i >= p.vocab_size) {
        return Err(Error::Input(format!("token id {bad} outside the vocabulary")));
    }
    let n = inputs.len();
    let mem = p.memory_norm.apply(g, memory)?;
    let self_mask = causal_mask(n);
    let cross_mask = memory_mask(n, memory_pad);
    let mut x = embed_ids(g, p.embed, inputs)?;
    for layer in &p.layers {
        let h = layer.norm1.apply(g, x)?;
        let h = layer.self_attn.apply(g, h, h, &self_mask)?;
        x = g.add(x, h)?;
        let h = layer.norm2.apply(g, x)?;
        let h = layer.cross_attn.apply(g, h, mem, &cross_mask)?;
        x = g.add(x, h)?;
        let h = layer.norm3.apply(g, x)?;
        let h = layer.mlp.apply(g, h)?;
        x = g.add(x, h)?;
    }
    let x = p.final_norm.apply(g, x)?;
    let (w, b) = (g.param(p.out_w), g.param(p.out_b));
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Decoder inputs and targets for teacher forcing on `target`.
pub fn teacher_forcing(target: &TextSequence) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let n = target.len();
    let mut inputs = Vec::with_capacity(n);
    inputs.push(PAD);
    inputs.extend_from_slice(&target.ids[..n.saturating_sub(1)]);
    let mask = target.pad_mask.iter().map(|p| !p).collect();
    (inputs, target.ids.clone(), mask)
}

/// Mean token cross-entropy over the non-PAD target positions.
pub fn decoder_loss_graph(
    g: &mut Graph<'_>,
    memory: Var,
    memory_pad: &[bool],
    target: &TextSequence,
    p: &DecoderParams,
) -> Result<Var> {
    let (inputs, targets, mask) = teacher_forcing(target);
    let logits = decoder_logits_graph(g, memory, memory_pad, &inputs, p)?;
    g.cross_entropy(logits, &targets, &mask)
}

/// Logits for the token following `prefix` (begin token excluded).
pub fn decode_step(
    store: &ParamStore,
    memory: &FusedSequence,
    prefix: &[usize],
    p: &DecoderParams,
) -> Result<Vec<f64>> {
    if prefix.len() >= p.max_len {
        return Err(Error::Input(format!(
            "prefix length {} must be below the text length {}",
            prefix.len(),
            p.max_len
        )));
    }
    let mut g = Graph::new(store);
    let mem = g.constant(memory.values.clone());
    let mut inputs = Vec::with_capacity(prefix.len() + 1);
    inputs.push(PAD);
    inputs.extend_from_slice(prefix);
    let logits = decoder_logits_graph(&mut g, mem, &memory.key_pad, &inputs, p)?;
    Ok(g.value(logits).row(prefix.len()).to_vec())
}

/// Which tokens may be emitted.
#[derive(Debug, Clone, PartialEq)]
pub enum DecodeMode {
    Open,
    /// Only these ids (EOS is always added).
    Masked(BTreeSet<usize>),
}

impl DecodeMode {
    /// Log-probabilities renormalised over the permitted tokens.
    fn log_probs(&self, logits: &[f64]) -> Result<Vec<f64>> {
        let mut l = logits.to_vec();
        l[PAD] = f64::NEG_INFINITY;
        if let DecodeMode::Masked(allowed) = self {
            if allowed.iter().all(|i| *i == PAD || *i == EOS) {
                return Err(Error::Input("answer mask permits no tokens".into()));
            }
            for (i, v) in l.iter_mut().enumerate() {
                if i != EOS && !allowed.contains(&i) {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        Ok(log_softmax(&l))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids without EOS.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, EOS included when emitted.
    pub score: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(
    store: &ParamStore,
    memory: &FusedSequence,
    p: &DecoderParams,
    mode: &DecodeMode,
) -> Result<Hypothesis> {
    greedy_with(|prefix| decode_step(store, memory, prefix, p), p.max_len, mode)
}

/// Greedy decoding over any next-token logit function of the prefix.
pub fn greedy_with<F>(mut step: F, max_len: usize, mode: &DecodeMode) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut tokens = Vec::new();
    let mut score = 0.0;
    while tokens.len() < max_len {
        let lp = mode.log_probs(&step(&tokens)?)?;
        let t = argmax(&lp);
        score += lp[t];
        if t == EOS {
            break;
        }
        tokens.push(t);
    }
    Ok(Hypothesis { tokens, score })
}

/// Higher score first, then the lexicographically smaller sequence.
fn rank(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// Beam search without length normalisation. The greedy hypothesis seeds
/// the finished pool, so the best result never scores below it. Returns
/// finished hypotheses, best first.
pub fn beam_search(
    store: &ParamStore,
    memory: &FusedSequence,
    p: &DecoderParams,
    beam: usize,
    mode: &DecodeMode,
) -> Result<Vec<Hypothesis>> {
    beam_search_with(|prefix| decode_step(store, memory, prefix, p), p.max_len, beam, mode)
}

/// [`beam_search`] over any next-token logit function of the prefix.
pub fn beam_search_with<F>(mut step: F, max_len: usize, beam: usize, mode: &DecodeMode) -> Result<Vec<Hypothesis>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if beam == 0 {
        return Err(Error::Input("beam width must be at least 1".into()));
    }
    let greedy = greedy_with(&mut step, max_len, mode)?;
    let mut finished: Vec<(Vec<usize>, f64)> = vec![(greedy.tokens, greedy.score)];
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    while !alive.is_empty() {
        let mut cands: Vec<(Vec<usize>, f64)> = Vec::new();
        for (seq, score) in &alive {
            let lp = mode.log_probs(&step(seq)?)?;
            for (t, l) in lp.iter().enumerate() {
                if l.is_finite() {
                    let mut s = seq.clone();
                    s.push(t);
                    cands.push((s, score + l));
                }
            }
        }
        cands.sort_by(rank);
        cands.truncate(beam);
        alive.clear();
        for (mut seq, score) in cands {
            if seq.last() == Some(&EOS) {
                seq.pop();
                if !finished.iter().any(|(f, _)| *f == seq) {
                    finished.push((seq, score));
                }
            } else if seq.len() >= max_len {
                if !finished.iter().any(|(f, _)| *f == seq) {
                    finished.push((seq, score));
                }
            } else {
                alive.push((seq, score));
            }
        }
        finished.sort_by(rank);
        let best_alive = alive.iter().map(|a| a.1).fold(f64::NEG_INFINITY, f64::max);
        if finished[0].1 >= best_alive {
            break;
        }
    }
    Ok(finished
        .into_iter()
        .take(beam)
        .map(|(tokens, score)| Hypothesis { tokens, score })
        .collect())
}

/// Linear classifier over the mean of the text-span rows.
#[derive(Debug, Clone)]
pub struct FcHeadParams {
    pub w: ParamId,
    pub b: ParamId,
    pub text_len: usize,
}

impl FcHeadParams {
    pub fn init<R: Rng>(cfg: &ValidatedConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let (c, a) = (cfg.channels, cfg.answer_vocab_size);
        FcHeadParams {
            w: store.add_glorot("fc.weight", &[c, a], c, a, rng),
            b: store.add_zeros("fc.bias", &[a]),
            text_len: cfg.text_max_len,
        }
    }

    /// Logits `[1, A]`.
    pub fn logits_graph(&self, g: &mut Graph<'_>, fused: Var) -> Result<Var> {
        let text = g.slice_rows(fused, 0, self.text_len)?;
        let pooled = g.mean_rows(text);
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(pooled, w)?;
        g.add_bias(y, b)
    }
}

/// Softmax over the answer vocabulary.
pub fn classify_fc(store: &ParamStore, fused: &FusedSequence, head: &FcHeadParams) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let r = g.constant(fused.values.clone());
    let logits = head.logits_graph(&mut g, r)?;
    let mut probs = g.value(logits).data().to_vec();
    crate::tensor::softmax_in_place(&mut probs);
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, StreamSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ValidatedConfig, ParamStore, DecoderParams, FusedSequence) {
        let cfg = ModelConfig {
            streams: vec![StreamSpec::new(1, 4, 4, 1)],
            channels: 8,
            heads: 2,
            text_max_len: 5,
            vocab_size: 9,
            tokens_per_feature: 2,
            ..ModelConfig::default()
        }
        .validate()
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.add("embed", Tensor::uniform(&[9, 8], 1.0, &mut rng));
        let p = DecoderParams::init(&cfg, embed, &mut store, &mut rng);
        // Sharper output distribution so decoding paths differ.
        let w = store.get_mut(p.out_w);
        w.scale(6.0);
        let fused = FusedSequence {
            values: Tensor::uniform(&[7, 8], 1.0, &mut rng),
            key_pad: vec![false, false, true, true, true, false, false],
            attention: Vec::new(),
        };
        (cfg, store, p, fused)
    }

    #[test]
    fn zero_output_projection_is_uniform() {
        let (_, mut store, p, fused) = setup(1);
        *store.get_mut(p.out_w) = Tensor::zeros(&[8, 9]);
        let logits = decode_step(&store, &fused, &[3], &p).unwrap();
        let lp = log_softmax(&logits);
        let entropy: f64 = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
        assert!((entropy - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prefix_at_cap_is_rejected() {
        let (_, store, p, fused) = setup(2);
        assert!(decode_step(&store, &fused, &[3, 3, 3, 3], &p).is_ok());
        assert!(decode_step(&store, &fused, &[3, 3, 3, 3, 3], &p).is_err());
    }

    #[test]
    fn step_matches_teacher_forced_row() {
        let (_, store, p, fused) = setup(3);
        let step = decode_step(&store, &fused, &[4, 6], &p).unwrap();
        let mut g = Graph::new(&store);
        let m = g.constant(fused.values.clone());
        let all = decoder_logits_graph(&mut g, m, &fused.key_pad, &[PAD, 4, 6, 7], &p).unwrap();
        let row = g.value(all).row(2);
        for (a, b) in step.iter().zip(row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..6 {
            let (_, store, p, fused) = setup(seed);
            let gr = greedy_decode(&store, &fused, &p, &DecodeMode::Open).unwrap();
            let b = beam_search(&store, &fused, &p, 1, &DecodeMode::Open).unwrap();
            assert_eq!(b[0], gr);
        }
    }

    #[test]
    fn wider_beams_never_score_lower() {
        for seed in 0..6 {
            let (_, store, p, fused) = setup(seed);
            let gr = greedy_decode(&store, &fused, &p, &DecodeMode::Open).unwrap();
            for k in [2, 4] {
                let b = beam_search(&store, &fused, &p, k, &DecodeMode::Open).unwrap();
                assert!(b[0].score >= gr.score);
                assert!(b.windows(2).all(|w| w[0].score >= w[1].score));
            }
        }
    }

    #[test]
    fn scores_are_sums_of_step_log_probs() {
        let (_, store, p, fused) = setup(7);
        let h = greedy_decode(&store, &fused, &p, &DecodeMode::Open).unwrap();
        let mut seq = Vec::new();
        let mut total = 0.0;
        let mut steps: Vec<usize> = h.tokens.clone();
        if steps.len() < p.max_len {
            steps.push(EOS);
        }
        for t in steps {
            let mut l = decode_step(&store, &fused, &seq, &p).unwrap();
            l[PAD] = f64::NEG_INFINITY;
            total += log_softmax(&l)[t];
            seq.push(t);
        }
        assert!((total - h.score).abs() < 1e-12);
    }

    #[test]
    fn masked_decoding_emits_only_allowed_tokens() {
        for seed in 0..4 {
            let (_, store, p, fused) = setup(seed);
            let allowed: BTreeSet<usize> = [5, 6].into();
            let mode = DecodeMode::Masked(allowed.clone());
            for h in beam_search(&store, &fused, &p, 3, &mode).unwrap() {
                assert!(h.tokens.iter().all(|t| allowed.contains(t)));
            }
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let (_, store, p, fused) = setup(1);
        let mode = DecodeMode::Masked(BTreeSet::new());
        assert!(greedy_decode(&store, &fused, &p, &mode).is_err());
    }

    #[test]
    fn pad_is_never_emitted() {
        let (_, mut store, p, fused) = setup(2);
        store.get_mut(p.out_b).data_mut()[PAD] = 100.0;
        let h = greedy_decode(&store, &fused, &p, &DecodeMode::Open).unwrap();
        assert!(!h.tokens.contains(&PAD));
    }

    #[test]
    fn teacher_forcing_shifts_by_one() {
        let t = TextSequence::from_ids(&[4, 5, EOS], 5);
        let (inp, tgt, mask) = teacher_forcing(&t);
        assert_eq!(inp, vec![PAD, 4, 5, EOS, PAD]);
        assert_eq!(tgt, vec![4, 5, EOS, PAD, PAD]);
        assert_eq!(mask, vec![true, true, true, false, false]);
    }

    #[test]
    fn fc_head_is_a_distribution() {
        let (cfg, mut store, _, fused) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = FcHeadParams::init(&cfg, &mut store, &mut rng);
        let probs = classify_fc(&store, &fused, &head).unwrap();
        assert_eq!(probs.len(), cfg.answer_vocab_size);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
