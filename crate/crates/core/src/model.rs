//! Parameter layout and end-to-end forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::{collect_features_graph, BackboneParams};
use crate::config::ValidatedConfig;
use crate::decoder::{
    beam_search, classify_fc, decoder_loss_graph, greedy_decode, DecodeMode, DecoderParams,
    FcHeadParams, Hypothesis,
};
use crate::error::{Error, Result};
use crate::fusion::{detach, encode_text_graph, fuse_graph, FuseVars, FusedSequence, FusionParams, TextEncoderParams};
use crate::ingest::{TextSequence, VideoClip};
use crate::params::{ParamId, ParamStore};

/// Where every trainable tensor lives in the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ValidatedConfig,
    pub backbone: BackboneParams,
    pub text: TextEncoderParams,
    pub fusion: FusionParams,
    pub decoder: DecoderParams,
    pub fc: FcHeadParams,
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Teacher-forced answer generation.
    Generative,
    /// Classification over the answer vocabulary.
    Classify,
}

/// What one example supervises.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Text(TextSequence),
    Class(usize),
}

/// One preprocessed training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub clips: Vec<VideoClip>,
    pub question: TextSequence,
    pub target: Target,
}

impl Model {
    /// Builds the layout and freshly initialised parameters from `seed`.
    pub fn init(config: ValidatedConfig, seed: u64) -> (Model, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = BackboneParams::init(&config, &mut store, &mut rng);
        let text = TextEncoderParams::init(&config, &mut store, &mut rng);
        let fusion = FusionParams::init(&config, &mut store, &mut rng);
        let decoder = DecoderParams::init(&config, text.embed, &mut store, &mut rng);
        let fc = FcHeadParams::init(&config, &mut store, &mut rng);
        (
            Model {
                config,
                backbone,
                text,
                fusion,
                decoder,
                fc,
            },
            store,
        )
    }

    /// Layout for `config` with parameters taken from `store` (checked by
    /// name and shape).
    pub fn with_params(config: ValidatedConfig, store: &ParamStore) -> Result<(Model, ParamStore)> {
        let (model, mut fresh) = Model::init(config, 0);
        fresh.assign_from(store)?;
        Ok((model, fresh))
    }

    /// Parameters an objective can reach.
    pub fn trainable(&self, store: &ParamStore, objective: Objective) -> Vec<ParamId> {
        let fc = [self.fc.w, self.fc.b];
        store
            .ids()
            .filter(|id| {
                let name = store.name(*id);
                match objective {
                    Objective::Generative => !fc.contains(id),
                    Objective::Classify => !name.starts_with("decoder."),
                }
            })
            .collect()
    }

    /// Backbone, text encoder and fusion on the tape.
    pub fn encode_graph(&self, g: &mut Graph<'_>, clips: &[VideoClip], question: &TextSequence) -> Result<FuseVars> {
        if question.len() != self.config.text_max_len {
            return Err(Error::Shape(format!(
                "question has {} ids, expected {}",
                question.len(),
                self.config.text_max_len
            )));
        }
        let xs: Vec<Var> = clips.iter().map(|c| g.constant(c.frames.clone())).collect();
        let feats = collect_features_graph(g, &xs, &self.backbone)?;
        let text = encode_text_graph(g, question, &self.text)?;
        fuse_graph(g, text, &question.pad_mask, &feats, &self.fusion)
    }

    pub fn encode(&self, store: &ParamStore, clips: &[VideoClip], question: &TextSequence) -> Result<FusedSequence> {
        let mut g = Graph::new(store);
        let out = self.encode_graph(&mut g, clips, question)?;
        detach(&g, &out)
    }

    /// Scalar loss of one sample.
    pub fn loss_graph(&self, g: &mut Graph<'_>, sample: &Sample) -> Result<Var> {
        let fused = self.encode_graph(g, &sample.clips, &sample.question)?;
        match &sample.target {
            Target::Text(t) => decoder_loss_graph(g, fused.r, &fused.key_pad, t, &self.decoder),
            Target::Class(c) => {
                if *c >= self.config.answer_vocab_size {
                    return Err(Error::Input(format!("answer class {c} outside the answer vocabulary")));
                }
                let logits = self.fc.logits_graph(g, fused.r)?;
                g.cross_entropy(logits, &[*c], &[true])
            }
        }
    }

    pub fn loss(&self, store: &ParamStore, sample: &Sample) -> Result<f64> {
        let mut g = Graph::new(store);
        let l = self.loss_graph(&mut g, sample)?;
        Ok(g.value(l).data()[0])
    }

    pub fn greedy(&self, store: &ParamStore, fused: &FusedSequence, mode: &DecodeMode) -> Result<Hypothesis> {
        greedy_decode(store, fused, &self.decoder, mode)
    }

    pub fn beam(&self, store: &ParamStore, fused: &FusedSequence, beam: usize, mode: &DecodeMode) -> Result<Vec<Hypothesis>> {
        beam_search(store, fused, &self.decoder, beam, mode)
    }

    pub fn classify(&self, store: &ParamStore, fused: &FusedSequence) -> Result<Vec<f64>> {
        classify_fc(store, fused, &self.fc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    #[test]
    fn init_is_deterministic() {
        let cfg = preset("toy").unwrap().validate().unwrap();
        let (_, a) = Model::init(cfg.clone(), 3);
        let (_, b) = Model::init(cfg.clone(), 3);
        let (_, c) = Model::init(cfg, 4);
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn parameter_names_are_unique_and_stable() {
        let cfg = preset("toy").unwrap().validate().unwrap();
        let (m, store) = Model::init(cfg, 0);
        assert!(store.id("text.embed").is_some());
        assert!(store.id("fusion.tok1.s1.k0.w_feat").is_some());
        assert_eq!(m.decoder.embed, m.text.embed);
    }

    #[test]
    fn shared_layers_store_one_copy() {
        let mut c = preset("toy").unwrap();
        c.fusion_layers = 3;
        let (_, unshared) = Model::init(c.clone().validate().unwrap(), 0);
        c.share_fusion_layers = true;
        let (m, shared) = Model::init(c.validate().unwrap(), 0);
        assert_eq!(m.fusion.layers.len(), 1);
        assert!(shared.num_scalars() < unshared.num_scalars());
    }
}
