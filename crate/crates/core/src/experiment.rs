//! Train-then-test runs on the synthetic tasks.

use std::path::Path;
use std::time::Instant;

use crate::config::{ModelConfig, TrainConfig};
use crate::error::Result;
use crate::ingest::{synth_range, SynthTask};
use crate::model::Model;
use crate::pipeline::{accuracy, predict, samples, Decoding, PredictOptions};
use crate::training::{build_vocab, prepare_samples, train, AnswerVocab, TrainState};

/// One synthetic train/test run. Train examples use indices `0..train`, test
/// examples the following `test` indices, so the splits never overlap.
#[derive(Debug, Clone)]
pub struct SynthExperiment {
    pub task: SynthTask,
    pub config: ModelConfig,
    pub train: usize,
    pub test: usize,
    pub steps: usize,
    pub seed: u64,
    pub decoding: Decoding,
    /// Sample one frame per stream instead of the configured count.
    pub single_frame: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub accuracy: f64,
    /// Mean loss over the last tenth of training.
    pub final_loss: f64,
    pub seconds: f64,
}

impl SynthExperiment {
    pub fn new(task: SynthTask, config: ModelConfig) -> Self {
        SynthExperiment {
            task,
            train: 2000,
            test: 500,
            steps: config.train.steps,
            config,
            seed: 0,
            decoding: Decoding::Open,
            single_frame: false,
        }
    }

    /// The model configuration actually trained.
    pub fn effective_config(&self) -> ModelConfig {
        let mut cfg = self.config.clone();
        if self.single_frame {
            for s in &mut cfg.streams {
                s.frames = 1;
            }
        }
        cfg
    }

    pub fn run(&self, mut on_step: impl FnMut(u64, f64)) -> Result<ExperimentOutcome> {
        let start = Instant::now();
        let cfg = self.effective_config().validate()?;
        let train_ex = synth_range(self.task, self.seed, 0, self.train)?;
        let test_ex = synth_range(self.task, self.seed, self.train as u64, self.test)?;
        let mut all = train_ex.clone();
        all.extend(test_ex.iter().cloned());
        let vocab = build_vocab(&all);
        let answers = AnswerVocab::build(&train_ex, cfg.answer_vocab_size);
        let with_classes = matches!(self.decoding, Decoding::Fc).then_some(&answers);
        let base = Path::new(".");
        let train_data = prepare_samples(&train_ex, &vocab, with_classes, &cfg, base)?;
        let test_data = prepare_samples(&test_ex, &vocab, with_classes, &cfg, base)?;

        let (model, store) = Model::init(cfg.clone(), self.seed);
        let mut state = TrainState::new(store, self.seed);
        let tc: &TrainConfig = &cfg.train;
        let log = train(&model, &mut state, &samples(&train_data), tc, tc.lr, self.steps, |_, row| {
            on_step(row.step, row.loss);
            Ok(())
        })?;
        let tail = (log.len() / 10).max(1);
        let final_loss = log.iter().rev().take(tail).map(|r| r.loss).sum::<f64>() / tail.min(log.len()).max(1) as f64;

        let opts = PredictOptions {
            decoding: self.decoding,
            beam: 1,
            vocab: &vocab,
            answers: Some(&answers),
        };
        let preds = predict(&model, &state.params, &test_data, &opts)?;
        Ok(ExperimentOutcome {
            accuracy: accuracy(&preds, &test_data, &vocab, with_classes)?,
            final_loss,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}
