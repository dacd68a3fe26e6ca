//! The `cotok` command line: synth, train, eval, profile, export-attention.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{preset_at, ModelConfig, Scale};
use crate::error::{Error, Result};
use crate::flops::{compare, estimate};
use crate::ingest::{read_qa, synth_range, write_frame_dir, write_qa, SynthTask, VideoSource, Vocab};
use crate::metrics::{score, write_predictions, EvalMode, MatchRule};
use crate::model::Model;
use crate::params::ParamStore;
use crate::pipeline::{predict, samples, Decoding, PredictOptions};
use crate::training::{
    build_vocab, configure_threads, prepare_samples, train, write_log_csv, AnswerVocab, Prepared, TrainState,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const ANSWERS_FILE: &str = "answers.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Parser)]
#[command(name = "cotok", version, about = "Multi-stream video QA with iterative co-tokenization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic QA file (and optionally rendered videos).
    Synth(SynthArgs),
    /// Train a model on a QA file and write a checkpoint directory.
    Train(TrainArgs),
    /// Decode a QA file with a checkpoint and score the predictions.
    Eval(EvalArgs),
    /// Print the analytic FLOP and parameter report for a config.
    Profile(ProfileArgs),
    /// Write tokenizer attention maps for selected examples.
    ExportAttention(ExportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScaleArg {
    Full,
    Desk,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Scale {
        match s {
            ScaleArg::Full => Scale::Full,
            ScaleArg::Desk => Scale::Desk,
        }
    }
}

#[derive(Debug, Args)]
struct ConfigSource {
    /// Named preset.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Geometry used for ladder presets.
    #[arg(long, value_enum, default_value = "full")]
    scale: ScaleArg,
}

impl ConfigSource {
    fn given(&self) -> bool {
        self.preset.is_some() || self.config.is_some()
    }

    fn load(&self, default: &str) -> Result<ModelConfig> {
        match (&self.preset, &self.config) {
            (_, Some(path)) => ModelConfig::load(path),
            (Some(name), None) => preset_at(name, self.scale.into()),
            (None, None) => preset_at(default, self.scale.into()),
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    task: SynthTask,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives qa.tsv.
    #[arg(long)]
    out: PathBuf,
    /// Also write this many held-out examples to qa_test.tsv.
    #[arg(long)]
    test: Option<usize>,
    /// Render every video as a directory of PNG frames under videos/.
    #[arg(long)]
    videos: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// QA file to train on.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train the classification head instead of the decoder.
    #[arg(long)]
    fc: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "open")]
    decode: Decoding,
    #[arg(long)]
    beam: Option<usize>,
    /// Answer list, one per line: the mask for masked decoding and the
    /// classes for fc. Defaults to the checkpoint's answers.txt.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value = "exact")]
    mode: EvalMode,
    /// Compare answers byte for byte instead of normalised.
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value = "predictions.tsv")]
    predictions: PathBuf,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProfileArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Comma-separated presets to rank instead of a single report.
    #[arg(long, value_delimiter = ',')]
    compare: Vec<String>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Checkpoint directory; without it a freshly initialised model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long)]
    data: PathBuf,
    /// Example ids to export; defaults to the first example.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Errors are printed to stderr as one line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Profile(a) => profile(a),
        Command::ExportAttention(a) => export(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::UnknownPreset(_) => 1,
                _ => 2,
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn base_dir(qa: &Path) -> PathBuf {
    qa.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn synth(a: SynthArgs) -> Result<()> {
    create_dir(&a.out)?;
    let mut splits = vec![("qa.tsv", 0u64, a.n)];
    if let Some(m) = a.test {
        splits.push(("qa_test.tsv", a.n as u64, m));
    }
    for (name, start, n) in splits {
        let mut examples = synth_range(a.task, a.seed, start, n)?;
        if a.videos {
            for ex in &mut examples {
                let rel = PathBuf::from("videos").join(&ex.id);
                let video = crate::ingest::load_video(&ex.video, &a.out)?;
                let dir = a.out.join(&rel);
                create_dir(&dir)?;
                write_frame_dir(&video, &dir)?;
                ex.video = VideoSource::Path(rel);
            }
        }
        let path = a.out.join(name);
        write_qa(&examples, &path)?;
        println!("wrote {} examples to {}", examples.len(), path.display());
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = a.source.load("desk_default")?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.validate()?;
    let examples = read_qa(&a.data)?;
    let vocab = build_vocab(&examples);
    let answers = AnswerVocab::build(&examples, cfg.answer_vocab_size);
    let data = prepare_samples(&examples, &vocab, a.fc.then_some(&answers), &cfg, &base_dir(&a.data))?;
    if data.is_empty() {
        return Err(Error::Input("no training example has an answer in the answer vocabulary".into()));
    }

    create_dir(&a.out)?;
    cfg.save(&a.out.join(CONFIG_FILE))?;
    vocab.save(&a.out.join(VOCAB_FILE))?;
    answers.save(&a.out.join(ANSWERS_FILE))?;

    let (model, store) = Model::init(cfg.clone(), cfg.seed);
    let mut state = TrainState::new(store, cfg.seed);
    let every = (cfg.train.steps / 10).max(1) as u64;
    let log = train(&model, &mut state, &samples(&data), &cfg.train, cfg.train.lr, cfg.train.steps, |_, row| {
        if row.step % every == 0 {
            eprintln!("step {:>6}  loss {:.4}", row.step, row.loss);
        }
        Ok(())
    })?;
    state.params.save(&a.out.join(CHECKPOINT_FILE))?;
    write_log_csv(&log, &a.out.join(LOG_FILE))?;
    println!(
        "trained {} steps on {} examples; checkpoint in {}",
        log.len(),
        data.len(),
        a.out.display()
    );
    Ok(())
}

/// Model, parameters and vocabularies restored from a checkpoint directory.
pub struct Checkpoint {
    pub model: Model,
    pub params: ParamStore,
    pub vocab: Vocab,
    pub answers: AnswerVocab,
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = ModelConfig::load(&dir.join(CONFIG_FILE))?.validate()?;
        let stored = ParamStore::load(&dir.join(CHECKPOINT_FILE))?;
        let (model, params) = Model::with_params(cfg, &stored)?;
        Ok(Checkpoint {
            model,
            params,
            vocab: Vocab::load(&dir.join(VOCAB_FILE))?,
            answers: AnswerVocab::load(&dir.join(ANSWERS_FILE))?,
        })
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let answers = match &a.vocab {
        Some(p) => AnswerVocab::load(p)?,
        None => ck.answers.clone(),
    };
    let examples = read_qa(&a.data)?;
    let data = prepare_samples(&examples, &ck.vocab, None, &ck.model.config, &base_dir(&a.data))?;
    let opts = PredictOptions {
        decoding: a.decode,
        beam: a.beam.unwrap_or(ck.model.config.beam_width),
        vocab: &ck.vocab,
        answers: Some(&answers),
    };
    let preds = predict(&ck.model, &ck.params, &data, &opts)?;
    write_predictions(&preds, &a.predictions)?;
    let rule = if a.raw { MatchRule::Raw } else { MatchRule::Normalized };
    let report = score(&preds, &examples, a.mode, rule)?;
    println!("{report}");
    if let Some(csv) = &a.csv {
        std::fs::write(csv, report.to_csv()).map_err(|e| Error::io(csv, e))?;
    }
    Ok(())
}

fn profile(a: ProfileArgs) -> Result<()> {
    let text = if a.compare.is_empty() {
        let report = estimate(&a.source.load("desk_default")?)?;
        if let Some(csv) = &a.csv {
            report.write_csv(csv)?;
        }
        report.to_string()
    } else {
        let configs = a
            .compare
            .iter()
            .map(|name| Ok((name.clone(), preset_at(name, a.source.scale.into())?)))
            .collect::<Result<Vec<_>>>()?;
        let table = compare(&configs)?;
        if let Some(csv) = &a.csv {
            std::fs::write(csv, table.to_csv()).map_err(|e| Error::io(csv, e))?;
        }
        table.to_string()
    };
    println!("{text}");
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let examples = read_qa(&a.data)?;
    let (model, params, vocab) = match &a.checkpoint {
        Some(dir) => {
            if a.source.given() {
                return Err(Error::Config("pass either --checkpoint or a config source, not both".into()));
            }
            let ck = Checkpoint::load(dir)?;
            (ck.model, ck.params, ck.vocab)
        }
        None => {
            let mut cfg = a.source.load("desk_default")?;
            let vocab = build_vocab(&examples);
            cfg.vocab_size = cfg.vocab_size.max(vocab.len());
            let (model, params) = Model::init(cfg.validate()?, a.seed);
            (model, params, vocab)
        }
    };
    let chosen: Vec<_> = if a.ids.is_empty() {
        examples.iter().take(1).cloned().collect()
    } else {
        a.ids
            .iter()
            .map(|id| {
                examples
                    .iter()
                    .find(|e| e.id == *id)
                    .cloned()
                    .ok_or_else(|| Error::Input(format!("no example with id `{id}` in {}", a.data.display())))
            })
            .collect::<Result<_>>()?
    };
    let data: Vec<Prepared> = prepare_samples(&chosen, &vocab, None, &model.config, &base_dir(&a.data))?;
    for ex in &data {
        let fused = model.encode(&params, &ex.sample.clips, &ex.sample.question)?;
        if fused.attention.is_empty() {
            return Err(Error::Config(format!(
                "fusion mode {} produces no attention maps",
                model.config.fusion_mode.keyword()
            )));
        }
        let dir = a.out.join(&ex.id);
        create_dir(&dir)?;
        let mut files = 0;
        for maps in &fused.attention {
            files += maps.export(&dir)?.len();
        }
        println!("{}: {} files in {}", ex.id, files, dir.display());
    }
    Ok(())
}
