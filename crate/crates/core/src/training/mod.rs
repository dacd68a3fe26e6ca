//! Losses, AdamW, the training loop, and dataset preparation.

mod data;
mod gradcheck;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, Sample};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use data::{build_vocab, completion_sample, prepare_samples, AnswerVocab, Prepared};
pub use gradcheck::{check_subgraph, grad_check_fn, relative_error, GradCheckReport, Subgraph};

/// Mean cross-entropy of `logits` (`steps × vocab`) over non-PAD targets.
pub fn token_loss(logits: &Tensor, targets: &[usize], pad_mask: &[bool]) -> Result<f64> {
    let mut g = Graph::detached();
    let l = g.constant(logits.clone());
    let mask: Vec<bool> = pad_mask.iter().map(|p| !p).collect();
    let loss = g.cross_entropy(l, targets, &mask)?;
    Ok(g.value(loss).data()[0])
}

/// Splits a caption at `len / 2`: the first half becomes the question, the
/// rest the target.
pub fn completion_batch<T: Clone>(caption: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if caption.len() < 2 {
        return Err(Error::Input(format!(
            "caption of length {} cannot be split for completion",
            caption.len()
        )));
    }
    let mid = caption.len() / 2;
    Ok((caption[..mid].to_vec(), caption[mid..].to_vec()))
}

/// Parameters plus AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ParamStore, seed: u64) -> Self {
        let zeros = |p: &ParamStore| p.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        TrainState {
            m: zeros(&params),
            v: zeros(&params),
            params,
            step: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Mean loss and mean gradient (one tensor per parameter, in store order)
/// over `batch`. Examples run in parallel and merge in batch order.
pub fn batch_gradients(model: &Model, store: &ParamStore, batch: &[Sample]) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let per_example: Vec<_> = batch
        .par_iter()
        .map(|s| -> Result<_> {
            let mut g = Graph::new(store);
            let loss = model.loss_graph(&mut g, s)?;
            let value = g.value(loss).data()[0];
            Ok((value, g.backward(loss)?.into_params()))
        })
        .collect::<Result<_>>()?;
    let mut grads: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    for (l, gr) in &per_example {
        loss += l;
        for id in store.ids() {
            if let Some(t) = gr.get(&id) {
                grads[id.index()].add_assign(t);
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in &mut grads {
        g.scale(inv);
    }
    Ok((loss * inv, grads))
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// AdamW: `p ← p − lr·(m̂ / (√v̂ + ε) + wd·p)`.
pub fn adamw_update(state: &mut TrainState, grads: &[Tensor], cfg: &TrainConfig, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let params = state.params.tensors_mut();
    for (i, g) in grads.iter().enumerate() {
        let (p, m, v) = (params[i].data_mut(), state.m[i].data_mut(), state.v[i].data_mut());
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps) + cfg.weight_decay * p[j];
            p[j] -= lr * update;
        }
    }
}

/// Forward, backward, clip and AdamW on one batch. A non-finite loss or
/// gradient aborts before any parameter changes.
pub fn train_step(model: &Model, state: &mut TrainState, batch: &[Sample], cfg: &TrainConfig, lr: f64) -> Result<StepStats> {
    if let Some((_, name, _)) = state.params.iter().find(|(_, _, t)| !t.is_finite()) {
        return Err(Error::NonFinite(format!("parameter `{name}` at step {}", state.step)));
    }
    let (loss, mut grads) = batch_gradients(model, &state.params, batch)?;
    if let Some((id, _, _)) = state
        .params
        .iter()
        .find(|(id, _, _)| !grads[id.index()].is_finite())
    {
        return Err(Error::NonFinite(format!(
            "gradient of `{}` at step {}",
            state.params.name(id),
            state.step
        )));
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {}", state.step)));
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    adamw_update(state, &grads, cfg, lr);
    Ok(StepStats { loss, grad_norm })
}

/// Indices of the batch used at `step`: a fixed function of `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    sample(&mut rng, n, batch_size.min(n)).into_vec()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub wall_time: f64,
}

/// Runs `steps` steps from the current state, calling `on_step` after each.
pub fn train<F>(
    model: &Model,
    state: &mut TrainState,
    data: &[Sample],
    cfg: &TrainConfig,
    lr: f64,
    steps: usize,
    mut on_step: F,
) -> Result<Vec<LogRow>>
where
    F: FnMut(&TrainState, &LogRow) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::Input("no training examples".into()));
    }
    let start = Instant::now();
    let mut log = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx = batch_indices(state.seed, state.step, data.len(), cfg.batch_size);
        let batch: Vec<Sample> = idx.iter().map(|i| data[*i].clone()).collect();
        let stats = train_step(model, state, &batch, cfg, lr)?;
        let row = LogRow {
            step: state.step,
            loss: stats.loss,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_step(state, &row)?;
        log.push(row);
    }
    Ok(log)
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::from("step,loss,wall_time\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.3}\n", r.step, r.loss, r.wall_time));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Caps the global worker pool from `COTOK_THREADS`; later calls are no-ops.
pub fn configure_threads() {
    if let Some(n) = std::env::var("COTOK_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::ingest::{synth_dataset, SynthTask};
    use crate::model::{Objective, Target};

    #[test]
    fn uniform_logits_give_log_vocab() {
        let l = token_loss(&Tensor::zeros(&[3, 7]), &[1, 2, 3], &[false; 3]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_zero_loss() {
        let mut t = Tensor::zeros(&[2, 4]);
        t.data_mut()[1] = 1e9;
        t.data_mut()[4 + 3] = 1e9;
        assert!(token_loss(&t, &[1, 3], &[false, false]).unwrap().abs() < 1e-9);
    }

    #[test]
    fn padded_position_is_ignored() {
        let t = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 5.0, 1.0, 0.0]).unwrap();
        let one = token_loss(&Tensor::new(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap(), &[2], &[false]).unwrap();
        let two = token_loss(&t, &[2, 0], &[false, true]).unwrap();
        assert_eq!(one, two);
        assert!(token_loss(&t, &[2, 0], &[true, true]).is_err());
    }

    #[test]
    fn completion_split_rules() {
        assert_eq!(completion_batch(&["a", "b", "c", "d"]).unwrap(), (vec!["a", "b"], vec!["c", "d"]));
        let (a, b) = completion_batch(&[1, 2, 3, 4, 5]).unwrap();
        assert_eq!((a.len(), b.len()), (2, 3));
        assert!(completion_batch(&[1]).is_err());
        assert_eq!(completion_batch(&[1, 2, 3]).unwrap(), completion_batch(&[1, 2, 3]).unwrap());
    }

    fn toy_setup(n: usize) -> (Model, ParamStore, Vec<Sample>) {
        let cfg = preset("toy").unwrap().validate().unwrap();
        let ex = synth_dataset(SynthTask::FrameColor, n, 1).unwrap();
        let vocab = build_vocab(&ex);
        let data = prepare_samples(&ex, &vocab, None, &cfg, Path::new(".")).unwrap();
        let (m, store) = Model::init(cfg, 5);
        (m, store, data.into_iter().map(|p| p.sample).collect())
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (m, store, data) = toy_setup(2);
        let mut st = TrainState::new(store.clone(), 0);
        train_step(&m, &mut st, &data, &TrainConfig::desk(), 0.0).unwrap();
        assert_eq!(st.params, store);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn moments_mirror_parameters() {
        let (_, store, _) = toy_setup(1);
        let st = TrainState::new(store, 0);
        for (i, (_, _, t)) in st.params.iter().enumerate() {
            assert_eq!(st.m[i].shape(), t.shape());
            assert_eq!(st.v[i].shape(), t.shape());
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Tensor::full(&[2], 3.0), Tensor::full(&[1], 4.0)];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 34f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn every_reachable_parameter_gets_a_gradient() {
        for objective in [Objective::Generative, Objective::Classify] {
            let (m, store, mut data) = toy_setup(2);
            if objective == Objective::Classify {
                for (i, s) in data.iter_mut().enumerate() {
                    s.target = Target::Class(i);
                }
            }
            let (_, grads) = batch_gradients(&m, &store, &data).unwrap();
            for id in m.trainable(&store, objective) {
                let nz = grads[id.index()].data().iter().any(|v| *v != 0.0);
                assert!(nz, "{objective:?}: no gradient for {}", store.name(id));
            }
        }
    }

    #[test]
    fn batch_order_is_a_function_of_seed_and_step() {
        assert_eq!(batch_indices(3, 7, 100, 8), batch_indices(3, 7, 100, 8));
        assert_ne!(batch_indices(3, 7, 100, 8), batch_indices(3, 8, 100, 8));
        let b = batch_indices(1, 0, 5, 8);
        assert_eq!(b.len(), 5);
    }

    #[test]
    fn non_finite_parameters_abort_the_step() {
        let (m, mut store, data) = toy_setup(1);
        let id = store.id("fusion.layer0.mlp.up.weight").unwrap();
        store.get_mut(id).data_mut()[0] = f64::NAN;
        let mut st = TrainState::new(store, 0);
        let before = st.clone();
        let err = train_step(&m, &mut st, &data, &TrainConfig::desk(), 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(err.to_string().contains("fusion.layer0.mlp.up.weight"), "{err}");
        assert_eq!(st.params.to_bytes(), before.params.to_bytes());
        assert_eq!(st.step, before.step);
    }
}
