//! Stand-in multi-stream video backbone.
//!
//! Each stream is a stack of blocks, `conv3d(3×3×3) → ReLU → 2×2 spatial
//! average pool`. The last `scale_taps` blocks each emit a feature map through
//! a pointwise projection to `C` channels.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{FeatureGeom, StreamSpec, ValidatedConfig};
use crate::error::{Error, Result};
use crate::ingest::VideoClip;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const KERNEL: usize = 3;

/// One multi-scale video feature `T'×H'×W'×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stream_index: usize,
    pub scale_index: usize,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub kernel: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct TapParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct StreamParams {
    pub spec: StreamSpec,
    pub blocks: Vec<BlockParams>,
    pub taps: Vec<TapParams>,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub streams: Vec<StreamParams>,
}

impl BackboneParams {
    pub fn init<R: Rng>(cfg: &ValidatedConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let width = cfg.backbone_width;
        let k3 = KERNEL * KERNEL * KERNEL;
        let streams = cfg
            .streams
            .iter()
            .enumerate()
            .map(|(si, spec)| {
                let blocks = (0..spec.blocks)
                    .map(|b| {
                        let cin = if b == 0 { 3 } else { width };
                        BlockParams {
                            kernel: store.add_glorot(
                                format!("backbone.s{si}.block{b}.kernel"),
                                &[KERNEL, KERNEL, KERNEL, cin, width],
                                k3 * cin,
                                k3 * width,
                                rng,
                            ),
                            bias: store.add_zeros(format!("backbone.s{si}.block{b}.bias"), &[width]),
                        }
                    })
                    .collect();
                let taps = (0..spec.scale_taps)
                    .map(|t| TapParams {
                        weight: store.add_glorot(
                            format!("backbone.s{si}.tap{t}.weight"),
                            &[width, cfg.channels],
                            width,
                            cfg.channels,
                            rng,
                        ),
                        bias: store.add_zeros(format!("backbone.s{si}.tap{t}.bias"), &[cfg.channels]),
                    })
                    .collect();
                StreamParams {
                    spec: *spec,
                    blocks,
                    taps,
                }
            })
            .collect();
        BackboneParams { streams }
    }
}

/// Runs one stream on the tape. Returns `(feature, geometry)` per tap.
pub fn encode_stream_graph(
    g: &mut Graph<'_>,
    clip: Var,
    params: &StreamParams,
    stream_index: usize,
) -> Result<Vec<(Var, FeatureGeom)>> {
    let spec = params.spec;
    let s = g.shape(clip).to_vec();
    if s != [spec.frames, spec.height, spec.width, 3] {
        return Err(Error::Shape(format!(
            "stream {stream_index} expects a {}x{}x{}x3 clip, got {s:?}",
            spec.frames, spec.height, spec.width
        )));
    }
    let first_tap = spec.blocks - spec.scale_taps;
    let mut x = clip;
    let mut out = Vec::with_capacity(spec.scale_taps);
    for (b, block) in params.blocks.iter().enumerate() {
        let (w, bias) = (g.param(block.kernel), g.param(block.bias));
        let y = g.conv3d(x, w, bias)?;
        let y = g.relu(y);
        x = g.avg_pool2(y)?;
        if b >= first_tap {
            let tap = &params.taps[b - first_tap];
            let shape = g.shape(x).to_vec();
            let (t, h, wd, c) = (shape[0], shape[1], shape[2], shape[3]);
            let flat = g.reshape(x, &[t * h * wd, c])?;
            let (pw, pb) = (g.param(tap.weight), g.param(tap.bias));
            let proj = g.matmul(flat, pw)?;
            let proj = g.add_bias(proj, pb)?;
            let channels = g.shape(proj)[1];
            let fm = g.reshape(proj, &[t, h, wd, channels])?;
            out.push((
                fm,
                FeatureGeom {
                    stream: stream_index,
                    scale: b - first_tap,
                    frames: t,
                    height: h,
                    width: wd,
                },
            ));
        }
    }
    Ok(out)
}

/// Concatenated tap outputs of every stream in (stream, scale) order.
pub fn collect_features_graph(
    g: &mut Graph<'_>,
    clips: &[Var],
    params: &BackboneParams,
) -> Result<Vec<(Var, FeatureGeom)>> {
    if clips.len() != params.streams.len() {
        return Err(Error::Input(format!(
            "{} streams configured, {} clips given",
            params.streams.len(),
            clips.len()
        )));
    }
    let mut out = Vec::new();
    for (i, (clip, sp)) in clips.iter().zip(&params.streams).enumerate() {
        out.extend(encode_stream_graph(g, *clip, sp, i)?);
    }
    Ok(out)
}

pub fn encode_stream(
    store: &ParamStore,
    clip: &VideoClip,
    params: &StreamParams,
    stream_index: usize,
) -> Result<Vec<FeatureMap>> {
    let mut g = Graph::new(store);
    let x = g.constant(clip.frames.clone());
    let feats = encode_stream_graph(&mut g, x, params, stream_index)?;
    Ok(to_feature_maps(&g, &feats))
}

pub fn collect_features(
    store: &ParamStore,
    clips: &[VideoClip],
    params: &BackboneParams,
) -> Result<Vec<FeatureMap>> {
    let mut g = Graph::new(store);
    let xs: Vec<Var> = clips.iter().map(|c| g.constant(c.frames.clone())).collect();
    let feats = collect_features_graph(&mut g, &xs, params)?;
    Ok(to_feature_maps(&g, &feats))
}

pub(crate) fn to_feature_maps(g: &Graph<'_>, feats: &[(Var, FeatureGeom)]) -> Vec<FeatureMap> {
    feats
        .iter()
        .map(|(v, geom)| FeatureMap {
            values: g.value(*v).clone(),
            stream_index: geom.stream,
            scale_index: geom.scale,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, StreamSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(streams: Vec<StreamSpec>, channels: usize) -> (ValidatedConfig, ParamStore, BackboneParams) {
        let cfg = ModelConfig {
            streams,
            channels,
            heads: 1,
            backbone_width: 4,
            ..ModelConfig::default()
        }
        .validate()
        .unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = BackboneParams::init(&cfg, &mut store, &mut rng);
        (cfg, store, bb)
    }

    fn clip(t: usize, h: usize, w: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoClip {
            frames: Tensor::uniform(&[t, h, w, 3], 1.0, &mut rng),
            source_frame_count: t,
        }
    }

    #[test]
    fn two_taps_halve_twice() {
        let (_, store, bb) = setup(vec![StreamSpec::new(8, 32, 32, 2)], 6);
        let f = encode_stream(&store, &clip(8, 32, 32, 0), &bb.streams[0], 0).unwrap();
        assert_eq!(f[0].values.shape(), &[8, 16, 16, 6]);
        assert_eq!(f[1].values.shape(), &[8, 8, 8, 6]);
        assert_eq!((f[1].stream_index, f[1].scale_index), (0, 1));
    }

    #[test]
    fn single_tap_single_halving() {
        let (_, store, bb) = setup(vec![StreamSpec::new(3, 6, 4, 1)], 5);
        let f = encode_stream(&store, &clip(3, 6, 4, 0), &bb.streams[0], 0).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].values.shape(), &[3, 3, 2, 5]);
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let (_, store, bb) = setup(vec![StreamSpec::new(2, 8, 8, 2)], 4);
        let zero = VideoClip {
            frames: Tensor::zeros(&[2, 8, 8, 3]),
            source_frame_count: 2,
        };
        for f in encode_stream(&store, &zero, &bb.streams[0], 0).unwrap() {
            assert!(f.values.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn features_are_collected_in_stream_scale_order() {
        let (cfg, store, bb) = setup(
            vec![StreamSpec::new(4, 8, 8, 2), StreamSpec::new(2, 16, 16, 2)],
            4,
        );
        let clips = [clip(4, 8, 8, 1), clip(2, 16, 16, 2)];
        let feats = collect_features(&store, &clips, &bb).unwrap();
        assert_eq!(feats.len(), 4);
        let order: Vec<_> = feats.iter().map(|f| (f.stream_index, f.scale_index)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        for (f, geom) in feats.iter().zip(cfg.features()) {
            assert_eq!(f.values.shape(), &[geom.frames, geom.height, geom.width, 4]);
        }
        assert_eq!(feats, collect_features(&store, &clips, &bb).unwrap());
    }

    #[test]
    fn missing_stream_is_an_error() {
        let (_, store, bb) = setup(
            vec![StreamSpec::new(4, 8, 8, 1), StreamSpec::new(2, 8, 8, 1)],
            4,
        );
        assert!(collect_features(&store, &[clip(4, 8, 8, 1)], &bb).is_err());
    }

    #[test]
    fn geometry_mismatch_is_an_error() {
        let (_, store, bb) = setup(vec![StreamSpec::new(4, 8, 8, 1)], 4);
        assert!(encode_stream(&store, &clip(4, 8, 6, 0), &bb.streams[0], 0).is_err());
    }

    #[test]
    fn temporal_change_stays_local() {
        // Receptive field of one 3-tap block is one frame either side.
        let (_, store, bb) = setup(vec![StreamSpec::new(8, 8, 8, 1)], 4);
        let a = clip(8, 8, 8, 5);
        let mut b = a.clone();
        let per_frame = 8 * 8 * 3;
        for v in &mut b.frames.data_mut()[0..per_frame] {
            *v = -*v;
        }
        let fa = &encode_stream(&store, &a, &bb.streams[0], 0).unwrap()[0].values;
        let fb = &encode_stream(&store, &b, &bb.streams[0], 0).unwrap()[0].values;
        let per_out = fa.len() / 8;
        for t in 0..8 {
            let d = fa.data()[t * per_out..(t + 1) * per_out]
                .iter()
                .zip(&fb.data()[t * per_out..(t + 1) * per_out])
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            if t >= 2 {
                assert_eq!(d, 0.0, "frame {t} changed");
            } else {
                assert!(d > 0.0, "frame {t} unchanged");
            }
        }
    }
}
