//! One text-conditioned tokenization: attention normalisation on both axes
//! and export of the maps as text and graymaps.

use cotok::backbone::FeatureMap;
use cotok::config::SoftmaxAxis;
use cotok::cotokenizer::{tokenize, TokenizerParams};
use cotok::tensor::Tensor;
use cotok::{ModelConfig, ParamStore, StreamSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cotok::Result<()> {
    let cfg = ModelConfig {
        streams: vec![StreamSpec::new(4, 12, 12, 1)],
        tokens_per_feature: 4,
        channels: 16,
        heads: 2,
        text_max_len: 6,
        ..ModelConfig::default()
    }
    .validate()?;
    let geom = cfg.features()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let params = TokenizerParams::init("tok", geom, cfg.text_max_len, &cfg, &mut store, &mut rng);
    let r = Tensor::uniform(&[cfg.text_max_len, cfg.channels], 1.0, &mut rng);
    let feature = FeatureMap {
        values: Tensor::uniform(&[geom.frames, geom.height, geom.width, cfg.channels], 1.0, &mut rng),
        stream_index: 0,
        scale_index: 0,
    };
    println!("feature grid {}x{}x{}, {} tokens", geom.frames, geom.height, geom.width, cfg.tokens_per_feature);

    for axis in [SoftmaxAxis::Token, SoftmaxAxis::Spatial] {
        let (tokens, maps) = tokenize(&store, &r, &feature, &params, axis)?;
        let n = cfg.tokens_per_feature;
        let p = geom.cells();
        let a = maps.values.data();
        let per_token: Vec<f64> = (0..n).map(|i| a[i * p..(i + 1) * p].iter().sum()).collect();
        let per_cell_max_err = (0..p)
            .map(|j| ((0..n).map(|i| a[i * p + j]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        println!("\nsoftmax {}: tokens {:?}", axis.keyword(), tokens.shape());
        println!("  sum over cells per token: {per_token:.3?}");
        println!("  max |sum over tokens per cell - 1|: {per_cell_max_err:.2e}");

        let dir = std::env::temp_dir().join(format!("cotok_example_attention_{}", axis.keyword()));
        std::fs::create_dir_all(&dir).expect("create dir");
        let files = maps.export(&dir)?;
        println!("  wrote {} files to {}", files.len(), dir.display());
    }
    Ok(())
}
