//! Analytic FLOP and parameter counts.
//!
//! A multiply-accumulate counts as two FLOPs. Every matrix product, including
//! the convolutions and attention score/value products, goes through
//! [`count_matmul`]. Softmax, normalisation, activations and pooling are not
//! counted.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::config::{FusionMode, ModelConfig, ValidatedConfig};
use crate::error::{Error, Result};

const CONV_KERNEL_VOLUME: u128 = 27;
const FOOTER: &str = "softmax, normalisation, activation and pooling FLOPs are not counted";

/// `2·m·k·n`.
pub fn count_matmul(m: usize, k: usize, n: usize) -> u128 {
    2 * m as u128 * k as u128 * n as u128
}

/// Multi-head attention of `mq` queries over `mk` keys at width `c`: four
/// projections, scores and the weighted sum.
pub fn attention_flops(mq: usize, mk: usize, c: usize) -> u128 {
    2 * count_matmul(mq, c, c) + 2 * count_matmul(mk, c, c) + count_matmul(mq, c, mk) + count_matmul(mq, mk, c)
}

/// Two-layer MLP with a `4c` hidden width.
pub fn mlp_flops(m: usize, c: usize) -> u128 {
    count_matmul(m, c, 4 * c) + count_matmul(m, 4 * c, c)
}

/// One encoder layer over a length-`m` sequence.
pub fn encoder_layer_flops(m: usize, c: usize) -> u128 {
    attention_flops(m, m, c) + mlp_flops(m, c)
}

fn linear_params(cin: usize, cout: usize) -> u128 {
    (cin as u128 + 1) * cout as u128
}

fn attention_params(c: usize) -> u128 {
    4 * linear_params(c, c) - c as u128
}

fn encoder_layer_params(c: usize) -> u128 {
    4 * c as u128 + attention_params(c) + linear_params(c, 4 * c) + linear_params(4 * c, c)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub per_module: BTreeMap<String, u128>,
    pub total: u128,
    pub params: u128,
    pub fingerprint: String,
}

impl FlopReport {
    pub fn module(&self, name: &str) -> u128 {
        self.per_module.get(name).copied().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,flops\n");
        for (k, v) in &self.per_module {
            s.push_str(&format!("{k},{v}\n"));
        }
        s.push_str(&format!("total,{}\nparams,{}\n", self.total, self.params));
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn gflops(v: u128) -> String {
    format!("{:.3}", v as f64 / 1e9)
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.per_module.keys().map(String::len).max().unwrap_or(0).max(6);
        let num = self.total.to_string().len().max(5);
        writeln!(f, "{:<width$}  {:>num$}  {:>10}", "module", "FLOPs", "GFLOPs")?;
        for (k, v) in &self.per_module {
            writeln!(f, "{k:<width$}  {v:>num$}  {:>10}", gflops(*v))?;
        }
        writeln!(f, "{:<width$}  {:>num$}  {:>10}", "total", self.total, gflops(self.total))?;
        writeln!(f, "{:<width$}  {:>num$}", "params", self.params)?;
        writeln!(f, "config {}", self.fingerprint)?;
        write!(f, "note: {FOOTER}")
    }
}

fn estimate_validated(cfg: &ValidatedConfig) -> FlopReport {
    let c = cfg.channels;
    let width = cfg.backbone_width;
    let lt = cfg.text_max_len;
    let mut flops = BTreeMap::new();
    let mut params: u128 = 0;

    let mut backbone = 0;
    for (si, st) in cfg.streams.iter().enumerate() {
        for (b, (h, w)) in cfg.block_inputs(si).iter().enumerate() {
            let cin = if b == 0 { 3 } else { width };
            backbone += count_matmul(st.frames * h * w, CONV_KERNEL_VOLUME as usize * cin, width);
            params += CONV_KERNEL_VOLUME * cin as u128 * width as u128 + width as u128;
        }
        params += st.scale_taps as u128 * linear_params(width, c);
    }
    for geom in cfg.features() {
        backbone += count_matmul(geom.cells(), width, c);
    }
    flops.insert("backbone".to_string(), backbone);

    flops.insert("text_encoder".to_string(), encoder_layer_flops(lt, c));
    params += cfg.vocab_size as u128 * c as u128 + encoder_layer_params(c);

    let rounds = match cfg.fusion_mode {
        FusionMode::DenseConcat => 0,
        FusionMode::StaticTokenize => 1,
        FusionMode::IterativeCoTok => cfg.fusion_layers,
    };
    let n = cfg.tokens_per_feature;
    let kvol = cfg.score_kernel.pow(3);
    let mut tokenizer = 0;
    for round in 0..rounds {
        let ctx = if round == 0 { lt } else { cfg.fused_len() };
        for geom in cfg.features() {
            let p = geom.cells();
            tokenizer += count_matmul(ctx, c, p) + count_matmul(p, ctx, c);
            tokenizer += count_matmul(p, kvol * c, n) + count_matmul(n, p, c);
            params += (c * p + ctx * c + kvol * c * n + n) as u128;
        }
    }
    flops.insert("tokenizer".to_string(), tokenizer);

    let m = match cfg.fusion_mode {
        FusionMode::DenseConcat => cfg.dense_len(),
        _ => cfg.fused_len(),
    };
    flops.insert("fusion".to_string(), cfg.fusion_layers as u128 * encoder_layer_flops(m, c));
    let stored = if cfg.share_fusion_layers {
        cfg.fusion_layers.min(1)
    } else {
        cfg.fusion_layers
    };
    params += stored as u128 * encoder_layer_params(c);

    let per_layer = encoder_layer_flops(lt, c) + attention_flops(lt, m, c);
    let decoder = cfg.decoder_layers as u128 * per_layer + count_matmul(lt, c, cfg.vocab_size);
    flops.insert("decoder".to_string(), decoder);
    let dec_layer_params = 6 * c as u128 + 2 * attention_params(c) + linear_params(c, 4 * c) + linear_params(4 * c, c);
    params += 4 * c as u128 + cfg.decoder_layers as u128 * dec_layer_params + linear_params(c, cfg.vocab_size);
    params += linear_params(c, cfg.answer_vocab_size);

    let total = flops.values().sum();
    FlopReport {
        per_module: flops,
        total,
        params,
        fingerprint: cfg.fingerprint(),
    }
}

pub fn estimate(config: &ModelConfig) -> Result<FlopReport> {
    Ok(estimate_validated(&config.clone().validate()?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub report: FlopReport,
    /// Total relative to the first config given.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Ascending by total FLOPs; ties keep input order.
    pub rows: Vec<ComparisonRow>,
}

pub fn compare(configs: &[(String, ModelConfig)]) -> Result<Comparison> {
    if configs.len() < 2 {
        return Err(Error::Input("comparison needs at least two configs".into()));
    }
    let reports = configs
        .iter()
        .map(|(name, c)| Ok((name.clone(), estimate(c)?)))
        .collect::<Result<Vec<_>>>()?;
    let base = reports[0].1.total as f64;
    let mut rows: Vec<ComparisonRow> = reports
        .into_iter()
        .map(|(name, report)| ComparisonRow {
            ratio: report.total as f64 / base,
            name,
            report,
        })
        .collect();
    rows.sort_by_key(|r| r.report.total);
    Ok(Comparison { rows })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,total_flops,params,ratio\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:.4}\n", r.name, r.report.total, r.report.params, r.ratio));
        }
        s
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
        writeln!(f, "{:<width$}  {:>12}  {:>12}  {:>7}", "config", "GFLOPs", "params", "ratio")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>12}  {:>12}  {:>7.3}",
                r.name,
                gflops(r.report.total),
                r.report.params,
                r.ratio
            )?;
        }
        write!(f, "note: {FOOTER}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, preset_at, Preset, Scale, StreamSpec};
    use crate::model::Model;
    use proptest::prelude::*;

    #[test]
    fn matmul_counts() {
        assert_eq!(count_matmul(1, 1, 1), 2);
        assert_eq!(count_matmul(2, 2, 2), 16);
        assert_eq!(count_matmul(8, 768, 768), 2 * 8 * 768 * 768);
        assert_eq!(count_matmul(8, 768, 768), 9_437_184);
    }

    #[test]
    fn attention_layer_matches_closed_form() {
        // Four projections and two sequence products, each counted as MACs × 2.
        for (m, c) in [(64usize, 768usize), (5, 4), (1, 1)] {
            let (m2, c2) = (m as u128, c as u128);
            assert_eq!(attention_flops(m, m, c), 2 * (2 * m2 * m2 * c2 + 4 * m2 * c2 * c2));
            assert_eq!(mlp_flops(m, c), 16 * m2 * c2 * c2);
        }
    }

    #[test]
    fn totals_add_up() {
        for p in Preset::ALL {
            for scale in [Scale::Full, Scale::Desk] {
                let r = estimate(&p.config(scale)).unwrap();
                assert_eq!(r.total, r.per_module.values().sum::<u128>());
            }
        }
    }

    #[test]
    fn param_count_matches_built_model() {
        for name in ["toy", "desk_default"] {
            let cfg = preset(name).unwrap();
            let (_, store) = Model::init(cfg.clone().validate().unwrap(), 0);
            assert_eq!(estimate(&cfg).unwrap().params, store.num_scalars() as u128, "{name}");
        }
        for p in Preset::LADDER {
            let cfg = p.config(Scale::Desk);
            let (_, store) = Model::init(cfg.clone().validate().unwrap(), 0);
            assert_eq!(estimate(&cfg).unwrap().params, store.num_scalars() as u128, "{p:?}");
        }
    }

    #[test]
    fn full_scale_cotok_fuses_sixty_four_positions() {
        let cfg = preset_at("plus_cotok", Scale::Full).unwrap();
        let r = estimate(&cfg).unwrap();
        assert_eq!(r.module("fusion"), cfg.fusion_layers as u128 * encoder_layer_flops(64, cfg.channels));
    }

    #[test]
    fn tokenized_fusion_is_cheaper_than_dense() {
        let cfg = preset("desk_default").unwrap();
        let mut dense = cfg.clone();
        dense.fusion_mode = FusionMode::DenseConcat;
        dense.max_seq_len = 1 << 20;
        let (t, d) = (estimate(&cfg).unwrap(), estimate(&dense).unwrap());
        assert!(t.module("fusion") < d.module("fusion"));
    }

    #[test]
    fn zero_fusion_layers_cost_nothing() {
        let mut cfg = preset("two_stream").unwrap();
        cfg.fusion_layers = 0;
        assert_eq!(estimate(&cfg).unwrap().module("fusion"), 0);
    }

    #[test]
    fn identical_configs_have_unit_ratio() {
        let c = preset("toy").unwrap();
        let cmp = compare(&[("a".into(), c.clone()), ("b".into(), c)]).unwrap();
        assert!(cmp.rows.iter().all(|r| r.ratio == 1.0));
        assert!(compare(&[("a".into(), preset("toy").unwrap())]).is_err());
    }

    #[test]
    fn report_text_and_csv() {
        let r = estimate(&preset("two_stream").unwrap()).unwrap();
        let text = r.to_string();
        assert!(text.contains("not counted"));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + r.per_module.len() + 2);
        assert!(csv.contains(&format!("total,{}", r.total)));
    }

    fn base() -> ModelConfig {
        ModelConfig {
            streams: vec![StreamSpec::new(2, 8, 8, 1), StreamSpec::new(1, 16, 16, 2)],
            tokens_per_feature: 2,
            channels: 8,
            heads: 2,
            fusion_layers: 2,
            max_seq_len: 1 << 20,
            ..ModelConfig::default()
        }
    }

    proptest! {
        #[test]
        fn estimate_is_monotone(
            frames in 1usize..6, size in 4usize..24, c in 1usize..5, n in 1usize..6,
            layers in 1usize..4, grow in 0usize..5, mode in 0usize..3,
        ) {
            let mut cfg = base();
            cfg.fusion_mode = [FusionMode::DenseConcat, FusionMode::StaticTokenize, FusionMode::IterativeCoTok][mode];
            cfg.streams[0] = StreamSpec::new(frames, size, size, 1);
            cfg.channels = 2 * c;
            cfg.tokens_per_feature = n;
            cfg.fusion_layers = layers;
            let t0 = estimate(&cfg).unwrap().total;
            let bump: Vec<ModelConfig> = vec![
                { let mut x = cfg.clone(); x.streams[0].frames += 1; x },
                { let mut x = cfg.clone(); x.streams[0].height += grow; x.streams[0].width += grow; x },
                { let mut x = cfg.clone(); x.channels += 2; x },
                { let mut x = cfg.clone(); x.tokens_per_feature += 1; x },
                { let mut x = cfg.clone(); x.fusion_layers += 1; x },
            ];
            for b in bump {
                prop_assert!(estimate(&b).unwrap().total >= t0);
            }
        }

        #[test]
        fn tokenized_fusion_dominates_dense(n in 1usize..4, size in 4usize..20, frames in 1usize..4) {
            let mut cfg = base();
            cfg.streams = vec![StreamSpec::new(frames, size, size, 1)];
            cfg.tokens_per_feature = n;
            let cells: usize = cfg.clone().validate().unwrap().features().iter().map(|f| f.cells()).sum();
            prop_assume!(cells > n);
            let mut dense = cfg.clone();
            dense.fusion_mode = FusionMode::DenseConcat;
            cfg.fusion_mode = FusionMode::StaticTokenize;
            prop_assert!(estimate(&cfg).unwrap().module("fusion") < estimate(&dense).unwrap().module("fusion"));
        }
    }
}
