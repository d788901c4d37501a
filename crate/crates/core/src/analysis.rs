//! Analytic parameter and multiply-accumulate (MAC) accounting.
//!
//! MAC rules, batch size 1:
//! - conv2d: `Cout * Cin/groups * Kh * Kw * Hout * Wout`
//! - linear / head: `in * out`
//! - token matmul (random matrix, spatial FC): `N^2 * C`
//! - attention: `4 C^2 N` for the qkv and output projections plus `2 N^2 C`
//!   for `Q K^T` and `A V`
//! - per-sample norm with affine (MLN): `5 C N`; BatchNorm: `2 C N`;
//!   channel LayerNorm and no norm: 0
//! - pooling, activations, residual adds, softmax, bias adds: 0

use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::mixer::MixerConfig;
use crate::model::Model;
use crate::norm::NormKind;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageCost {
    pub name: String,
    /// Token grid `[H, W]` the part runs at; absent for the classifier.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
    pub params: u64,
    pub frozen_params: u64,
    pub macs: u64,
    /// Part of `macs` spent multiplying token by token (`N^2` terms).
    pub token_matmul_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub trainable_params: u64,
    pub frozen_params: u64,
    pub macs: u64,
    pub input_size: usize,
    pub per_stage: Vec<StageCost>,
}

pub fn norm_macs(kind: NormKind, channels: u64, tokens: u64) -> u64 {
    match kind {
        NormKind::Mln => 5 * channels * tokens,
        NormKind::Bn => 2 * channels * tokens,
        NormKind::Ln | NormKind::None => 0,
    }
}

/// `(total, token_matmul)` MACs of one mixer.
pub fn mixer_macs(mixer: &MixerConfig, channels: u64, tokens: u64) -> (u64, u64) {
    let (c, n) = (channels, tokens);
    match *mixer {
        MixerConfig::Pooling { .. } | MixerConfig::Identity => (0, 0),
        MixerConfig::RandomMatrix | MixerConfig::SpatialFc => (n * n * c, n * n * c),
        MixerConfig::DepthwiseConv { kernel } => (c * (kernel * kernel) as u64 * n, 0),
        MixerConfig::Attention { .. } => (4 * c * c * n + 2 * n * n * c, 2 * n * n * c),
    }
}

/// Costs of `config` at a square `input_size` input.
pub fn analyze(config: &ModelConfig, input_size: usize) -> Result<CostReport> {
    config.validate()?;
    let grids = config.stage_grids(input_size, input_size)?;
    let build_grids = config.stage_grids(config.input_size, config.input_size)?;
    let mut per_stage = Vec::with_capacity(6);
    let mut cin = config.in_channels as u64;
    for s in 0..4 {
        let c = config.dims[s] as u64;
        let n = (grids[s].0 * grids[s].1) as u64;
        // parameters of resolution-bound mixers follow the build resolution
        let n_params = (build_grids[s].0 * build_grids[s].1) as u64;
        let k = config.patch[s].kernel as u64;
        let mut cost = StageCost {
            name: format!("stage{}", s + 1),
            grid: Some([grids[s].0, grids[s].1]),
            params: c * cin * k * k + c,
            frozen_params: 0,
            macs: c * cin * k * k * n,
            token_matmul_macs: 0,
        };
        for _ in 0..config.depths[s] {
            let norms = if config.channel_mlp { 2 } else { 1 };
            let ls = if config.layer_scale_init.is_some() { norms * c } else { 0 };
            let (mt, mf) = config.mixers[s].param_count(c as usize, n_params as usize);
            cost.params += norms * config.norm.param_count(c as usize) as u64 + mt + ls;
            cost.frozen_params += mf;
            cost.macs += norms * norm_macs(config.norm, c, n);
            let (total, matmul) = mixer_macs(&config.mixers[s], c, n);
            cost.macs += total;
            cost.token_matmul_macs += matmul;
            if config.channel_mlp {
                let hidden = 4 * c;
                cost.params += 2 * c * hidden + hidden + c;
                cost.macs += 2 * c * hidden * n;
            }
        }
        per_stage.push(cost);
        cin = c;
    }
    let n4 = (grids[3].0 * grids[3].1) as u64;
    per_stage.push(StageCost {
        name: "final_norm".into(),
        grid: Some([grids[3].0, grids[3].1]),
        params: config.norm.param_count(cin as usize) as u64,
        frozen_params: 0,
        macs: norm_macs(config.norm, cin, n4),
        token_matmul_macs: 0,
    });
    let k = config.num_classes as u64;
    per_stage.push(StageCost {
        name: "classifier".into(),
        grid: None,
        params: cin * k + k,
        frozen_params: 0,
        macs: cin * k,
        token_matmul_macs: 0,
    });
    Ok(CostReport {
        trainable_params: per_stage.iter().map(|s| s.params).sum(),
        frozen_params: per_stage.iter().map(|s| s.frozen_params).sum(),
        macs: per_stage.iter().map(|s| s.macs).sum(),
        input_size,
        per_stage,
    })
}

/// `(trainable, frozen)` scalars held by a built model.
pub fn count_params<T: Scalar>(model: &Model<T>) -> (u64, u64) {
    model.param_counts()
}

pub fn count_macs<T: Scalar>(model: &Model<T>, input_size: usize) -> Result<u64> {
    Ok(analyze(&model.config, input_size)?.macs)
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn stage(&self, name: &str) -> Option<&StageCost> {
        self.per_stage.iter().find(|s| s.name == name)
    }

    /// MACs that scale with input area, i.e. everything but the classifier.
    pub fn spatial_macs(&self) -> u64 {
        self.macs - self.stage("classifier").map_or(0, |s| s.macs)
    }

    pub fn token_matmul_macs(&self) -> u64 {
        self.per_stage.iter().map(|s| s.token_matmul_macs).sum()
    }

    /// Fixed-width human summary, rounded to 0.1M / 0.1G.
    pub fn to_table(&self) -> String {
        let row = |name: &str, grid: &str, p: u64, f: u64, m: u64| {
            format!(
                "{name:<12} {grid:>8} {:>10} {:>10} {:>9}\n",
                format!("{}M", millions(p)),
                format!("{}M", millions(f)),
                format!("{}G", billions(m))
            )
        };
        let mut out = format!(
            "{:<12} {:>8} {:>10} {:>10} {:>9}\n",
            "part", "grid", "params", "frozen", "MACs"
        );
        for s in &self.per_stage {
            let grid = s.grid.map_or("-".to_string(), |[h, w]| format!("{h}x{w}"));
            out += &row(&s.name, &grid, s.params, s.frozen_params, s.macs);
        }
        out += &row("total", "", self.trainable_params, self.frozen_params, self.macs);
        out += &format!("input {0}x{0}\n", self.input_size);
        out
    }
}

pub fn millions(n: u64) -> String {
    format!("{:.1}", n as f64 / 1e6)
}

pub fn billions(n: u64) -> String {
    format!("{:.1}", n as f64 / 1e9)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{presets, Variant};

    #[test]
    fn s12_totals() {
        let r = analyze(&ModelConfig::variant(Variant::S12), 224).unwrap();
        assert_eq!(r.trainable_params, 11_915_176);
        assert_eq!(r.frozen_params, 0);
        assert_eq!(millions(r.trainable_params), "11.9");
        assert_eq!(billions(r.macs), "1.8");
    }

    #[test]
    fn totals_are_breakdown_sums() {
        for (_, c) in presets() {
            let r = analyze(&c, 224).unwrap();
            assert_eq!(r.macs, r.per_stage.iter().map(|s| s.macs).sum::<u64>());
            assert_eq!(r.trainable_params, r.per_stage.iter().map(|s| s.params).sum::<u64>());
        }
    }

    #[test]
    fn analytic_matches_built_model() {
        let mut configs: Vec<ModelConfig> = presets().into_iter().map(|(_, c)| c).collect();
        let mut tiny = ModelConfig::tiny(10, 32);
        tiny.layer_scale_init = None;
        tiny.norm = NormKind::Bn;
        configs.push(tiny);
        for c in configs {
            let m = Model::<f32>::build_zeroed(&c).unwrap();
            let r = analyze(&c, c.input_size).unwrap();
            assert_eq!(count_params(&m), (r.trainable_params, r.frozen_params), "{c:?}");
        }
    }

    #[test]
    fn params_independent_of_input_size_for_pooling() {
        let c = ModelConfig::variant(Variant::S24);
        assert_eq!(
            analyze(&c, 224).unwrap().trainable_params,
            analyze(&c, 320).unwrap().trainable_params
        );
    }

    #[test]
    fn mixer_mac_rules() {
        assert_eq!(mixer_macs(&MixerConfig::attention(), 2, 3), (4 * 4 * 3 + 2 * 9 * 2, 36));
        assert_eq!(mixer_macs(&MixerConfig::DepthwiseConv { kernel: 3 }, 4, 5), (180, 0));
        assert_eq!(mixer_macs(&MixerConfig::pooling(), 64, 3136), (0, 0));
    }
}
