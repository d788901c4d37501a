//! Model configuration: named variants, ablation presets and the JSON schema.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::block::BlockConfig;
use crate::error::{Error, Result};
use crate::kernels::conv_out_len;
use crate::mixer::MixerConfig;
use crate::norm::NormKind;
use crate::params::check_positive;

pub const SMALL_DIMS: [usize; 4] = [64, 128, 320, 512];
pub const MEDIUM_DIMS: [usize; 4] = [96, 192, 384, 768];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchSpec {
    pub const STEM: PatchSpec = PatchSpec {
        kernel: 7,
        stride: 4,
        padding: 2,
    };
    pub const DOWNSAMPLE: PatchSpec = PatchSpec {
        kernel: 3,
        stride: 2,
        padding: 1,
    };

    pub fn out_len(&self, len: usize) -> Result<usize> {
        conv_out_len(len, self.kernel, self.stride, self.padding)
    }
}

fn default_patch() -> [PatchSpec; 4] {
    [PatchSpec::STEM, PatchSpec::DOWNSAMPLE, PatchSpec::DOWNSAMPLE, PatchSpec::DOWNSAMPLE]
}

fn default_in_channels() -> usize {
    3
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(alias = "s12")]
    S12,
    #[serde(alias = "s24")]
    S24,
    #[serde(alias = "s36")]
    S36,
    #[serde(alias = "m36")]
    M36,
    #[serde(alias = "m48")]
    M48,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::S12, Variant::S24, Variant::S36, Variant::M36, Variant::M48];

    pub fn total_blocks(self) -> usize {
        match self {
            Variant::S12 => 12,
            Variant::S24 => 24,
            Variant::S36 | Variant::M36 => 36,
            Variant::M48 => 48,
        }
    }

    pub fn dims(self) -> [usize; 4] {
        match self {
            Variant::S12 | Variant::S24 | Variant::S36 => SMALL_DIMS,
            Variant::M36 | Variant::M48 => MEDIUM_DIMS,
        }
    }

    pub fn layer_scale_init(self) -> f64 {
        match self {
            Variant::S12 | Variant::S24 => 1e-5,
            _ => 1e-6,
        }
    }

    pub fn peak_drop_path(self) -> f64 {
        match self {
            Variant::S12 | Variant::S24 => 0.1,
            Variant::S36 => 0.2,
            Variant::M36 => 0.3,
            Variant::M48 => 0.4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::S12 => "S12",
            Variant::S24 => "S24",
            Variant::S36 => "S36",
            Variant::M36 => "M36",
            Variant::M48 => "M48",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`, expected one of S12, S24, S36, M36, M48")))
    }
}

/// Blocks per stage for `total` blocks: `[L/6, L/6, L/2, L/6]`.
pub fn stage_plan(total: usize) -> Result<[usize; 4]> {
    if total == 0 || !total.is_multiple_of(6) {
        return Err(Error::invalid(format!("stage_plan: {total} blocks is not a positive multiple of 6")));
    }
    let sixth = total / 6;
    Ok([sixth, sixth, 3 * sixth, sixth])
}

/// Per-block drop-path rates rising linearly from 0 to `peak` over the
/// global block index.
pub fn drop_path_schedule(peak: f64, total: usize) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&peak) {
        return Err(Error::invalid(format!("drop_path_schedule: peak {peak} outside [0, 1)")));
    }
    if total <= 1 {
        return Ok(vec![0.0; total]);
    }
    let last = (total - 1) as f64;
    Ok((0..total)
        .map(|i| if i + 1 == total { peak } else { peak * i as f64 / last })
        .collect())
}

/// Full description of a four-stage model. Serializes to the `custom` JSON form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: [usize; 4],
    pub depths: [usize; 4],
    pub mixers: [MixerConfig; 4],
    pub norm: NormKind,
    pub activation: Activation,
    /// `null` disables LayerScale.
    #[serde(deserialize_with = "Option::deserialize")]
    pub layer_scale_init: Option<f64>,
    /// Peak stochastic-depth rate reached by the last block.
    pub drop_path: f64,
    pub num_classes: usize,
    /// Square input side the resolution-bound mixers are built for.
    pub input_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "yes")]
    pub residual: bool,
    #[serde(default = "yes")]
    pub channel_mlp: bool,
    #[serde(default = "default_patch")]
    pub patch: [PatchSpec; 4],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    variant: Option<Variant>,
    num_classes: Option<usize>,
    input_size: Option<usize>,
    custom: Option<ModelConfig>,
}

#[derive(Serialize)]
struct CanonicalFile<'a> {
    custom: &'a ModelConfig,
}

impl ModelConfig {
    pub fn variant(v: Variant) -> Self {
        ModelConfig {
            dims: v.dims(),
            depths: stage_plan(v.total_blocks()).expect("named depths divide by 6"),
            mixers: [MixerConfig::pooling(); 4],
            norm: NormKind::Mln,
            activation: Activation::Gelu,
            layer_scale_init: Some(v.layer_scale_init()),
            drop_path: v.peak_drop_path(),
            num_classes: 1000,
            input_size: 224,
            in_channels: 3,
            residual: true,
            channel_mlp: true,
            patch: default_patch(),
        }
    }

    /// S12 with the given per-stage mixers and norm.
    pub fn s12_with(mixers: [MixerConfig; 4], norm: NormKind) -> Self {
        ModelConfig {
            mixers,
            norm,
            ..ModelConfig::variant(Variant::S12)
        }
    }

    /// Small config for fast experiments: dims 16/32/64/128, depths 1/1/2/1.
    pub fn tiny(num_classes: usize, input_size: usize) -> Self {
        ModelConfig {
            dims: [16, 32, 64, 128],
            depths: [1, 1, 2, 1],
            drop_path: 0.0,
            num_classes,
            input_size,
            ..ModelConfig::variant(Variant::S12)
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Parses either `{"variant": ...}` or `{"custom": {...}}` and validates it.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
        })?;
        let config = match (file.variant, file.custom) {
            (Some(v), None) => {
                let mut c = ModelConfig::variant(v);
                if let Some(n) = file.num_classes {
                    c.num_classes = n;
                }
                if let Some(s) = file.input_size {
                    c.input_size = s;
                }
                c
            }
            (None, Some(c)) => {
                for (set, field) in [(file.num_classes.is_some(), "num_classes"), (file.input_size.is_some(), "input_size")] {
                    if set {
                        return Err(Error::config(field, "only valid next to `variant`; set it inside `custom`"));
                    }
                }
                c
            }
            (Some(_), Some(_)) => return Err(Error::config("<root>", "give either `variant` or `custom`, not both")),
            (None, None) => return Err(Error::config("<root>", "expected a `variant` or `custom` field")),
        };
        let prefix = if file.variant.is_some() { "" } else { "custom" };
        config.validate_at(prefix)?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    /// The `{"custom": {...}}` form with every field explicit, compact.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(&CanonicalFile { custom: self }).expect("config serializes")
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(&CanonicalFile { custom: self }).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_at("")
    }

    fn validate_at(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        for s in 0..4 {
            check_positive(&field(&format!("dims[{s}]")), self.dims[s])?;
            check_positive(&field(&format!("depths[{s}]")), self.depths[s])?;
            let p = self.patch[s];
            check_positive(&field(&format!("patch[{s}].kernel")), p.kernel)?;
            check_positive(&field(&format!("patch[{s}].stride")), p.stride)?;
        }
        check_positive(&field("num_classes"), self.num_classes)?;
        check_positive(&field("in_channels"), self.in_channels)?;
        check_positive(&field("input_size"), self.input_size)?;
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config(field("drop_path"), format!("must be in [0, 1), got {}", self.drop_path)));
        }
        self.stage_grids(self.input_size, self.input_size)
            .map_err(|e| Error::config(field("input_size"), e.to_string()))?;
        if let Some(eps) = self.layer_scale_init {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::config(field("layer_scale_init"), format!("must be positive, got {eps}")));
            }
        }
        for (s, mixer) in self.mixers.iter().enumerate() {
            mixer.validate(&field(&format!("mixers[{s}]")), self.dims[s])?;
        }
        Ok(())
    }

    /// Token grid `(H, W)` of each stage for an `h x w` input.
    pub fn stage_grids(&self, h: usize, w: usize) -> Result<[(usize, usize); 4]> {
        let mut grids = [(0, 0); 4];
        let (mut gh, mut gw) = (h, w);
        for (s, p) in self.patch.iter().enumerate() {
            gh = p.out_len(gh).map_err(|e| Error::invalid(format!("stage {} embed: {e}", s + 1)))?;
            gw = p.out_len(gw).map_err(|e| Error::invalid(format!("stage {} embed: {e}", s + 1)))?;
            grids[s] = (gh, gw);
        }
        Ok(grids)
    }

    /// Per-stage block configurations with the drop-path schedule applied.
    pub fn block_configs(&self) -> Result<[Vec<BlockConfig>; 4]> {
        let rates = drop_path_schedule(self.drop_path, self.total_blocks())?;
        let mut rates = rates.into_iter();
        let mut out: [Vec<BlockConfig>; 4] = Default::default();
        for (s, stage) in out.iter_mut().enumerate() {
            *stage = (0..self.depths[s])
                .map(|_| BlockConfig {
                    mixer: self.mixers[s],
                    norm: self.norm,
                    activation: self.activation,
                    use_residual: self.residual,
                    use_channel_mlp: self.channel_mlp,
                    layer_scale_init: self.layer_scale_init,
                    drop_path_rate: rates.next().expect("one rate per block"),
                })
                .collect();
        }
        Ok(out)
    }
}

/// Named S12-based ablation and hybrid configurations.
pub fn presets() -> Vec<(&'static str, ModelConfig)> {
    let pool = MixerConfig::pooling();
    let attn = MixerConfig::attention();
    let sfc = MixerConfig::SpatialFc;
    let base = ModelConfig::variant(Variant::S12);
    let mut out: Vec<(&'static str, ModelConfig)> =
        Variant::ALL.iter().map(|&v| (v.name(), ModelConfig::variant(v))).collect();
    out.extend([
        ("S12-identity", ModelConfig::s12_with([MixerConfig::Identity; 4], NormKind::Mln)),
        ("S12-random-matrix", ModelConfig::s12_with([MixerConfig::RandomMatrix; 4], NormKind::Mln)),
        ("S12-dwconv", ModelConfig::s12_with([MixerConfig::DepthwiseConv { kernel: 3 }; 4], NormKind::Mln)),
        ("S12-pool5", ModelConfig::s12_with([MixerConfig::Pooling { pool_size: 5 }; 4], NormKind::Mln)),
        ("S12-pool7", ModelConfig::s12_with([MixerConfig::Pooling { pool_size: 7 }; 4], NormKind::Mln)),
        ("S12-pool9", ModelConfig::s12_with([MixerConfig::Pooling { pool_size: 9 }; 4], NormKind::Mln)),
        ("S12-ln", ModelConfig::s12_with([pool; 4], NormKind::Ln)),
        ("S12-bn", ModelConfig::s12_with([pool; 4], NormKind::Bn)),
        ("S12-none", ModelConfig::s12_with([pool; 4], NormKind::None)),
        ("S12-no-residual", ModelConfig { residual: false, ..base.clone() }),
        ("S12-no-channel-mlp", ModelConfig { channel_mlp: false, ..base.clone() }),
        ("S12-relu", ModelConfig { activation: Activation::Relu, ..base.clone() }),
        ("S12-silu", ModelConfig { activation: Activation::Silu, ..base.clone() }),
        ("S12-pool-pool-pool-attn", ModelConfig::s12_with([pool, pool, pool, attn], NormKind::Ln)),
        ("S12-pool-pool-attn-attn", ModelConfig::s12_with([pool, pool, attn, attn], NormKind::Ln)),
        ("S12-pool-pool-pool-sfc", ModelConfig::s12_with([pool, pool, pool, sfc], NormKind::Mln)),
        ("S12-pool-pool-sfc-sfc", ModelConfig::s12_with([pool, pool, sfc, sfc], NormKind::Mln)),
    ]);
    out
}

pub fn preset(name: &str) -> Option<ModelConfig> {
    presets()
        .into_iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, c)| c)
}
