use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregatorKind, AggregatorSpec};
use crate::error::{Error, Result};
use crate::graph::{offset_count, psgc_schedule, BlockChannels, Metric};
use crate::graphlu::GraphLuForm;

pub const STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    /// Learnable-ε GraphLU.
    #[default]
    GraphLu,
    /// GraphLU with the `+1` inside the erf bracket.
    GraphLuLiteral,
    /// Exact-erf GELU, i.e. GraphLU frozen at ε = 0.
    Gelu,
}

impl ActivationKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ActivationKind::Gelu)
    }

    pub fn form(self) -> GraphLuForm {
        match self {
            ActivationKind::GraphLuLiteral => GraphLuForm::Literal,
            _ => GraphLuForm::Cdf,
        }
    }
}

/// How the first- and second-order channel groups get their graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Each group builds its own k-NN graph from its own channels.
    #[default]
    PerGroup,
    /// One graph built from both groups' channels, used by both.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioRamp {
    pub start: f64,
    pub end: f64,
}

fn default_in_channels() -> usize {
    3
}
fn default_norm_eps() -> f64 {
    1e-5
}
fn default_layer_scale_blocks() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input height and width in pixels.
    pub image_size: [usize; 2],
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub patch_size: usize,
    pub stage_depths: [usize; STAGES],
    pub stage_widths: [usize; STAGES],
    pub stage_k: [usize; STAGES],
    /// Chebyshev radius of the local branch.
    pub radius: usize,
    pub schedule: [RatioRamp; STAGES],
    pub granularity: usize,
    #[serde(default)]
    pub aggregator: AggregatorKind,
    #[serde(default)]
    pub activation: ActivationKind,
    /// One ε for the whole network instead of one per activation site.
    #[serde(default)]
    pub share_epsilon: bool,
    #[serde(default)]
    pub graph_mode: GraphMode,
    #[serde(default)]
    pub metric: Metric,
    pub ffn_ratio: usize,
    /// `None` disables LayerScale.
    pub layer_scale_init: Option<f64>,
    /// LayerScale is applied to this many trailing blocks of the last stage.
    #[serde(default = "default_layer_scale_blocks")]
    pub layer_scale_blocks: usize,
    pub num_classes: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale reference configuration for 32×32 RGB input.
    pub fn tiny(num_classes: usize) -> Self {
        let ramp = RatioRamp {
            start: 0.25,
            end: 0.75,
        };
        Self {
            image_size: [32, 32],
            in_channels: 3,
            patch_size: 2,
            stage_depths: [1, 1, 2, 1],
            stage_widths: [32, 64, 128, 256],
            stage_k: [4, 4, 8, 8],
            radius: 3,
            schedule: [ramp; STAGES],
            granularity: 16,
            aggregator: AggregatorKind::MaxE,
            activation: ActivationKind::GraphLu,
            share_epsilon: false,
            graph_mode: GraphMode::PerGroup,
            metric: Metric::Cosine,
            ffn_ratio: 4,
            layer_scale_init: Some(1e-5),
            layer_scale_blocks: 2,
            num_classes,
            norm_eps: 1e-5,
        }
    }

    /// Node grid `(rows, cols)` of every stage.
    pub fn stage_grids(&self) -> [(usize, usize); STAGES] {
        let (h, w) = (self.image_size[0] / self.patch_size, self.image_size[1] / self.patch_size);
        std::array::from_fn(|s| (h >> s, w >> s))
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let [h, w] = self.image_size;
        let p = self.patch_size;
        if p == 0 || h % p != 0 || w % p != 0 {
            return fail(format!("image {h}×{w} is not divisible by patch size {p}"));
        }
        let (gh, gw) = (h / p, w / p);
        let down = 1 << (STAGES - 1);
        if gh % down != 0 || gw % down != 0 {
            return fail(format!("node grid {gh}×{gw} cannot be halved {} times", STAGES - 1));
        }
        if (gh / down) * (gw / down) < 2 {
            return fail(format!("last stage grid {}×{} has fewer than 2 nodes", gh / down, gw / down));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.ffn_ratio == 0 {
            return fail("in_channels, num_classes and ffn_ratio must be positive".into());
        }
        if self.total_blocks() == 0 {
            return fail("model has no blocks".into());
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        for s in 0..STAGES {
            if self.stage_widths[s] == 0 || self.stage_widths[s] % self.granularity.max(1) != 0 {
                return fail(format!(
                    "stage {s} width {} is not a positive multiple of {}",
                    self.stage_widths[s], self.granularity
                ));
            }
            if self.stage_k[s] == 0 {
                return fail(format!("stage {s} has k = 0"));
            }
            self.stage_schedule(s)?;
        }
        Ok(())
    }

    /// Channel triples of every block in stage `s`.
    pub fn stage_schedule(&self, s: usize) -> Result<Vec<BlockChannels>> {
        let depth = self.stage_depths[s];
        if depth == 0 {
            return Ok(Vec::new());
        }
        let ramp = self.schedule[s];
        Ok(psgc_schedule(self.stage_widths[s], depth, ramp.start, ramp.end, self.granularity)?.per_block)
    }

    /// Whether block `b` of stage `s` carries LayerScale.
    pub fn has_layer_scale(&self, s: usize, b: usize) -> bool {
        let depth = self.stage_depths[s];
        self.layer_scale_init.is_some() && s == STAGES - 1 && b + self.layer_scale_blocks >= depth
    }

    fn aggregator_spec(&self, c: usize) -> AggregatorSpec {
        AggregatorSpec::new(self.aggregator, c, c)
    }
}

/// Analytic model size: trainable parameters and multiply-adds of one
/// forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCost {
    pub params: usize,
    pub mult_adds: usize,
}

/// Closed-form parameter and multiply-add count for `config`.
///
/// Multiply-adds cover the linear maps, the local stencils, the similarity
/// matrices and the aggregators; normalisation, activations and top-k
/// selection are not counted.
pub fn count_params_flops(config: &ModelConfig) -> Result<ModelCost> {
    config.validate()?;
    let grids = config.stage_grids();
    let slots = offset_count(config.radius);
    let act = usize::from(config.activation.learnable() && !config.share_epsilon);
    let mut params = 0;
    let mut macs = 0;

    let c0 = config.stage_widths[0];
    let patch = config.patch_size * config.patch_size * config.in_channels;
    let n0 = grids[0].0 * grids[0].1;
    params += patch * c0 + c0;
    macs += n0 * patch * c0;

    for s in 0..STAGES {
        let c = config.stage_widths[s];
        let n = grids[s].0 * grids[s].1;
        let k = config.stage_k[s].min(n - 1);
        if s > 0 {
            let prev = config.stage_widths[s - 1];
            params += 4 * prev * c + c;
            macs += n * 4 * prev * c;
        }
        for (b, ch) in config.stage_schedule(s)?.iter().enumerate() {
            params += 2 * c; // norm1
            if ch.local > 0 {
                params += 2 * slots * ch.local;
                macs += 2 * n * slots * ch.local;
            }
            let shared = config.graph_mode == GraphMode::Shared;
            if shared {
                macs += n * n * ch.global();
            }
            for width in [ch.first, ch.second] {
                if width > 0 {
                    let spec = config.aggregator_spec(width);
                    params += spec.param_count();
                    macs += spec.mult_adds(n, k);
                    if !shared {
                        macs += n * n * width;
                    }
                }
            }
            params += act; // graph activation
            params += c * c + c;
            macs += n * c * c;
            params += 2 * c; // norm2
            let hidden = config.ffn_ratio * c;
            params += c * hidden + hidden + hidden * c + c + act;
            macs += 2 * n * c * hidden;
            if config.has_layer_scale(s, b) {
                params += 2 * c;
            }
        }
    }
    if config.activation.learnable() && config.share_epsilon {
        params += 1;
    }
    let last = config.stage_widths[STAGES - 1];
    params += 2 * last + last * config.num_classes + config.num_classes;
    macs += last * config.num_classes;
    Ok(ModelCost {
        params,
        mult_adds: macs,
    })
}
