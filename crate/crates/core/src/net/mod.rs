//! Four-stage graph backbone: patch stem, trident blocks, 2×2 merges and a
//! mean-pooled linear head.
//!
//! Inside a block the channels are laid out as `local ‖ second ‖ first`.
//! When the global share grows from one block to the next, the channels that
//! join the second-order group are the ones that sat at the tail of the
//! previous local group, so they keep their index.

mod config;
mod params;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{aggregate_update, AggregatorSpec};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{graph_similarity, offset_count, topk_neighbors, BlockChannels, GraphTopology, LocalStencil, NodeGrid};
use crate::ops::ReduceMode;
use crate::tensor::{Scalar, Tensor};

pub use config::{count_params_flops, ActivationKind, GraphMode, ModelConfig, ModelCost, RatioRamp, STAGES};
pub use params::ParamStore;

#[derive(Debug, Clone, Copy)]
struct Affine {
    scale: usize,
    shift: usize,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    channels: BlockChannels,
    norm1: Affine,
    /// Stencil weights and positional weights.
    local: Option<(usize, usize)>,
    first: Vec<usize>,
    second: Vec<usize>,
    act1: Option<usize>,
    out: Linear,
    scale1: Option<usize>,
    norm2: Affine,
    ffn1: Linear,
    act2: Option<usize>,
    ffn2: Linear,
    scale2: Option<usize>,
}

#[derive(Debug, Clone)]
struct StageLayout {
    down: Option<Linear>,
    blocks: Vec<BlockLayout>,
    grid: (usize, usize),
    k: usize,
    stencil: Arc<LocalStencil>,
}

/// Graphs used by one block; `None` for an empty channel group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockGraphs {
    pub first: Option<GraphTopology>,
    pub second: Option<GraphTopology>,
}

/// Whether a forward pass builds its k-NN graphs or reuses recorded ones.
/// Replaying keeps the discrete neighbour choice fixed, which is what
/// finite-difference checks need.
#[derive(Debug, Clone, Copy)]
pub enum TopologyMode<'a> {
    Build,
    Replay(&'a [BlockGraphs]),
}

/// Result of one image's forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Shape `[num_classes]`.
    pub logits: Var,
    /// Node features after every block, in execution order.
    pub block_outputs: Vec<Var>,
    pub graphs: Vec<BlockGraphs>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    stem: Linear,
    stages: Vec<StageLayout>,
    head_norm: Affine,
    head: Linear,
}

struct Builder<'a, T: Scalar> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn tensor(&mut self, name: String, t: Tensor<T>) -> usize {
        self.store.push(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::uniform(&[fan_in, fan_out], bound, self.rng)?;
        let w = self.tensor(format!("{name}.w"), w);
        let b = self.tensor(format!("{name}.b"), Tensor::zeros(&[fan_out])?);
        Ok(Linear { w, b })
    }

    fn affine(&mut self, name: &str, c: usize) -> Result<Affine> {
        let scale = self.tensor(format!("{name}.scale"), Tensor::ones(&[c])?);
        let shift = self.tensor(format!("{name}.shift"), Tensor::zeros(&[c])?);
        Ok(Affine { scale, shift })
    }

    fn epsilon(&mut self, name: String, config: &ModelConfig, shared: Option<usize>) -> Option<usize> {
        if !config.activation.learnable() {
            return None;
        }
        shared.or_else(|| Some(self.tensor(name, Tensor::scalar(T::zero()))))
    }
}

impl<T: Scalar> Model<T> {
    /// Randomly initialised model; every draw comes from a generator seeded
    /// with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let shared_eps = (config.share_epsilon && config.activation.learnable())
            .then(|| b.tensor("epsilon".into(), Tensor::scalar(T::zero())));

        let p = config.patch_size;
        let stem = b.linear("stem", p * p * config.in_channels, config.stage_widths[0])?;
        let grids = config.stage_grids();
        let slots = offset_count(config.radius);
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let c = config.stage_widths[s];
            let down = if s > 0 {
                Some(b.linear(&format!("stage{s}.down"), 4 * config.stage_widths[s - 1], c)?)
            } else {
                None
            };
            let (gh, gw) = grids[s];
            let n = gh * gw;
            let k = config.stage_k[s].min(n - 1);
            if k < config.stage_k[s] {
                log::warn!("stage {s}: k={} exceeds {} other nodes; using k={k}", config.stage_k[s], n - 1);
            }
            let mut blocks = Vec::new();
            for (i, ch) in config.stage_schedule(s)?.into_iter().enumerate() {
                let pre = format!("stage{s}.block{i}");
                let norm1 = b.affine(&format!("{pre}.norm1"), c)?;
                let local = if ch.local > 0 {
                    let bound = 1.0 / (slots as f64).sqrt();
                    let w = Tensor::uniform(&[slots, ch.local], bound, b.rng)?;
                    let w = b.tensor(format!("{pre}.local.w"), w);
                    let pos = b.tensor(format!("{pre}.local.pos"), Tensor::zeros(&[slots, ch.local])?);
                    Some((w, pos))
                } else {
                    None
                };
                let mut group = |tag: &str, width: usize| -> Result<Vec<usize>> {
                    if width == 0 {
                        return Ok(Vec::new());
                    }
                    let spec = AggregatorSpec::new(config.aggregator, width, width);
                    let ws = spec.init_weights::<T>(b.rng)?;
                    Ok(spec
                        .weight_shapes()
                        .iter()
                        .zip(ws)
                        .map(|((name, _), w)| b.tensor(format!("{pre}.{tag}.{name}"), w))
                        .collect())
                };
                let first = group("first", ch.first)?;
                let second = group("second", ch.second)?;
                let act1 = b.epsilon(format!("{pre}.act1.epsilon"), &config, shared_eps);
                let out = b.linear(&format!("{pre}.out"), c, c)?;
                let layer_scale = |b: &mut Builder<T>, name: String| -> Result<Option<usize>> {
                    Ok(match config.layer_scale_init {
                        Some(v) if config.has_layer_scale(s, i) => {
                            Some(b.tensor(name, Tensor::full(&[c], T::from_f64_lossy(v))?))
                        }
                        _ => None,
                    })
                };
                let scale1 = layer_scale(&mut b, format!("{pre}.scale1"))?;
                let norm2 = b.affine(&format!("{pre}.norm2"), c)?;
                let hidden = config.ffn_ratio * c;
                let ffn1 = b.linear(&format!("{pre}.ffn1"), c, hidden)?;
                let act2 = b.epsilon(format!("{pre}.act2.epsilon"), &config, shared_eps);
                let ffn2 = b.linear(&format!("{pre}.ffn2"), hidden, c)?;
                let scale2 = layer_scale(&mut b, format!("{pre}.scale2"))?;
                blocks.push(BlockLayout {
                    channels: ch,
                    norm1,
                    local,
                    first,
                    second,
                    act1,
                    out,
                    scale1,
                    norm2,
                    ffn1,
                    act2,
                    ffn2,
                    scale2,
                });
            }
            stages.push(StageLayout {
                down,
                blocks,
                grid: (gh, gw),
                k,
                stencil: Arc::new(LocalStencil::new(&NodeGrid::row_major(gh, gw), config.radius)),
            });
        }
        let last = config.stage_widths[STAGES - 1];
        let head_norm = b.affine("head.norm", last)?;
        let head = b.linear("head", last, config.num_classes)?;
        Ok(Self {
            params: b.store,
            config,
            stem,
            stages,
            head_norm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem,
            stages: self.stages.clone(),
            head_norm: self.head_norm,
            head: self.head,
        }
    }

    /// Number of blocks over all stages.
    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    /// `(stage, index within stage)` of every block in execution order.
    pub fn block_ids(&self) -> Vec<(usize, usize)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, st)| (0..st.blocks.len()).map(move |b| (s, b)))
            .collect()
    }

    pub fn block_channels(&self, stage: usize, block: usize) -> BlockChannels {
        self.stages[stage].blocks[block].channels
    }

    /// Neighbour count actually used in `stage` after clamping to `n − 1`.
    pub fn stage_k(&self, stage: usize) -> usize {
        self.stages[stage].k
    }

    pub fn stage_grid(&self, stage: usize) -> (usize, usize) {
        self.stages[stage].grid
    }

    /// Zeroes the graph-branch output transform and the second FFN layer of
    /// every block, turning each block into the identity.
    pub fn zero_branch_outputs(&mut self) {
        let targets: Vec<usize> = self
            .stages
            .iter()
            .flat_map(|s| &s.blocks)
            .flat_map(|b| [b.out.w, b.out.b, b.ffn2.w, b.ffn2.b])
            .collect();
        for i in targets {
            self.params.get_mut(i).data_mut().fill(T::zero());
        }
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let [h, w] = self.config.image_size;
        if shape != [h, w, self.config.in_channels] {
            return Err(Error::dim(
                "forward",
                format!("image {shape:?}, expected [{h}, {w}, {}]", self.config.in_channels),
            ));
        }
        Ok(())
    }

    /// Projects non-overlapping `p×p` patches of an `h×w×c` image to the
    /// first stage width. Patch pixels are flattened in `(dy, dx, channel)`
    /// order and nodes are numbered row-major.
    pub fn node_embedding(&self, tape: &mut Tape<T>, vars: &[Var], image: Var) -> Result<Var> {
        self.check_image(tape.shape(image))?;
        let [h, w] = self.config.image_size;
        let (p, c) = (self.config.patch_size, self.config.in_channels);
        let pixels = tape.reshape(image, vec![h * w, c])?;
        let index = patch_index(h, w, p)?;
        let n = index.len() / (p * p);
        let patches = tape.gather_rows(pixels, &index)?;
        let patches = tape.reshape(patches, vec![n, p * p * c])?;
        tape.linear(patches, vars[self.stem.w], Some(vars[self.stem.b]))
    }

    /// 2×2 merge into stage `stage` (≥ 1) followed by the linear projection.
    pub fn downsample(&self, tape: &mut Tape<T>, vars: &[Var], stage: usize, h: Var) -> Result<Var> {
        let down = self.stages[stage]
            .down
            .ok_or_else(|| Error::Config(format!("stage {stage} has no downsample")))?;
        let (gh, gw) = self.stages[stage - 1].grid;
        let merged = merge_2x2(tape, h, gh, gw)?;
        tape.linear(merged, vars[down.w], Some(vars[down.b]))
    }

    /// One block on the stage's row-major grid.
    pub fn block_forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        stage: usize,
        block: usize,
        h: Var,
        replay: Option<&BlockGraphs>,
    ) -> Result<(Var, BlockGraphs)> {
        let stencil = self.stages[stage].stencil.clone();
        self.block_forward_on(tape, vars, stage, block, h, &stencil, replay)
    }

    /// One block with an explicit local stencil, so callers can relabel the
    /// nodes of the grid.
    #[allow(clippy::too_many_arguments)]
    pub fn block_forward_on(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        stage: usize,
        block: usize,
        h: Var,
        stencil: &Arc<LocalStencil>,
        replay: Option<&BlockGraphs>,
    ) -> Result<(Var, BlockGraphs)> {
        let layout = &self.stages[stage].blocks[block];
        let ch = layout.channels;
        let (n, c) = tape.value(h).dims2()?;
        if c != ch.total() {
            return Err(Error::dim("block", format!("{c} channels for a block of width {}", ch.total())));
        }
        if n != stencil.n_nodes() {
            return Err(Error::dim("block", format!("{n} nodes for a grid of {}", stencil.n_nodes())));
        }
        let eps = self.config.norm_eps;
        let x = self.norm(tape, vars, h, layout.norm1, eps)?;

        let mut parts = Vec::with_capacity(3);
        if let Some((w, pos)) = layout.local {
            let xl = tape.narrow(x, 1, 0, ch.local)?;
            let y = tape.local_conv(xl, vars[w], stencil.clone())?;
            let ones = tape.constant(Tensor::ones(&[n, ch.local])?);
            let bias = tape.local_conv(ones, vars[pos], stencil.clone())?;
            parts.push(tape.add(y, bias)?);
        }
        let second_at = ch.local;
        let first_at = ch.local + ch.second;
        let xs = (ch.second > 0).then(|| tape.narrow(x, 1, second_at, ch.second)).transpose()?;
        let xf = tape.narrow(x, 1, first_at, ch.first)?;

        let graphs = match replay {
            Some(g) => g.clone(),
            None => self.build_graphs(tape, stage, x, ch, xf, xs)?,
        };
        if let Some(xs) = xs {
            let topo = graphs
                .second
                .as_ref()
                .ok_or_else(|| Error::DegenerateInput("replayed topology lacks a second-order graph".into()))?;
            let ws: Vec<Var> = layout.second.iter().map(|&i| vars[i]).collect();
            let spec = AggregatorSpec::new(self.config.aggregator, ch.second, ch.second);
            parts.push(aggregate_update(tape, &spec, xs, topo, &ws)?);
        }
        let topo = graphs
            .first
            .as_ref()
            .ok_or_else(|| Error::DegenerateInput("replayed topology lacks a first-order graph".into()))?;
        let ws: Vec<Var> = layout.first.iter().map(|&i| vars[i]).collect();
        let spec = AggregatorSpec::new(self.config.aggregator, ch.first, ch.first);
        parts.push(aggregate_update(tape, &spec, xf, topo, &ws)?);

        let g = tape.concat(&parts, 1)?;
        let g = self.activation(tape, vars, g, layout.act1)?;
        let g = tape.linear(g, vars[layout.out.w], Some(vars[layout.out.b]))?;
        let g = self.layer_scale(tape, vars, g, layout.scale1)?;
        let h1 = tape.add(h, g)?;

        let f = self.norm(tape, vars, h1, layout.norm2, eps)?;
        let f = tape.linear(f, vars[layout.ffn1.w], Some(vars[layout.ffn1.b]))?;
        let f = self.activation(tape, vars, f, layout.act2)?;
        let f = tape.linear(f, vars[layout.ffn2.w], Some(vars[layout.ffn2.b]))?;
        let f = self.layer_scale(tape, vars, f, layout.scale2)?;
        Ok((tape.add(h1, f)?, graphs))
    }

    fn build_graphs(
        &self,
        tape: &Tape<T>,
        stage: usize,
        x: Var,
        ch: BlockChannels,
        xf: Var,
        xs: Option<Var>,
    ) -> Result<BlockGraphs> {
        let k = self.stages[stage].k;
        let metric = self.config.metric;
        let build = |t: &Tensor<T>| topk_neighbors(&graph_similarity(t, metric)?, k);
        match self.config.graph_mode {
            GraphMode::PerGroup => Ok(BlockGraphs {
                first: Some(build(tape.value(xf))?),
                second: xs.map(|v| build(tape.value(v))).transpose()?,
            }),
            GraphMode::Shared => {
                let global = crate::ops::narrow(tape.value(x), 1, ch.local, ch.global())?;
                let topo = build(&global)?;
                Ok(BlockGraphs {
                    second: (ch.second > 0).then(|| topo.clone()),
                    first: Some(topo),
                })
            }
        }
    }

    fn norm(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, a: Affine, eps: f64) -> Result<Var> {
        let n = tape.shape(x)[0];
        let z = tape.row_normalize(x, T::from_f64_lossy(eps))?;
        let scale = tape.broadcast_rows(vars[a.scale], n)?;
        let shift = tape.broadcast_rows(vars[a.shift], n)?;
        let z = tape.mul(z, scale)?;
        tape.add(z, shift)
    }

    fn activation(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, eps: Option<usize>) -> Result<Var> {
        let e = match eps {
            Some(i) => vars[i],
            None => tape.constant(Tensor::scalar(T::zero())),
        };
        tape.graphlu(x, e, self.config.activation.form())
    }

    fn layer_scale(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, gamma: Option<usize>) -> Result<Var> {
        match gamma {
            Some(i) => {
                let n = tape.shape(x)[0];
                let g = tape.broadcast_rows(vars[i], n)?;
                tape.mul(x, g)
            }
            None => Ok(x),
        }
    }

    /// Norm, mean over nodes and the linear classifier; returns `[num_classes]`.
    pub fn head(&self, tape: &mut Tape<T>, vars: &[Var], h: Var) -> Result<Var> {
        let z = self.norm(tape, vars, h, self.head_norm, self.config.norm_eps)?;
        let pooled = tape.reduce(z, 0, ReduceMode::Mean)?;
        let c = tape.shape(pooled)[0];
        let pooled = tape.reshape(pooled, vec![1, c])?;
        let logits = tape.linear(pooled, vars[self.head.w], Some(vars[self.head.b]))?;
        tape.reshape(logits, vec![self.config.num_classes])
    }

    /// Full forward of one `h×w×c` image. `vars` come from
    /// [`ParamStore::bind`] on the same tape.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], image: Var, mode: TopologyMode<'_>) -> Result<Forward> {
        if let TopologyMode::Replay(g) = mode {
            if g.len() != self.num_blocks() {
                return Err(Error::DegenerateInput(format!(
                    "{} recorded block graphs for {} blocks",
                    g.len(),
                    self.num_blocks()
                )));
            }
        }
        let mut h = self.node_embedding(tape, vars, image)?;
        let mut outputs = Vec::with_capacity(self.num_blocks());
        let mut graphs = Vec::with_capacity(self.num_blocks());
        for s in 0..STAGES {
            if s > 0 {
                h = self.downsample(tape, vars, s, h)?;
            }
            for b in 0..self.stages[s].blocks.len() {
                let replay = match mode {
                    TopologyMode::Build => None,
                    TopologyMode::Replay(g) => Some(&g[outputs.len()]),
                };
                let (next, g) = self.block_forward(tape, vars, s, b, h, replay)?;
                h = next;
                outputs.push(h);
                graphs.push(g);
            }
        }
        let logits = self.head(tape, vars, h)?;
        Ok(Forward {
            logits,
            block_outputs: outputs,
            graphs,
        })
    }

    /// Forward of several images on one tape; logits stacked to
    /// `[batch × num_classes]`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        images: &[Tensor<T>],
    ) -> Result<(Var, Vec<Forward>)> {
        if images.is_empty() {
            return Err(Error::DegenerateInput("empty batch".into()));
        }
        let k = self.config.num_classes;
        let mut rows = Vec::with_capacity(images.len());
        let mut passes = Vec::with_capacity(images.len());
        for img in images {
            let x = tape.constant(img.clone());
            let f = self.forward(tape, vars, x, TopologyMode::Build)?;
            rows.push(tape.reshape(f.logits, vec![1, k])?);
            passes.push(f);
        }
        Ok((tape.concat(&rows, 0)?, passes))
    }

    /// Logits of one image without recording gradients.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let f = self.forward(&mut tape, &vars, x, TopologyMode::Build)?;
        Ok(tape.take_value(f.logits))
    }
}

/// Pixel rows gathered by the stem: for every row-major node, the `p×p`
/// pixels of its patch in `(dy, dx)` order, indexing a row-major `h×w`
/// pixel list.
pub fn patch_index(h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("image {h}×{w} is not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(h * w);
    for i in 0..gh {
        for j in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    index.push((i * p + dy) * w + j * p + dx);
                }
            }
        }
    }
    Ok(index)
}

/// Concatenates the four members of every 2×2 cell of a row-major
/// `gh×gw` grid, in `(dy, dx)` order, giving `[gh/2·gw/2 × 4c]`.
pub fn merge_2x2<T: Scalar>(tape: &mut Tape<T>, h: Var, gh: usize, gw: usize) -> Result<Var> {
    if gh % 2 != 0 || gw % 2 != 0 {
        return Err(Error::Config(format!("cannot merge an odd {gh}×{gw} grid")));
    }
    let (n, _) = tape.value(h).dims2()?;
    if n != gh * gw {
        return Err(Error::dim("downsample", format!("{n} nodes for a {gh}×{gw} grid")));
    }
    let mut parts = Vec::with_capacity(4);
    for dy in 0..2 {
        for dx in 0..2 {
            let index: Vec<usize> = (0..gh / 2)
                .flat_map(|i| (0..gw / 2).map(move |j| (2 * i + dy) * gw + 2 * j + dx))
                .collect();
            parts.push(tape.gather_rows(h, &index)?);
        }
    }
    tape.concat(&parts, 1)
}
