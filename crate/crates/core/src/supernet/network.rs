use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EdgeProbs, Genotype, OpKind, SupernetConfig, EDGES, NUM_EDGES, NUM_NODES, NUM_OPS};
use crate::error::{Error, Result};
use crate::nn::{conv_weight, linear_weight, BnPolicy, ConvBn, Ctx, ParamId, ParamStore, StatsId};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Operation weights used by a forward pass.
#[derive(Clone, Copy)]
pub enum EdgeWeights<'a> {
    /// Every edge holds exactly one operation, applied unweighted.
    Single,
    /// Probabilities recorded as tape constants; no gradient reaches alpha.
    Constant(&'a EdgeProbs),
    /// Probabilities already on the tape as a `[edges, ops]` node.
    Tracked { probs: &'a EdgeProbs, var: Var },
}

/// Probabilities for one edge as seen by [`MixedEdge::forward`].
#[derive(Clone, Copy)]
struct EdgeRow<'a> {
    probs: &'a [f64; NUM_OPS],
    var: Var,
    edge: usize,
}

#[derive(Clone, Debug)]
enum Candidate {
    Zero,
    Skip,
    Pool,
    Conv(ConvBn),
}

/// The candidate operations of one cell edge.
#[derive(Clone, Debug)]
pub struct MixedEdge {
    channels: usize,
    ops: Vec<(OpKind, Candidate)>,
}

impl MixedEdge {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, kinds: &[OpKind]) -> Self {
        let ops = kinds
            .iter()
            .map(|&kind| {
                let c = match kind {
                    OpKind::Zeroise => Candidate::Zero,
                    OpKind::SkipConnect => Candidate::Skip,
                    OpKind::AvgPool3x3 => Candidate::Pool,
                    OpKind::Conv1x1 | OpKind::Conv3x3 => {
                        let k = if kind == OpKind::Conv1x1 { 1 } else { 3 };
                        Candidate::Conv(ConvBn::new(store, rng, &format!("{name}.{kind}"), channels, channels, k, 1, true))
                    }
                };
                (kind, c)
            })
            .collect();
        Self { channels, ops }
    }

    pub fn kinds(&self) -> Vec<OpKind> {
        self.ops.iter().map(|(k, _)| *k).collect()
    }

    /// Applies candidate `kind` to `x`; output shape equals input shape.
    pub fn apply_op(&self, ctx: &mut Ctx<'_>, kind: OpKind, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dim(
                "apply_op",
                "input axis 1",
                format!("edge has {} channels, input shape {shape:?}", self.channels),
            ));
        }
        let (_, cand) = self
            .ops
            .iter()
            .find(|(k, _)| *k == kind)
            .ok_or_else(|| Error::Contract(format!("operation {kind} is not a candidate on this edge")))?;
        match cand {
            Candidate::Zero => Ok(ctx.tape.zeros_like(x)),
            Candidate::Skip => Ok(x),
            Candidate::Pool => ctx.tape.avg_pool2d(x, 3, 1, 1),
            Candidate::Conv(c) => c.forward(ctx, x),
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var, row: Option<EdgeRow<'_>>) -> Result<Var> {
        let Some(row) = row else {
            return match self.ops.as_slice() {
                [(kind, _)] => self.apply_op(ctx, *kind, x),
                _ => Err(Error::Contract("unweighted forward needs one operation per edge".into())),
            };
        };
        let mut outputs = Vec::with_capacity(NUM_OPS);
        let mut cols = Vec::with_capacity(NUM_OPS);
        for (kind, _) in &self.ops {
            // zero-weight operations are never evaluated
            if row.probs[kind.index()] == 0.0 {
                continue;
            }
            outputs.push(self.apply_op(ctx, *kind, x)?);
            cols.push(kind.index());
        }
        if outputs.is_empty() {
            return Ok(ctx.tape.zeros_like(x));
        }
        ctx.tape.mix(&outputs, row.var, row.edge, &cols)
    }

    /// Weighted sum `Σ_o p_o · o(x)` over the candidates of this edge.
    pub fn mixed_forward(&self, ctx: &mut Ctx<'_>, x: Var, probs: &[f64; NUM_OPS]) -> Result<Var> {
        let data = probs.iter().map(|&p| p as Elem).collect();
        let var = ctx.tape.constant(Tensor::new(&[1, NUM_OPS], data)?);
        self.forward(ctx, x, Some(EdgeRow { probs, var, edge: 0 }))
    }

    fn copy_from(&self, dst: &mut ParamStore, other: &MixedEdge, src: &ParamStore) -> Result<()> {
        for (kind, cand) in &self.ops {
            let Candidate::Conv(c) = cand else { continue };
            let theirs = other.ops.iter().find(|(k, _)| k == kind);
            match theirs {
                Some((_, Candidate::Conv(o))) => c.copy_from(dst, o, src),
                _ => return Err(Error::Contract(format!("source edge lacks {kind}"))),
            }
        }
        Ok(())
    }
}

/// A 4-node DAG: `node_j = Σ_{i<j} edge(i,j)(node_i)`.
#[derive(Clone, Debug)]
pub struct Cell {
    edges: Vec<MixedEdge>,
}

impl Cell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        kinds: impl Fn(usize) -> Vec<OpKind>,
    ) -> Self {
        let edges = EDGES
            .iter()
            .enumerate()
            .map(|(e, (i, j))| MixedEdge::new(store, rng, &format!("{name}.edge{i}{j}"), channels, &kinds(e)))
            .collect();
        Self { edges }
    }

    pub fn edge(&self, e: usize) -> &MixedEdge {
        &self.edges[e]
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var, weights: Option<(&EdgeProbs, Var)>) -> Result<Var> {
        let mut nodes = Vec::with_capacity(NUM_NODES);
        nodes.push(x);
        for j in 1..NUM_NODES {
            let mut acc: Option<Var> = None;
            for i in 0..j {
                let e = super::edge_index(i, j).expect("valid edge");
                let row = weights.map(|(probs, var)| EdgeRow {
                    probs: &probs[e],
                    var,
                    edge: e,
                });
                let out = self.edges[e].forward(ctx, nodes[i], row)?;
                acc = Some(match acc {
                    Some(a) => ctx.tape.add(a, out)?,
                    None => out,
                });
            }
            nodes.push(acc.expect("every node has a predecessor"));
        }
        Ok(nodes[NUM_NODES - 1])
    }

    /// Cell output with fixed per-edge probabilities (or unweighted when `None`).
    pub fn cell_forward(&self, ctx: &mut Ctx<'_>, x: Var, probs: Option<&EdgeProbs>) -> Result<Var> {
        match probs {
            Some(p) => {
                let var = constant_probs(ctx.tape, p);
                self.forward(ctx, x, Some((p, var)))
            }
            None => self.forward(ctx, x, None),
        }
    }

    fn copy_from(&self, dst: &mut ParamStore, other: &Cell, src: &ParamStore) -> Result<()> {
        for (a, b) in self.edges.iter().zip(&other.edges) {
            a.copy_from(dst, b, src)?;
        }
        Ok(())
    }
}

fn constant_probs(tape: &mut Tape, probs: &EdgeProbs) -> Var {
    let data = probs.iter().flatten().map(|&p| p as Elem).collect();
    tape.constant(Tensor::from_parts(vec![NUM_EDGES, NUM_OPS], data))
}

/// Stride-2 residual block that doubles the channel count between stages.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv_a: ConvBn,
    conv_b: ConvBn,
    shortcut: ParamId,
}

impl ResBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv_a: ConvBn::new(store, rng, &format!("{name}.a"), cin, cout, 3, 2, true),
            conv_b: ConvBn::new(store, rng, &format!("{name}.b"), cout, cout, 3, 1, true),
            shortcut: store.add(format!("{name}.shortcut"), conv_weight(rng, cout, cin, 1)),
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let a = self.conv_a.forward(ctx, x)?;
        let b = self.conv_b.forward(ctx, a)?;
        let pooled = ctx.tape.avg_pool2d(x, 2, 2, 0)?;
        let w = ctx.var(self.shortcut);
        let short = ctx.tape.conv2d(pooled, w, 1, 0)?;
        ctx.tape.add(short, b)
    }

    fn copy_from(&self, dst: &mut ParamStore, other: &ResBlock, src: &ParamStore) {
        self.conv_a.copy_from(dst, &other.conv_a, src);
        self.conv_b.copy_from(dst, &other.conv_b, src);
        dst.get_mut(self.shortcut)
            .data_mut()
            .copy_from_slice(src.get(other.shortcut).data());
    }
}

#[derive(Clone, Debug)]
struct Stage {
    downsample: Option<ResBlock>,
    cells: Vec<Cell>,
}

#[derive(Clone, Debug)]
struct Head {
    gamma: ParamId,
    beta: ParamId,
    stats: StatsId,
    weight: ParamId,
    bias: ParamId,
}

/// Stem, stages of cells separated by residual downsampling, and a linear
/// classifier. A supernet carries all five candidates on every edge; a
/// derived network carries exactly one.
#[derive(Clone, Debug)]
pub struct Network {
    config: SupernetConfig,
    genotype: Option<Genotype>,
    params: ParamStore,
    stem: ConvBn,
    stages: Vec<Stage>,
    head: Head,
}

impl Network {
    pub fn supernet(config: &SupernetConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, None)
    }

    pub fn from_genotype(genotype: &Genotype, config: &SupernetConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, Some(*genotype))
    }

    fn build(config: &SupernetConfig, seed: u64, genotype: Option<Genotype>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let kinds = |e: usize| match genotype {
            Some(g) => vec![g.edge_ops[e]],
            None => OpKind::ALL.to_vec(),
        };
        let c0 = config.stem_channels;
        let stem = ConvBn::new(&mut params, &mut rng, "stem", config.image_channels, c0, 3, 1, false);
        let mut stages = Vec::with_capacity(config.num_stages);
        for s in 0..config.num_stages {
            let c = config.stage_channels(s);
            let downsample = (s > 0)
                .then(|| ResBlock::new(&mut params, &mut rng, &format!("stage{s}.down"), config.stage_channels(s - 1), c));
            let cells = (0..config.cells_per_stage)
                .map(|i| Cell::new(&mut params, &mut rng, &format!("stage{s}.cell{i}"), c, kinds))
                .collect();
            stages.push(Stage { downsample, cells });
        }
        let cl = config.stage_channels(config.num_stages - 1);
        let head = Head {
            gamma: params.add("head.bn.gamma", Tensor::ones(&[cl])),
            beta: params.add("head.bn.beta", Tensor::zeros(&[cl])),
            stats: params.add_stats(cl),
            weight: params.add("head.fc.weight", linear_weight(&mut rng, config.num_classes, cl)),
            bias: params.add("head.fc.bias", Tensor::zeros(&[config.num_classes])),
        };
        Ok(Self {
            config: config.clone(),
            genotype,
            params,
            stem,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    /// The fixed architecture of a derived network; `None` for a supernet.
    pub fn genotype(&self) -> Option<&Genotype> {
        self.genotype.as_ref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) {
        self.params = params;
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn cell(&self, stage: usize, index: usize) -> &Cell {
        &self.stages[stage].cells[index]
    }

    /// Records the forward pass of `input: [N, C, H, W]` and returns `[N, classes]` logits.
    /// With `trainable`, parameters enter the tape as gradient-carrying leaves.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        input: Var,
        weights: EdgeWeights<'_>,
        bn: BnPolicy,
        trainable: bool,
    ) -> Result<Var> {
        let expected = self.config.image_channels;
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != expected {
            return Err(Error::dim(
                "supernet_forward",
                "input axis 1",
                format!("expected [N, {expected}, H, W], got {shape:?}"),
            ));
        }
        let mixed = match weights {
            EdgeWeights::Single => {
                if self.genotype.is_none() {
                    return Err(Error::Contract("a supernet needs edge probabilities".into()));
                }
                None
            }
            EdgeWeights::Constant(p) => Some((p, constant_probs(tape, p))),
            EdgeWeights::Tracked { probs, var } => {
                if tape.shape(var) != [NUM_EDGES, NUM_OPS] {
                    return Err(Error::dim("supernet_forward", "probabilities", format!("{:?}", tape.shape(var))));
                }
                Some((probs, var))
            }
        };
        let Network {
            params,
            stem,
            stages,
            head,
            ..
        } = self;
        let bound = params.bind(tape, trainable);
        let mut ctx = Ctx {
            tape,
            bound: &bound,
            stats: params,
            bn,
        };
        let mut x = stem.forward(&mut ctx, input)?;
        for stage in stages.iter() {
            if let Some(d) = &stage.downsample {
                x = d.forward(&mut ctx, x)?;
            }
            for cell in &stage.cells {
                x = cell.forward(&mut ctx, x, mixed)?;
            }
        }
        let x = ctx.batch_norm(x, head.gamma, head.beta, head.stats)?;
        let x = ctx.tape.relu(x);
        let x = ctx.tape.global_avg_pool(x)?;
        let (w, b) = (ctx.var(head.weight), ctx.var(head.bias));
        ctx.tape.linear(x, w, Some(b))
    }

    /// Copies every weight this network shares with `supernet`: stem,
    /// downsampling blocks, head, and the chosen candidate on each edge.
    pub fn transplant_from(&mut self, supernet: &Network) -> Result<()> {
        if self.config.stem_channels != supernet.config.stem_channels
            || self.config.num_stages != supernet.config.num_stages
            || self.config.cells_per_stage != supernet.config.cells_per_stage
            || self.config.num_classes != supernet.config.num_classes
            || self.config.image_channels != supernet.config.image_channels
        {
            return Err(Error::Contract("transplant between different skeletons".into()));
        }
        let src = &supernet.params;
        let dst = &mut self.params;
        self.stem.copy_from(dst, &supernet.stem, src);
        for (mine, theirs) in self.stages.iter().zip(&supernet.stages) {
            if let (Some(a), Some(b)) = (&mine.downsample, &theirs.downsample) {
                a.copy_from(dst, b, src);
            }
            for (a, b) in mine.cells.iter().zip(&theirs.cells) {
                a.copy_from(dst, b, src)?;
            }
        }
        let (h, o) = (&self.head, &supernet.head);
        for (d, s) in [(h.gamma, o.gamma), (h.beta, o.beta), (h.weight, o.weight), (h.bias, o.bias)] {
            dst.get_mut(d).data_mut().copy_from_slice(src.get(s).data());
        }
        *dst.stats_mut(h.stats) = src.stats(o.stats).clone();
        Ok(())
    }
}
