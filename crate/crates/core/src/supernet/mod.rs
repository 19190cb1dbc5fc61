//! Cell-based search space: five candidate operations on each of the six
//! edges of a 4-node cell, mixed by simplex-normalized architecture weights.

mod network;

pub use network::{Cell, EdgeWeights, MixedEdge, Network, ResBlock};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::simplex::{self, AnnealSchedule, SimplexVector};
use crate::tensor::{Elem, Tensor};

pub const NUM_OPS: usize = 5;
pub const NUM_NODES: usize = 4;
pub const NUM_EDGES: usize = 6;

/// Cell edges `(from, to)` in canonical order.
pub const EDGES: [(usize, usize); NUM_EDGES] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Index into [`EDGES`] of edge `(from, to)`.
pub fn edge_index(from: usize, to: usize) -> Option<usize> {
    EDGES.iter().position(|&e| e == (from, to))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Zeroise,
    SkipConnect,
    Conv1x1,
    Conv3x3,
    AvgPool3x3,
}

impl OpKind {
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::Zeroise,
        OpKind::SkipConnect,
        OpKind::Conv1x1,
        OpKind::Conv3x3,
        OpKind::AvgPool3x3,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zeroise => "Zeroise",
            OpKind::SkipConnect => "SkipConnect",
            OpKind::Conv1x1 => "Conv1x1",
            OpKind::Conv3x3 => "Conv3x3",
            OpKind::AvgPool3x3 => "AvgPool3x3",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|o| o.name()).collect();
                format!("unknown operation `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// A discrete architecture: one operation per cell edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub edge_ops: [OpKind; NUM_EDGES],
}

/// Number of distinct genotypes, `5^6`.
pub const GENOTYPE_COUNT: usize = NUM_OPS.pow(NUM_EDGES as u32);

fn edge_label(e: usize) -> String {
    let (i, j) = EDGES[e];
    format!("edge({i},{j})")
}

impl Genotype {
    pub fn new(edge_ops: [OpKind; NUM_EDGES]) -> Self {
        Self { edge_ops }
    }

    pub fn uniform(op: OpKind) -> Self {
        Self::new([op; NUM_EDGES])
    }

    /// Base-5 position of this genotype, first edge most significant.
    pub fn rank(&self) -> usize {
        self.edge_ops.iter().fold(0, |acc, op| acc * NUM_OPS + op.index())
    }

    pub fn from_rank(mut rank: usize) -> Option<Self> {
        if rank >= GENOTYPE_COUNT {
            return None;
        }
        let mut ops = [OpKind::Zeroise; NUM_EDGES];
        for slot in ops.iter_mut().rev() {
            *slot = OpKind::ALL[rank % NUM_OPS];
            rank /= NUM_OPS;
        }
        Some(Self::new(ops))
    }

    pub fn all() -> impl Iterator<Item = Genotype> {
        (0..GENOTYPE_COUNT).filter_map(Genotype::from_rank)
    }

    pub fn op(&self, from: usize, to: usize) -> Option<OpKind> {
        edge_index(from, to).map(|e| self.edge_ops[e])
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (e, op) in self.edge_ops.iter().enumerate() {
            if e > 0 {
                f.write_str("|")?;
            }
            write!(f, "{}={}", edge_label(e), op)?;
        }
        Ok(())
    }
}

impl FromStr for Genotype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('|').collect();
        let mut ops = [OpKind::Zeroise; NUM_EDGES];
        for (e, slot) in ops.iter_mut().enumerate() {
            let label = edge_label(e);
            let part = parts.get(e).ok_or_else(|| Error::GenotypeParse {
                edge: label.clone(),
                detail: format!("missing; genotype has only {} edges", parts.len()),
            })?;
            let (name, op) = part.split_once('=').ok_or_else(|| Error::GenotypeParse {
                edge: label.clone(),
                detail: format!("expected `{label}=<op>`, got `{part}`"),
            })?;
            if name.trim() != label {
                return Err(Error::GenotypeParse {
                    edge: label,
                    detail: format!("found `{}` in its position", name.trim()),
                });
            }
            *slot = op.trim().parse().map_err(|detail| Error::GenotypeParse {
                edge: label.clone(),
                detail,
            })?;
        }
        if parts.len() > NUM_EDGES {
            return Err(Error::GenotypeParse {
                edge: format!("segment {}", NUM_EDGES + 1),
                detail: format!("{} edges given, expected {NUM_EDGES}", parts.len()),
            });
        }
        Ok(Self::new(ops))
    }
}

impl Serialize for Genotype {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<String, &str> = self
            .edge_ops
            .iter()
            .enumerate()
            .map(|(e, op)| (edge_label(e), op.name()))
            .collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Genotype {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let map = BTreeMap::<String, String>::deserialize(d)?;
        if map.len() != NUM_EDGES {
            return Err(D::Error::custom(format!("expected {NUM_EDGES} edges, got {}", map.len())));
        }
        let mut ops = [OpKind::Zeroise; NUM_EDGES];
        for (e, slot) in ops.iter_mut().enumerate() {
            let label = edge_label(e);
            let name = map.get(&label).ok_or_else(|| D::Error::custom(format!("missing {label}")))?;
            *slot = name.parse().map_err(D::Error::custom)?;
        }
        Ok(Self::new(ops))
    }
}

/// Architecture weights: one row of operation logits per edge, shared by all cells.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaParams {
    tensor: Tensor,
}

impl AlphaParams {
    pub fn zeros() -> Self {
        Self {
            tensor: Tensor::zeros(&[NUM_EDGES, NUM_OPS]).with_requires_grad(true),
        }
    }

    /// Small Gaussian initialisation, `scale · N(0, 1)` per entry.
    pub fn random(rng: &mut impl Rng, scale: f64) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..NUM_EDGES * NUM_OPS)
            .map(|_| (scale * normal.sample(rng)) as Elem)
            .collect();
        Self {
            tensor: Tensor::new(&[NUM_EDGES, NUM_OPS], data)
                .expect("fixed shape")
                .with_requires_grad(true),
        }
    }

    pub fn from_rows(rows: &[[f64; NUM_OPS]; NUM_EDGES]) -> Result<Self> {
        Self::from_flat(&rows.concat())
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != NUM_EDGES * NUM_OPS {
            return Err(Error::dim(
                "alpha",
                "rows x cols",
                format!("expected {} values, got {}", NUM_EDGES * NUM_OPS, values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("alpha entry {v} is not finite")));
        }
        let data = values.iter().map(|&v| v as Elem).collect();
        Ok(Self {
            tensor: Tensor::new(&[NUM_EDGES, NUM_OPS], data)?.with_requires_grad(true),
        })
    }

    pub fn row(&self, edge: usize) -> [f64; NUM_OPS] {
        let d = &self.tensor.data()[edge * NUM_OPS..(edge + 1) * NUM_OPS];
        std::array::from_fn(|k| d[k] as f64)
    }

    pub fn rows(&self) -> [[f64; NUM_OPS]; NUM_EDGES] {
        std::array::from_fn(|e| self.row(e))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensor.data().iter().map(|&v| v as f64).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensor.data().iter().all(|v| v.is_finite())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    /// The tensor as a one-element slice, for optimizer steps.
    pub fn as_params_mut(&mut self) -> &mut [Tensor] {
        std::slice::from_mut(&mut self.tensor)
    }
}

/// Map from an alpha row to operation weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Mixing {
    SoftmaxTau { tau: f64 },
    Sparsemax,
    AnnealedSparsemax { schedule: AnnealSchedule },
}

/// Per-edge operation weights.
pub type EdgeProbs = [[f64; NUM_OPS]; NUM_EDGES];

impl Mixing {
    /// Temperature applied at `epoch` (1 for plain sparsemax).
    pub fn temperature(&self, epoch: usize) -> f64 {
        match self {
            Mixing::SoftmaxTau { tau } => *tau,
            Mixing::Sparsemax => 1.0,
            Mixing::AnnealedSparsemax { schedule } => schedule.temperature_at(epoch),
        }
    }

    pub fn row(&self, alpha_row: &[f64], epoch: usize) -> Result<SimplexVector> {
        match self {
            Mixing::SoftmaxTau { tau } => simplex::softmax_tau(alpha_row, *tau),
            Mixing::Sparsemax => simplex::sparsemax(alpha_row),
            Mixing::AnnealedSparsemax { schedule } => simplex::annealed_sparsemax(alpha_row, schedule, epoch),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Mixing::SoftmaxTau { tau } if !(*tau > 0.0 && tau.is_finite()) => Err(Error::param("tau", "must be positive")),
            Mixing::AnnealedSparsemax { schedule } => schedule.validate(),
            _ => Ok(()),
        }
    }

    pub fn probabilities(&self, alpha: &AlphaParams, epoch: usize) -> Result<EdgeProbs> {
        let mut out = [[0.0; NUM_OPS]; NUM_EDGES];
        for (e, row) in out.iter_mut().enumerate() {
            let p = self.row(&alpha.row(e), epoch)?;
            row.copy_from_slice(&p);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetConfig {
    pub stem_channels: usize,
    pub cells_per_stage: usize,
    pub num_stages: usize,
    pub num_classes: usize,
    pub image_channels: usize,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            cells_per_stage: 1,
            num_stages: 3,
            num_classes: 2,
            image_channels: 1,
        }
    }
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("stem_channels", self.stem_channels),
            ("cells_per_stage", self.cells_per_stage),
            ("num_stages", self.num_stages),
            ("num_classes", self.num_classes),
            ("image_channels", self.image_channels),
        ] {
            if v == 0 {
                return Err(Error::param(name, "must be positive"));
            }
        }
        Ok(())
    }

    /// Channel count of stage `s`; doubles at every downsampling block.
    pub fn stage_channels(&self, s: usize) -> usize {
        self.stem_channels << s
    }
}

/// Per-edge argmax of `alpha`; ties go to the lowest operation index.
pub fn discretize(alpha: &AlphaParams) -> Genotype {
    let ops = std::array::from_fn(|e| OpKind::ALL[simplex::argmax(&alpha.row(e))]);
    Genotype::new(ops)
}

/// A fresh network with exactly the operations of `genotype`.
pub fn instantiate(genotype: &Genotype, config: &SupernetConfig, seed: u64) -> Result<Network> {
    Network::from_genotype(genotype, config, seed)
}
