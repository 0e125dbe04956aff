//! Personalization network: GAT encoder over retrieved subjects, clue
//! branch, fusion GAT with mean pooling, and a rank-1 conditioned decoder
//! ending in four transposed convolutions.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamStore, Tensor, Var};
use crate::features::{FeatureKind, RffEncoder, Standardizer};
use crate::graphs::Adjacency;
use crate::nn::{Ctx, Deconv, Dense, GatDims, GatLayer, GraphTensors, GraphVars, LoraDense, Normalizer, Trainable};

/// Module-integration variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Wiring {
    /// Clue branch, fusion GAT and conditioned decoder.
    Full,
    /// Clue features concatenated, no fusion GAT before pooling.
    ClueNoFusion,
    /// Pooled encoder output only; no clue anywhere.
    NoClueNoFusion,
}

impl Wiring {
    pub fn uses_clue(self) -> bool {
        self != Wiring::NoClueNoFusion
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PDims {
    #[serde(rename = "K")]
    pub k: usize,
    pub gat1_heads: usize,
    pub gat1_head_dim: usize,
    pub gat2_dim: usize,
    pub clue_dim: usize,
    pub fusion_heads: usize,
    pub fusion_head_dim: usize,
    pub decoder_hidden: usize,
    pub rff_features: usize,
    pub rff_sigma: f64,
}

impl PDims {
    /// Default widths for `K` bins per ear.
    pub fn for_k(k: usize) -> Self {
        Self {
            k,
            gat1_heads: 8,
            gat1_head_dim: 2 * k,
            gat2_dim: 4 * k,
            clue_dim: 2 * k,
            fusion_heads: 6,
            fusion_head_dim: 2 * k,
            decoder_hidden: 2 * k,
            rff_features: 64,
            rff_sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 || self.k % 8 != 0 {
            return Err(format!("K = {} must be a positive multiple of 8", self.k));
        }
        let widths = [
            self.gat1_heads,
            self.gat1_head_dim,
            self.gat2_dim,
            self.clue_dim,
            self.fusion_heads,
            self.fusion_head_dim,
            self.decoder_hidden,
            self.rff_features,
        ];
        if widths.contains(&0) || !(self.rff_sigma > 0.0) {
            return Err("all widths and the RFF scale must be positive".into());
        }
        Ok(())
    }

    fn pooled_dim(&self, wiring: Wiring) -> usize {
        match wiring {
            Wiring::Full => self.fusion_heads * self.fusion_head_dim,
            Wiring::ClueNoFusion => self.gat2_dim + self.clue_dim,
            Wiring::NoClueNoFusion => self.gat2_dim,
        }
    }
}

/// Everything needed to rebuild clues and retrieval at inference time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PSetup {
    pub retrieval: FeatureKind,
    pub m: usize,
    pub clue_feature: FeatureKind,
    pub measured: Vec<usize>,
    pub clue_standardizer: Standardizer,
}

/// Inputs for one prediction: retrieved subjects' magnitudes at the target
/// direction, their clues, and the target's clue.
pub struct PInput<'a> {
    pub neighbors: Vec<&'a [f64]>,
    pub neighbor_clues: Vec<Vec<f64>>,
    pub target_clue: Vec<f64>,
}

const CHANNELS: [usize; 5] = [16, 8, 4, 2, 1];

#[derive(Clone, Debug)]
pub struct ModelP {
    pub dims: PDims,
    pub wiring: Wiring,
    pub setup: PSetup,
    pub store: ParamStore,
    pub rff: RffEncoder,
    pub normalizer: Normalizer,
    gat1: GatLayer,
    gat2: GatLayer,
    clue_fc: Option<Dense>,
    fusion: Option<GatLayer>,
    fc1: LoraDense,
    fc2: LoraDense,
    deconvs: [Deconv; 4],
}

impl ModelP {
    pub fn new(dims: PDims, wiring: Wiring, setup: PSetup, normalizer: Normalizer, seed: u64) -> Result<Self, String> {
        dims.validate()?;
        if normalizer.mean.len() != 2 * dims.k {
            return Err(format!("normalizer width {} for K = {}", normalizer.mean.len(), dims.k));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clue_len = 2 + setup.measured.len();
        let rff = RffEncoder::new(clue_len, dims.rff_features, dims.rff_sigma, &mut rng);
        let mut store = ParamStore::new();
        let two_k = 2 * dims.k;
        let gat1 = GatLayer::new(
            &mut store,
            "gat1",
            GatDims { heads: dims.gat1_heads, d_in: two_k, d_head: dims.gat1_head_dim },
            &mut rng,
        );
        let gat2 = GatLayer::new(
            &mut store,
            "gat2",
            GatDims { heads: 1, d_in: gat1.dims.out_dim(), d_head: dims.gat2_dim },
            &mut rng,
        );
        let rff_dim = rff.out_dim();
        let clue_fc = wiring.uses_clue().then(|| Dense::new(&mut store, "clue_fc", rff_dim, dims.clue_dim, &mut rng));
        let fusion = (wiring == Wiring::Full).then(|| {
            GatLayer::new(
                &mut store,
                "fusion",
                GatDims { heads: dims.fusion_heads, d_in: dims.gat2_dim + dims.clue_dim, d_head: dims.fusion_head_dim },
                &mut rng,
            )
        });
        let pooled = dims.pooled_dim(wiring);
        let fc1 = LoraDense::new(&mut store, "fc1", pooled, dims.decoder_hidden, rff_dim, &mut rng);
        let fc2 = LoraDense::new(&mut store, "fc2", dims.decoder_hidden, two_k, rff_dim, &mut rng);
        let deconvs = std::array::from_fn(|i| {
            Deconv::new(&mut store, &format!("deconv{}", i + 1), CHANNELS[i], CHANNELS[i + 1], 4, 2, 1, &mut rng)
        });
        Ok(Self { dims, wiring, setup, store, rff, normalizer, gat1, gat2, clue_fc, fusion, fc1, fc2, deconvs })
    }

    pub fn clue_len(&self) -> usize {
        self.rff.in_dim()
    }

    pub fn gat_layers(&self) -> Vec<&GatLayer> {
        let mut v = vec![&self.gat1, &self.gat2];
        v.extend(self.fusion.as_ref());
        v
    }

    fn rff_rows(&self, clues: &[Vec<f64>]) -> Result<Tensor, AutodiffError> {
        let rows = clues
            .iter()
            .map(|c| self.rff.encode(c).map_err(|e| AutodiffError::ShapeMismatch { op: "rff", detail: e.to_string() }))
            .collect::<Result<Vec<_>, _>>()?;
        Tensor::from_rows(&rows)
    }

    /// Pooled fused feature `[1, pooled]`.
    pub fn encode(&self, ctx: &mut Ctx, input: &PInput, graph: &GraphTensors) -> Result<Var, AutodiffError> {
        let n = input.neighbors.len();
        if n == 0 || input.neighbor_clues.len() != n || graph.node_count() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "encode",
                detail: format!("{n} nodes, {} clues, graph of {}", input.neighbor_clues.len(), graph.node_count()),
            });
        }
        let rows: Vec<Vec<f64>> = input.neighbors.iter().map(|r| self.normalizer.normalize(r)).collect();
        let x = ctx.constant(Tensor::from_rows(&rows)?);
        let g = GraphVars::bind(ctx, graph);
        let h = self.gat1.forward(ctx, x, &g)?;
        let h = self.gat2.forward(ctx, h, &g)?;
        let fused = match (&self.clue_fc, &self.fusion) {
            (None, _) => h,
            (Some(fc), fusion) => {
                let r = ctx.constant(self.rff_rows(&input.neighbor_clues)?);
                let c = fc.forward(ctx, r)?;
                let f = ctx.tape.concat(&[h, c], 1)?;
                match fusion {
                    Some(gat) => gat.forward(ctx, f, &g)?,
                    None => f,
                }
            }
        };
        let s = ctx.tape.sum_axis(fused, 0)?;
        ctx.tape.scale(s, 1.0 / n as f64)
    }

    /// Decoded magnitude `[1, 2K]` in dB.
    pub fn decode(&self, ctx: &mut Ctx, pooled: Var, target_clue: &[f64]) -> Result<Var, AutodiffError> {
        let cond =
            if self.wiring.uses_clue() { Some(ctx.constant(self.rff_rows(&[target_clue.to_vec()])?)) } else { None };
        let z = self.fc1.forward(ctx, pooled, cond)?;
        let z = ctx.tape.elu(z)?;
        let z = self.fc2.forward(ctx, z, cond)?;
        let z = ctx.tape.elu(z)?;
        let mut y = ctx.tape.reshape(z, &[CHANNELS[0], self.dims.k / 8])?;
        for (i, d) in self.deconvs.iter().enumerate() {
            y = d.forward(ctx, y)?;
            if i + 1 < self.deconvs.len() {
                y = ctx.tape.elu(y)?;
            }
        }
        let y = ctx.tape.reshape(y, &[1, 2 * self.dims.k])?;
        self.normalizer.denormalize(ctx, y)
    }

    pub fn forward(&self, ctx: &mut Ctx, input: &PInput, graph: &GraphTensors) -> Result<Var, AutodiffError> {
        let pooled = self.encode(ctx, input, graph)?;
        self.decode(ctx, pooled, &input.target_clue)
    }

    pub fn predict(&self, input: &PInput, graphs: &mut GraphCache) -> Result<Vec<f64>, AutodiffError> {
        let mut ctx = Ctx::new(&self.store, Trainable::Nothing);
        let y = self.forward(&mut ctx, input, graphs.complete(input.neighbors.len()))?;
        Ok(ctx.tape.value(y).data().to_vec())
    }
}

/// Complete-graph tensors keyed by node count.
#[derive(Default)]
pub struct GraphCache {
    complete: HashMap<usize, GraphTensors>,
}

impl GraphCache {
    pub fn complete(&mut self, n: usize) -> &GraphTensors {
        self.complete.entry(n).or_insert_with(|| GraphTensors::new(&Adjacency::complete(n)))
    }
}
