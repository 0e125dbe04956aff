//! Upsampling network: two GAT layers over a spatial graph, then a dense
//! head applied to the target node.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tensor, Var};
use crate::graphs::{Direction, GraphError, SpatialLayout, SpatialParams};
use crate::nn::{Ctx, Dense, GatDims, GatLayer, GraphTensors, GraphVars, Normalizer, Trainable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UDims {
    #[serde(rename = "K")]
    pub k: usize,
    pub gat1_heads: usize,
    pub gat1_head_dim: usize,
    pub gat2_dim: usize,
}

impl UDims {
    pub fn for_k(k: usize) -> Self {
        Self { k, gat1_heads: 8, gat1_head_dim: 128, gat2_dim: 2 * k }
    }

    pub fn validate(&self) -> Result<(), String> {
        if [self.k, self.gat1_heads, self.gat1_head_dim, self.gat2_dim].contains(&0) {
            return Err("all HRTF-U widths must be positive".into());
        }
        Ok(())
    }
}

/// Spatial graph geometry around one target direction, ready for attention.
#[derive(Clone, Debug)]
pub struct SpatialStencil {
    pub layout: SpatialLayout,
    pub tensors: GraphTensors,
}

impl SpatialStencil {
    pub fn new(layout: SpatialLayout) -> Self {
        let tensors = GraphTensors::new(&layout.adjacency);
        Self { layout, tensors }
    }

    /// One stencil per direction, each excluding its own target.
    pub fn leave_one_out(directions: &[Direction], params: &SpatialParams) -> Result<Vec<Self>, GraphError> {
        directions.iter().map(|&d| SpatialLayout::around(directions, d, params, true).map(Self::new)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ModelU {
    pub dims: UDims,
    pub spatial: SpatialParams,
    pub store: ParamStore,
    pub normalizer: Normalizer,
    gat1: GatLayer,
    gat2: GatLayer,
    fc: Dense,
}

impl ModelU {
    pub fn new(dims: UDims, spatial: SpatialParams, normalizer: Normalizer, seed: u64) -> Result<Self, String> {
        dims.validate()?;
        spatial.validate().map_err(|e| e.to_string())?;
        let two_k = 2 * dims.k;
        if normalizer.mean.len() != two_k {
            return Err(format!("normalizer width {} for K = {}", normalizer.mean.len(), dims.k));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
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
        let fc = Dense::new(&mut store, "fc", dims.gat2_dim, two_k, &mut rng);
        Ok(Self { dims, spatial, store, normalizer, gat1, gat2, fc })
    }

    /// Parameters touched by fine-tuning.
    pub fn head_params(&self) -> Vec<ParamId> {
        vec![self.fc.w, self.fc.b]
    }

    pub fn gat_layers(&self) -> [&GatLayer; 2] {
        [&self.gat1, &self.gat2]
    }

    /// Node matrix: normalized neighbor rows followed by the all-ones target row.
    pub fn node_matrix(&self, neighbors: &[&[f64]]) -> Result<Tensor, AutodiffError> {
        let mut rows: Vec<Vec<f64>> = neighbors.iter().map(|r| self.normalizer.normalize(r)).collect();
        rows.push(vec![1.0; 2 * self.dims.k]);
        Tensor::from_rows(&rows)
    }

    /// Target-node feature after the GAT stack, `[1, gat2_dim]`.
    pub fn target_feature(
        &self,
        ctx: &mut Ctx,
        neighbors: &[&[f64]],
        stencil: &SpatialStencil,
    ) -> Result<Var, AutodiffError> {
        if neighbors.len() != stencil.layout.neighbors.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "forward_u",
                detail: format!("{} neighbor rows for {} graph nodes", neighbors.len(), stencil.layout.neighbors.len()),
            });
        }
        let x = ctx.constant(self.node_matrix(neighbors)?);
        let g = GraphVars::bind(ctx, &stencil.tensors);
        let h = self.gat1.forward(ctx, x, &g)?;
        let h = self.gat2.forward(ctx, h, &g)?;
        let t = stencil.layout.target_index();
        ctx.tape.slice(h, 0, t, t + 1)
    }

    /// Dense head plus de-normalization, giving dB `[1, 2K]`.
    pub fn head(&self, ctx: &mut Ctx, feature: Var) -> Result<Var, AutodiffError> {
        let y = self.fc.forward(ctx, feature)?;
        self.normalizer.denormalize(ctx, y)
    }

    pub fn forward(&self, ctx: &mut Ctx, neighbors: &[&[f64]], stencil: &SpatialStencil) -> Result<Var, AutodiffError> {
        let z = self.target_feature(ctx, neighbors, stencil)?;
        self.head(ctx, z)
    }

    pub fn predict(&self, neighbors: &[&[f64]], stencil: &SpatialStencil) -> Result<Vec<f64>, AutodiffError> {
        let mut ctx = Ctx::new(&self.store, Trainable::Nothing);
        let y = self.forward(&mut ctx, neighbors, stencil)?;
        Ok(ctx.tape.value(y).data().to_vec())
    }

    /// Cached target features for a whole field, one per stencil.
    pub fn field_features(
        &self,
        field: &[Vec<f64>],
        stencils: &[SpatialStencil],
    ) -> Result<Vec<Tensor>, AutodiffError> {
        stencils
            .iter()
            .map(|s| {
                let rows: Vec<&[f64]> = s.layout.neighbors.iter().map(|&i| field[i].as_slice()).collect();
                let mut ctx = Ctx::new(&self.store, Trainable::Nothing);
                let z = self.target_feature(&mut ctx, &rows, s)?;
                Ok(ctx.tape.value(z).clone())
            })
            .collect()
    }

    pub fn predict_from_feature(&self, feature: &Tensor) -> Result<Vec<f64>, AutodiffError> {
        let mut ctx = Ctx::new(&self.store, Trainable::Nothing);
        let z = ctx.constant(feature.clone());
        let y = self.head(&mut ctx, z)?;
        Ok(ctx.tape.value(y).data().to_vec())
    }
}
