//! Patch tokenization: per-patch normalization, a small shared per-point
//! network with max pooling, and a positional MLP over patch centers.
//!
//! Pooling runs over per-patch index lists. That is semantically identical
//! to materializing the N×N co-membership matrix H and max-pooling the rows
//! where H is one, but needs O(N·D) memory instead of O(N²); the equivalence
//! is pinned by a test against the materialized-H oracle.

use rand::Rng;

use crate::diffcore::{Graph, Tensor, Var};
use crate::geometry::PointCloud;
use crate::transport::PatchSet;

/// Learnable tensors of the embedding stage: a two-stage per-point network
/// (3 -> hidden, then [point; pooled] -> dim) and a two-layer positional MLP.
#[derive(Clone, Debug)]
pub struct EmbedParams {
    pub point1_w: Tensor,
    pub point1_b: Tensor,
    pub point2_w: Tensor,
    pub point2_b: Tensor,
    pub pos1_w: Tensor,
    pub pos1_b: Tensor,
    pub pos2_w: Tensor,
    pub pos2_b: Tensor,
}

impl EmbedParams {
    pub fn init(hidden: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let std1 = (2.0 / (3 + hidden) as f64).sqrt();
        let std2 = (2.0 / (2 * hidden + dim) as f64).sqrt();
        let stdp1 = (2.0 / (3 + hidden) as f64).sqrt();
        let stdp2 = (2.0 / (hidden + dim) as f64).sqrt();
        EmbedParams {
            point1_w: Tensor::randn(vec![3, hidden], std1, rng),
            point1_b: Tensor::zeros(vec![hidden]),
            point2_w: Tensor::randn(vec![2 * hidden, dim], std2, rng),
            point2_b: Tensor::zeros(vec![dim]),
            pos1_w: Tensor::randn(vec![3, hidden], stdp1, rng),
            pos1_b: Tensor::zeros(vec![hidden]),
            pos2_w: Tensor::randn(vec![hidden, dim], stdp2, rng),
            pos2_b: Tensor::zeros(vec![dim]),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.point1.weight"), &self.point1_w);
        f(format!("{prefix}.point1.bias"), &self.point1_b);
        f(format!("{prefix}.point2.weight"), &self.point2_w);
        f(format!("{prefix}.point2.bias"), &self.point2_b);
        f(format!("{prefix}.pos1.weight"), &self.pos1_w);
        f(format!("{prefix}.pos1.bias"), &self.pos1_b);
        f(format!("{prefix}.pos2.weight"), &self.pos2_w);
        f(format!("{prefix}.pos2.bias"), &self.pos2_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.point1.weight"), &mut self.point1_w);
        f(format!("{prefix}.point1.bias"), &mut self.point1_b);
        f(format!("{prefix}.point2.weight"), &mut self.point2_w);
        f(format!("{prefix}.point2.bias"), &mut self.point2_b);
        f(format!("{prefix}.pos1.weight"), &mut self.pos1_w);
        f(format!("{prefix}.pos1.bias"), &mut self.pos1_b);
        f(format!("{prefix}.pos2.weight"), &mut self.pos2_w);
        f(format!("{prefix}.pos2.bias"), &mut self.pos2_b);
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EmbedVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        EmbedVars {
            point1_w: leaf(&self.point1_w),
            point1_b: leaf(&self.point1_b),
            point2_w: leaf(&self.point2_w),
            point2_b: leaf(&self.point2_b),
            pos1_w: leaf(&self.pos1_w),
            pos1_b: leaf(&self.pos1_b),
            pos2_w: leaf(&self.pos2_w),
            pos2_b: leaf(&self.pos2_b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EmbedVars {
    pub point1_w: Var,
    pub point1_b: Var,
    pub point2_w: Var,
    pub point2_b: Var,
    pub pos1_w: Var,
    pub pos1_b: Var,
    pub pos2_w: Var,
    pub pos2_b: Var,
}

/// Patch tokens on the graph: patch embeddings E, positional embeddings PE,
/// and their sum F, each L×D.
#[derive(Clone, Copy, Debug)]
pub struct PatchTokens {
    pub e: Var,
    pub pe: Var,
    pub f: Var,
}

/// Per-patch coordinates with the patch center subtracted.
pub fn normalize_patches(patches: &PatchSet, cloud: &PointCloud) -> Vec<Tensor> {
    patches
        .patch_points
        .iter()
        .enumerate()
        .map(|(j, members)| {
            let c = patches.centers[j];
            let mut data = Vec::with_capacity(members.len() * 3);
            for &i in members {
                let p = cloud.points[i];
                data.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            }
            Tensor::matrix(members.len(), 3, data)
        })
        .collect()
}

/// Shared per-point network with in-patch max pooling: stage one lifts each
/// point to `hidden`, the patch max is concatenated back per point, stage
/// two maps to `dim`, and the patch embedding is the stage-two max.
pub fn mini_pointnet_forward(g: &mut Graph, centered: &[Tensor], p: &EmbedVars) -> Var {
    let mut rows = Vec::with_capacity(centered.len());
    for patch in centered {
        let n = patch.rows();
        let x = g.constant(patch.clone());
        let h1 = g.matmul(x, p.point1_w);
        let h1 = g.add_row(h1, p.point1_b);
        let h1 = g.silu(h1);
        let pooled = g.max_rows(h1);
        let tiled = g.repeat_row(pooled, n);
        let cat = g.concat_cols(&[h1, tiled]);
        let h2 = g.matmul(cat, p.point2_w);
        let h2 = g.add_row(h2, p.point2_b);
        let h2 = g.silu(h2);
        rows.push(g.max_rows(h2));
    }
    g.concat_rows(&rows)
}

/// Two-layer MLP over patch center coordinates.
pub fn positional_embedding(g: &mut Graph, centers: &Tensor, p: &EmbedVars) -> Var {
    let c = g.constant(centers.clone());
    let h = g.matmul(c, p.pos1_w);
    let h = g.add_row(h, p.pos1_b);
    let h = g.silu(h);
    let out = g.matmul(h, p.pos2_w);
    g.add_row(out, p.pos2_b)
}

pub fn centers_tensor(patches: &PatchSet) -> Tensor {
    let mut data = Vec::with_capacity(patches.centers.len() * 3);
    for c in &patches.centers {
        data.extend_from_slice(c);
    }
    Tensor::matrix(patches.centers.len(), 3, data)
}

/// Full embedding stage: F = E + PE.
pub fn embed(g: &mut Graph, patches: &PatchSet, cloud: &PointCloud, p: &EmbedVars) -> PatchTokens {
    let centered = normalize_patches(patches, cloud);
    let e = mini_pointnet_forward(g, &centered, p);
    let centers = centers_tensor(patches);
    let pe = positional_embedding(g, &centers, p);
    let f = g.add(e, pe);
    PatchTokens { e, pe, f }
}
