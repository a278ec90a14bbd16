#![allow(dead_code)]

use nlf_core::model::{ModelConfig, RayBatch};
use nlf_core::sampler::PATCH_DIM;
use rand::Rng;

pub fn tiny_config(dim: usize, blocks: usize, views: usize) -> ModelConfig {
    ModelConfig { model_dim: dim, num_blocks: blocks, embedding_dim: 8, num_views: views, ..ModelConfig::default() }
}

/// Random inputs with at least one valid point per ray.
pub fn random_batch(rng: &mut impl Rng, config: &ModelConfig, rays: usize, k: usize, p: usize) -> RayBatch {
    let rows = rays * k * p;
    let enc = config.ray_dim() + config.point_dim();
    let mut uniform = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let target_encoding = uniform(rays * config.ray_dim(), -1.0, 1.0);
    let point_encoding = uniform(rows * enc, -1.0, 1.0);
    let patches = uniform(rows * PATCH_DIM, 0.0, 1.0);
    let colors = uniform(rows * 3, 0.0, 1.0);
    let deltas = (0..rays).flat_map(|_| (0..p).map(|i| 1.0 + i as f64)).collect();
    let mut valid: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.7)).collect();
    for r in 0..rays {
        let i = rng.random_range(0..k * p);
        valid[r * k * p + i] = true;
    }
    let view_ids = (0..rays * k).map(|_| rng.random_range(0..config.num_views)).collect();
    RayBatch {
        rays,
        references: k,
        points: p,
        target_encoding,
        point_encoding,
        patches,
        colors,
        view_ids,
        valid,
        deltas,
    }
}

/// Reorders the views of every ray by `perm`.
pub fn permute_views(batch: &RayBatch, perm: &[usize]) -> RayBatch {
    let (k, p) = (batch.references, batch.points);
    let mut out = batch.clone();
    let enc = batch.point_encoding.len() / batch.valid.len();
    for r in 0..batch.rays {
        for (dst, &src) in perm.iter().enumerate() {
            out.view_ids[r * k + dst] = batch.view_ids[r * k + src];
            for i in 0..p {
                let (d, s) = ((r * k + dst) * p + i, (r * k + src) * p + i);
                copy_row(&mut out, batch, d, s, enc);
            }
        }
    }
    out
}

/// Reorders the points of every view by `perm`.
pub fn permute_points(batch: &RayBatch, perm: &[usize]) -> RayBatch {
    let p = batch.points;
    let mut out = batch.clone();
    let enc = batch.point_encoding.len() / batch.valid.len();
    for g in 0..batch.rays * batch.references {
        for (dst, &src) in perm.iter().enumerate() {
            copy_row(&mut out, batch, g * p + dst, g * p + src, enc);
        }
    }
    out
}

fn copy_row(out: &mut RayBatch, src: &RayBatch, d: usize, s: usize, enc: usize) {
    out.valid[d] = src.valid[s];
    out.point_encoding[d * enc..(d + 1) * enc].copy_from_slice(&src.point_encoding[s * enc..(s + 1) * enc]);
    out.patches[d * PATCH_DIM..(d + 1) * PATCH_DIM].copy_from_slice(&src.patches[s * PATCH_DIM..(s + 1) * PATCH_DIM]);
    out.colors[d * 3..(d + 1) * 3].copy_from_slice(&src.colors[s * 3..(s + 1) * 3]);
}
