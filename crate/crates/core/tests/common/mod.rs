#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;

use rsnet::autodiff::{randn, Tensor};
use rsnet::graph::SkeletonTopology;
use rsnet::model::RsNet;

/// Random spanning tree on `n` nodes plus extra edges with probability `p`,
/// then randomly relabeled.
pub fn random_connected_graph<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> SkeletonTopology {
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((rng.random_range(0..i), i));
    }
    for i in 0..n {
        for j in i + 1..n {
            if !edges.contains(&(i, j)) && rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    SkeletonTopology::from_edges(n, edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect())
        .expect("connected by construction")
}

/// Overwrites every parameter with `scale · N(0, 1)`.
pub fn randomize_params<R: Rng + ?Sized>(model: &mut RsNet, scale: f64, rng: &mut R) {
    for t in model.params.tensors_mut() {
        *t = randn(t.rows(), t.cols(), rng).scale(scale);
    }
}

/// Copies `src` parameters into `dst`, a model over the skeleton relabeled
/// by `perm` (old joint `i` becomes `perm[i]`).
pub fn permute_params_into(src: &RsNet, dst: &mut RsNet, perm: &[usize]) {
    let n = perm.len();
    let block_cols = |t: &Tensor| {
        let mut out = t.clone();
        for r in 0..t.rows() {
            for (i, &pi) in perm.iter().enumerate() {
                for c in 0..3 {
                    out[(r, 3 * pi + c)] = t[(r, 3 * i + c)];
                }
            }
        }
        out
    };
    for (name, t) in src.params.iter() {
        let last = name.rsplit('.').next().unwrap_or(name);
        let per_node_modulation =
            last.starts_with('m') && last[1..].chars().all(|c| c.is_ascii_digit());
        let value = if name == "adjacency_modulation" {
            t.permute_symmetric(perm)
        } else if per_node_modulation {
            t.permute_rows(perm)
        } else if name == "refine.fc1" {
            block_cols(&t.transpose()).transpose()
        } else if name == "refine.fc2" || name == "refine.b2" {
            block_cols(t)
        } else {
            assert!(t.rows() != n, "unhandled per-node parameter {name}");
            t.clone()
        };
        dst.params.set(name, value).unwrap();
    }
}

/// Relabels the rows of every `n`-row block of a batched tensor.
pub fn permute_blocks(t: &Tensor, n: usize, perm: &[usize]) -> Tensor {
    let mut out = t.clone();
    for b in 0..t.rows() / n {
        for (i, &pi) in perm.iter().enumerate() {
            out.row_mut(b * n + pi).copy_from_slice(t.row(b * n + i));
        }
    }
    out
}
