//! Symmetric-normalized bipartite adjacency in compressed sparse row
//! form, and the one-layer propagation kernel `H -> Â·H`.
//!
//! Users occupy node ids `[0, M)`, items are offset into `[M, M+N)`.
//! Every interaction contributes both directed entries with weight
//! `1/sqrt(deg(a)·deg(b))`, so the matrix is symmetric and its spectral
//! norm is at most 1.

use rayon::prelude::*;

use crate::dataset::ImplicitDataset;
use crate::linalg::Mat;

#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    num_nodes: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
    degrees: Vec<u32>,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn degree(&self, node: usize) -> u32 {
        self.degrees[node]
    }

    /// Column indices and weights of one row, ascending by column.
    pub fn row(&self, node: usize) -> (&[u32], &[f64]) {
        let lo = self.row_ptr[node];
        let hi = self.row_ptr[node + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }
}

/// Build the normalized adjacency over the train split.
pub fn build_adjacency(ds: &ImplicitDataset) -> NormalizedAdjacency {
    assert!(!ds.train.is_empty(), "train split is empty");
    let m = ds.num_users;
    let num_nodes = m + ds.num_items;
    let mut degrees = vec![0u32; num_nodes];
    for &(u, i) in &ds.train {
        assert!((u as usize) < m && (i as usize) < ds.num_items);
        degrees[u as usize] += 1;
        degrees[m + i as usize] += 1;
    }
    // dataset construction guarantees every index appears in train
    assert!(
        degrees.iter().all(|&d| d > 0),
        "zero-degree node in train split"
    );

    let mut row_ptr = vec![0usize; num_nodes + 1];
    for (node, &d) in degrees.iter().enumerate() {
        row_ptr[node + 1] = row_ptr[node] + d as usize;
    }
    let nnz = row_ptr[num_nodes];
    let mut col_idx = vec![0u32; nnz];
    let mut cursor = row_ptr.clone();
    for &(u, i) in &ds.train {
        let item_node = (m + i as usize) as u32;
        col_idx[cursor[u as usize]] = item_node;
        cursor[u as usize] += 1;
        col_idx[cursor[item_node as usize]] = u;
        cursor[item_node as usize] += 1;
    }
    for node in 0..num_nodes {
        col_idx[row_ptr[node]..row_ptr[node + 1]].sort_unstable();
    }
    let mut values = vec![0.0; nnz];
    for node in 0..num_nodes {
        let da = degrees[node] as f64;
        for e in row_ptr[node]..row_ptr[node + 1] {
            let db = degrees[col_idx[e] as usize] as f64;
            values[e] = 1.0 / (da * db).sqrt();
        }
    }
    NormalizedAdjacency {
        num_nodes,
        row_ptr,
        col_idx,
        values,
        degrees,
    }
}

/// One propagation layer: returns `Â·H`. Output rows are computed in
/// parallel over fixed-size row blocks; the accumulation order inside a
/// row is the fixed CSR order, so results are bitwise reproducible.
pub fn propagate(adj: &NormalizedAdjacency, h: &Mat) -> Mat {
    assert_eq!(h.rows(), adj.num_nodes, "row count must match node count");
    let d = h.cols();
    let mut out = Mat::zeros(adj.num_nodes, d);
    const BLOCK_ROWS: usize = 64;
    out.data_mut()
        .par_chunks_mut(d * BLOCK_ROWS)
        .enumerate()
        .for_each(|(block, chunk)| {
            let first = block * BLOCK_ROWS;
            for (local, out_row) in chunk.chunks_mut(d).enumerate() {
                let node = first + local;
                let lo = adj.row_ptr[node];
                let hi = adj.row_ptr[node + 1];
                for e in lo..hi {
                    let src = h.row(adj.col_idx[e] as usize);
                    let w = adj.values[e];
                    for (o, s) in out_row.iter_mut().zip(src.iter()) {
                        *o += w * *s;
                    }
                }
            }
        });
    out
}
