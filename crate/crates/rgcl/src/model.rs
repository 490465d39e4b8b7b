//! Embedding table, L-layer linear propagation, mean aggregation with
//! optional per-layer perturbations, and inner-product scoring.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::dataset::ImplicitDataset;
use crate::graph::{propagate, NormalizedAdjacency};
use crate::linalg::Mat;

/// Xavier-uniform embedding table: entries i.i.d. uniform on
/// `[-a, a]` with `a = sqrt(3/d)` (fan-in = fan-out = d), deterministic
/// under `seed`.
pub fn init_embeddings(num_nodes: usize, dim: usize, seed: u64) -> Mat {
    assert!(dim >= 1, "embedding dimension must be positive");
    let a = (3.0 / dim as f64).sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data = (0..num_nodes * dim)
        .map(|_| rng.gen_range(-a..=a))
        .collect();
    Mat::from_vec(num_nodes, dim, data)
}

/// Per-layer node representations `H^(0..L)`, `H^(0) = E`.
#[derive(Debug, Clone)]
pub struct LayerStack {
    pub layers: Vec<Mat>,
}

impl LayerStack {
    /// Number of propagation layers L (the stack holds L+1 matrices).
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn num_nodes(&self) -> usize {
        self.layers[0].rows()
    }
}

/// Run `num_layers` propagation steps from `e`.
pub fn forward(adj: &NormalizedAdjacency, e: &Mat, num_layers: usize) -> LayerStack {
    let mut layers = Vec::with_capacity(num_layers + 1);
    layers.push(e.clone());
    for _ in 0..num_layers {
        let next = propagate(adj, layers.last().unwrap());
        layers.push(next);
    }
    LayerStack { layers }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PerturbationError {
    #[error("layer 0 holds raw features and cannot be perturbed")]
    LayerZero,
    #[error("layer {0} exceeds the stack depth")]
    LayerOutOfRange(usize),
    #[error("perturbation dimension {0} does not match embedding dimension {1}")]
    DimMismatch(usize, usize),
}

/// Sparse per-(node, layer) perturbation vectors for layers `1..=L`;
/// absent entries mean zero. Layer 0 is rejected.
#[derive(Debug, Clone, Default)]
pub struct LayerPerturbations {
    entries: BTreeMap<(usize, usize), Vec<f64>>,
}

impl LayerPerturbations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        node: usize,
        layer: usize,
        vector: Vec<f64>,
        stack: &LayerStack,
    ) -> Result<(), PerturbationError> {
        if layer == 0 {
            return Err(PerturbationError::LayerZero);
        }
        if layer > stack.depth() {
            return Err(PerturbationError::LayerOutOfRange(layer));
        }
        if vector.len() != stack.dim() {
            return Err(PerturbationError::DimMismatch(vector.len(), stack.dim()));
        }
        match self.entries.entry((node, layer)) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(vector);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                for (acc, v) in e.get_mut().iter_mut().zip(vector.iter()) {
                    *acc += *v;
                }
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &Vec<f64>)> {
        self.entries.iter()
    }
}

/// Mean aggregation: `Z_n = (1/(L+1)) * sum_l (H_n^(l) + p_n^(l))` with
/// `p^(0) = 0` and missing perturbations treated as zero.
pub fn aggregate(stack: &LayerStack, perturb: Option<&LayerPerturbations>) -> Mat {
    let count = stack.layers.len() as f64;
    let mut z = stack.layers[0].clone();
    for layer in &stack.layers[1..] {
        z.add_assign(layer);
    }
    if let Some(p) = perturb {
        for (&(node, _layer), vector) in p.iter() {
            crate::linalg::axpy(z.row_mut(node), 1.0, vector);
        }
    }
    z.scale_in_place(1.0 / count);
    z
}

/// Predicted preference of user `u` for item `i`: the inner product of
/// their aggregated representations.
pub fn score(z: &Mat, num_users: usize, u: usize, i: usize) -> f64 {
    assert!(u < num_users, "user index out of range");
    let item_row = num_users + i;
    assert!(item_row < z.rows(), "item index out of range");
    crate::linalg::dot(z.row(u), z.row(item_row))
}

/// Write the aggregated representations and the raw embedding table as
/// tab-separated text with a `kind token v0..v{d-1}` header, one file
/// each (`<prefix>.final.tsv`, `<prefix>.raw.tsv`).
pub fn export_embeddings(
    prefix: &Path,
    ds: &ImplicitDataset,
    z: &Mat,
    e: &Mat,
) -> std::io::Result<()> {
    for (suffix, mat) in [("final", z), ("raw", e)] {
        let path = prefix.with_extension(format!("{suffix}.tsv"));
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(w, "kind\ttoken")?;
        for c in 0..mat.cols() {
            write!(w, "\tv{c}")?;
        }
        writeln!(w)?;
        for (u, token) in ds.user_tokens.iter().enumerate() {
            write!(w, "user\t{token}")?;
            for v in mat.row(u) {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        for (i, token) in ds.item_tokens.iter().enumerate() {
            write!(w, "item\t{token}")?;
            for v in mat.row(ds.num_users + i) {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
    }
    Ok(())
}
