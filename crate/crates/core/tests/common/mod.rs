#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use indo::network::Network;
use indo::objectives::{logistic_from_dataset, Dataset, ProblemInstance, QuadraticNode};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn ring(nodes: usize) -> Network {
    circulant(nodes, &[1])
}

pub fn complete(nodes: usize) -> Network {
    let adj = (0..nodes).map(|i| (0..nodes).filter(|&j| j != i).collect()).collect();
    Network::from_adjacency(adj).unwrap()
}

/// Node `i` linked to `i +- s` for every offset `s`.
pub fn circulant(nodes: usize, offsets: &[usize]) -> Network {
    let adj = (0..nodes)
        .map(|i| {
            let mut v: Vec<usize> =
                offsets.iter().flat_map(|&s| [(i + s) % nodes, (i + nodes - s) % nodes]).filter(|&j| j != i).collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    Network::from_adjacency(adj).unwrap()
}

pub fn path(nodes: usize) -> Network {
    let adj = (0..nodes)
        .map(|i| {
            let mut v = Vec::new();
            if i > 0 {
                v.push(i - 1);
            }
            if i + 1 < nodes {
                v.push(i + 1);
            }
            v
        })
        .collect();
    Network::from_adjacency(adj).unwrap()
}

/// Random quadratic with every local spectrum inside `[lo, hi]`.
pub fn quadratic_with_spectrum(dim: usize, nodes: usize, lo: f64, hi: f64, seed: u64) -> ProblemInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = Uniform::new_inclusive(lo, hi).unwrap();
    let blocks = (0..nodes)
        .map(|_| {
            let g: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
            let basis = SymmetricEigen::new(&g + g.transpose()).eigenvectors;
            let scales = DVector::from_fn(dim, |_, _| spread.sample(&mut rng));
            let b = &basis * DMatrix::from_diagonal(&scales) * basis.transpose();
            let center = DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0));
            QuadraticNode { matrix: (&b + b.transpose()) * 0.5, center }
        })
        .collect();
    ProblemInstance::quadratic(blocks).unwrap()
}

/// Linearly separable-ish Gaussian classification data.
pub fn synthetic_dataset(samples: usize, dim: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
    let features: DMatrix<f64> = DMatrix::from_fn(samples, dim, |_, _| StandardNormal.sample(&mut rng));
    let labels = (0..samples)
        .map(|r| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            if features.row(r).transpose().dot(&truth) + 0.5 * noise >= 0.0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    Dataset::new(features, labels).unwrap()
}

pub fn synthetic_logistic(samples: usize, dim: usize, nodes: usize, seed: u64) -> ProblemInstance {
    logistic_from_dataset(&synthetic_dataset(samples, dim, seed), nodes, 1e-2, seed).unwrap()
}

/// Writes a dataset in LIBSVM text format.
pub fn write_libsvm(dataset: &Dataset, path: &Path) {
    let mut out = std::fs::File::create(path).unwrap();
    for (r, &label) in dataset.labels.iter().enumerate() {
        write!(out, "{}", if label > 0.0 { "+1" } else { "-1" }).unwrap();
        for c in 0..dataset.dim() {
            let v = dataset.features[(r, c)];
            if v != 0.0 {
                write!(out, " {}:{}", c + 1, v).unwrap();
            }
        }
        writeln!(out).unwrap();
    }
}
