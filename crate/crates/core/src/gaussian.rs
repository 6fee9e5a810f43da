//! Random Fourier feature encoder approximating an RBF kernel:
//! `z(x) = sqrt(2/D) * cos(x.W + b)` with `W ~ N(0, 1/sigma^2)` and
//! `b ~ U[0, 2pi)`, so that `z(x).z(y) ~= exp(-|x-y|^2 / (2 sigma^2))`.
//!
//! The projection is frozen: it is sampled once per seed, never trained,
//! and its output enters the model graph as a constant.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GaussianProjection {
    /// `[d_in, n_features]`
    pub weights: Tensor,
    /// `[n_features]`
    pub offsets: Tensor,
    pub sigma: f64,
    pub seed: u64,
}

impl GaussianProjection {
    pub fn d_in(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_features(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Samples a projection. The same seed reproduces weights and offsets
/// bit-exactly.
pub fn sample_projection(
    seed: u64,
    d_in: usize,
    n_features: usize,
    sigma: f64,
) -> Result<GaussianProjection> {
    if sigma <= 0.0 {
        return Err(Error::Param(format!("sigma must be positive, got {sigma}")));
    }
    if d_in == 0 || n_features == 0 {
        return Err(Error::Param(format!(
            "projection dimensions must be positive, got d_in={d_in}, n_features={n_features}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / sigma).expect("std checked above");
    let weights: Vec<f64> = (0..d_in * n_features)
        .map(|_| normal.sample(&mut rng))
        .collect();
    let offsets: Vec<f64> = (0..n_features).map(|_| rng.gen_range(0.0..TAU)).collect();
    Ok(GaussianProjection {
        weights: Tensor::from_vec(vec![d_in, n_features], weights)?,
        offsets: Tensor::vector(offsets),
        sigma,
        seed,
    })
}

/// Feature map for a single input vector of length `d_in`.
pub fn gaussian_transform(x: &Tensor, proj: &GaussianProjection) -> Result<Tensor> {
    if x.shape() != [proj.d_in()] {
        return Err(Error::Dim(format!(
            "gaussian_transform expects input [{}], got {:?}",
            proj.d_in(),
            x.shape()
        )));
    }
    let d = proj.n_features();
    let scale = (2.0 / d as f64).sqrt();
    let mut out = proj.offsets.data().to_vec();
    for (i, &xv) in x.data().iter().enumerate() {
        let wrow = &proj.weights.data()[i * d..(i + 1) * d];
        for j in 0..d {
            out[j] += xv * wrow[j];
        }
    }
    for v in &mut out {
        *v = scale * v.cos();
    }
    Ok(Tensor::vector(out))
}

/// Applies the feature map per timestep of an `[L, d_in]` signal and mean
/// pools over time, yielding one fixed-size summary vector.
pub fn encode_sequence(signal: &Tensor, proj: &GaussianProjection) -> Result<Tensor> {
    let s = signal.shape();
    if s.len() != 2 || s[1] != proj.d_in() {
        return Err(Error::Dim(format!(
            "encode_sequence expects [L, {}], got {s:?}",
            proj.d_in()
        )));
    }
    let (l, c) = (s[0], s[1]);
    let d = proj.n_features();
    let mut acc = vec![0.0; d];
    for t in 0..l {
        let row = Tensor::vector(signal.data()[t * c..(t + 1) * c].to_vec());
        let z = gaussian_transform(&row, proj)?;
        for (a, v) in acc.iter_mut().zip(z.data()) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= l as f64;
    }
    Ok(Tensor::vector(acc))
}
