//! The shallow adapter network placed on top of frozen embeddings.
//!
//! Four `dim -> dim` fully connected layers. Every layer is followed by batch
//! normalization; the first three additionally by a leaky rectifier. The
//! output is not normalized here; comparisons normalize it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchNormState, BatchStats, Mode, Tape, Var};
use crate::embedding::{normalize_slice, Embedding};
use crate::embedding::io::LeReader;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const LAYERS: usize = 4;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
const MAGIC: &[u8; 5] = b"TETR1";

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `dim x dim`, row `j` holds the weights of output unit `j`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    dim: usize,
    leaky_slope: f64,
    pub layers: Vec<LinearLayer>,
    pub norms: Vec<BatchNormState>,
}

/// Tape handles for every trainable tensor, in layer order.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub gammas: Vec<Var>,
    pub betas: Vec<Var>,
}

impl AdapterVars {
    /// Flat order: per layer `W, b, gamma, beta`.
    pub fn flat(&self) -> Vec<Var> {
        (0..self.weights.len())
            .flat_map(|i| [self.weights[i], self.biases[i], self.gammas[i], self.betas[i]])
            .collect()
    }
}

/// Rectifier-aware initialization: `N(0, 2 / ((1 + slope^2) dim))` weights,
/// zero biases, identity batch-norm affine, running stats `(0, 1)`.
pub fn init_adapter(dim: usize, seed: u64) -> Result<AdapterParams> {
    init_adapter_with_slope(dim, DEFAULT_LEAKY_SLOPE, seed)
}

pub fn init_adapter_with_slope(dim: usize, leaky_slope: f64, seed: u64) -> Result<AdapterParams> {
    if dim == 0 {
        return Err(Error::ConfigInvalid("adapter dimension must be positive".into()));
    }
    if !(leaky_slope > 0.0 && leaky_slope < 1.0) {
        return Err(Error::ConfigInvalid(format!("leaky slope {leaky_slope} outside (0, 1)")));
    }
    let std = (2.0 / ((1.0 + leaky_slope * leaky_slope) * dim as f64)).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..LAYERS)
        .map(|_| {
            let data = (0..dim * dim).map(|_| normal.sample(&mut rng)).collect();
            LinearLayer { weight: Matrix::from_vec(dim, dim, data).unwrap(), bias: vec![0.0; dim] }
        })
        .collect();
    let norms = (0..LAYERS).map(|_| BatchNormState::new(dim)).collect();
    Ok(AdapterParams { dim, leaky_slope, layers, norms })
}

impl AdapterParams {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    /// Places every trainable tensor on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape) -> AdapterVars {
        let mut vars = AdapterVars {
            weights: Vec::with_capacity(LAYERS),
            biases: Vec::with_capacity(LAYERS),
            gammas: Vec::with_capacity(LAYERS),
            betas: Vec::with_capacity(LAYERS),
        };
        for (layer, bn) in self.layers.iter().zip(&self.norms) {
            vars.weights.push(tape.leaf(layer.weight.clone()));
            vars.biases.push(tape.leaf(Matrix::row_vector(layer.bias.clone())));
            vars.gammas.push(tape.leaf(Matrix::row_vector(bn.gamma.clone())));
            vars.betas.push(tape.leaf(Matrix::row_vector(bn.beta.clone())));
        }
        vars
    }

    /// Records `(FC -> BN -> LReLU) x 3 -> FC -> BN` on `tape`.
    ///
    /// In train mode the per-layer batch statistics are returned so the
    /// caller can fold them into the running stats with
    /// [`AdapterParams::absorb_batch_stats`].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &AdapterVars,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let cols = tape.value(x).cols();
        if cols != self.dim {
            return Err(Error::dims(self.dim, cols));
        }
        let mut h = x;
        let mut stats = Vec::new();
        for i in 0..LAYERS {
            h = tape.linear(h, vars.weights[i], vars.biases[i])?;
            let (bn, s) = tape.batch_norm(h, vars.gammas[i], vars.betas[i], &self.norms[i], mode)?;
            h = bn;
            stats.extend(s);
            if i + 1 < LAYERS {
                h = tape.leaky_relu(h, self.leaky_slope);
            }
        }
        Ok((h, stats))
    }

    pub fn absorb_batch_stats(&mut self, stats: &[BatchStats]) {
        for (bn, s) in self.norms.iter_mut().zip(stats) {
            bn.update_running(s);
        }
    }

    /// Eval-mode forward of a batch; mutates nothing.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let input = tape.leaf(x.clone());
        let (out, _) = self.forward_on_tape(&mut tape, &vars, input, Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Train-mode forward: batch statistics normalize and update running stats.
    pub fn forward_train(&mut self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let input = tape.leaf(x.clone());
        let (out, stats) = self.forward_on_tape(&mut tape, &vars, input, Mode::Train)?;
        self.absorb_batch_stats(&stats);
        Ok(tape.value(out).clone())
    }

    /// Hardened, unit-norm version of a single embedding.
    pub fn transform(&self, e: &Embedding) -> Result<Embedding> {
        if e.dim() != self.dim {
            return Err(Error::dims(self.dim, e.dim()));
        }
        let out = self.forward(&Matrix::row_vector(e.as_slice().to_vec()))?;
        Embedding::new(normalize_slice(out.row(0))?)
    }

    /// Row-wise [`AdapterParams::transform`] over a batch.
    pub fn transform_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = self.forward(x)?;
        for r in 0..out.rows() {
            let n = normalize_slice(out.row(r))?;
            out.row_mut(r).copy_from_slice(&n);
        }
        Ok(out)
    }

    /// Flat list of trainable tensors in the order of [`AdapterVars::flat`].
    pub fn parameters(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .zip(&self.norms)
            .flat_map(|(l, bn)| {
                [
                    l.weight.clone(),
                    Matrix::row_vector(l.bias.clone()),
                    Matrix::row_vector(bn.gamma.clone()),
                    Matrix::row_vector(bn.beta.clone()),
                ]
            })
            .collect()
    }

    /// Visits each trainable tensor mutably, in flat order.
    pub fn for_each_parameter_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        for (i, (l, bn)) in self.layers.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            f(4 * i, l.weight.data_mut());
            f(4 * i + 1, &mut l.bias);
            f(4 * i + 2, &mut bn.gamma);
            f(4 * i + 3, &mut bn.beta);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
            && self.norms.iter().all(|bn| {
                [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                    .iter()
                    .all(|v| v.iter().all(|x| x.is_finite()))
            })
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(MAGIC)?;
        let dim = u32::try_from(self.dim).map_err(|_| Error::Format("dimension too large".into()))?;
        out.write_all(&dim.to_le_bytes())?;
        out.write_all(&self.leaky_slope.to_le_bytes())?;
        let mut put = |vals: &[f64]| -> Result<()> {
            for v in vals {
                out.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        for (l, bn) in self.layers.iter().zip(&self.norms) {
            put(l.weight.data())?;
            put(&l.bias)?;
            put(&bn.gamma)?;
            put(&bn.beta)?;
            put(&bn.running_mean)?;
            put(&bn.running_var)?;
            put(&[bn.momentum, bn.epsilon])?;
        }
        Ok(())
    }

    pub fn read_from<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = LeReader::new(reader);
        if &r.bytes::<5>()? != MAGIC {
            return Err(Error::Format("bad magic, expected TETR1".into()));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::Format("zero dimension".into()));
        }
        let leaky_slope = r.f64()?;
        let mut layers = Vec::with_capacity(LAYERS);
        let mut norms = Vec::with_capacity(LAYERS);
        for _ in 0..LAYERS {
            let weight = Matrix::from_vec(dim, dim, r.f64s(dim * dim)?)?;
            let bias = r.f64s(dim)?;
            let gamma = r.f64s(dim)?;
            let beta = r.f64s(dim)?;
            let running_mean = r.f64s(dim)?;
            let running_var = r.f64s(dim)?;
            let momentum = r.f64()?;
            let epsilon = r.f64()?;
            layers.push(LinearLayer { weight, bias });
            norms.push(BatchNormState { gamma, beta, running_mean, running_var, momentum, epsilon });
        }
        r.finish()?;
        let params = AdapterParams { dim, leaky_slope, layers, norms };
        if !params.is_finite() || params.norms.iter().any(|bn| bn.running_var.iter().any(|&v| v < 0.0)) {
            return Err(Error::Format("checkpoint holds non-finite or negative-variance values".into()));
        }
        Ok(params)
    }
}

pub fn save_checkpoint(params: &AdapterParams, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    params.write_to(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AdapterParams> {
    AdapterParams::read_from(BufReader::new(File::open(path)?))
}
