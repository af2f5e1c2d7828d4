//! Fully-connected ReLU classifier producing logits, plus its weight file.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Layer widths of the MNIST classifier: three hidden layers of 100 units.
pub const MNIST_DIMS: [usize; 5] = [784, 100, 100, 100, 10];

const WEIGHT_MAGIC: &[u8; 4] = b"LMTW";
const WEIGHT_VERSION: u32 = 1;

/// One affine layer, `y = x·Wᵀ + b` with `W` stored `[out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = weight.dims2("dense")?;
        if bias.shape() != [out] {
            return Err(Error::Shape {
                op: "dense",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Differentiable handles for a model's parameters on one tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

/// A stack of dense layers with ReLU between them and no activation on the
/// output, so [`MlpModel::forward`] returns logits.
///
/// Each layer also carries a unit vector used to warm-start power iteration
/// for its spectral norm (see [`crate::lipschitz`]).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<Dense>,
    power_vectors: Vec<Vec<f64>>,
}

/// Deterministic unit vector for warm-starting power iteration.
pub(crate) fn seeded_unit_vector(dim: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl MlpModel {
    /// He-initialised network (`N(0, 2/in)` weights, zero biases).
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::contract(format!("invalid layer dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive standard deviation");
                let weights = (0..out * fan_in).map(|_| normal.sample(&mut rng)).collect();
                Dense::new(
                    Tensor::matrix(out, fan_in, weights)?,
                    Tensor::zeros(vec![out]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_seed(layers, seed)
    }

    /// Wraps existing layers; power vectors are seeded with 0.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        Self::with_seed(layers, 0)
    }

    pub fn with_seed(layers: Vec<Dense>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("a model needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    op: "model",
                    lhs: pair[0].weight.shape().to_vec(),
                    rhs: pair[1].weight.shape().to_vec(),
                });
            }
        }
        let power_vectors = layers
            .iter()
            .enumerate()
            .map(|(i, l)| seeded_unit_vector(l.in_dim(), seed, i as u64 + 1))
            .collect();
        Ok(Self {
            layers,
            power_vectors,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// `[in, hidden.., classes]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn power_vectors(&self) -> &[Vec<f64>] {
        &self.power_vectors
    }

    pub(crate) fn set_power_vector(&mut self, layer: usize, v: Vec<f64>) {
        debug_assert_eq!(v.len(), self.layers[layer].in_dim());
        self.power_vectors[layer] = v;
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() == 2 && shape[1] == self.input_dim() {
            Ok(())
        } else {
            Err(Error::Shape {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: self.layers[0].weight.shape().to_vec(),
            })
        }
    }

    /// Logits for a batch `[m × in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let mut h = x.matmul_t(&self.layers[0].weight)?.add_bias(&self.layers[0].bias)?;
        for layer in &self.layers[1..] {
            h = h.relu().matmul_t(&layer.weight)?.add_bias(&layer.bias)?;
        }
        Ok(h)
    }

    /// Forward pass over a large batch, `chunk` rows at a time.
    pub fn forward_chunked(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows * self.num_classes());
        let mut start = 0;
        while start < rows {
            let end = (start + chunk.max(1)).min(rows);
            let idx: Vec<usize> = (start..end).collect();
            out.extend(self.forward(&x.select_rows(&idx))?.into_data());
            start = end;
        }
        Tensor::matrix(rows, self.num_classes(), out)
    }

    /// Registers the parameters on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let weights = self.layers.iter().map(|l| reg(&l.weight)).collect();
        let biases = self.layers.iter().map(|l| reg(&l.bias)).collect();
        ParamVars { weights, biases }
    }

    /// Forward pass recorded on `tape`.
    pub fn forward_on(&self, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let mut h = x;
        for (i, (&w, &b)) in params.weights.iter().zip(&params.biases).enumerate() {
            if i > 0 {
                h = tape.relu(h)?;
            }
            h = tape.matmul_t(h, w)?;
            h = tape.add_bias(h, b)?;
        }
        Ok(h)
    }

    /// Serialises to the `LMTW` container: magic, version, layer count, then
    /// per layer `out`, `in`, row-major weights and biases. Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHT_MAGIC);
        buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            buf.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
            buf.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
            for v in layer.weight.data().iter().chain(layer.bias.data()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    /// Parses an `LMTW` container; `origin` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader {
            bytes,
            pos: 0,
            origin,
        };
        let magic = r.take(4, "magic")?.to_vec();
        if magic != WEIGHT_MAGIC {
            return Err(r.error(0, format!("bad magic {magic:?}, expected \"LMTW\"")));
        }
        let version = r.u32("version")?;
        if version != WEIGHT_VERSION {
            return Err(r.error(4, format!("unsupported version {version}")));
        }
        let count = r.u32("layer count")? as usize;
        if count == 0 {
            return Err(r.error(8, "zero layers".into()));
        }
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let at = r.pos as u64;
            let out = r.u32("layer out dim")? as usize;
            let inp = r.u32("layer in dim")? as usize;
            if out == 0 || inp == 0 {
                return Err(r.error(at, format!("layer {i} has a zero dimension")));
            }
            let weights = r.f64s(out * inp, "weights")?;
            let bias = r.f64s(out, "biases")?;
            let dense = Dense::new(Tensor::matrix(out, inp, weights)?, Tensor::vector(bias)?)
                .map_err(|e| r.error(at, e.to_string()))?;
            layers.push(dense);
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, "trailing bytes after last layer".into()));
        }
        Self::from_layers(layers).map_err(|e| r.error(12, e.to_string()))
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl ByteReader<'_> {
    fn error(&self, offset: u64, reason: String) -> Error {
        Error::Parse {
            path: self.origin.to_path_buf(),
            offset,
            reason,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.pos as u64;
        let bytes = self.take(n.saturating_mul(8), what)?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(self.error(at + 8 * i as u64, format!("non-finite value in {what}")));
        }
        Ok(vals)
    }
}

/// The MNIST classifier, He-initialised from `seed`.
pub fn build_mnist_mlp(seed: u64) -> MlpModel {
    MlpModel::new(&MNIST_DIMS, seed).expect("static dims are valid")
}

pub fn save_weights(model: &MlpModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_bytes())
        .map_err(|e| Error::io(format!("writing weights to {}", path.display()), e))
}

pub fn load_weights(path: &Path) -> Result<MlpModel> {
    let bytes = fs::read(path)
        .map_err(|e| Error::io(format!("reading weights from {}", path.display()), e))?;
    MlpModel::from_bytes(&bytes, path)
}

/// Loads and checks the layer widths against `expected`.
pub fn load_weights_expecting(path: &Path, expected: &[usize]) -> Result<MlpModel> {
    let model = load_weights(path)?;
    let found = model.dims();
    if found != expected {
        return Err(Error::Architecture {
            expected: expected.to_vec(),
            found,
        });
    }
    Ok(model)
}
