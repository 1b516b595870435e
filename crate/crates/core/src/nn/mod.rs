//! Small differentiable building blocks on top of candle tensors.
//!
//! Parameters live in a [`ParamSet`] as named `Var`s in creation order.
//! Layers hold handles to the same storage, so an optimizer step through
//! the set is visible to every layer immediately.

mod checkpoint;
mod optim;

pub use checkpoint::{Block, BlockData, Checkpoint};
pub use optim::Adam;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamSet {
    dtype: DType,
    entries: Vec<(String, Var)>,
}

impl ParamSet {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Scalar count of every parameter whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn from_entries(dtype: DType, entries: Vec<(String, Var)>) -> Self {
        Self { dtype, entries }
    }

    pub fn select(&self, pred: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(n, _)| pred(n))
            .cloned()
            .collect()
    }

    fn insert(&mut self, name: String, value: Tensor) -> Result<Tensor> {
        if self.get(&name).is_some() {
            return Err(Error::Shape(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        self.entries.push((name, var));
        Ok(t)
    }

    /// Glorot-uniform weight `[fan_in, fan_out]`.
    pub fn glorot(&mut self, name: String, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        let t = Tensor::from_vec(data, (fan_in, fan_out), &Device::Cpu)?.to_dtype(self.dtype)?;
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: String, dims: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(dims, self.dtype, &Device::Cpu)?;
        self.insert(name, t)
    }

    /// Deep copy of every value, for before/after comparisons.
    pub fn values(&self) -> Result<Vec<(String, Vec<f64>)>> {
        self.entries
            .iter()
            .map(|(n, v)| Ok((n.clone(), flat_f64(v.as_tensor())?)))
            .collect()
    }

    /// Overwrites one parameter in place.
    pub fn assign(&self, name: &str, data: &[f64]) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
        let t = Tensor::from_slice(data, var.shape(), &Device::Cpu)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn blocks(&self, prefix: &str) -> Result<Vec<Block>> {
        self.entries
            .iter()
            .map(|(n, v)| Block::from_tensor(format!("{prefix}{n}"), v.as_tensor()))
            .collect()
    }

    /// Loads every parameter from `checkpoint`; each block must exist with
    /// the right shape and dtype.
    pub fn load(&self, checkpoint: &Checkpoint, prefix: &str) -> Result<()> {
        for (name, var) in &self.entries {
            let full = format!("{prefix}{name}");
            let block = checkpoint.block(&full)?;
            let t = block.to_tensor(var.dtype(), var.dims())?;
            var.set(&t)?;
        }
        Ok(())
    }
}

/// Flattens any tensor to `f64` values.
pub fn flat_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn tensor_from(data: &[f64], dims: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(data, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

/// `sigmoid(x) = (1 + tanh(x / 2)) / 2`, stable for large `|x|`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

const SOFTPLUS_LINEAR_FROM: f64 = 40.0;

/// `ln(1 + e^x)`, switching to the identity above 40 to avoid overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let low = x.minimum(SOFTPLUS_LINEAR_FROM)?;
    let high = (x - SOFTPLUS_LINEAR_FROM)?.relu()?;
    Ok((low.exp()?.affine(1.0, 1.0)?.log()? + high)?)
}

/// Per-row sum of `½ln2π + ½(pred − target)²`, averaged over rows.
pub fn gaussian_nll(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let rows = pred.dim(0)?;
    let per_row = pred.elem_count() / rows.max(1);
    let sq = (pred - target)?.sqr()?.sum_all()?;
    Ok(sq.affine(0.5 / rows as f64, HALF_LN_2PI * per_row as f64)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            w: params.glorot(format!("{name}/w"), fan_in, fan_out, rng)?,
            b: params.zeros(format!("{name}/b"), &[fan_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w)?.broadcast_add(&self.b)?)
    }

    pub fn detached(&self) -> Self {
        Self {
            w: self.w.detach(),
            b: self.b.detach(),
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    pub fn bias(&self) -> &Tensor {
        &self.b
    }

    /// Keeps only the given output columns.
    pub fn select_outputs(&self, columns: &[u32]) -> Result<Self> {
        let idx = Tensor::from_slice(columns, columns.len(), &Device::Cpu)?;
        Ok(Self {
            w: self.w.index_select(&idx, 1)?,
            b: self.b.index_select(&idx, 0)?,
        })
    }
}

/// Dense layers with ELU between them and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(params: &mut ParamSet, name: &str, sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}/l{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.elu(1.0)?;
            }
        }
        Ok(h)
    }

    pub fn detached(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Linear::detached).collect(),
        }
    }
}

/// Gated recurrent cell with the reset gate applied to the candidate.
#[derive(Debug, Clone)]
pub struct GruCell {
    lin: Linear,
    size: usize,
}

impl GruCell {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            lin: Linear::new(params, name, input + size, 3 * size, rng)?,
            size,
        })
    }

    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let parts = self.lin.forward(&Tensor::cat(&[x, h], 1)?)?;
        let n = self.size;
        let reset = sigmoid(&parts.narrow(1, 0, n)?)?;
        let cand = (reset * parts.narrow(1, n, n)?)?.tanh()?;
        let update = sigmoid(&parts.narrow(1, 2 * n, n)?.affine(1.0, -1.0)?)?;
        let keep = update.affine(-1.0, 1.0)?;
        Ok(((update * cand)? + (keep * h)?)?)
    }

    pub fn detached(&self) -> Self {
        Self {
            lin: self.lin.detached(),
            size: self.size,
        }
    }
}

const PATCH: usize = 4;

/// Rearranges `[N, g*p, g*p, c]` pixels into `[N*g*g, p*p*c]` patches.
fn patchify(x: &Tensor, n: usize, g: usize, p: usize, c: usize) -> Result<Tensor> {
    Ok(x
        .reshape(vec![n, g, p, g, p, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .reshape((n * g * g, p * p * c))?)
}

/// Inverse of [`patchify`], returning `[N, g*p*g*p*c]`.
fn unpatchify(x: &Tensor, n: usize, g: usize, p: usize, c: usize) -> Result<Tensor> {
    Ok(x
        .reshape(vec![n, g, g, p, p, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .reshape((n, g * p * g * p * c))?)
}

/// Convolution-like encoder: a 4×4 patch embedding, a 2×2 merge, then a
/// dense projection. Input is `[N, H*W*3]` in HWC order.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    image_size: usize,
    c1: usize,
    c2: usize,
    patch: Linear,
    merge: Linear,
    out: Linear,
}

impl PatchEncoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        image_size: usize,
        (c1, c2, embed): (usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = image_size / PATCH / 2;
        Ok(Self {
            image_size,
            c1,
            c2,
            patch: Linear::new(params, &format!("{name}/patch"), PATCH * PATCH * 3, c1, rng)?,
            merge: Linear::new(params, &format!("{name}/merge"), 4 * c1, c2, rng)?,
            out: Linear::new(params, &format!("{name}/out"), g * g * c2, embed, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        let g = self.image_size / PATCH;
        let h = self
            .patch
            .forward(&patchify(x, n, g, PATCH, 3)?)?
            .elu(1.0)?;
        let h = self
            .merge
            .forward(&patchify(&h, n, g / 2, 2, self.c1)?)?
            .elu(1.0)?;
        let h = h.reshape((n, (g / 2) * (g / 2) * self.c2))?;
        Ok(self.out.forward(&h)?.elu(1.0)?)
    }

    pub fn detached(&self) -> Self {
        Self {
            patch: self.patch.detached(),
            merge: self.merge.detached(),
            out: self.out.detached(),
            ..self.clone()
        }
    }
}

/// Mirror of [`PatchEncoder`]; emits `[N, H*W*channels]` in HWC order.
#[derive(Debug, Clone)]
pub struct PatchDecoder {
    image_size: usize,
    c1: usize,
    c2: usize,
    channels: usize,
    input: Linear,
    split: Linear,
    pixels: Linear,
}

impl PatchDecoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        image_size: usize,
        (features, c1, c2): (usize, usize, usize),
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = image_size / PATCH / 2;
        Ok(Self {
            image_size,
            c1,
            c2,
            channels,
            input: Linear::new(params, &format!("{name}/in"), features, g * g * c2, rng)?,
            split: Linear::new(params, &format!("{name}/split"), c2, 4 * c1, rng)?,
            pixels: Linear::new(params, &format!("{name}/pixels"), c1, PATCH * PATCH * channels, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let n = features.dim(0)?;
        let g = self.image_size / PATCH;
        let h = self.input.forward(features)?.elu(1.0)?;
        let h = h.reshape((n * (g / 2) * (g / 2), self.c2))?;
        let h = self.split.forward(&h)?.elu(1.0)?;
        let h = unpatchify(&h, n, g / 2, 2, self.c1)?;
        let h = h.reshape((n * g * g, self.c1))?;
        let h = self.pixels.forward(&h)?;
        unpatchify(&h, n, g, PATCH, self.channels)
    }

    pub fn detached(&self) -> Self {
        Self {
            input: self.input.detached(),
            split: self.split.detached(),
            pixels: self.pixels.detached(),
            ..self.clone()
        }
    }

    /// Copy that keeps only the first `keep` output channels.
    pub fn truncated(&self, keep: usize) -> Result<Self> {
        let per = self.channels;
        let cols: Vec<u32> = (0..PATCH * PATCH * per)
            .filter(|i| i % per < keep)
            .map(|i| i as u32)
            .collect();
        Ok(Self {
            pixels: self.pixels.select_outputs(&cols)?,
            channels: keep,
            ..self.clone()
        })
    }
}

/// Splits `[N, P*c]` into per-pixel channel groups along the last axis.
pub fn split_channels(x: &Tensor, channels: usize, first: usize) -> Result<(Tensor, Tensor)> {
    let n = x.dim(0)?;
    let pixels = x.dim(1)? / channels;
    let x = x.reshape((n, pixels, channels))?;
    let a = x.narrow(D::Minus1, 0, first)?.reshape((n, pixels * first))?;
    let rest = channels - first;
    let b = x.narrow(D::Minus1, first, rest)?.reshape((n, pixels * rest))?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    #[test]
    fn softplus_matches_closed_form() {
        let x = tensor_from(&[-3.0, 0.0, 2.0, 50.0], &[4], DType::F64).unwrap();
        let y = flat_f64(&softplus(&x).unwrap()).unwrap();
        for (got, v) in y.iter().zip([-3.0f64, 0.0, 2.0, 50.0]) {
            assert!((got - (1.0 + v.exp()).ln()).abs() < 1e-12);
        }
        assert!((y[1] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_extremes_are_exact_in_f64() {
        let x = tensor_from(&[50.0, -50.0, 0.0], &[3], DType::F64).unwrap();
        let y = flat_f64(&sigmoid(&x).unwrap()).unwrap();
        assert_eq!(y, vec![1.0, 0.0, 0.5]);
    }

    #[test]
    fn patchify_round_trips() {
        let data: Vec<f64> = (0..2 * 8 * 8 * 3).map(|i| i as f64).collect();
        let x = tensor_from(&data, &[2, 8 * 8 * 3], DType::F64).unwrap();
        let p = patchify(&x, 2, 2, 4, 3).unwrap();
        assert_eq!(p.dims(), &[8, 48]);
        // first patch, second row of the patch starts at pixel (1, 0)
        let first = flat_f64(&p.narrow(0, 0, 1).unwrap()).unwrap();
        assert_eq!(first[12], (8 * 3) as f64);
        let back = unpatchify(&p, 2, 2, 4, 3).unwrap();
        assert_eq!(flat_f64(&back).unwrap(), data);
    }

    #[test]
    fn encoder_and_decoder_shapes() {
        let mut params = ParamSet::new(DType::F64);
        let mut rng = rng_from(1);
        for size in [8, 16, 32] {
            let enc = PatchEncoder::new(&mut params, &format!("e{size}"), size, (4, 6, 5), &mut rng).unwrap();
            let dec = PatchDecoder::new(&mut params, &format!("d{size}"), size, (5, 4, 6), 6, &mut rng).unwrap();
            let x = Tensor::zeros((3, size * size * 3), DType::F64, &Device::Cpu).unwrap();
            let e = enc.forward(&x).unwrap();
            assert_eq!(e.dims(), &[3, 5]);
            assert_eq!(dec.forward(&e).unwrap().dims(), &[3, size * size * 6]);
            let t = dec.truncated(3).unwrap();
            let full = dec.forward(&e).unwrap();
            let (img, _) = split_channels(&full, 6, 3).unwrap();
            assert_eq!(flat_f64(&t.forward(&e).unwrap()).unwrap(), flat_f64(&img).unwrap());
        }
    }

    #[test]
    fn gaussian_nll_floor() {
        let x = tensor_from(&[0.3; 6], &[2, 3], DType::F64).unwrap();
        let nll = scalar_f64(&gaussian_nll(&x, &x).unwrap()).unwrap();
        assert!((nll - 3.0 * HALF_LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn gru_keeps_state_when_update_gate_closed() {
        let mut params = ParamSet::new(DType::F64);
        let cell = GruCell::new(&mut params, "g", 2, 3, &mut rng_from(0)).unwrap();
        params.assign("g/b", &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -60.0, -60.0, -60.0]).unwrap();
        let x = tensor_from(&[0.1, 0.2], &[1, 2], DType::F64).unwrap();
        let h = tensor_from(&[0.5, -0.5, 0.25], &[1, 3], DType::F64).unwrap();
        let next = flat_f64(&cell.forward(&x, &h).unwrap()).unwrap();
        for (a, b) in next.iter().zip([0.5, -0.5, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
