use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use super::{Block, Checkpoint};
use crate::error::Result;

/// Adam over a fixed list of parameters, with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub lr: f64,
    pub eps: f64,
    pub clip: f64,
    beta1: f64,
    beta2: f64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, lr: f64, eps: f64, clip: f64) -> Result<Self> {
        let m = params
            .iter()
            .map(|(_, p)| p.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            v: m.clone(),
            m,
            params,
            t: 0,
            lr,
            eps,
            clip,
            beta1: 0.9,
            beta2: 0.999,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from `grads`. Parameters without a gradient are
    /// treated as having a zero gradient. Returns the pre-clip global norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let gs = self
            .params
            .iter()
            .map(|(_, p)| match grads.get(p.as_tensor()) {
                Some(g) => Ok(g.detach()),
                None => p.as_tensor().zeros_like(),
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let mut sq = 0.0;
        for g in &gs {
            sq += super::scalar_f64(&g.sqr()?.sum_all()?)?;
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let g = gs[i].affine(scale, 0.0)?;
            self.m[i] = (self.m[i].affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?;
            self.v[i] = (self.v[i].affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?;
            let denom = self.v[i].affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, self.eps)?;
            let delta = self.m[i].affine(self.lr / bc1, 0.0)?.div(&denom)?;
            p.set(&(p.as_tensor().detach() - delta)?)?;
        }
        Ok(norm)
    }

    pub fn blocks(&self, group: &str) -> Result<Vec<Block>> {
        let mut out = Vec::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.push(Block::from_tensor(format!("opt/{group}/m/{name}"), &self.m[i])?);
            out.push(Block::from_tensor(format!("opt/{group}/v/{name}"), &self.v[i])?);
        }
        out.push(Block::from_u64(format!("opt/{group}/t"), self.t));
        Ok(out)
    }

    pub fn load(&mut self, checkpoint: &Checkpoint, group: &str) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            let dims = p.dims();
            self.m[i] = checkpoint
                .block(&format!("opt/{group}/m/{name}"))?
                .to_tensor(p.dtype(), dims)?;
            self.v[i] = checkpoint
                .block(&format!("opt/{group}/v/{name}"))?
                .to_tensor(p.dtype(), dims)?;
        }
        self.t = checkpoint.block(&format!("opt/{group}/t"))?.to_u64()?;
        Ok(())
    }
}
