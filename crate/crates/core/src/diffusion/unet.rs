//! Two-level 1-D U-Net over the time axis of a `[B, 2, L]` batch, with a
//! sinusoidal step embedding plus a learned condition embedding injected
//! into every residual block.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv_out_len, Conv1d, Graph, Linear, ParamId, ParamStore, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetArch {
    pub seq_len: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub emb_dim: usize,
    /// Q + 1, index 0 is the unconditional token.
    pub n_conditions: usize,
    pub max_step: usize,
}

impl UNetArch {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.in_channels == 0 || self.channels == 0 || self.emb_dim < 2 || self.n_conditions < 2 {
            return Err(Error::Config("denoiser: degenerate architecture".into()));
        }
        if self.seq_len > 1 << 14 || self.channels > 1024 || self.emb_dim > 4096 || self.n_conditions > 1 << 16 || self.in_channels > 64 {
            return Err(Error::Config("denoiser: architecture exceeds supported size".into()));
        }
        Ok(())
    }

    fn lengths(&self) -> (usize, usize, usize) {
        let l0 = self.seq_len;
        let l1 = conv_out_len(l0, 3, 2, 1);
        (l0, l1, conv_out_len(l1, 3, 2, 1))
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv1d,
    conv2: Conv1d,
    emb: Linear,
}

impl ResBlock {
    fn new(st: &mut ParamStore, name: &str, c: usize, e: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv1d::new(st, &format!("{name}.conv1"), c, c, 1, rng),
            conv2: Conv1d::new(st, &format!("{name}.conv2"), c, c, 1, rng),
            emb: Linear::new(st, &format!("{name}.emb"), e, c, rng),
        }
    }

    fn forward(&self, g: &mut Graph, st: &ParamStore, h: Var, emb_act: Var) -> Var {
        let a = g.silu(h);
        let a = self.conv1.forward(g, st, a);
        let e = self.emb.forward(g, st, emb_act);
        let a = g.add_channel(a, e);
        let a = g.silu(a);
        let a = self.conv2.forward(g, st, a);
        g.add(h, a)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub arch: UNetArch,
    time1: Linear,
    time2: Linear,
    cond: ParamId,
    conv_in: Conv1d,
    res0: ResBlock,
    down1: Conv1d,
    res1: ResBlock,
    down2: Conv1d,
    mid: ResBlock,
    merge1: Conv1d,
    up1: ResBlock,
    merge0: Conv1d,
    up0: ResBlock,
    conv_out: Conv1d,
}

/// `[B, dim]` sinusoidal embedding of integer steps.
pub fn step_embedding(steps: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((steps.len(), dim));
    for (i, &t) in steps.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out[[i, k]] = a.sin();
            out[[i, half + k]] = a.cos();
        }
    }
    out
}

impl UNet {
    pub fn new(arch: UNetArch, st: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let (c, e) = (arch.channels, arch.emb_dim);
        let cond = {
            use rand::Rng as _;
            let v = ArrayD::from_shape_fn(IxDyn(&[arch.n_conditions, e]), |_| rng.random_range(-1.0..1.0));
            st.add("cond_embedding", v)
        };
        Ok(Self {
            time1: Linear::new(st, "time1", e, e, rng),
            time2: Linear::new(st, "time2", e, e, rng),
            cond,
            conv_in: Conv1d::new(st, "conv_in", arch.in_channels, c, 1, rng),
            res0: ResBlock::new(st, "res0", c, e, rng),
            down1: Conv1d::new(st, "down1", c, c, 2, rng),
            res1: ResBlock::new(st, "res1", c, e, rng),
            down2: Conv1d::new(st, "down2", c, c, 2, rng),
            mid: ResBlock::new(st, "mid", c, e, rng),
            merge1: Conv1d::new(st, "merge1", 2 * c, c, 1, rng),
            up1: ResBlock::new(st, "up1", c, e, rng),
            merge0: Conv1d::new(st, "merge0", 2 * c, c, 1, rng),
            up0: ResBlock::new(st, "up0", c, e, rng),
            conv_out: Conv1d::new(st, "conv_out", c, arch.in_channels, 1, rng),
            arch,
        })
    }

    /// `x [B, C_in, L]` with per-item diffusion steps and condition tokens.
    pub fn forward(&self, g: &mut Graph, st: &ParamStore, x: Var, steps: &[usize], conds: &[usize]) -> Var {
        let (_, l1, _) = self.arch.lengths();
        let l0 = self.arch.seq_len;
        let temb = g.leaf(step_embedding(steps, self.arch.emb_dim).into_dyn());
        let t = self.time1.forward(g, st, temb);
        let t = g.silu(t);
        let t = self.time2.forward(g, st, t);
        let table = g.param(st, self.cond);
        let c = g.gather(table, conds);
        let emb = g.add(t, c);
        let emb = g.silu(emb);

        let h0 = self.conv_in.forward(g, st, x);
        let r0 = self.res0.forward(g, st, h0, emb);
        let h1 = self.down1.forward(g, st, r0);
        let r1 = self.res1.forward(g, st, h1, emb);
        let h2 = self.down2.forward(g, st, r1);
        let m = self.mid.forward(g, st, h2, emb);

        let u1 = g.upsample(m, l1);
        let u1 = g.concat(u1, r1);
        let u1 = self.merge1.forward(g, st, u1);
        let u1 = self.up1.forward(g, st, u1, emb);
        let u0 = g.upsample(u1, l0);
        let u0 = g.concat(u0, r0);
        let u0 = self.merge0.forward(g, st, u0);
        let u0 = self.up0.forward(g, st, u0, emb);
        let out = g.silu(u0);
        self.conv_out.forward(g, st, out)
    }
}
