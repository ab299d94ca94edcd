//! Parameterised layers built on [`Graph`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::Var;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, for layers followed by a rectifier.
    KaimingUniform,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform,
    Zero,
}

impl Init {
    fn sample<R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        let fan_in = fan_in.max(1) as f64;
        match self {
            Init::KaimingUniform => {
                let bound = (6.0 / fan_in).sqrt();
                Tensor::uniform(shape, -bound, bound, rng)
            }
            Init::FanInUniform => {
                let bound = 1.0 / fan_in.sqrt();
                Tensor::uniform(shape, -bound, bound, rng)
            }
            Init::Zero => Tensor::zeros(shape),
        }
    }
}

/// `y = x·Wᵀ + b` over the rows of a T×in matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub lora: Option<LoraWeights>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.sample(&[outputs, inputs], inputs, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Linear {
            weight,
            bias,
            lora: None,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let projected = match &self.lora {
            Some(lw) => lora_forward(g, x, lw)?,
            None => {
                let w = g.param(self.weight);
                g.matmul_t(x, w)?
            }
        };
        let b = g.param(self.bias);
        g.add_row_bias(projected, b)
    }
}

/// A frozen weight `w0` (d×k) with a trainable low-rank update `up·down`.
#[derive(Clone, Debug)]
pub struct LoraWeights {
    pub w0: ParamId,
    /// r×k.
    pub down: ParamId,
    /// d×r.
    pub up: ParamId,
    pub rank: usize,
    pub scaling: f64,
}

impl LoraWeights {
    /// Adds `down` (random) and `up` (zero) factors for `w0`, enforcing
    /// `rank <= min(d, k) / 4`, and freezes `w0`.
    pub fn attach<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        w0: ParamId,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, k) = store.value(w0).dims2()?;
        if rank == 0 || rank * 4 > d.min(k) {
            return Err(Error::InvalidArgument(format!(
                "LoRA rank {rank} must be in 1..={} for a {d}×{k} weight",
                d.min(k) / 4
            )));
        }
        store.set_frozen(w0, true);
        let down = store.add(
            format!("{name}.lora.down"),
            Init::FanInUniform.sample(&[rank, k], k, rng),
        );
        let up = store.add(format!("{name}.lora.up"), Tensor::zeros(&[d, rank]));
        Ok(LoraWeights {
            w0,
            down,
            up,
            rank,
            scaling: 1.0 / rank as f64,
        })
    }
}

/// `x·w0ᵀ + scaling·(x·downᵀ)·upᵀ`, never materialising `up·down`.
pub fn lora_forward(g: &mut Graph, x: Var, lw: &LoraWeights) -> Result<Var> {
    let w0 = g.param(lw.w0);
    let down = g.param(lw.down);
    let up = g.param(lw.up);
    let base = g.matmul_t(x, w0)?;
    let low = g.matmul_t(x, down)?;
    let low = g.matmul_t(low, up)?;
    let low = g.mul_scalar(low, lw.scaling);
    g.add(base, low)
}

/// Same-padded square convolution on a C×H×W map.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = inputs * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init.sample(&[outputs, inputs, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Conv { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b))
    }

    pub fn outputs(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm_rows(x, gain, bias, 1e-5)
    }
}

/// Registers a learnable scalar.
pub fn scalar_param(store: &mut ParamStore, name: &str, value: f64) -> ParamId {
    store.add(name.to_string(), Tensor::new(&[1], vec![value]).expect("scalar"))
}

/// T×C token rows to a C×h×w grid.
pub fn tokens_to_grid(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let (t, c) = g.value(x).dims2()?;
    if t != h * w {
        return Err(Error::InvalidShape {
            shape: vec![t, c],
            reason: format!("{t} tokens do not tile a {h}×{w} grid"),
        });
    }
    let xt = g.transpose(x)?;
    g.reshape(xt, &[c, h, w])
}

/// C×h×w grid to T×C token rows.
pub fn grid_to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let (c, h, w) = g.value(x).dims3()?;
    let flat = g.reshape(x, &[c, h * w])?;
    g.transpose(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_grid_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::normal(&[12, 5], 1.0, &mut rng));
        let grid = tokens_to_grid(&mut g, x, 3, 4).unwrap();
        assert_eq!(g.shape(grid), &[5, 3, 4]);
        // token t = i*4 + j, channel c lands at grid[c, i, j]
        let (xv, gv) = (g.value(x).clone(), g.value(grid).clone());
        assert_eq!(gv.data()[2 * 12 + 4 + 3], xv.data()[(4 + 3) * 5 + 2]);
        let back = grid_to_tokens(&mut g, grid).unwrap();
        assert_eq!(g.value(back), &xv);
        assert!(tokens_to_grid(&mut g, x, 4, 4).is_err());
    }

    #[test]
    fn lora_rank_bound_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "q", 16, 16, Init::FanInUniform, &mut rng);
        assert!(LoraWeights::attach(&mut store, "q", lin.weight, 5, &mut rng).is_err());
        assert!(LoraWeights::attach(&mut store, "q", lin.weight, 0, &mut rng).is_err());
        let lw = LoraWeights::attach(&mut store, "q", lin.weight, 4, &mut rng).unwrap();
        assert!(store.get(lw.w0).frozen);
        assert_eq!(store.value(lw.up).shape(), &[16, 4]);
        assert_eq!(store.value(lw.down).shape(), &[4, 16]);
    }

    #[test]
    fn zero_up_lora_matches_frozen_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mut lin = Linear::new(&mut store, "q", 8, 12, Init::FanInUniform, &mut rng);
        let x = Tensor::normal(&[5, 8], 1.0, &mut rng);
        let plain = {
            let mut g = Graph::new(&store);
            let xv = g.constant(x.clone());
            let y = lin.forward(&mut g, xv).unwrap();
            g.value(y).clone()
        };
        lin.lora = Some(LoraWeights::attach(&mut store, "q", lin.weight, 2, &mut rng).unwrap());
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let y = lin.forward(&mut g, xv).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(g.value(y)), bits(&plain));
    }
}
