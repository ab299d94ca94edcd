//! Decomposition adapters for frozen blocks.
//!
//! A ReVi adapter runs one unrolled low-rank/sparse iteration per block on a
//! narrow feature grid. The block input is projected to `width` channels by
//! a 1×1 conv, giving `d`; the hidden state `o` comes from the previous
//! adapted block (zero at the first). Then
//!
//! ```text
//! b   = ska(d - o) + (d - o)
//! x   = o + d - b
//! o'  = x - ρ·φ₂(relu(φ₁(x + δ(x))))
//! out = block(input) + α·up(o')
//! ```
//!
//! where `up` is a 1×1 conv back to the block's output channels followed by
//! a bilinear resize to the block's output resolution. `o'` is handed on as
//! the next hidden state, resized when the next block works at a different
//! resolution.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{scalar_param, Conv, Init};
use crate::param::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    Encoder,
    Decoder,
    Both,
}

impl Placement {
    pub fn covers_encoder(self) -> bool {
        matches!(self, Placement::Encoder | Placement::Both)
    }

    pub fn covers_decoder(self) -> bool {
        matches!(self, Placement::Decoder | Placement::Both)
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Placement::Encoder),
            "decoder" => Ok(Placement::Decoder),
            "both" => Ok(Placement::Both),
            other => Err(Error::InvalidArgument(format!(
                "unknown placement '{other}' (expected encoder, decoder or both)"
            ))),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Encoder => "encoder",
            Placement::Decoder => "decoder",
            Placement::Both => "both",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterKind {
    Revi,
    /// Plain conv stack with the same parameter count as [`ReviAdapter`].
    ConvEqual,
    None,
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "revi" => Ok(AdapterKind::Revi),
            "conv-equal" => Ok(AdapterKind::ConvEqual),
            "none" => Ok(AdapterKind::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown adapter '{other}' (expected revi, conv-equal or none)"
            ))),
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::Revi => "revi",
            AdapterKind::ConvEqual => "conv-equal",
            AdapterKind::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub placement: Placement,
    /// Channels of the adapter's internal grid.
    pub width: usize,
    /// LoRA rank on q/k/v; 0 disables LoRA.
    pub lora_rank: usize,
    pub rho_init: f64,
    pub alpha_init: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            kind: AdapterKind::Revi,
            placement: Placement::Encoder,
            width: 16,
            lora_rank: 4,
            rho_init: 0.1,
            alpha_init: 0.0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidArgument("adapter width must be positive".into()));
        }
        if !self.rho_init.is_finite() || !self.alpha_init.is_finite() {
            return Err(Error::InvalidArgument("adapter scalars must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ReviAdapter {
    pub down: Conv,
    pub ska: Conv,
    pub phi1: Conv,
    pub phi2: Conv,
    pub delta: Conv,
    pub up: Conv,
    pub rho: ParamId,
    pub alpha: ParamId,
}

impl ReviAdapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: &AdapterConfig,
        rng: &mut R,
    ) -> Self {
        let c = cfg.width;
        let conv = |store: &mut ParamStore, part: &str, i, o, k, init, rng: &mut R| {
            Conv::new(store, &format!("{name}.{part}"), i, o, k, init, rng)
        };
        ReviAdapter {
            down: conv(store, "down", in_channels, c, 1, Init::FanInUniform, rng),
            ska: conv(store, "ska", c, c, 3, Init::KaimingUniform, rng),
            phi1: conv(store, "phi1", c, c, 3, Init::KaimingUniform, rng),
            phi2: conv(store, "phi2", c, c, 3, Init::Zero, rng),
            delta: conv(store, "delta", c, c, 3, Init::Zero, rng),
            up: conv(store, "up", c, out_channels, 1, Init::FanInUniform, rng),
            rho: scalar_param(store, &format!("{name}.rho"), cfg.rho_init),
            alpha: scalar_param(store, &format!("{name}.alpha"), cfg.alpha_init),
        }
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        self.ska.outputs(store)
    }
}

/// `b = ska(d - o) + (d - o)`.
pub fn ska_forward(g: &mut Graph, w: &ReviAdapter, d: Var, o: Var) -> Result<Var> {
    let diff = g.sub(d, o)?;
    let conv = w.ska.forward(g, diff)?;
    g.add(conv, diff)
}

#[derive(Clone, Copy, Debug)]
pub struct MkeOutput {
    /// `o + d - b`.
    pub x: Var,
    pub o: Var,
}

/// `x = o + d - b`, then `o' = x - ρ·φ(x + δ(x))`.
pub fn mke_forward(g: &mut Graph, w: &ReviAdapter, d: Var, b: Var, o: Var) -> Result<MkeOutput> {
    let od = g.add(o, d)?;
    let x = g.sub(od, b)?;
    let deviation = w.delta.forward(g, x)?;
    let shifted = g.add(x, deviation)?;
    let h = w.phi1.forward(g, shifted)?;
    let h = g.relu(h);
    let phi = w.phi2.forward(g, h)?;
    let rho = g.param(w.rho);
    let step = g.scale(rho, phi)?;
    let o = g.sub(x, step)?;
    Ok(MkeOutput { x, o })
}

/// `block_out + α·o`.
pub fn enhance(g: &mut Graph, block_out: Var, o: Var, alpha: Var) -> Result<Var> {
    if g.shape(block_out) != g.shape(o) {
        return Err(Error::ShapeMismatch {
            op: "enhance",
            lhs: g.shape(block_out).to_vec(),
            rhs: g.shape(o).to_vec(),
        });
    }
    let scaled = g.scale(alpha, o)?;
    g.add(block_out, scaled)
}

/// The hidden state carried between adapted blocks of one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct AdapterState {
    pub hidden: Option<Var>,
}

impl AdapterState {
    /// The hidden state at `c×h×w`: zero before the first adapted block,
    /// bilinearly resized when the resolution changed.
    pub fn aligned(&self, g: &mut Graph, c: usize, h: usize, w: usize) -> Result<Var> {
        match self.hidden {
            None => Ok(g.constant(Tensor::zeros(&[c, h, w]))),
            Some(o) => {
                let (oc, oh, ow) = g.value(o).dims3()?;
                if oc != c {
                    return Err(Error::ShapeMismatch {
                        op: "hidden state",
                        lhs: vec![oc, oh, ow],
                        rhs: vec![c, h, w],
                    });
                }
                if (oh, ow) == (h, w) {
                    Ok(o)
                } else {
                    g.resize_bilinear(o, h, w)
                }
            }
        }
    }
}

/// Vars recorded at one adapted block, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct SiteTrace {
    pub site: usize,
    /// Hidden state as received, before any resize.
    pub hidden_in: Option<Var>,
    pub low_rank: Option<Var>,
    pub hidden_out: Var,
}

fn project_out(g: &mut Graph, up: &Conv, o: Var, block_out: Var) -> Result<Var> {
    let corr = up.forward(g, o)?;
    let (_, h, w) = g.value(block_out).dims3()?;
    let (_, ch, cw) = g.value(corr).dims3()?;
    if (ch, cw) == (h, w) {
        Ok(corr)
    } else {
        g.resize_bilinear(corr, h, w)
    }
}

impl ReviAdapter {
    /// Runs the adapter for a block whose input grid is `d_prev` and whose
    /// output grid is `block_out`.
    pub fn step(
        &self,
        g: &mut Graph,
        site: usize,
        d_prev: Var,
        block_out: Var,
        state: &mut AdapterState,
    ) -> Result<(Var, SiteTrace)> {
        let d = self.down.forward(g, d_prev)?;
        let (c, h, w) = g.value(d).dims3()?;
        let hidden_in = state.hidden;
        let o_prev = state.aligned(g, c, h, w)?;
        let b = ska_forward(g, self, d, o_prev)?;
        let mke = mke_forward(g, self, d, b, o_prev)?;
        state.hidden = Some(mke.o);
        let corr = project_out(g, &self.up, mke.o, block_out)?;
        let alpha = g.param(self.alpha);
        let out = enhance(g, block_out, corr, alpha)?;
        let trace = SiteTrace {
            site,
            hidden_in,
            low_rank: Some(b),
            hidden_out: mke.o,
        };
        Ok((out, trace))
    }
}

/// Applies `block` to `d_prev` and enhances its output with the adapter.
pub fn adapter_step(
    g: &mut Graph,
    w: &ReviAdapter,
    block: impl FnOnce(&mut Graph, Var) -> Result<Var>,
    d_prev: Var,
    state: &mut AdapterState,
) -> Result<Var> {
    let block_out = block(g, d_prev)?;
    Ok(w.step(g, 0, d_prev, block_out, state)?.0)
}

/// Four 3×3 convs with rectifiers between them, wrapped in the same
/// projections and scalars as [`ReviAdapter`] so the parameter counts match.
#[derive(Clone, Debug)]
pub struct ConvEqualAdapter {
    pub down: Conv,
    pub convs: [Conv; 4],
    pub up: Conv,
    pub gain: ParamId,
    pub alpha: ParamId,
}

impl ConvEqualAdapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: &AdapterConfig,
        rng: &mut R,
    ) -> Self {
        let c = cfg.width;
        let down = Conv::new(
            store,
            &format!("{name}.down"),
            in_channels,
            c,
            1,
            Init::FanInUniform,
            rng,
        );
        let convs = std::array::from_fn(|i| {
            let init = if i < 3 {
                Init::KaimingUniform
            } else {
                Init::FanInUniform
            };
            Conv::new(store, &format!("{name}.conv{i}"), c, c, 3, init, rng)
        });
        let up = Conv::new(
            store,
            &format!("{name}.up"),
            c,
            out_channels,
            1,
            Init::FanInUniform,
            rng,
        );
        ConvEqualAdapter {
            down,
            convs,
            up,
            gain: scalar_param(store, &format!("{name}.gain"), cfg.rho_init),
            alpha: scalar_param(store, &format!("{name}.alpha"), cfg.alpha_init),
        }
    }

    pub fn step(&self, g: &mut Graph, site: usize, d_prev: Var, block_out: Var) -> Result<(Var, SiteTrace)> {
        let mut h = self.down.forward(g, d_prev)?;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, h)?;
            if i < 3 {
                h = g.relu(h);
            }
        }
        let gain = g.param(self.gain);
        let o = g.scale(gain, h)?;
        let corr = project_out(g, &self.up, o, block_out)?;
        let alpha = g.param(self.alpha);
        let out = enhance(g, block_out, corr, alpha)?;
        Ok((
            out,
            SiteTrace {
                site,
                hidden_in: None,
                low_rank: None,
                hidden_out: o,
            },
        ))
    }
}

#[derive(Clone, Debug)]
pub enum SiteAdapter {
    Revi(ReviAdapter),
    ConvEqual(ConvEqualAdapter),
}

impl SiteAdapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: &AdapterConfig,
        rng: &mut R,
    ) -> Option<Self> {
        match cfg.kind {
            AdapterKind::Revi => Some(SiteAdapter::Revi(ReviAdapter::new(
                store,
                name,
                in_channels,
                out_channels,
                cfg,
                rng,
            ))),
            AdapterKind::ConvEqual => Some(SiteAdapter::ConvEqual(ConvEqualAdapter::new(
                store,
                name,
                in_channels,
                out_channels,
                cfg,
                rng,
            ))),
            AdapterKind::None => None,
        }
    }

    pub fn step(
        &self,
        g: &mut Graph,
        site: usize,
        d_prev: Var,
        block_out: Var,
        state: &mut AdapterState,
    ) -> Result<(Var, SiteTrace)> {
        match self {
            SiteAdapter::Revi(a) => a.step(g, site, d_prev, block_out, state),
            SiteAdapter::ConvEqual(a) => a.step(g, site, d_prev, block_out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig, StoreFn, TapeFn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn adapter(width: usize, seed: u64) -> (ParamStore, ReviAdapter) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = AdapterConfig {
            width,
            ..Default::default()
        };
        let a = ReviAdapter::new(&mut store, "a", width, width, &cfg, &mut rng);
        (store, a)
    }

    fn randomize(store: &mut ParamStore, ids: &[ParamId], rng: &mut ChaCha8Rng) {
        for &id in ids {
            let shape = store.value(id).shape().to_vec();
            store.assign(id, Tensor::uniform(&shape, -0.3, 0.3, rng)).unwrap();
        }
    }

    #[test]
    fn parse_round_trips() {
        for p in ["encoder", "decoder", "both"] {
            assert_eq!(p.parse::<Placement>().unwrap().to_string(), p);
        }
        for k in ["revi", "conv-equal", "none"] {
            assert_eq!(k.parse::<AdapterKind>().unwrap().to_string(), k);
        }
        assert!("middle".parse::<Placement>().is_err());
    }

    #[test]
    fn zero_ska_is_the_skip_connection() {
        let (mut store, a) = adapter(3, 1);
        store.assign(a.ska.weight, Tensor::zeros(&[3, 3, 3, 3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new(&store);
        let d = g.constant(Tensor::normal(&[3, 5, 5], 1.0, &mut rng));
        let o = g.constant(Tensor::normal(&[3, 5, 5], 1.0, &mut rng));
        let b = ska_forward(&mut g, &a, d, o).unwrap();
        let want = g.value(d).zip_map(g.value(o), "t", |x, y| x - y).unwrap();
        assert_eq!(g.value(b), &want);
    }

    #[test]
    fn equal_inputs_give_the_bias_map() {
        let (mut store, a) = adapter(2, 1);
        store
            .assign(a.ska.bias, Tensor::new(&[2], vec![0.5, -1.0]).unwrap())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(&store);
        let d = g.constant(Tensor::normal(&[2, 4, 4], 1.0, &mut rng));
        let b = ska_forward(&mut g, &a, d, d).unwrap();
        let v = g.value(b).data();
        assert!(v[..16].iter().all(|&x| x == 0.5));
        assert!(v[16..].iter().all(|&x| x == -1.0));
    }

    #[test]
    fn mke_is_identity_when_phi_vanishes_or_rho_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut store, a) = adapter(2, 5);
        // phi2 starts at zero
        let x_expected;
        {
            let mut g = Graph::new(&store);
            let d = g.constant(Tensor::normal(&[2, 4, 4], 1.0, &mut rng));
            let b = g.constant(Tensor::normal(&[2, 4, 4], 1.0, &mut rng));
            let o = g.constant(Tensor::normal(&[2, 4, 4], 1.0, &mut rng));
            let m = mke_forward(&mut g, &a, d, b, o).unwrap();
            assert_eq!(g.value(m.o), g.value(m.x));
            // o + d - b - x == 0 exactly
            let od = g.value(o).zip_map(g.value(d), "t", |p, q| p + q).unwrap();
            let rec = od.zip_map(g.value(b), "t", |p, q| p - q).unwrap();
            assert_eq!(&rec, g.value(m.x));
            x_expected = rec;
        }
        randomize(&mut store, &[a.phi2.weight, a.phi2.bias, a.delta.weight], &mut rng);
        store.assign(a.rho, Tensor::new(&[1], vec![0.0]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new(&store);
        let d = g.constant(Tensor::normal(&[2, 4, 4], 1.0, &mut rng));
        let b = g.constant(Tensor::normal(&[2, 4, 4], 1.0, &mut rng));
        let o = g.constant(Tensor::normal(&[2, 4, 4], 1.0, &mut rng));
        let m = mke_forward(&mut g, &a, d, b, o).unwrap();
        assert_eq!(g.value(m.o).max_abs_diff(&x_expected), 0.0);
    }

    #[test]
    fn enhance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::normal(&[2, 3, 3], 1.0, &mut rng));
        let o = g.constant(Tensor::normal(&[2, 3, 3], 1.0, &mut rng));
        let zero = g.constant(Tensor::scalar(0.0));
        let out = enhance(&mut g, q, o, zero).unwrap();
        assert_eq!(g.value(out), g.value(q));
        let one = g.constant(Tensor::scalar(1.0));
        let neg = g.neg(q);
        let out = enhance(&mut g, q, neg, one).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        let small = g.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(enhance(&mut g, q, small, one).is_err());
    }

    #[test]
    fn enhance_gradient_in_alpha_is_o() {
        let f = TapeFn(|t: &mut crate::Tape, v: &[Var]| {
            let s = t.scale(v[2], v[1])?;
            let out = t.add(v[0], s)?;
            Ok(t.sum(out))
        });
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = [
            Tensor::normal(&[2, 3, 3], 1.0, &mut rng),
            Tensor::normal(&[2, 3, 3], 1.0, &mut rng),
            Tensor::new(&[1], vec![0.3]).unwrap(),
        ];
        let report = grad_check(&f, &inputs, GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        use crate::gradcheck::Differentiable;
        let grads = f.gradient(&inputs).unwrap();
        assert!((grads[2].item() - inputs[1].sum()).abs() < 1e-12);
    }

    #[test]
    fn first_block_substitution() {
        let (store, a) = adapter(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new(&store);
        let d = g.constant(Tensor::normal(&[3, 4, 4], 1.0, &mut rng));
        let o = AdapterState::default().aligned(&mut g, 3, 4, 4).unwrap();
        let b = ska_forward(&mut g, &a, d, o).unwrap();
        let m = mke_forward(&mut g, &a, d, b, o).unwrap();
        let conv = a.ska.forward(&mut g, d).unwrap();
        let want_b = g.value(conv).zip_map(g.value(d), "t", |p, q| p + q).unwrap();
        assert!(g.value(b).max_abs_diff(&want_b) < 1e-14);
        let neg_conv = g.value(conv).map(|v| -v);
        assert!(g.value(m.x).max_abs_diff(&neg_conv) < 1e-14);
    }

    #[test]
    fn zero_initialised_step_is_the_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let cfg = AdapterConfig {
            width: 4,
            ..Default::default()
        };
        let a = ReviAdapter::new(&mut store, "a", 6, 6, &cfg, &mut rng);
        let block = Conv::new(&mut store, "blk", 6, 6, 3, Init::FanInUniform, &mut rng);
        let x = Tensor::normal(&[6, 5, 5], 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let mut state = AdapterState::default();
        let out = adapter_step(&mut g, &a, |g, v| block.forward(g, v), xv, &mut state).unwrap();
        let plain = block.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(out), g.value(plain));
        assert!(state.hidden.is_some());
    }

    #[test]
    fn adapter_parameter_counts_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AdapterConfig {
            width: 8,
            ..Default::default()
        };
        let mut s1 = ParamStore::new();
        ReviAdapter::new(&mut s1, "a", 32, 16, &cfg, &mut rng);
        let mut s2 = ParamStore::new();
        ConvEqualAdapter::new(&mut s2, "a", 32, 16, &cfg, &mut rng);
        assert_eq!(s1.census().total(), s2.census().total());
    }

    #[test]
    fn adapter_gradients_pass_finite_differences() {
        let (mut store, a) = adapter(4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        randomize(&mut store, &[a.phi2.weight, a.delta.weight, a.phi2.bias], &mut rng);
        store.assign(a.rho, Tensor::new(&[1], vec![0.4]).unwrap()).unwrap();
        let d = Tensor::normal(&[4, 8, 8], 1.0, &mut rng);
        let o = Tensor::normal(&[4, 8, 8], 1.0, &mut rng);
        let loss = |g: &mut Graph| {
            let dv = g.constant(d.clone());
            let ov = g.constant(o.clone());
            let b = ska_forward(g, &a, dv, ov)?;
            let m = mke_forward(g, &a, dv, b, ov)?;
            let sq = g.mul(m.o, m.o)?;
            Ok(g.mean(sq))
        };
        let ids = vec![
            a.ska.weight,
            a.ska.bias,
            a.phi1.weight,
            a.phi1.bias,
            a.phi2.weight,
            a.delta.weight,
            a.rho,
        ];
        let f = StoreFn::new(&store, ids, loss);
        let report = grad_check(&f, &f.inputs(), GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
