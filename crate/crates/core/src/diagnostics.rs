//! Registry of gradient checks over every differentiable operation, the
//! adapter chain and the losses.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{AdapterConfig, AdapterState, ReviAdapter};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check, Differentiable, GradCheckConfig, GradReport, StoreFn, TapeFn};
use crate::loss::{bce_loss, edge_loss, total_loss, LossConfig};
use crate::nn::{Init, Linear, LoraWeights};
use crate::param::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

type Check = Box<dyn Fn(GradCheckConfig) -> Result<GradReport>>;

pub struct GradCase {
    pub name: &'static str,
    check: Check,
}

impl GradCase {
    pub fn run(&self, cfg: GradCheckConfig) -> Result<GradReport> {
        (self.check)(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(shape: &[usize], seed: u64) -> Tensor {
    Tensor::normal(shape, 1.0, &mut rng(seed))
}

/// Values bounded away from zero, for functions with a kink there.
fn off_kink(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = r.random_range(0.1..1.5);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced far apart relative to the step, for max/min.
fn distinct(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    vals.shuffle(&mut rng(seed));
    Tensor::new(shape, vals).expect("shape")
}

fn tape_case<F>(name: &'static str, inputs: Vec<Tensor>, f: F) -> GradCase
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    let f = TapeFn(f);
    GradCase {
        name,
        check: Box::new(move |cfg| grad_check(&f, &inputs, cfg)),
    }
}

/// Sum of `w ⊙ y` for a fixed random `w`, so every output entry matters.
fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(normal(t.shape(y), seed));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn op_cases() -> Vec<GradCase> {
    let m = |s| normal(&[3, 4], s);
    vec![
        tape_case("add", vec![m(1), m(2)], |t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, 9)
        }),
        tape_case("sub", vec![m(1), m(2)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y, 9)
        }),
        tape_case("mul", vec![m(1), m(2)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, 9)
        }),
        tape_case("add_scalar", vec![m(1)], |t, v| {
            let y = t.add_scalar(v[0], 0.7);
            probe(t, y, 9)
        }),
        tape_case("mul_scalar", vec![m(1)], |t, v| {
            let y = t.mul_scalar(v[0], -1.3);
            probe(t, y, 9)
        }),
        tape_case("neg", vec![m(1)], |t, v| {
            let y = t.neg(v[0]);
            probe(t, y, 9)
        }),
        tape_case("scale", vec![normal(&[1], 3), m(1)], |t, v| {
            let y = t.scale(v[0], v[1])?;
            probe(t, y, 9)
        }),
        tape_case("matmul", vec![m(1), normal(&[4, 5], 2)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 9)
        }),
        tape_case("matmul_t", vec![m(1), normal(&[5, 4], 2)], |t, v| {
            let y = t.matmul_t(v[0], v[1])?;
            probe(t, y, 9)
        }),
        tape_case("transpose", vec![m(1)], |t, v| {
            let y = t.transpose(v[0])?;
            probe(t, y, 9)
        }),
        tape_case("reshape", vec![m(1)], |t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            probe(t, y, 9)
        }),
        tape_case("relu", vec![off_kink(&[3, 4], 4)], |t, v| {
            let y = t.relu(v[0]);
            probe(t, y, 9)
        }),
        tape_case("gelu", vec![m(1)], |t, v| {
            let y = t.gelu(v[0]);
            probe(t, y, 9)
        }),
        tape_case("sigmoid", vec![m(1)], |t, v| {
            let y = t.sigmoid(v[0]);
            probe(t, y, 9)
        }),
        tape_case("softmax_rows", vec![m(1)], |t, v| {
            let y = t.softmax_rows(v[0])?;
            probe(t, y, 9)
        }),
        tape_case(
            "layer_norm_rows",
            vec![m(1), normal(&[4], 2), normal(&[4], 3)],
            |t, v| {
                let y = t.layer_norm_rows(v[0], v[1], v[2], 1e-5)?;
                probe(t, y, 9)
            },
        ),
        tape_case("add_row_bias", vec![m(1), normal(&[4], 2)], |t, v| {
            let y = t.add_row_bias(v[0], v[1])?;
            probe(t, y, 9)
        }),
        tape_case(
            "conv2d",
            vec![normal(&[2, 5, 6], 1), normal(&[3, 2, 3, 3], 2), normal(&[3], 3)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]))?;
                probe(t, y, 9)
            },
        ),
        tape_case(
            "conv2d_1x1",
            vec![normal(&[3, 4, 4], 1), normal(&[2, 3, 1, 1], 2)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], None)?;
                probe(t, y, 9)
            },
        ),
        tape_case("max_pool3", vec![distinct(&[2, 5, 5], 5)], |t, v| {
            let y = t.max_pool3(v[0])?;
            probe(t, y, 9)
        }),
        tape_case("min_pool3", vec![distinct(&[2, 5, 5], 6)], |t, v| {
            let y = t.min_pool3(v[0])?;
            probe(t, y, 9)
        }),
        tape_case("upsample2", vec![normal(&[2, 3, 3], 1)], |t, v| {
            let y = t.upsample2(v[0])?;
            probe(t, y, 9)
        }),
        tape_case("resize_bilinear", vec![normal(&[2, 4, 5], 1)], |t, v| {
            let up = t.resize_bilinear(v[0], 7, 9)?;
            let down = t.resize_bilinear(up, 3, 2)?;
            let a = probe(t, up, 8)?;
            let b = probe(t, down, 9)?;
            t.add(a, b)
        }),
        tape_case("slice_cols", vec![m(1)], |t, v| {
            let y = t.slice_cols(v[0], 1, 2)?;
            probe(t, y, 9)
        }),
        tape_case("concat_cols", vec![m(1), normal(&[3, 2], 2)], |t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            probe(t, y, 9)
        }),
        tape_case("sum", vec![m(1)], |t, v| {
            let y = t.sum(v[0]);
            t.mul(y, y)
        }),
        tape_case("mean", vec![m(1)], |t, v| {
            let y = t.mean(v[0]);
            t.mul(y, y)
        }),
        tape_case("bce", vec![normal(&[10], 1)], |t, v| {
            let p = t.sigmoid(v[0]);
            let target = Tensor::from_fn(&[10], |i| (i % 3 == 0) as u8 as f64);
            t.bce(p, &target, 1e-7)
        }),
        tape_case(
            "attention",
            vec![normal(&[5, 4], 1), normal(&[5, 4], 2), normal(&[5, 4], 3)],
            |t, v| {
                let y = t.attention(v[0], v[1], v[2], 2)?;
                probe(t, y, 9)
            },
        ),
    ]
}

fn mask(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_bool(0.4) as u8 as f64)
}

fn loss_cases() -> Vec<GradCase> {
    let gt = mask(21, &[1, 6, 6]);
    let (g1, g2, g3) = (gt.clone(), gt.clone(), gt);
    vec![
        tape_case("bce_loss", vec![normal(&[1, 6, 6], 22)], move |t, v| {
            bce_loss(t, v[0], &g1, 1e-7)
        }),
        tape_case(
            "edge_loss",
            vec![distinct(&[1, 6, 6], 23).map(|x| 10.0 * x)],
            move |t, v| edge_loss(t, v[0], &g2, 1e-7),
        ),
        tape_case(
            "total_loss",
            vec![distinct(&[1, 6, 6], 24).map(|x| 10.0 * x)],
            move |t, v| Ok(total_loss(t, v[0], &g3, &LossConfig::default())?.total),
        ),
    ]
}

fn randomize(store: &mut ParamStore, ids: &[ParamId], scale: f64, r: &mut ChaCha8Rng) {
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        store.assign(id, Tensor::normal(&shape, scale, r)).expect("same shape");
    }
}

fn adapter_ids(a: &ReviAdapter) -> Vec<ParamId> {
    let mut ids = Vec::new();
    for c in [&a.down, &a.ska, &a.phi1, &a.phi2, &a.delta, &a.up] {
        ids.push(c.weight);
        ids.push(c.bias);
    }
    ids.extend([a.rho, a.alpha]);
    ids
}

/// Two chained adapters (the second consumes the first's hidden state)
/// feeding the segmentation loss.
fn chain_case() -> GradCase {
    let cfg = AdapterConfig {
        width: 3,
        ..AdapterConfig::default()
    };
    let mut r = rng(31);
    let mut store = ParamStore::new();
    let a1 = ReviAdapter::new(&mut store, "a1", 2, 1, &cfg, &mut r);
    let a2 = ReviAdapter::new(&mut store, "a2", 1, 1, &cfg, &mut r);
    let mut ids = adapter_ids(&a1);
    ids.extend(adapter_ids(&a2));
    randomize(&mut store, &ids, 0.4, &mut r);
    let d0 = normal(&[2, 4, 4], 32);
    let out0 = normal(&[1, 4, 4], 33);
    let out1 = normal(&[1, 8, 8], 34).map(|x| 3.0 * x);
    let gt = mask(35, &[1, 8, 8]);
    GradCase {
        name: "ska_mke_enhance_loss",
        check: Box::new(move |gc| {
            let loss = |g: &mut Graph| {
                let mut state = AdapterState::default();
                let d = g.constant(d0.clone());
                let o0 = g.constant(out0.clone());
                let (y0, _) = a1.step(g, 0, d, o0, &mut state)?;
                let o1 = g.constant(out1.clone());
                let (y1, _) = a2.step(g, 1, y0, o1, &mut state)?;
                Ok(total_loss(g, y1, &gt, &LossConfig::default())?.total)
            };
            let f = StoreFn::new(&store, ids.clone(), loss);
            grad_check(&f, &f.inputs(), gc)
        }),
    }
}

fn lora_case() -> GradCase {
    let mut r = rng(41);
    let mut store = ParamStore::new();
    let mut lin = Linear::new(&mut store, "lin", 6, 5, Init::FanInUniform, &mut r);
    let lw = LoraWeights::attach(&mut store, "lin", lin.weight, 1, &mut r).expect("rank fits");
    let ids = vec![lw.down, lw.up, lin.bias];
    randomize(&mut store, &ids, 0.5, &mut r);
    lin.lora = Some(lw);
    let x0 = normal(&[3, 6], 42);
    GradCase {
        name: "lora_linear",
        check: Box::new(move |gc| {
            let loss = |g: &mut Graph| {
                let x = g.constant(x0.clone());
                let y = lin.forward(g, x)?;
                probe(g, y, 43)
            };
            let f = StoreFn::new(&store, ids.clone(), loss);
            grad_check(&f, &f.inputs(), gc)
        }),
    }
}

/// Every registered check.
pub fn registry() -> Vec<GradCase> {
    let mut cases = op_cases();
    cases.extend(loss_cases());
    cases.push(lora_case());
    cases.push(chain_case());
    cases
}

/// A function whose reported gradient is off by ten percent.
struct Corrupted<D>(D);

impl<D: Differentiable> Differentiable for Corrupted<D> {
    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        self.0.value(inputs)
    }

    fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(self
            .0
            .gradient(inputs)?
            .into_iter()
            .map(|g| g.map(|v| 1.1 * v))
            .collect())
    }
}

/// A deliberately broken sigmoid, used to confirm the checker catches faults.
pub fn corrupted_case() -> GradCase {
    let inputs = vec![normal(&[3, 4], 51)];
    let f = Corrupted(TapeFn(|t: &mut Tape, v: &[Var]| {
        let y = t.sigmoid(v[0]);
        probe(t, y, 9)
    }));
    GradCase {
        name: "corrupted_sigmoid",
        check: Box::new(move |cfg| grad_check(&f, &inputs, cfg)),
    }
}

pub fn run_cases(cases: &[GradCase], cfg: GradCheckConfig) -> Result<Vec<CaseResult>> {
    cases
        .iter()
        .map(|c| {
            let r = c.run(cfg)?;
            Ok(CaseResult {
                name: c.name,
                max_rel_err: r.max_rel_err(),
                passed: r.passed(),
            })
        })
        .collect()
}
