//! Checks shared by the acceptance suite and the per-area test files.
//!
//! Every check returns plain numbers; callers decide how to assert on them.

#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeMap;

use dmgan::config::{ModelConfig, TrainConfig};
use dmgan::gradcheck;
use dmgan::memory::MemoryConfig;
use dmgan::nn::{Binder, ParamStore};
use dmgan::rng;
use dmgan::tensor::{Graph, Tensor, Unary, Var};
use dmgan::Result;
use rand::RngExt;

pub const H: f64 = 1e-5;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[0xA11]);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[0xA12]);
    Tensor::from_fn(shape, |_| {
        let m: f64 = r.random_range(0.2..1.5);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output element matters.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(g.shape(y), -1.0, 1.0, seed ^ 0x9E37);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One gradient-check case: name, inputs and scalar-valued builder.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: OpFn,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// Every differentiable graph operation, each checked in isolation.
pub fn op_cases() -> Vec<OpCase> {
    let u = |s: &[usize], k: u64| uniform(s, -1.0, 1.0, k);
    let pos = |s: &[usize], k: u64| uniform(s, 0.5, 2.0, k);
    vec![
        case("matmul", vec![u(&[3, 4], 1), u(&[4, 2], 2)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 1)
        }),
        case("conv3x3", vec![u(&[2, 5, 4], 3), u(&[3, 2, 3, 3], 4), u(&[3], 5)], |g, v| {
            let y = g.conv3x3(v[0], v[1], v[2])?;
            project(g, y, 2)
        }),
        case("conv3x3_stride2", vec![u(&[2, 6, 6], 6), u(&[3, 2, 3, 3], 7), u(&[3], 8)], |g, v| {
            let y = g.conv3x3_strided(v[0], v[1], v[2], 2)?;
            project(g, y, 3)
        }),
        case("upsample_nearest", vec![u(&[2, 3, 3], 9)], |g, v| {
            let y = g.upsample_nearest(v[0])?;
            project(g, y, 4)
        }),
        case("avg_pool2", vec![u(&[2, 4, 4], 10)], |g, v| {
            let y = g.avg_pool2(v[0])?;
            project(g, y, 5)
        }),
        case("add", vec![u(&[2, 3], 11), u(&[2, 3], 12)], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 6)
        }),
        case("sub", vec![u(&[2, 3], 13), u(&[2, 3], 14)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 7)
        }),
        case("mul", vec![u(&[2, 3], 15), u(&[2, 3], 16)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 8)
        }),
        case("div", vec![u(&[2, 3], 17), pos(&[2, 3], 18)], |g, v| {
            let y = g.div(v[0], v[1])?;
            project(g, y, 9)
        }),
        case("affine", vec![u(&[5], 19)], |g, v| {
            let y = g.affine(v[0], -1.7, 0.3);
            project(g, y, 10)
        }),
        case("one_minus", vec![u(&[5], 20)], |g, v| {
            let y = g.one_minus(v[0]);
            project(g, y, 11)
        }),
        case("sigmoid", vec![u(&[6], 21)], |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, 12)
        }),
        case("tanh", vec![u(&[6], 22)], |g, v| {
            let y = g.tanh(v[0]);
            project(g, y, 13)
        }),
        case("relu", vec![away_from_zero(&[8], 23)], |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 14)
        }),
        case("leaky_relu", vec![away_from_zero(&[8], 24)], |g, v| {
            let y = g.leaky_relu(v[0]);
            project(g, y, 15)
        }),
        case("leaky_relu_custom", vec![away_from_zero(&[8], 25)], |g, v| {
            let y = g.unary(v[0], Unary::LeakyRelu(0.1))?;
            project(g, y, 16)
        }),
        case("exp", vec![u(&[6], 26)], |g, v| {
            let y = g.exp(v[0]);
            project(g, y, 17)
        }),
        case("log", vec![pos(&[6], 27)], |g, v| {
            let y = g.log(v[0])?;
            project(g, y, 18)
        }),
        case("sqrt", vec![pos(&[6], 28)], |g, v| {
            let y = g.sqrt(v[0])?;
            project(g, y, 19)
        }),
        case("clamp_min", vec![away_from_zero(&[8], 29)], |g, v| {
            let y = g.clamp_min(v[0], 0.0);
            project(g, y, 20)
        }),
        case("softmax_rows", vec![u(&[3, 4], 30)], |g, v| {
            let y = g.softmax(v[0], 1)?;
            project(g, y, 21)
        }),
        case("softmax_cols", vec![u(&[3, 4], 31)], |g, v| {
            let y = g.softmax(v[0], 0)?;
            project(g, y, 22)
        }),
        case("log_softmax", vec![u(&[3, 4], 32)], |g, v| {
            let y = g.log_softmax(v[0], 1)?;
            project(g, y, 23)
        }),
        case("sum", vec![u(&[3, 2], 33)], |g, v| {
            let y = g.sum(v[0]);
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        case("mean", vec![u(&[3, 2], 34)], |g, v| {
            let y = g.mean(v[0]);
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        case("sum_axis", vec![u(&[3, 4], 35)], |g, v| {
            let y = g.sum_axis(v[0], 0)?;
            project(g, y, 24)
        }),
        case("mean_axis", vec![u(&[3, 4], 36)], |g, v| {
            let y = g.mean_axis(v[0], 1)?;
            project(g, y, 25)
        }),
        case("concat", vec![u(&[2, 3], 37), u(&[2, 2], 38)], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            project(g, y, 26)
        }),
        case("slice", vec![u(&[4, 3], 39)], |g, v| {
            let y = g.slice(v[0], 0, 1, 2)?;
            project(g, y, 27)
        }),
        case("reshape", vec![u(&[2, 6], 40)], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            project(g, y, 28)
        }),
        case("transpose", vec![u(&[2, 5], 41)], |g, v| {
            let y = g.transpose(v[0])?;
            project(g, y, 29)
        }),
        case("expand", vec![u(&[1, 3], 42)], |g, v| {
            let y = g.expand(v[0], &[4, 3])?;
            project(g, y, 30)
        }),
        case("gather_rows", vec![u(&[5, 3], 43)], |g, v| {
            let y = g.gather_rows(v[0], &[4, 0, 4, 2])?;
            project(g, y, 31)
        }),
    ]
}

/// Relative error of every op case.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .map(|c| {
            let r = gradcheck::check(&c.inputs, H, |g, v| (c.f)(g, v)).expect(c.name);
            (c.name, r.relative_error())
        })
        .collect()
}

/// Relative error of the gradient with respect to every parameter in
/// `store` whose name starts with `prefix`, by perturbing the store.
pub fn param_gradient_error(
    store: &ParamStore<f64>,
    prefix: &str,
    f: impl Fn(&mut Graph<f64>, &mut Binder<f64>) -> Result<Var>,
) -> f64 {
    let mut g = Graph::new();
    let mut b = Binder::new(store);
    let out = f(&mut g, &mut b).expect("forward");
    g.backward(out).expect("backward");
    let grads: BTreeMap<String, Tensor<f64>> = b.grads(&g);
    let names: Vec<String> = store
        .params()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, _)| n.clone())
        .collect();
    assert!(!names.is_empty(), "no parameters under {prefix}");
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let mut b = Binder::new(s).freeze("");
        let out = f(&mut g, &mut b).expect("forward");
        g.value(out).item()
    };
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut work = store.clone();
    for n in &names {
        let len = store.get(n).unwrap().numel();
        match grads.get(n) {
            Some(t) => analytic.extend_from_slice(t.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, len)),
        }
        for i in 0..len {
            let orig = work.get(n).unwrap().data()[i];
            work.get_mut(n).unwrap().data_mut()[i] = orig + H;
            let plus = eval(&work);
            work.get_mut(n).unwrap().data_mut()[i] = orig - H;
            let minus = eval(&work);
            work.get_mut(n).unwrap().data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * H));
        }
    }
    gradcheck::GradCheck { analytic, numeric }.relative_error()
}

/// Model parameters in `f64`, scaled up from the training initialiser so the
/// nonlinearities are exercised away from their linear regime.
pub fn scaled_store(store: &ParamStore<f32>, factor: f64) -> ParamStore<f64> {
    let mut s = store.cast::<f64>();
    for (_, t) in s.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
    s
}

pub fn tiny_model_config(memory: MemoryConfig) -> ModelConfig {
    ModelConfig {
        word_dim: 4,
        pixel_dim: 3,
        mem_dim: 4,
        z_dim: 3,
        cond_dim: 3,
        embed_dim: 3,
        max_len: 8,
        base_res: 4,
        stages: 2,
        g_channels: 4,
        d_channels: 2,
        residual_blocks: 1,
        memory,
        share_memory: false,
    }
}

/// Gradient errors of a full refinement stage (memory writing, addressing,
/// reading, gated response, residual blocks, upsampling and image head):
/// `(w.r.t. word and pixel inputs, w.r.t. parameters)`.
pub fn refinement_gradient_errors(memory: MemoryConfig) -> (f64, f64) {
    use dmgan::gan::Generator;
    use dmgan::memory::ImageFeatureMap;
    use dmgan::text::WordFeatures;

    let cfg = tiny_model_config(memory);
    let gen = Generator::new(&cfg);
    let mut s32 = ParamStore::new();
    gen.init(&mut s32, &mut rng::stream(5, &[1]));
    let store = scaled_store(&s32, 15.0);
    let stage = &gen.refiners[0];
    let (t, side) = (3, 2);
    let words = uniform(&[t, cfg.word_dim], -1.0, 1.0, 77);
    let pixels = uniform(&[side * side, cfg.pixel_dim], -1.0, 1.0, 78);

    let run = |g: &mut Graph<f64>, b: &mut Binder<f64>, w: Var, p: Var| -> Result<Var> {
        let prev = ImageFeatureMap {
            features: p,
            height: side,
            width: side,
        };
        let out = stage.forward(g, b, prev, WordFeatures(w))?;
        project(g, out.image, 99)
    };
    let inputs = gradcheck::check(&[words.clone(), pixels.clone()], H, |g, v| {
        let mut b = Binder::new(&store).freeze("");
        run(g, &mut b, v[0], v[1])
    })
    .expect("refinement forward")
    .relative_error();
    let params = param_gradient_error(&store, "g1.", |g, b| {
        let w = g.constant(words.clone());
        let p = g.constant(pixels.clone());
        run(g, b, w, p)
    });
    (inputs, params)
}

/// Parameter-gradient error of the text encoder plus conditioning augmentation.
pub fn text_gradient_error() -> f64 {
    use dmgan::text::{ca_kl_loss, CondAugment, TextEncoder};
    let enc = TextEncoder::new(6, 3, 4, 5).unwrap();
    let ca = CondAugment::new(4, 3);
    let mut s32 = ParamStore::new();
    enc.init(&mut s32, &mut rng::stream(6, &[1]));
    ca.init(&mut s32, &mut rng::stream(6, &[2]));
    let store = scaled_store(&s32, 1.0);
    let mut store = store;
    for (n, t) in store.params_mut() {
        if !n.contains("embed") {
            t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
    }
    let noise = uniform(&[3], -1.0, 1.0, 5);
    param_gradient_error(&store, "", |g, b| {
        let (w, s) = enc.encode(g, b, &[1, 4, 2, 5])?;
        let out = ca.forward(g, b, s, &noise, true)?;
        let kl = ca_kl_loss(g, out.mu, out.logvar)?;
        let a = project(g, w.0, 3)?;
        let c = project(g, out.code, 4)?;
        let ac = g.add(a, c)?;
        g.add(ac, kl)
    })
}

/// Parameter-gradient error of a spectrally normalised discriminator's loss.
pub fn discriminator_gradient_error() -> f64 {
    use dmgan::gan::Discriminator;
    use dmgan::objectives::discriminator_loss;
    let d = Discriminator::new(0, 8, 2, 3);
    let mut s32 = ParamStore::new();
    d.init(&mut s32, &mut rng::stream(7, &[1]));
    let store = scaled_store(&s32, 20.0);
    let real = uniform(&[3, 8, 8], -1.0, 1.0, 11);
    let fake = uniform(&[3, 8, 8], -1.0, 1.0, 12);
    let sent = uniform(&[1, 3], -1.0, 1.0, 13);
    param_gradient_error(&store, "d0.", |g, b| {
        let (xr, xf, s) = (g.constant(real.clone()), g.constant(fake.clone()), g.constant(sent.clone()));
        let lr = d.discriminate(g, b, xr, s)?;
        let lf = d.discriminate(g, b, xf, s)?;
        discriminator_loss(g, &[lr], &[lf], None)
    })
}

/// Small end-to-end training configuration used by the determinism checks.
pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            word_dim: 8,
            pixel_dim: 4,
            mem_dim: 8,
            z_dim: 4,
            cond_dim: 4,
            embed_dim: 4,
            base_res: 8,
            stages: 2,
            g_channels: 8,
            d_channels: 4,
            residual_blocks: 1,
            ..ModelConfig::default()
        },
        batch_size: 4,
        train_samples: 16,
        epochs: 2,
        seed: 3,
        data_seed: 4,
        ..TrainConfig::default()
    }
}

/// Configuration of the directional ablation, sized for one CPU core.
pub fn ablation_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            base_res: 8,
            stages: 2,
            g_channels: 16,
            d_channels: 8,
            ..ModelConfig::default()
        },
        max_steps: 1000,
        ..TrainConfig::default()
    }
}

/// Row-major `x·W + b` for one row.
fn lin(x: &[f64], store: &ParamStore<f64>, layer: &dmgan::nn::Linear) -> Vec<f64> {
    let w = store.get(&layer.weight_name()).unwrap().data();
    let d_out = layer.d_out;
    (0..d_out)
        .map(|k| {
            let mut s: f64 = x.iter().enumerate().map(|(i, xi)| xi * w[i * d_out + k]).sum();
            if layer.bias {
                s += store.get(&layer.bias_name()).unwrap().data()[k];
            }
            s
        })
        .collect()
}

fn sigm(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn max_diff(a: &[Vec<f64>], b: &Tensor<f64>) -> f64 {
    assert_eq!(a.len(), b.shape()[0]);
    a.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Worst deviations over randomised instances.
#[derive(Clone, Copy, Debug, Default)]
pub struct MemoryOracleReport {
    pub write: f64,
    pub address: f64,
    pub read: f64,
    pub respond: f64,
    /// Largest `|Σ_i α_{i,j} − 1|`.
    pub column_sum: f64,
    /// Whether gates pinned at 0 or 1 reduced writing and response exactly.
    pub pinned_exact: bool,
}

/// Compares the memory block against scalar loops on `trials` random
/// instances with `T ≤ 5` words and `N ≤ 9` pixels.
pub fn memory_oracles(trials: u64) -> MemoryOracleReport {
    use dmgan::memory::{key_address, respond_gated, value_read, write_gated, DynamicMemory, ImageFeatureMap};
    use dmgan::text::WordFeatures;

    let mut rep = MemoryOracleReport {
        pinned_exact: true,
        ..Default::default()
    };
    for trial in 0..trials {
        let mut r = rng::stream(0x0AC1E, &[trial]);
        let t = r.random_range(1..=5usize);
        let n = r.random_range(1..=9usize);
        let (nw, nr, nm) = (r.random_range(1..=4usize), r.random_range(1..=4usize), r.random_range(1..=4usize));
        let mem = DynamicMemory::new("m", MemoryConfig::FULL, nw, nr, nm);
        let mut s32 = ParamStore::new();
        mem.init(&mut s32, &mut rng::stream(trial, &[7]));
        let mut store = s32.cast::<f64>();
        for (_, p) in store.params_mut() {
            *p = uniform(p.shape(), -1.0, 1.0, r.random());
        }
        let words = uniform(&[t, nw], -1.0, 1.0, r.random());
        let pixels = uniform(&[n, nr], -1.0, 1.0, r.random());
        let w_rows = rows(&words);
        let p_rows = rows(&pixels);

        // Brute force.
        let rbar: Vec<f64> = (0..nr).map(|k| p_rows.iter().map(|p| p[k]).sum::<f64>() / n as f64).collect();
        let wr = &mem.writer_gated;
        let img_gate = lin(&rbar, &store, &wr.image_gate)[0];
        let from_img = lin(&rbar, &store, &wr.image_proj);
        let slots: Vec<Vec<f64>> = w_rows
            .iter()
            .map(|w| {
                let gate = sigm(lin(w, &store, &wr.word_gate)[0] + img_gate);
                lin(w, &store, &wr.word_proj)
                    .iter()
                    .zip(&from_img)
                    .map(|(a, b)| a * gate + b * (1.0 - gate))
                    .collect()
            })
            .collect();
        let keys: Vec<Vec<f64>> = slots.iter().map(|m| lin(m, &store, &mem.key)).collect();
        let vals: Vec<Vec<f64>> = slots.iter().map(|m| lin(m, &store, &mem.value)).collect();
        let mut alpha = vec![vec![0.0; n]; t];
        for j in 0..n {
            let s: Vec<f64> = keys.iter().map(|k| k.iter().zip(&p_rows[j]).map(|(a, b)| a * b).sum()).collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for i in 0..t {
                alpha[i][j] = s[i].exp() / z;
            }
        }
        let read: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..nr).map(|k| (0..t).map(|i| alpha[i][j] * vals[i][k]).sum()).collect())
            .collect();
        let fused: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let both: Vec<f64> = read[j].iter().chain(&p_rows[j]).copied().collect();
                let gate = sigm(lin(&both, &store, &mem.response_gate)[0]);
                read[j].iter().zip(&p_rows[j]).map(|(o, x)| o * gate + x * (1.0 - gate)).collect()
            })
            .collect();

        // Module under test, one function at a time on identical inputs.
        let mut g = Graph::<f64>::new();
        let mut b = Binder::new(&store);
        let wv = g.constant(words.clone());
        let pv = g.constant(pixels.clone());
        let image = ImageFeatureMap {
            features: pv,
            height: n,
            width: 1,
        };
        let m = write_gated(&mut g, &mut b, wr, WordFeatures(wv), image).unwrap();
        let a = key_address(&mut g, &mut b, &mem.key, m, image).unwrap();
        let o = value_read(&mut g, &mut b, &mem.value, m, a).unwrap();
        let ov = g.constant(Tensor::new(&[n, nr], read.concat()).unwrap());
        let f = respond_gated(&mut g, &mut b, &mem.response_gate, ov, image).unwrap();

        rep.write = rep.write.max(max_diff(&slots, g.value(m.slots)));
        rep.address = rep.address.max(max_diff(&alpha, g.value(a.0)));
        rep.read = rep.read.max(max_diff(&read, g.value(o)));
        rep.respond = rep.respond.max(max_diff(&fused, g.value(f.features)));
        let av = g.value(a.0);
        for j in 0..n {
            let s: f64 = (0..t).map(|i| av.data()[i * n + j]).sum();
            rep.column_sum = rep.column_sum.max((s - 1.0).abs());
        }

        // Pinned gates: writing reduces to one projection, response to one input.
        for (bias, word_side) in [(1e3, true), (-1e3, false)] {
            let mut pinned = store.clone();
            pinned.get_mut(&wr.word_gate.bias_name()).unwrap().data_mut()[0] = bias;
            pinned.get_mut(&mem.response_gate.bias_name()).unwrap().data_mut()[0] = bias;
            let mut g = Graph::<f64>::new();
            let mut b = Binder::new(&pinned);
            let wv = g.constant(words.clone());
            let pv = g.constant(pixels.clone());
            let image = ImageFeatureMap {
                features: pv,
                height: n,
                width: 1,
            };
            let m = write_gated(&mut g, &mut b, wr, WordFeatures(wv), image).unwrap();
            let o = g.constant(Tensor::new(&[n, nr], read.concat()).unwrap());
            let f = respond_gated(&mut g, &mut b, &mem.response_gate, o, image).unwrap();
            let want_slots = if word_side {
                let proj = wr.word_proj.forward(&mut g, &mut b, wv).unwrap();
                g.value(proj).clone()
            } else {
                let x = g.mean_axis(pv, 0).unwrap();
                let proj = wr.image_proj.forward(&mut g, &mut b, x).unwrap();
                let wide = g.expand(proj, &[t, nm]).unwrap();
                g.value(wide).clone()
            };
            let want_fused = if word_side { g.value(o).clone() } else { pixels.clone() };
            let ok_w = g.value(m.slots) == &want_slots;
            let ok_r = g.value(f.features) == &want_fused;
            if !(ok_w && ok_r) {
                eprintln!("trial {trial} word_side={word_side}: write exact {ok_w}, response exact {ok_r}");
            }
            rep.pinned_exact &= ok_w && ok_r;
        }
    }
    rep
}
