//! Closed-form, metric, spectral, persistence and inspection checks.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::RngExt;

use dmgan::checkpoint::Checkpoint;
use dmgan::config::TrainConfig;
use dmgan::evaluate::{inspect, inspection_noise};
use dmgan::gan::discriminator::Logits;
use dmgan::gan::spectral::{power_step, spectral_normalize, SpectralNormState};
use dmgan::memory::top_k_words;
use dmgan::metrics::{fid, gaussian_stats, inception_score, r_precision, GaussianStats, RetrievalConfig};
use dmgan::nn::Binder;
use dmgan::objectives::{discriminator_loss, generator_adv_loss, total_generator_loss};
use dmgan::rng;
use dmgan::tensor::{Graph, Tensor};
use dmgan::text::ca_kl_loss;
use dmgan::train::Trainer;

#[derive(Clone, Copy, Debug)]
pub struct LossForms {
    pub d_chance: f64,
    pub g_chance: f64,
    pub kl_standard: f64,
    /// `|graph total − hand arithmetic|` of the weighted generator objective.
    pub weighting_err: f64,
    pub lambdas: (f64, f64),
}

fn zero_logits(g: &mut Graph<f64>, n: usize) -> Vec<Logits> {
    (0..n)
        .map(|_| Logits {
            uncond: g.constant(Tensor::scalar(0.0)),
            cond: g.constant(Tensor::scalar(0.0)),
        })
        .collect()
}

pub fn loss_closed_forms() -> LossForms {
    let mut g = Graph::<f64>::new();
    let real = zero_logits(&mut g, 3);
    let fake = zero_logits(&mut g, 3);
    let d = discriminator_loss(&mut g, &real, &fake, None).unwrap();
    let ga = generator_adv_loss(&mut g, &fake).unwrap();

    let mu = g.constant(Tensor::zeros(&[1, 6]));
    let lv = g.constant(Tensor::zeros(&[1, 6]));
    let kl = ca_kl_loss(&mut g, mu, lv).unwrap();

    let cfg = TrainConfig::default();
    let (l1, l2) = (cfg.lambda_ca, cfg.lambda_match);
    let (a0, a1, ca, m) = (0.8125, 1.375, 0.25, 0.0625);
    let adv = [g.constant(Tensor::scalar(a0)), g.constant(Tensor::scalar(a1))];
    let cav = g.constant(Tensor::scalar(ca));
    let mv = g.constant(Tensor::scalar(m));
    let total = total_generator_loss(&mut g, &adv, cav, mv, l1, l2).unwrap();
    let by_hand = a0 + a1 + l1 * ca + l2 * m;

    LossForms {
        d_chance: g.value(d).item(),
        g_chance: g.value(ga).item(),
        kl_standard: g.value(kl).item(),
        weighting_err: (g.value(total).item() - by_hand).abs(),
        lambdas: (l1, l2),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetricOracles {
    pub fid_self: f64,
    pub fid_scalar: f64,
    pub is_constant: f64,
    pub is_one_hot: f64,
    pub rp_separable: f64,
    pub rp_degenerate: f64,
}

fn gaussian(m: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    Tensor::randn(&[m, d], 1.0, &mut r)
}

pub fn metric_oracles() -> MetricOracles {
    let feats = gaussian(400, 12, 1);
    let s = gaussian_stats(&feats).unwrap();
    let fid_self = fid(&s, &s).unwrap();
    let one = |mean: f64, var: f64| GaussianStats {
        mean: vec![mean],
        cov: vec![var],
    };
    let fid_scalar = fid(&one(0.0, 1.0), &one(1.0, 4.0)).unwrap();

    let (m, c) = (1000, 4);
    let constant = Tensor::from_fn(&[m, c], |k| [0.1, 0.2, 0.3, 0.4][k % c]);
    let is_constant = inception_score(&constant, 10).unwrap().mean;
    let one_hot = Tensor::from_fn(&[m, c], |k| if k % c == (k / c) % c { 1.0 } else { 0.0 });
    let is_one_hot = inception_score(&one_hot, 10).unwrap().mean;

    let labels: Vec<usize> = (0..m).map(|i| i % 48).collect();
    let caps = gaussian(m, 16, 2);
    let cfg = RetrievalConfig { seed: 5, ..RetrievalConfig::default() };
    let rp_separable = r_precision(&caps, &caps, &labels, &caps, &labels, &cfg).unwrap().mean;
    let flat = Tensor::full(&[m, 16], 1.0);
    let rp_degenerate = r_precision(&flat, &flat, &labels, &flat, &labels, &cfg).unwrap().mean;

    MetricOracles {
        fid_self,
        fid_scalar,
        is_constant,
        is_one_hot,
        rp_separable,
        rp_degenerate,
    }
}

/// σ estimated for diag(3, 1) after `iters` power iterations from a random start.
pub fn diag_sigma(iters: usize) -> f64 {
    let w = [3.0, 0.0, 0.0, 1.0];
    let mut r = rng::seeded(9);
    let mut st = SpectralNormState::new(vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
    let mut s = 0.0;
    for _ in 0..iters {
        s = power_step(&w, 2, 2, &mut st).1;
    }
    s
}

/// Largest singular value, by SVD, of random `n×n` weights after `iters`
/// normalisation steps, worst over `trials`. Returns the value furthest from 1.
pub fn normalized_top_singular(n: usize, iters: usize, trials: u64) -> f64 {
    let mut worst = 1.0f64;
    for t in 0..trials {
        let mut r = rng::stream(11, &[t]);
        let w: Vec<f64> = (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut st = SpectralNormState::new((0..n).map(|_| r.random_range(-1.0..1.0)).collect());
        let mut normed = Vec::new();
        for _ in 0..iters {
            normed = spectral_normalize(&w, n, n, &mut st, true).unwrap().0;
        }
        let top = DMatrix::from_row_slice(n, n, &normed).singular_values().max();
        if (top - 1.0).abs() > (worst - 1.0).abs() {
            worst = top;
        }
    }
    worst
}

#[derive(Clone, Copy, Debug)]
pub struct Persistence {
    pub repeat_identical: bool,
    pub round_trip_identical: bool,
    pub file_round_trip_identical: bool,
    pub resume_identical: bool,
}

fn bytes(t: &Trainer) -> Vec<u8> {
    t.to_checkpoint().to_bytes()
}

pub fn persistence(cfg: &TrainConfig, dir: &std::path::Path) -> Persistence {
    let full = |cfg: &TrainConfig| {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.run(|_, _| Ok(())).unwrap();
        t
    };
    let a = full(cfg);
    let b = full(cfg);
    let reference = bytes(&a);

    let parsed = Checkpoint::read(&mut reference.as_slice()).unwrap();
    let reloaded = Trainer::from_checkpoint(cfg.clone(), &parsed).unwrap();
    let round_trip_identical = parsed.to_bytes() == reference && bytes(&reloaded) == reference;

    let path = dir.join("full.dmgk");
    a.save(&path).unwrap();
    let on_disk = std::fs::read(&path).unwrap();
    let again = Trainer::load(&path).unwrap();
    let file_round_trip_identical = on_disk == reference && bytes(&again) == reference;

    let mut first = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..cfg.total_steps() / 2 + 1 {
        first.train_step().unwrap();
    }
    let mid = dir.join("mid.dmgk");
    first.save(&mid).unwrap();
    drop(first);
    let mut second = Trainer::load(&mid).unwrap();
    second.run(|_, _| Ok(())).unwrap();

    Persistence {
        repeat_identical: bytes(&b) == reference,
        round_trip_identical,
        file_round_trip_identical,
        resume_identical: bytes(&second) == reference,
    }
}

#[derive(Clone, Debug, Default)]
pub struct InspectionCheck {
    pub refinement_stages: usize,
    pub emitted_stages: usize,
    /// Per emitted stage: the key set of its JSON object.
    pub keys: Vec<Vec<String>>,
    pub lengths: Vec<(usize, usize)>,
    pub descending: bool,
    pub matches_in_process: bool,
}

pub fn inspection(trainer: &Trainer, caption: &str, k: usize, seed: u64) -> InspectionCheck {
    let ins = inspect(&trainer.model, &trainer.store, &trainer.vocab, caption, k, seed).unwrap();
    let json: serde_json::Value = serde_json::from_str(&serde_json::to_string(&ins).unwrap()).unwrap();
    let stages = json["stages"].as_array().unwrap();

    // independent forward pass with the same noise
    let ids = trainer.model.text.check_tokens(&trainer.vocab.tokenize(caption).unwrap()).unwrap();
    let (z, eps) = inspection_noise(&trainer.model, seed);
    let mut g = Graph::<f32>::new();
    let mut b = Binder::new(&trainer.store).freeze("");
    let gen = trainer.model.generate(&mut g, &mut b, &ids, &z, &eps, false).unwrap();
    let mut expected = BTreeMap::new();
    for (s, out) in gen.stages.iter().enumerate() {
        if let Some(trace) = out.memory {
            let gates = trace.memory.write_gates.map(|v| g.value(v).data().to_vec());
            expected.insert(s, top_k_words(g.value(trace.alpha.0), gates.as_deref(), k).unwrap());
        }
    }

    let word = |i: usize| trainer.vocab.token(ids[i]).unwrap().to_string();
    let mut check = InspectionCheck {
        refinement_stages: trainer.model.config.stages - 1,
        emitted_stages: stages.len(),
        descending: true,
        matches_in_process: stages.len() == expected.len(),
        ..Default::default()
    };
    for st in stages {
        let obj = st.as_object().unwrap();
        check.keys.push(obj.keys().cloned().collect());
        let list = |key: &str| -> Vec<(String, f64)> {
            obj[key]
                .as_array()
                .unwrap()
                .iter()
                .map(|e| (e[0].as_str().unwrap().to_string(), e[1].as_f64().unwrap()))
                .collect()
        };
        let (wg, ad) = (list("write_gate_topk"), list("addressing_topk"));
        check.lengths.push((wg.len(), ad.len()));
        check.descending &= [&wg, &ad].iter().all(|l| l.windows(2).all(|p| p[0].1 >= p[1].1));
        let stage = st["stage"].as_u64().unwrap() as usize;
        let same = |got: &[(String, f64)], want: &[(usize, f64)]| {
            got.len() == want.len() && got.iter().zip(want).all(|(a, b)| a.0 == word(b.0) && a.1 == b.1)
        };
        check.matches_in_process &= expected
            .get(&stage)
            .is_some_and(|r| same(&wg, &r.write_gate) && same(&ad, &r.addressing));
    }
    check
}
