//! The adversarial training loop.
//!
//! Each step draws one batch, runs the generator once, updates every
//! discriminator (and the matching image encoder) on the detached fakes, then
//! updates the generator, conditioning augmentation and text encoder against
//! the freshly updated discriminators. All randomness is keyed by
//! `(seed, step)` or `(seed, epoch)`, so a run resumed from a checkpoint
//! continues exactly as the uninterrupted run would have.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data;
use crate::error::{Error, Result};
use crate::gan::spectral;
use crate::model::{DmGan, GENERATOR_PREFIXES, MATCHER_PREFIX};
use crate::nn::{grads_of, Binder, ParamStore};
use crate::objectives::{self, LossReport};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};
use crate::text::{ca_kl_loss, Vocabulary};

const SHUFFLE_STREAM: u64 = 0x5AFF;
const NOISE_STREAM: u64 = 0x7015E;

/// Path of the config file stored next to a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("cfg")
}

/// Model, parameters and optimiser state of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub vocab: Vocabulary,
    pub model: DmGan,
    pub store: ParamStore<f32>,
    pub g_opt: Adam,
    pub d_opts: Vec<Adam>,
    pub m_opt: Adam,
    /// Steps completed so far.
    pub step: usize,
}

/// One training batch, rendered at every stage resolution.
struct Batch {
    tokens: Vec<Vec<usize>>,
    /// `real[stage][item]`.
    real: Vec<Vec<Tensor<f32>>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = data::vocabulary();
        let model = DmGan::new(&cfg.model, vocab.len())?;
        let store = model.init(cfg.seed);
        let adam = AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            ..AdamConfig::default()
        };
        let d_prefixes: Vec<String> = model.discriminators.iter().map(|d| format!("{}.", d.prefix)).collect();
        Ok(Self {
            g_opt: Adam::new(adam, &GENERATOR_PREFIXES),
            d_opts: d_prefixes.iter().map(|p| Adam::new(adam, &[p.as_str()])).collect(),
            m_opt: Adam::new(adam, &[MATCHER_PREFIX]),
            cfg,
            vocab,
            model,
            store,
            step: 0,
        })
    }

    /// Dataset indices of the batch trained at `step`.
    pub fn batch_indices(&self, step: usize) -> Vec<u64> {
        let spe = self.cfg.steps_per_epoch();
        let (epoch, pos) = (step / spe, step % spe);
        let mut order: Vec<u64> = (0..self.cfg.train_samples as u64).collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let b = self.cfg.batch_size;
        order[pos * b..(pos + 1) * b].to_vec()
    }

    fn batch(&self, step: usize) -> Batch {
        let idx = self.batch_indices(step);
        let mut tokens = Vec::with_capacity(idx.len());
        let mut real = vec![Vec::with_capacity(idx.len()); self.model.stages()];
        for &i in &idx {
            let (attrs, geom) = data::layout(self.cfg.data_seed, i);
            tokens.push(self.vocab.tokenize(&attrs.caption()).expect("dataset captions tokenize"));
            for (s, r) in real.iter_mut().enumerate() {
                r.push(data::render(attrs, geom, self.cfg.model.resolution(s)));
            }
        }
        Batch { tokens, real }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    /// Runs one training step and returns its losses.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let step = self.step;
        let batch = self.batch(step);
        let n = batch.tokens.len();
        let stages = self.model.stages();
        let mut noise_rng = rng::stream(self.cfg.seed, &[NOISE_STREAM, step as u64]);

        // Generator forward, kept alive for the generator update below.
        let mut g = Graph::<f32>::new();
        let mut gb = Binder::new(&self.store).freeze("d").freeze(MATCHER_PREFIX);
        if self.cfg.freeze_text {
            gb = gb.freeze("text.");
        }
        let mut gens = Vec::with_capacity(n);
        for tokens in &batch.tokens {
            let (z, eps) = self.model.draw_noise(&mut noise_rng);
            gens.push(self.model.generate(&mut g, &mut gb, tokens, &z, &eps, true)?);
        }
        let g_bound = gb.into_bound();
        let fakes: Vec<Vec<Tensor<f32>>> = (0..stages)
            .map(|s| gens.iter().map(|x| g.value(x.stages[s].image).clone()).collect())
            .collect();
        let sentences: Vec<Tensor<f32>> = gens.iter().map(|x| g.value(x.sentence.0).clone()).collect();

        // Discriminator and matcher update.
        spectral::update_all(&mut self.store, "d")?;
        let mut report = LossReport {
            step,
            ..LossReport::default()
        };
        {
            let mut dg = Graph::<f32>::new();
            let mut db = Binder::new(&self.store);
            let sent: Vec<Var> = sentences.iter().map(|s| dg.constant(s.clone())).collect();
            let mut terms = Vec::with_capacity(stages + 1);
            for (s, d) in self.model.discriminators.iter().enumerate() {
                let (mut real, mut fake, mut wrong) = (Vec::new(), Vec::new(), Vec::new());
                for i in 0..n {
                    let xr = dg.constant(batch.real[s][i].clone());
                    let xf = dg.constant(fakes[s][i].clone());
                    real.push(d.discriminate(&mut dg, &mut db, xr, sent[i])?);
                    fake.push(d.discriminate(&mut dg, &mut db, xf, sent[i])?);
                    if self.cfg.mismatch_term {
                        wrong.push(d.discriminate(&mut dg, &mut db, xr, sent[(i + 1) % n])?);
                    }
                }
                let mism = self.cfg.mismatch_term.then_some(wrong.as_slice());
                let loss = objectives::discriminator_loss(&mut dg, &real, &fake, mism)?;
                report.d_loss.push(f64::from(dg.value(loss).item()));
                terms.push(loss);
            }
            let last = stages - 1;
            let mut embs = Vec::with_capacity(n);
            for i in 0..n {
                let x = dg.constant(batch.real[last][i].clone());
                embs.push(self.model.embed_image(&mut dg, &mut db, x)?);
            }
            let imgs = dg.concat(&embs, 0)?;
            let sents = dg.concat(&sent, 0)?;
            let m = objectives::match_loss(&mut dg, imgs, sents, self.cfg.match_gamma)?;
            report.match_real = f64::from(dg.value(m).item());
            terms.push(m);
            let all = dg.concat(&terms, 0)?;
            let total = dg.sum(all);
            check_finite(step, "discriminator", f64::from(dg.value(total).item()))?;
            dg.backward(total)?;
            let grads = db.grads(&dg);
            drop(db);
            for opt in &mut self.d_opts {
                opt.step(&mut self.store, &grads)?;
            }
            self.m_opt.step(&mut self.store, &grads)?;
        }

        // Generator update against the updated discriminators.
        {
            let mut db = Binder::new(&self.store).freeze("");
            let sent: Vec<Var> = sentences.iter().map(|s| g.constant(s.clone())).collect();
            let mut adv = Vec::with_capacity(stages);
            for (s, d) in self.model.discriminators.iter().enumerate() {
                let mut logits = Vec::with_capacity(n);
                for i in 0..n {
                    logits.push(d.discriminate(&mut g, &mut db, gens[i].stages[s].image, sent[i])?);
                }
                let l = objectives::generator_adv_loss(&mut g, &logits)?;
                report.g_adv.push(f64::from(g.value(l).item()));
                adv.push(l);
            }
            let mut kls = Vec::with_capacity(n);
            let mut embs = Vec::with_capacity(n);
            let mut sents = Vec::with_capacity(n);
            for x in &gens {
                kls.push(ca_kl_loss(&mut g, x.ca.mu, x.ca.logvar)?);
                embs.push(self.model.embed_image(&mut g, &mut db, x.final_image())?);
                sents.push(x.sentence.0);
            }
            let kl_all = g.concat(&kls, 0)?;
            let ca = g.mean(kl_all);
            let imgs = g.concat(&embs, 0)?;
            let sents = g.concat(&sents, 0)?;
            let m = objectives::match_loss(&mut g, imgs, sents, self.cfg.match_gamma)?;
            let total =
                objectives::total_generator_loss(&mut g, &adv, ca, m, self.cfg.lambda_ca, self.cfg.lambda_match)?;
            report.ca_loss = f64::from(g.value(ca).item());
            report.match_loss = f64::from(g.value(m).item());
            report.total = f64::from(g.value(total).item());
            check_finite(step, "generator", report.total)?;
            g.backward(total)?;
        }
        let grads: BTreeMap<String, Tensor<f32>> = grads_of(&g, &g_bound);
        self.g_opt.step(&mut self.store, &grads)?;
        if !report.is_finite() {
            return Err(Error::Numerical(format!("losses diverged at step {step}: {report:?}")));
        }
        self.step += 1;
        Ok(report)
    }

    /// Trains to the configured step count, calling `on_step` after each step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &LossReport) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let report = self.train_step()?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    /// Parameters, spectral-norm vectors, optimiser moments and step counter.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (n, t) in self.store.params() {
            c.insert(format!("param.{n}"), t.clone());
        }
        for (n, t) in self.store.buffers() {
            c.insert(format!("buffer.{n}"), t.clone());
        }
        let opts = std::iter::once(("adam.g".to_string(), &self.g_opt))
            .chain(self.d_opts.iter().enumerate().map(|(i, o)| (format!("adam.d{i}"), o)))
            .chain(std::iter::once(("adam.match".to_string(), &self.m_opt)));
        for (prefix, o) in opts {
            for (n, t) in o.export(&prefix) {
                c.insert(n, t);
            }
        }
        c.insert("meta.step", Tensor::scalar(self.step as f32));
        c
    }

    /// Rebuilds a trainer from `cfg` and a checkpoint written by
    /// [`Trainer::to_checkpoint`] under the same model configuration.
    pub fn from_checkpoint(cfg: TrainConfig, c: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        let fresh = std::mem::take(&mut t.store);
        let mut store = ParamStore::new();
        for (n, want) in fresh.params() {
            let got = c.get(&format!("param.{n}"))?;
            if got.shape() != want.shape() {
                return Err(Error::Format(format!(
                    "checkpoint {n} has shape {:?}, model expects {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
            store.insert(n.clone(), got.clone());
        }
        for (n, _) in fresh.buffers() {
            store.insert_buffer(n.clone(), c.get(&format!("buffer.{n}"))?.clone());
        }
        t.store = store;
        t.g_opt.import("adam.g", &c.tensors)?;
        for (i, o) in t.d_opts.iter_mut().enumerate() {
            o.import(&format!("adam.d{i}"), &c.tensors)?;
        }
        t.m_opt.import("adam.match", &c.tensors)?;
        t.step = c.get("meta.step")?.item() as usize;
        Ok(t)
    }

    /// Writes the checkpoint and its config file.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.cfg.save(&config_path(path))?;
        self.to_checkpoint().save(path)
    }

    /// Loads a checkpoint together with its config file.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg_file = config_path(path);
        if !cfg_file.exists() {
            return Err(Error::Missing {
                path: cfg_file,
                hint: "checkpoints are saved with a .cfg file next to them".into(),
            });
        }
        let cfg = TrainConfig::load(&cfg_file)?;
        Self::from_checkpoint(cfg, &Checkpoint::load(path)?)
    }
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} loss is {v} at step {step}")))
    }
}
