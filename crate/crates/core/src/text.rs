//! Captions to word and sentence features, plus conditioning augmentation.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Binder, Linear, ParamStore};
use crate::rng::Rng64;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const PAD: usize = 0;
const PAD_TOKEN: &str = "<pad>";

/// Bijective token/id map with `PAD` at id 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary over `tokens` in order; ids start at 1.
    pub fn new<I, T>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut v = Self {
            tokens: vec![PAD_TOKEN.to_string()],
            index: HashMap::new(),
        };
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) || t == PAD_TOKEN {
                return Err(Error::Vocabulary(format!("invalid token {t:?}")));
            }
            if v.index.contains_key(&t) {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
            v.index.insert(t.clone(), v.tokens.len());
            v.tokens.push(t);
        }
        Ok(v)
    }

    /// Number of ids including `PAD`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lowercases and splits on whitespace.
    pub fn tokenize(&self, caption: &str) -> Result<Vec<usize>> {
        caption
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.id(&w)
                    .ok_or_else(|| Error::Vocabulary(format!("unknown token {w:?}")))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(PAD_TOKEN) => {}
            other => {
                return Err(Error::Vocabulary(format!(
                    "first line must be {PAD_TOKEN}, found {other:?}"
                )))
            }
        }
        Self::new(lines.map(str::to_string))
    }
}

/// Word features `T×N_w` on a graph.
#[derive(Clone, Copy, Debug)]
pub struct WordFeatures(pub Var);

/// Sentence feature `1×N_w` on a graph.
#[derive(Clone, Copy, Debug)]
pub struct SentenceFeature(pub Var);

/// Embedding table followed by a bidirectional GRU.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub prefix: String,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden size per direction; word features have twice this width.
    pub hidden: usize,
    pub max_len: usize,
}

struct GruDir {
    input: Linear,
    recurrent: Linear,
}

impl TextEncoder {
    pub fn new(vocab_size: usize, embed_dim: usize, word_dim: usize, max_len: usize) -> Result<Self> {
        if !word_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("word dimension {word_dim} must be even")));
        }
        Ok(Self {
            prefix: "text".into(),
            vocab_size,
            embed_dim,
            hidden: word_dim / 2,
            max_len,
        })
    }

    pub fn word_dim(&self) -> usize {
        2 * self.hidden
    }

    fn embed_name(&self) -> String {
        format!("{}.embed", self.prefix)
    }

    fn dir(&self, tag: &str) -> GruDir {
        GruDir {
            input: Linear::new(format!("{}.{tag}.x", self.prefix), self.embed_dim, 3 * self.hidden),
            recurrent: Linear::new(format!("{}.{tag}.h", self.prefix), self.hidden, 3 * self.hidden),
        }
    }

    pub fn init(&self, store: &mut ParamStore<f32>, rng: &mut Rng64) {
        store.insert(
            self.embed_name(),
            Tensor::randn(&[self.vocab_size, self.embed_dim], 1.0, rng),
        );
        for tag in ["fwd", "bwd"] {
            let d = self.dir(tag);
            d.input.init(store, rng);
            d.recurrent.init(store, rng);
        }
    }

    /// Validates ids and drops `PAD`s.
    pub fn check_tokens(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Vocabulary(format!(
                "token id {bad} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        let ids: Vec<usize> = tokens.iter().copied().filter(|&t| t != PAD).collect();
        if ids.is_empty() || ids.len() > self.max_len {
            return Err(Error::Contract(format!(
                "caption must have 1..={} tokens, got {}",
                self.max_len,
                ids.len()
            )));
        }
        Ok(ids)
    }

    fn run_dir<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &mut Binder<S>,
        dir: &GruDir,
        emb: Var,
        order: impl Iterator<Item = usize>,
        t_len: usize,
    ) -> Result<Vec<Var>> {
        let h_dim = self.hidden;
        let xw = dir.input.forward(g, b, emb)?;
        let mut h = g.constant(Tensor::zeros(&[1, h_dim]));
        let mut states = vec![h; t_len];
        for t in order {
            let xt = g.slice(xw, 0, t, 1)?;
            let hu = dir.recurrent.forward(g, b, h)?;
            let gate = |g: &mut Graph<S>, src: Var, k: usize| g.slice(src, 1, k * h_dim, h_dim);
            let (xz, xr, xn) = (gate(g, xt, 0)?, gate(g, xt, 1)?, gate(g, xt, 2)?);
            let (hz, hr, hn) = (gate(g, hu, 0)?, gate(g, hu, 1)?, gate(g, hu, 2)?);
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z);
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r);
            let rh = g.mul(r, hn)?;
            let n = g.add(xn, rh)?;
            let n = g.tanh(n);
            // h' = n + z ⊙ (h − n)
            let d = g.sub(h, n)?;
            let zd = g.mul(z, d)?;
            h = g.add(n, zd)?;
            states[t] = h;
        }
        Ok(states)
    }

    /// Word features (row `i` = token `i`) and the sentence feature
    /// `[last forward state, last backward state]`.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &mut Binder<S>,
        tokens: &[usize],
    ) -> Result<(WordFeatures, SentenceFeature)> {
        let ids = self.check_tokens(tokens)?;
        let t_len = ids.len();
        let table = b.get(g, &self.embed_name())?;
        let emb = g.gather_rows(table, &ids)?;
        let fwd = self.run_dir(g, b, &self.dir("fwd"), emb, 0..t_len, t_len)?;
        let bwd = self.run_dir(g, b, &self.dir("bwd"), emb, (0..t_len).rev(), t_len)?;
        let f = g.concat(&fwd, 0)?;
        let r = g.concat(&bwd, 0)?;
        let words = g.concat(&[f, r], 1)?;
        let sent = g.concat(&[fwd[t_len - 1], bwd[0]], 1)?;
        Ok((WordFeatures(words), SentenceFeature(sent)))
    }
}

/// Learned Gaussian around the sentence feature, resampled per use.
#[derive(Clone, Debug, PartialEq)]
pub struct CondAugment {
    pub mu: Linear,
    pub logvar: Linear,
}

/// Graph handles produced by [`CondAugment::forward`].
#[derive(Clone, Copy, Debug)]
pub struct CaOutput {
    pub mu: Var,
    pub logvar: Var,
    pub code: Var,
}

impl CondAugment {
    pub fn new(word_dim: usize, cond_dim: usize) -> Self {
        Self {
            mu: Linear::new("ca.mu", word_dim, cond_dim),
            logvar: Linear::new("ca.logvar", word_dim, cond_dim),
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.mu.d_out
    }

    pub fn init(&self, store: &mut ParamStore<f32>, rng: &mut Rng64) {
        self.mu.init(store, rng);
        self.logvar.init(store, rng);
    }

    /// `ŝ = μ + exp(½·logσ²) ⊙ noise` in train mode, `ŝ = μ` otherwise.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &mut Binder<S>,
        s: SentenceFeature,
        noise: &Tensor<S>,
        train_mode: bool,
    ) -> Result<CaOutput> {
        let mu = self.mu.forward(g, b, s.0)?;
        let logvar = self.logvar.forward(g, b, s.0)?;
        if noise.numel() != self.cond_dim() {
            return Err(crate::error::dim_err!(
                "noise has {} entries, condition has {}",
                noise.numel(),
                self.cond_dim()
            ));
        }
        let code = if train_mode {
            let half = g.scale(logvar, 0.5);
            let std = g.exp(half);
            let eps = g.constant(noise.clone().reshaped(&[1, self.cond_dim()])?);
            let spread = g.mul(std, eps)?;
            g.add(mu, spread)?
        } else {
            mu
        };
        Ok(CaOutput { mu, logvar, code })
    }
}

/// `KL(N(μ, diag exp(logσ²)) ‖ N(0, I)) = ½ Σ (μ² + exp(logσ²) − logσ² − 1)`.
pub fn ca_kl_loss<S: Scalar>(g: &mut Graph<S>, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(logvar);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, logvar)?;
    let c = g.affine(b, 1.0, -1.0);
    let total = g.sum(c);
    Ok(g.scale(total, 0.5))
}
