use crate::error::{dim_err, Result};
use crate::nn::{Binder, Conv3x3, Linear, ParamStore};
use crate::rng::Rng64;
use crate::tensor::{Graph, Scalar, Var};

/// Spectral-normalised discriminator for one resolution, with an
/// unconditional and a sentence-conditioned logit.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub prefix: String,
    pub resolution: usize,
    pub convs: Vec<Conv3x3>,
    pub uncond: Linear,
    pub joint: Conv3x3,
    pub cond: Linear,
    pub sentence_dim: usize,
}

/// Logits of both heads, each `1×1`.
#[derive(Clone, Copy, Debug)]
pub struct Logits {
    pub uncond: Var,
    pub cond: Var,
}

impl Discriminator {
    /// Stride-2 convolutions take `resolution` down to 4×4.
    pub fn new(stage: usize, resolution: usize, channels: usize, sentence_dim: usize) -> Self {
        let prefix = format!("d{stage}");
        let n = (resolution / 4).trailing_zeros() as usize;
        let mut convs = Vec::new();
        let mut c_in = 3;
        let mut c = channels;
        for i in 0..n {
            convs.push(Conv3x3::new(format!("{prefix}.conv{i}"), c_in, c).stride(2).spectral());
            c_in = c;
            c = (c * 2).min(channels * 8);
        }
        let feat = c_in;
        Self {
            uncond: Linear::new(format!("{prefix}.uncond"), feat * 16, 1).spectral(),
            joint: Conv3x3::new(format!("{prefix}.joint"), feat + sentence_dim, feat).spectral(),
            cond: Linear::new(format!("{prefix}.cond"), feat * 16, 1).spectral(),
            prefix,
            resolution,
            convs,
            sentence_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore<f32>, rng: &mut Rng64) {
        for c in &self.convs {
            c.init(store, rng);
        }
        self.uncond.init(store, rng);
        self.joint.init(store, rng);
        self.cond.init(store, rng);
    }

    /// `x` is `[3,R,R]`; `sentence` is `1×sentence_dim`.
    pub fn discriminate<S: Scalar>(&self, g: &mut Graph<S>, b: &mut Binder<S>, x: Var, sentence: Var) -> Result<Logits> {
        let r = self.resolution;
        if g.shape(x) != [3, r, r] {
            return Err(dim_err!("discriminator for {r}x{r} got image {:?}", g.shape(x)));
        }
        if g.shape(sentence) != [1, self.sentence_dim] {
            return Err(dim_err!("sentence code {:?}, expected [1, {}]", g.shape(sentence), self.sentence_dim));
        }
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, b, h)?;
            h = g.leaky_relu(h);
        }
        let feat = g.shape(h)[0];
        let flat = g.reshape(h, &[1, feat * 16])?;
        let uncond = self.uncond.forward(g, b, flat)?;

        let s = g.reshape(sentence, &[self.sentence_dim, 1, 1])?;
        let s = g.expand(s, &[self.sentence_dim, 4, 4])?;
        let joint = g.concat(&[h, s], 0)?;
        let j = self.joint.forward(g, b, joint)?;
        let j = g.leaky_relu(j);
        let jflat = g.reshape(j, &[1, feat * 16])?;
        let cond = self.cond.forward(g, b, jflat)?;
        Ok(Logits { uncond, cond })
    }
}
