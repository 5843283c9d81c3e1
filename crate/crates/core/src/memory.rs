//! Dynamic key-value memory used by each refinement stage.
//!
//! One memory slot is written per word, either from the word alone or by a
//! per-word gate that blends the word with the mean image feature. Each pixel
//! then addresses the slots with a softmax over key similarities, reads the
//! weighted sum of value projections, and fuses it with its own feature by
//! concatenation or by a per-pixel gate.

use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::nn::{Binder, Linear, ParamStore};
use crate::rng::Rng64;
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::text::{Vocabulary, WordFeatures};

/// Per-pixel features `N×N_r` with the spatial extent they came from.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatureMap {
    pub features: Var,
    pub height: usize,
    pub width: usize,
}

impl ImageFeatureMap {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Slots `T×N_m` and, for gated writing, the write gates `T×1`.
#[derive(Clone, Copy, Debug)]
pub struct MemorySlots {
    pub slots: Var,
    pub write_gates: Option<Var>,
}

/// Addressing weights `α`, `T×N`; each column is a distribution over slots.
#[derive(Clone, Copy, Debug)]
pub struct AddressingWeights(pub Var);

/// Ablation switches for the memory block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MemoryConfig {
    /// Separate key and value projections. Without it one projection serves as both.
    pub key_value: bool,
    pub write_gate: bool,
    pub response_gate: bool,
}

impl MemoryConfig {
    pub const BASELINE: Self = Self {
        key_value: false,
        write_gate: false,
        response_gate: false,
    };
    pub const FULL: Self = Self {
        key_value: true,
        write_gate: true,
        response_gate: true,
    };

    /// The four configurations of the ablation ladder, in order.
    pub fn ladder() -> [(&'static str, Self); 4] {
        [
            ("baseline", Self::BASELINE),
            (
                "+M",
                Self {
                    key_value: true,
                    ..Self::BASELINE
                },
            ),
            (
                "+M+WG",
                Self {
                    key_value: true,
                    write_gate: true,
                    response_gate: false,
                },
            ),
            ("+M+WG+RG", Self::FULL),
        ]
    }
}

/// Memory writing from words alone: `m_i = M(w_i)`.
pub fn write_naive<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    proj: &Linear,
    words: WordFeatures,
) -> Result<MemorySlots> {
    let slots = proj.forward(g, b, words.0)?;
    Ok(MemorySlots {
        slots,
        write_gates: None,
    })
}

/// Layers of the gated writer.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedWriter {
    /// `M_w`: words to memory space.
    pub word_proj: Linear,
    /// `M_r`: mean image feature to memory space.
    pub image_proj: Linear,
    /// `A` (plus the gate bias).
    pub word_gate: Linear,
    /// `B`.
    pub image_gate: Linear,
}

impl GatedWriter {
    pub fn new(prefix: &str, word_dim: usize, pixel_dim: usize, mem_dim: usize) -> Self {
        Self {
            word_proj: Linear::new(format!("{prefix}.write_word"), word_dim, mem_dim),
            image_proj: Linear::new(format!("{prefix}.write_image"), pixel_dim, mem_dim),
            word_gate: Linear::new(format!("{prefix}.gate_word"), word_dim, 1),
            image_gate: Linear::new(format!("{prefix}.gate_image"), pixel_dim, 1).without_bias(),
        }
    }

    fn layers(&self) -> [&Linear; 4] {
        [&self.word_proj, &self.image_proj, &self.word_gate, &self.image_gate]
    }
}

/// Gated writing: `g_i = σ(A·w_i + B·r̄)`, `m_i = M_w(w_i)·g_i + M_r(r̄)·(1 − g_i)`
/// with `r̄` the mean pixel feature.
pub fn write_gated<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    writer: &GatedWriter,
    words: WordFeatures,
    image: ImageFeatureMap,
) -> Result<MemorySlots> {
    let t = g.shape(words.0)[0];
    let mem_dim = writer.word_proj.d_out;
    let r_mean = g.mean_axis(image.features, 0)?;

    let word_logit = writer.word_gate.forward(g, b, words.0)?;
    let image_logit = writer.image_gate.forward(g, b, r_mean)?;
    let image_logit = g.expand(image_logit, &[t, 1])?;
    let logit = g.add(word_logit, image_logit)?;
    let gate = g.sigmoid(logit);

    let from_words = writer.word_proj.forward(g, b, words.0)?;
    let from_image = writer.image_proj.forward(g, b, r_mean)?;
    let from_image = g.expand(from_image, &[t, mem_dim])?;

    let gate_wide = g.expand(gate, &[t, mem_dim])?;
    let closed = g.one_minus(gate);
    let closed_wide = g.expand(closed, &[t, mem_dim])?;
    let a = g.mul(from_words, gate_wide)?;
    let c = g.mul(from_image, closed_wide)?;
    let slots = g.add(a, c)?;
    Ok(MemorySlots {
        slots,
        write_gates: Some(gate),
    })
}

/// `α_{i,j} = softmax_i ⟨φ_K(m_i), r_j⟩`.
pub fn key_address<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    key: &Linear,
    mem: MemorySlots,
    image: ImageFeatureMap,
) -> Result<AddressingWeights> {
    let keys = key.forward(g, b, mem.slots)?;
    let pixels_t = g.transpose(image.features)?;
    let sims = g.matmul(keys, pixels_t)?;
    Ok(AddressingWeights(g.softmax(sims, 0)?))
}

/// `o_j = Σ_i α_{i,j} φ_V(m_i)`, returned as `N×N_r`.
pub fn value_read<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    value: &Linear,
    mem: MemorySlots,
    alpha: AddressingWeights,
) -> Result<Var> {
    let values = value.forward(g, b, mem.slots)?;
    let alpha_t = g.transpose(alpha.0)?;
    g.matmul(alpha_t, values)
}

/// `r_new_j = [o_j, r_j]`.
pub fn respond_naive<S: Scalar>(g: &mut Graph<S>, o: Var, image: ImageFeatureMap) -> Result<Var> {
    if g.shape(o)[0] != g.shape(image.features)[0] {
        return Err(dim_err!(
            "response: {} memory rows for {} pixels",
            g.shape(o)[0],
            g.shape(image.features)[0]
        ));
    }
    g.concat(&[o, image.features], 1)
}

/// Output of the gated response along with its gate `N×1`.
#[derive(Clone, Copy, Debug)]
pub struct GatedResponse {
    pub features: Var,
    pub gate: Var,
}

/// `g_j = σ(W·[o_j, r_j] + b)`, `r_new_j = o_j·g_j + r_j·(1 − g_j)`.
pub fn respond_gated<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    gate_layer: &Linear,
    o: Var,
    image: ImageFeatureMap,
) -> Result<GatedResponse> {
    if g.shape(o) != g.shape(image.features) {
        return Err(dim_err!(
            "gated response: memory {:?} vs image {:?}",
            g.shape(o),
            g.shape(image.features)
        ));
    }
    let shape = g.shape(o).to_vec();
    let both = g.concat(&[o, image.features], 1)?;
    let logit = gate_layer.forward(g, b, both)?;
    let gate = g.sigmoid(logit);
    let open = g.expand(gate, &shape)?;
    let closed = g.one_minus(gate);
    let closed = g.expand(closed, &shape)?;
    let a = g.mul(o, open)?;
    let c = g.mul(image.features, closed)?;
    Ok(GatedResponse {
        features: g.add(a, c)?,
        gate,
    })
}

/// Everything one pass through the memory block produced.
#[derive(Clone, Copy, Debug)]
pub struct MemoryTrace {
    pub memory: MemorySlots,
    pub alpha: AddressingWeights,
    pub read: Var,
    pub response_gate: Option<Var>,
    /// Fused per-pixel features, `N×N_r` (gated) or `N×2N_r` (concatenated).
    pub output: Var,
}

/// The memory block of one refinement stage.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicMemory {
    pub config: MemoryConfig,
    pub writer_naive: Linear,
    pub writer_gated: GatedWriter,
    pub key: Linear,
    pub value: Linear,
    pub response_gate: Linear,
}

impl DynamicMemory {
    pub fn new(prefix: &str, config: MemoryConfig, word_dim: usize, pixel_dim: usize, mem_dim: usize) -> Self {
        Self {
            config,
            writer_naive: Linear::new(format!("{prefix}.write"), word_dim, mem_dim),
            writer_gated: GatedWriter::new(prefix, word_dim, pixel_dim, mem_dim),
            key: Linear::new(format!("{prefix}.key"), mem_dim, pixel_dim),
            value: Linear::new(format!("{prefix}.value"), mem_dim, pixel_dim),
            response_gate: Linear::new(format!("{prefix}.response_gate"), 2 * pixel_dim, 1),
        }
    }

    /// Channel count of the fused output.
    pub fn out_dim(&self) -> usize {
        let r = self.key.d_out;
        if self.config.response_gate {
            r
        } else {
            2 * r
        }
    }

    /// Layers that this configuration actually uses.
    pub fn layers(&self) -> Vec<&Linear> {
        let mut v = Vec::new();
        if self.config.write_gate {
            v.extend(self.writer_gated.layers());
        } else {
            v.push(&self.writer_naive);
        }
        v.push(&self.key);
        if self.config.key_value {
            v.push(&self.value);
        }
        if self.config.response_gate {
            v.push(&self.response_gate);
        }
        v
    }

    pub fn init(&self, store: &mut ParamStore<f32>, rng: &mut Rng64) {
        for l in self.layers() {
            if !store.contains(&l.weight_name()) {
                l.init(store, rng);
            }
        }
    }

    fn value_proj(&self) -> &Linear {
        if self.config.key_value {
            &self.value
        } else {
            &self.key
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &mut Binder<S>,
        words: WordFeatures,
        image: ImageFeatureMap,
    ) -> Result<MemoryTrace> {
        let memory = if self.config.write_gate {
            write_gated(g, b, &self.writer_gated, words, image)?
        } else {
            write_naive(g, b, &self.writer_naive, words)?
        };
        let alpha = key_address(g, b, &self.key, memory, image)?;
        let read = value_read(g, b, self.value_proj(), memory, alpha)?;
        let (output, response_gate) = if self.config.response_gate {
            let r = respond_gated(g, b, &self.response_gate, read, image)?;
            (r.features, Some(r.gate))
        } else {
            (respond_naive(g, read, image)?, None)
        };
        Ok(MemoryTrace {
            memory,
            alpha,
            read,
            response_gate,
            output,
        })
    }
}

/// Top-k word rankings from the writing gates and from addressing.
#[derive(Clone, Debug, PartialEq)]
pub struct WordRankings {
    /// `(word index, gate value)`; empty when writing is ungated.
    pub write_gate: Vec<(usize, f64)>,
    /// `(word index, pixel-averaged addressing weight)`.
    pub addressing: Vec<(usize, f64)>,
}

fn rank(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps the lower index first on ties
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.into_iter().take(k).map(|i| (i, scores[i])).collect()
}

/// Ranks words by write gate and by mean addressing weight `(1/N) Σ_j α_{i,j}`,
/// each descending with ties broken by lower index.
pub fn top_k_words<S: Scalar>(alpha: &Tensor<S>, gates: Option<&[S]>, k: usize) -> Result<WordRankings> {
    if alpha.rank() != 2 {
        return Err(dim_err!("addressing weights must be T×N, got {:?}", alpha.shape()));
    }
    let (t, n) = (alpha.shape()[0], alpha.shape()[1]);
    if k > t {
        return Err(Error::Contract(format!("k = {k} exceeds {t} words")));
    }
    let mean: Vec<f64> = (0..t)
        .map(|i| alpha.row(i).iter().map(|v| v.to_f64()).sum::<f64>() / n as f64)
        .collect();
    let write_gate = match gates {
        Some(gs) => {
            if gs.len() != t {
                return Err(dim_err!("{} gates for {t} words", gs.len()));
            }
            let gs: Vec<f64> = gs.iter().map(|v| v.to_f64()).collect();
            rank(&gs, k)
        }
        None => Vec::new(),
    };
    Ok(WordRankings {
        write_gate,
        addressing: rank(&mean, k),
    })
}

/// JSON form of [`WordRankings`] with tokens spelled out.
#[derive(Clone, Debug, Serialize)]
pub struct RankingsJson {
    pub write_gate_topk: Vec<(String, f64)>,
    pub addressing_topk: Vec<(String, f64)>,
}

impl WordRankings {
    pub fn to_json(&self, vocab: &Vocabulary, tokens: &[usize]) -> RankingsJson {
        let name = |i: usize| {
            tokens
                .get(i)
                .and_then(|&id| vocab.token(id))
                .unwrap_or("?")
                .to_string()
        };
        RankingsJson {
            write_gate_topk: self.write_gate.iter().map(|&(i, s)| (name(i), s)).collect(),
            addressing_topk: self.addressing.iter().map(|&(i, s)| (name(i), s)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn single_slot_addressing_is_all_ones() {
        let mut store = ParamStore::<f64>::new();
        store.insert("k.w", mat(2, 2, &[0.3, -1.0, 2.0, 0.5]));
        store.insert("k.b", mat(1, 2, &[0.0, 0.1]));
        let key = Linear::new("k", 2, 2);
        let mut g = Graph::<f64>::new();
        let mut b = Binder::new(&store);
        let slots = g.constant(mat(1, 2, &[0.7, -0.2]));
        let feats = g.constant(mat(3, 2, &[1., 2., -3., 0.5, 0., 9.]));
        let mem = MemorySlots { slots, write_gates: None };
        let img = ImageFeatureMap { features: feats, height: 1, width: 3 };
        let a = key_address(&mut g, &mut b, &key, mem, img).unwrap();
        assert_eq!(g.value(a.0).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn naive_response_is_concat() {
        let mut g = Graph::<f64>::new();
        let o = g.constant(Tensor::zeros(&[2, 3]));
        let r = g.constant(mat(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let img = ImageFeatureMap { features: r, height: 1, width: 2 };
        let out = respond_naive(&mut g, o, img).unwrap();
        assert_eq!(g.shape(out), &[2, 6]);
        assert_eq!(g.value(out).data(), &[0., 0., 0., 1., 2., 3., 0., 0., 0., 4., 5., 6.]);
        let short = g.constant(Tensor::zeros(&[3, 3]));
        assert!(respond_naive(&mut g, short, img).is_err());
    }

    #[test]
    fn rankings_tie_break_and_bounds() {
        let alpha = Tensor::<f64>::full(&[4, 3], 0.25);
        let gates = [0.2, 0.9, 0.5, 0.7];
        let r = top_k_words(&alpha, Some(&gates), 3).unwrap();
        assert_eq!(r.write_gate.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 3, 2]);
        assert_eq!(r.addressing.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(top_k_words(&alpha, None, 5).is_err());
        let all = top_k_words(&alpha, None, 4).unwrap();
        let mut ids: Vec<usize> = all.addressing.iter().map(|p| p.0).collect();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert!(all.write_gate.is_empty());
    }

    #[test]
    fn ladder_order() {
        let names: Vec<&str> = MemoryConfig::ladder().iter().map(|p| p.0).collect();
        assert_eq!(names, ["baseline", "+M", "+M+WG", "+M+WG+RG"]);
    }
}
