//! Spectral normalisation by persistent power iteration.
//!
//! Each normalised weight keeps a left singular vector estimate `u` in the
//! parameter store's buffers under `<weight>.sn_u`. A training step advances
//! it by one power iteration; evaluation reads it unchanged. The graph-side
//! weight is `W / σ` with `σ = uᵀ W v`, where `u` and `v` are constants.

use crate::error::{dim_err, Result};
use crate::nn::{Binder, ParamStore};
use crate::rng::Rng64;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Floor applied to vector norms and to σ for all-zero weights.
pub const EPS: f64 = 1e-12;

/// Persistent power-iteration state for one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormState {
    pub u: Vec<f64>,
}

impl SpectralNormState {
    /// Starts from a normalised vector of length `rows`.
    pub fn new(mut u: Vec<f64>) -> Self {
        normalize(&mut u);
        Self { u }
    }
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
    x.iter_mut().for_each(|v| *v /= n);
}

/// `v = normalize(Wᵀu)` for a row-major `rows×cols` matrix.
fn right_vector(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            v[c] += w[r * cols + c] * u[r];
        }
    }
    normalize(&mut v);
    v
}

fn apply(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| w[r * cols + c] * v[c]).sum())
        .collect()
}

/// Estimate of the top singular value from `u`, without updating it.
pub fn sigma(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> f64 {
    let v = right_vector(w, rows, cols, u);
    let wv = apply(w, rows, cols, &v);
    u.iter().zip(&wv).map(|(a, b)| a * b).sum::<f64>().max(EPS)
}

/// One power iteration: `v = normalize(Wᵀu)`, `u = normalize(Wv)`.
/// Returns `(v, σ = uᵀWv)` with the updated `u`.
pub fn power_step(w: &[f64], rows: usize, cols: usize, state: &mut SpectralNormState) -> (Vec<f64>, f64) {
    let v = right_vector(w, rows, cols, &state.u);
    let mut u = apply(w, rows, cols, &v);
    normalize(&mut u);
    let wv = apply(w, rows, cols, &v);
    let s = u.iter().zip(&wv).map(|(a, b)| a * b).sum::<f64>().max(EPS);
    state.u = u;
    (v, s)
}

/// Returns `W/σ` for a weight viewed as `rows×cols`, optionally advancing `state`.
pub fn spectral_normalize(
    w: &[f64],
    rows: usize,
    cols: usize,
    state: &mut SpectralNormState,
    update: bool,
) -> Result<(Vec<f64>, f64)> {
    if w.len() != rows * cols || state.u.len() != rows {
        return Err(dim_err!(
            "spectral_normalize: {} weights as {rows}x{cols}, u has {}",
            w.len(),
            state.u.len()
        ));
    }
    let s = if update {
        power_step(w, rows, cols, state).1
    } else {
        sigma(w, rows, cols, &state.u)
    };
    Ok((w.iter().map(|x| x / s).collect(), s))
}

pub fn state_name(weight: &str) -> String {
    format!("{weight}.sn_u")
}

pub(crate) fn init_state(store: &mut ParamStore<f32>, weight: &str, rows: usize, rng: &mut Rng64) {
    let u = SpectralNormState::new(
        crate::rng::normal_vec(rng, rows)
            .into_iter()
            .map(f64::from)
            .collect(),
    );
    let t = Tensor::new(&[rows], u.u.iter().map(|&x| x as f32).collect()).expect("rows > 0");
    store.insert_buffer(state_name(weight), t);
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    // Linear weights are stored [d_in, d_out]; convs [c_out, c_in, 3, 3].
    if shape.len() == 4 {
        (shape[0], shape[1..].iter().product())
    } else {
        (shape[0], shape[1])
    }
}

/// Advances every spectral-norm state whose name starts with `prefix` by one
/// power iteration against the current weights.
pub fn update_all<S: Scalar>(store: &mut ParamStore<S>, prefix: &str) -> Result<()> {
    let names: Vec<String> = store
        .buffers()
        .filter(|(n, _)| n.starts_with(prefix) && n.ends_with(".sn_u"))
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let weight = name.trim_end_matches(".sn_u").to_string();
        let w = store.get(&weight)?;
        let (rows, cols) = matrix_dims(w.shape());
        let wd: Vec<f64> = w.data().iter().map(|v| v.to_f64()).collect();
        let buf = store.buffer_mut(&name).expect("listed above");
        let mut st = SpectralNormState {
            u: buf.data().iter().map(|v| v.to_f64()).collect(),
        };
        power_step(&wd, rows, cols, &mut st);
        for (dst, src) in buf.data_mut().iter_mut().zip(&st.u) {
            *dst = S::from_f64(*src);
        }
    }
    Ok(())
}

/// Records `W / (uᵀ W v)` on the graph, with `u` from the store and
/// `v = normalize(Wᵀu)`, both held constant.
pub(crate) fn normalized_weight<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    weight: &str,
    w: Var,
    rows: usize,
    cols: usize,
) -> Result<Var> {
    let u_t = b
        .store()
        .buffer(&state_name(weight))
        .ok_or_else(|| crate::Error::Contract(format!("missing spectral state for {weight}")))?;
    let u: Vec<f64> = u_t.data().iter().map(|v| v.to_f64()).collect();
    let wd: Vec<f64> = g.value(w).data().iter().map(|v| v.to_f64()).collect();
    let v = right_vector(&wd, rows, cols, &u);

    let shape = g.shape(w).to_vec();
    let wm = g.reshape(w, &[rows, cols])?;
    let v_var = g.constant(Tensor::new(&[cols, 1], v.iter().map(|&x| S::from_f64(x)).collect())?);
    let u_var = g.constant(Tensor::new(&[1, rows], u.iter().map(|&x| S::from_f64(x)).collect())?);
    let wv = g.matmul(wm, v_var)?;
    let s = g.matmul(u_var, wv)?;
    let s = g.clamp_min(s, EPS);
    let ones = vec![1; shape.len()];
    let s = g.reshape(s, &ones)?;
    let s = g.expand(s, &shape)?;
    g.div(w, s)
}
