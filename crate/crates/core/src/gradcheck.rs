//! Central finite-difference gradient checking in `f64`.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub fn relative_error(&self) -> f64 {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| a - n)
            .collect();
        let scale = norm(&self.analytic).max(norm(&self.numeric)).max(1e-300);
        norm(&diff) / scale
    }
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// input tensor, using central differences with step `h`.
///
/// `f` receives a fresh graph and one leaf per input; it must be a pure
/// function of those leaves.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    g.backward(out)?;
    let mut analytic = Vec::new();
    for (&leaf, t) in leaves.iter().zip(inputs) {
        match g.grad(leaf) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for ti in 0..work.len() {
        for ei in 0..work[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    Ok(GradCheck { analytic, numeric })
}
