//! Central finite-difference checks of graph gradients.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ModelState};

/// Analytic and numeric gradients of one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl ParamCheck {
    /// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute gap when both are tiny.
    pub fn relative_error(&self) -> f64 {
        let diff = (&self.analytic - &self.numeric).mapv(|v| v * v).sum().sqrt();
        let scale = norm(&self.analytic).max(norm(&self.numeric));
        if scale < 1e-10 {
            diff
        } else {
            diff / scale
        }
    }
}

fn norm(t: &Tensor) -> f64 {
    t.mapv(|v| v * v).sum().sqrt()
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub params: BTreeMap<String, ParamCheck>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.params.values().map(ParamCheck::relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.params
            .iter()
            .map(|(k, p)| (k.as_str(), p.relative_error()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn scalar_loss(state: &ModelState, f: &dyn Fn(&mut Graph, &Bound) -> Result<Var>, trainable: bool) -> Result<(Graph, Bound, Var)> {
    let mut g = Graph::new();
    let bound = state.bind(&mut g, trainable);
    let out = f(&mut g, &bound)?;
    if g.shape(out) != (1, 1) {
        return Err(Error::shape("scalar loss", format!("{:?}", g.shape(out))));
    }
    Ok((g, bound, out))
}

/// Compares backpropagated gradients of the scalar built by `f` with
/// central differences of step `h`, for the parameters selected by `only`.
pub fn check(
    state: &ModelState,
    f: &dyn Fn(&mut Graph, &Bound) -> Result<Var>,
    only: &dyn Fn(&str) -> bool,
    h: f64,
) -> Result<GradCheck> {
    let (g, bound, out) = scalar_loss(state, f, true)?;
    let grads = bound.gradients(&g.backward(out), state);
    let mut params = BTreeMap::new();
    let names: Vec<String> = state.names().filter(|n| only(n)).map(str::to_string).collect();
    let mut probe = state.clone();
    for name in names {
        let shape = state.get(&name)?.raw_dim();
        let mut numeric = Tensor::zeros(shape);
        for idx in 0..numeric.len() {
            let (r, c) = (idx / numeric.ncols(), idx % numeric.ncols());
            let orig = state.get(&name)?[[r, c]];
            probe.get_mut(&name).expect("param")[[r, c]] = orig + h;
            let (gp, _, op) = scalar_loss(&probe, f, false)?;
            let plus = gp.scalar(op);
            probe.get_mut(&name).expect("param")[[r, c]] = orig - h;
            let (gm, _, om) = scalar_loss(&probe, f, false)?;
            let minus = gm.scalar(om);
            probe.get_mut(&name).expect("param")[[r, c]] = orig;
            numeric[[r, c]] = (plus - minus) / (2.0 * h);
        }
        params.insert(
            name.clone(),
            ParamCheck {
                analytic: grads[&name].clone(),
                numeric,
            },
        );
    }
    Ok(GradCheck { params })
}
