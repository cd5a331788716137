//! Central finite differences against reverse-mode gradients.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Backend, Eval, Graph, Var};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::tensor::Tensor;

/// Largest relative error over all inputs of the scalar `f`, measured per
/// input as `‖analytic − numeric‖∞ / max(‖numeric‖∞, 1e-8)`.
pub fn max_relative_error<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<_> = xs.iter().map(|t| g.leaf(Rc::new(t.clone()), false)).collect();
        let out = f(&mut g, &vs);
        g.value(&out).item()
    };
    let mut g = Graph::new();
    let vs: Vec<_> = inputs.iter().map(|t| g.leaf(Rc::new(t.clone()), true)).collect();
    let out = f(&mut g, &vs);
    g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vs[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut numeric = vec![0.0; t.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + step;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - step;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let diff = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = numeric.iter().map(|n| n.abs()).fold(1e-8, f64::max);
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

/// Checks the training loss of `model` against finite differences in a few
/// coordinates of every trainable parameter. Errors are relative to
/// `max(|numeric|, floor)`.
pub fn objective_param_error(model: &FlowModel, x: &Tensor, labels: Option<&[usize]>, step: f64, floor: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let xv = g.constant(x.clone());
    let obj = model.objective(&mut g, &p, &xv, labels)?;
    g.backward(obj.loss)?;
    let loss_at = |m: &FlowModel| -> Result<f64> {
        let mut e = Eval;
        let p = m.params.bind(&mut e);
        let xv = e.constant(x.clone());
        Ok(m.objective(&mut e, &p, &xv, labels)?.loss.item())
    };
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (i, param) in model.params.iter().enumerate() {
        let Some(grad) = g.grad(p[i]) else {
            if param.trainable {
                return Err(Error::Invalid(format!("{} has no gradient", param.name)));
            }
            continue;
        };
        let id = probe.params.id(&param.name).ok_or_else(|| Error::Invalid(format!("unknown parameter {}", param.name)))?;
        let n = param.value.len();
        for j in [0, n / 3, n / 2, n - 1] {
            let orig = param.value.data()[j];
            probe.params.value_mut(id).data_mut()[j] = orig + step;
            let up = loss_at(&probe)?;
            probe.params.value_mut(id).data_mut()[j] = orig - step;
            let down = loss_at(&probe)?;
            probe.params.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max((grad.data()[j] - numeric).abs() / numeric.abs().max(floor));
        }
    }
    Ok(worst)
}
