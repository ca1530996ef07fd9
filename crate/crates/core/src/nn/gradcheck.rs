use serde::Serialize;

use super::loss::LossKind;
use super::net::Net;
use super::train::{batch_objective, TrainData};
use crate::error::Result;

/// Denominator floor for relative errors on near-zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of the training objective against central
/// differences for every trainable parameter entry. The generator state is
/// restored before each evaluation so dropout masks stay fixed.
pub fn grad_check(net: &Net, data: &TrainData, loss: &LossKind, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut net = net.clone();
    let rng0 = net.rng.clone();
    net.rng = rng0.clone();
    batch_objective(&mut net, data, loss, true)?;
    let analytic: Vec<Vec<f64>> = net.params().filter(|p| p.trainable).map(|p| p.grad.data().to_vec()).collect();
    let names: Vec<String> = net.params().filter(|p| p.trainable).map(|p| p.name.clone()).collect();

    let mut params = Vec::with_capacity(names.len());
    for (pi, name) in names.iter().enumerate() {
        let mut worst_rel: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        for k in 0..analytic[pi].len() {
            let eval = |delta: f64, net: &mut Net| -> Result<f64> {
                let p = net.params_mut().filter(|p| p.trainable).nth(pi).expect("same order");
                let orig = p.value.data()[k];
                p.value.data_mut()[k] = orig + delta;
                net.rng = rng0.clone();
                let l = batch_objective(net, data, loss, false)?.total;
                let p = net.params_mut().filter(|p| p.trainable).nth(pi).expect("same order");
                p.value.data_mut()[k] = orig;
                Ok(l)
            };
            let plus = eval(eps, &mut net)?;
            let minus = eval(-eps, &mut net)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][k];
            worst_rel = worst_rel.max(rel_err(a, numeric));
            worst_abs = worst_abs.max((a - numeric).abs());
        }
        params.push(ParamCheck { name: name.clone(), max_rel_err: worst_rel, max_abs_err: worst_abs });
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { params, max_rel_err, tol, passed: max_rel_err < tol })
}
