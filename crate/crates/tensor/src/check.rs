//! Central finite-difference gradient checking.
//!
//! Used by test suites across the workspace as the independent oracle for
//! every analytic backward implementation, so it lives in the library rather
//! than in any single crate's test tree.

use crate::graph::{Graph, ValueId};
use crate::tensor::Tensor;

/// Default step for central differences in 64-bit mode.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug)]
pub struct GradReport {
    /// Worst relative error across all checked elements.
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub elements_checked: usize,
}

/// Relative error with an absolute floor so near-zero pairs do not blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences, elementwise over every input tensor.
///
/// `build` must construct the same function each call; inputs are inserted
/// as trainable leaves in order.
pub fn check_gradients<F>(inputs: &[Tensor], mut build: F, h: f64) -> GradReport
where
    F: FnMut(&mut Graph, &[ValueId]) -> ValueId,
{
    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<ValueId> =
        inputs.iter().map(|t| g.param(t.clone()).expect("finite input")).collect();
    let loss = build(&mut g, &ids);
    assert_eq!(g.value(loss).len(), 1, "gradient check needs a scalar loss");
    let grads = g.backward(loss).expect("backward");
    let analytic: Vec<Tensor> =
        ids.iter().zip(inputs).map(|(&id, t)| grads.get_or_zeros(id, t.shape())).collect();

    let eval = |tensors: &[Tensor], build: &mut F| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<ValueId> =
            tensors.iter().map(|t| g.param(t.clone()).expect("finite input")).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).item()
    };

    let mut report = GradReport { max_rel_err: 0.0, worst: None, elements_checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let orig = t.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let fp = eval(&work, &mut build);
            work[ti].data_mut()[ei] = orig - h;
            let fm = eval(&work, &mut build);
            work[ti].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            let e = rel_err(a, numeric);
            report.elements_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((ti, ei, a, numeric));
            }
        }
    }
    report
}

/// Finite-difference gradient of an arbitrary scalar function of flat inputs.
/// Independent oracle for kernels that are not built on the graph.
pub fn finite_diff<F>(x: &[f64], mut f: F, h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}
