//! Central-difference verification of analytic gradients.

use super::graph::{Graph, NodeId, NumericsError};
use super::tensor::Tensor;

/// Compare every parameter gradient against a central finite difference of
/// the loss, returning the worst relative error
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
///
/// Runs in 64-bit precision only; two extra forward passes per parameter
/// entry make this strictly a test-time tool.
pub fn finite_difference_check(
    graph: &mut Graph<f64>,
    inputs: &[(&str, Tensor<f64>)],
    loss: NodeId,
    epsilon: f64,
) -> Result<f64, NumericsError> {
    assert!(
        (1e-7..=1e-3).contains(&epsilon),
        "epsilon {epsilon} outside sensible central-difference range"
    );
    graph.evaluate(inputs, &[loss])?;
    graph.backward(loss)?;
    let analytic: Vec<(NodeId, Tensor<f64>)> = graph
        .param_ids()
        .iter()
        .map(|&p| (p, graph.grad(p).cloned().expect("gradient after backward")))
        .collect();

    let mut worst = 0.0_f64;
    for (param, grads) in &analytic {
        for i in 0..grads.len() {
            let original = graph.param_value(*param).data()[i];

            graph.param_value_mut(*param).data_mut()[i] = original + epsilon;
            let up = graph.evaluate(inputs, &[loss])?[0].scalar_value();
            graph.param_value_mut(*param).data_mut()[i] = original - epsilon;
            let down = graph.evaluate(inputs, &[loss])?[0].scalar_value();
            graph.param_value_mut(*param).data_mut()[i] = original;

            let fd = (up - down) / (2.0 * epsilon);
            let a = grads.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    // Leave the graph in a consistent state for callers that keep using it.
    graph.evaluate(inputs, &[loss])?;
    Ok(worst)
}
