//! Central-finite-difference gradient verification.
//!
//! The checker only ever runs forward evaluations of a user-supplied graph
//! builder, so it stays independent of the reverse-mode implementation it is
//! used to validate.

use crate::tensor::{NodeId, Tape, Tensor};

/// Relative error with a floor that keeps near-zero gradients from blowing
/// up the ratio; central differences at `h = 1e-5` resolve well above it.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Verify the tape gradient of a scalar-valued graph against central finite
/// differences for every component of every input marked `requires_grad`.
///
/// `build` must be deterministic: called repeatedly with perturbed copies of
/// `inputs` (entered onto a fresh tape in order) and must return the scalar
/// loss node.
pub fn check_gradients(
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<(), String> {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        assert_eq!(tape.value(loss).numel(), 1, "gradcheck requires a scalar loss");
        tape.data(loss)[0]
    };

    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss);

    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = tape
            .grad(ids[i])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = relative_error(analytic[j], numeric);
            if rel >= tol {
                return Err(format!(
                    "input {i} component {j}: analytic {} vs numeric {} (rel {rel:.3e})",
                    analytic[j], numeric
                ));
            }
        }
    }
    Ok(())
}
