use super::{check_temp, dv_dw, sigma_t, soft_prune, DerivativeVariant, Result};
use crate::tensor::{BackwardRule, Graph, NodeId, Real, Tensor, TensorError};

struct SoftPruneRule {
    tau: f64,
    temp: f64,
    variant: DerivativeVariant,
}

impl<F: Real> BackwardRule<F> for SoftPruneRule {
    fn backward(
        &self,
        grad_output: &[F],
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
    ) -> Vec<Option<Vec<F>>> {
        let w = inputs[0].data();
        let dw = w
            .iter()
            .zip(grad_output)
            .map(|(x, g)| F::of(g.as_f64() * dv_dw(x.as_f64(), self.tau, self.temp, self.variant)))
            .collect();
        let mut dtau = 0.0;
        for (x, g) in w.iter().zip(grad_output) {
            dtau += g.as_f64() * (-0.5 * sigma_t(x.as_f64(), self.tau, self.temp));
        }
        vec![Some(dw), Some(vec![F::of(dtau)])]
    }
}

/// Records `v = soft_prune(w, tau, temp)` on the tape.
///
/// `tau` must be a scalar node; its value is read at record time. The weight
/// gradient uses the chosen derivative variant, the threshold gradient is
/// `sum_k dL/dv_k * (-sigma_t(w_k) / 2)`.
pub fn soft_prune_node<F: Real>(
    graph: &mut Graph<F>,
    w: NodeId,
    tau: NodeId,
    temp: f64,
    variant: DerivativeVariant,
) -> Result<NodeId, SoftPruneNodeError> {
    check_temp(temp)?;
    let tau_value = graph.value(tau);
    if tau_value.numel() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "soft_prune",
            lhs: graph.shape(w).to_vec(),
            rhs: tau_value.shape().to_vec(),
        }
        .into());
    }
    let tau_value = tau_value.item().as_f64();
    let value = soft_prune(graph.value(w), tau_value, temp)?;
    let rule = SoftPruneRule {
        tau: tau_value,
        temp,
        variant,
    };
    Ok(graph.custom("soft_prune", &[w, tau], value, Box::new(rule))?)
}

#[derive(Debug, thiserror::Error)]
pub enum SoftPruneNodeError {
    #[error(transparent)]
    Prune(#[from] super::PruneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
