//! Central finite-difference checks for graph gradients.

use super::{Graph, GraphError, NodeId, Tensor};

/// Default central-difference step for 64-bit checks.
pub const FD_STEP: f64 = 1e-5;

/// Per-input comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` for each input.
    ///
    /// Two all-zero gradients compare as 0.
    pub fn relative_errors(&self) -> Vec<f64> {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| {
                let diff = a
                    .data()
                    .iter()
                    .zip(n.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                let scale = a.norm().max(n.norm());
                if scale == 0.0 {
                    0.0
                } else {
                    diff / scale
                }
            })
            .collect()
    }

    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors().into_iter().fold(0.0, f64::max)
    }
}

/// Builds the scalar function `build(inputs)` on fresh graphs and compares the
/// backward pass with central differences taken one coordinate at a time.
pub fn check<F>(inputs: &[Tensor], step: f64, build: F) -> Result<GradCheck, GraphError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, GraphError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let ids = values
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = build(&mut g, &ids)?;
        g.value(out)
            .item()
            .ok_or_else(|| GraphError::NonScalarLoss(g.value(out).shape().to_vec()))
    };

    let mut g = Graph::new();
    let ids = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let analytic = ids.iter().map(|&id| grads.wrt(id)).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut d = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            d.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        numeric.push(d);
    }
    Ok(GradCheck { analytic, numeric })
}
