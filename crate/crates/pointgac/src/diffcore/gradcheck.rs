//! Central-difference verification of reverse-mode gradients.

use super::tensor::Tensor;

/// Default step for central differences in 64-bit precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Per-block comparison result.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            s.push_str(&format!(
                "{:<40} max_rel_error {:.3e}  {}\n",
                b.name,
                b.max_rel_error,
                if b.max_rel_error < self.tolerance { "ok" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "overall max_rel_error {:.3e} (tolerance {:.1e}) => {}\n",
            self.max_rel_error,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        ));
        s
    }
}

/// Relative error with a floor so that near-zero gradients compare on an
/// absolute scale; central differences at h=1e-5 carry ~1e-9 absolute noise.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= 1e-8 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(1e-4)
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `params` are named blocks perturbed in place (and restored). `loss` must
/// be a pure function of the blocks; `analytic` returns the reverse-mode
/// gradient for each block, in the same order.
pub fn grad_check<L, G>(
    params: &mut [(String, Tensor)],
    mut loss: L,
    mut analytic: G,
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    L: FnMut(&[(String, Tensor)]) -> f64,
    G: FnMut(&[(String, Tensor)]) -> Vec<Tensor>,
{
    let grads = analytic(params);
    assert_eq!(grads.len(), params.len(), "one gradient per parameter block");

    let mut blocks = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for b in 0..params.len() {
        let numel = params[b].1.numel();
        let mut block_max: f64 = 0.0;
        for i in 0..numel {
            let orig = params[b].1.data()[i];
            params[b].1.data_mut()[i] = orig + step;
            let up = loss(params);
            params[b].1.data_mut()[i] = orig - step;
            let down = loss(params);
            params[b].1.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            let err = relative_error(grads[b].data()[i], fd);
            if err > block_max {
                block_max = err;
            }
        }
        overall = overall.max(block_max);
        blocks.push(BlockReport {
            name: params[b].0.clone(),
            max_rel_error: block_max,
        });
    }

    GradCheckReport {
        blocks,
        max_rel_error: overall,
        tolerance,
        pass: overall < tolerance,
    }
}
