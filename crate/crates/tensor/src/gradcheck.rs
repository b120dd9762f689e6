//! Central finite-difference verification of analytic gradients.

use crate::{Graph, Real, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Largest acceptable relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// numerically zero are compared in absolute terms.
    pub floor: f64,
}

impl GradCheckConfig {
    pub fn new(eps: f64, tol: f64) -> Self {
        Self { eps, tol, floor: 1e-6 }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `eval` around `x` using the perturbation actually
/// representable in `T`.
pub fn central_difference<T: Real>(x: T, eps: f64, mut eval: impl FnMut(T) -> Result<T>) -> Result<f64> {
    let up = x + T::lit(eps);
    let down = x - T::lit(eps);
    let fu = eval(up)?;
    let fd = eval(down)?;
    Ok((fu.as_f64() - fd.as_f64()) / (up.as_f64() - down.as_f64()))
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences for every element of every input.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| t.map(|_| T::zero())))
        .collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let vars = perturbed
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tol: cfg.tol,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            let numeric = central_difference(orig, cfg.eps, |x| {
                work[i].data_mut()[j] = x;
                eval(&work)
            })?;
            work[i].data_mut()[j] = orig;
            let err = relative_error(grad.data()[j].as_f64(), numeric, cfg.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
