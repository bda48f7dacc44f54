use super::params::ParameterStore;
use super::tape::{Tape, Var};

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

/// Relative error floor so that near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `eps`, over every parameter entry.
pub fn grad_check<F>(store: &mut ParameterStore, eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Tape, &ParameterStore) -> Var,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    tape.backward(loss, store);
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();

    let eval = |store: &ParameterStore| {
        let mut tape = Tape::new();
        let v = f(&mut tape, store);
        tape.value(v).item()
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = store.params_mut()[pi].value.data()[k];
            store.params_mut()[pi].value.data_mut()[k] = orig + eps;
            let up = eval(store);
            store.params_mut()[pi].value.data_mut()[k] = orig - eps;
            let down = eval(store);
            store.params_mut()[pi].value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.entries += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.params_mut()[pi].name.clone(), k));
            }
        }
    }
    store.zero_grads();
    report
}
