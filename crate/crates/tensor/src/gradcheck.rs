//! Central finite-difference checks of analytic parameter gradients.

use crate::graph::{Graph, Var};
use crate::params::{ParamKind, ParamSet};

/// Denominator floor so near-zero gradient pairs compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_err: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    pub checked: usize,
}

/// Compares backprop against `(L(p + h) - L(p - h)) / 2h` for every element of
/// every trainable entry of `set`. `loss` builds the scalar loss; its `bool`
/// argument says whether parameters should be tracked.
pub fn check_params(
    set: &mut ParamSet<f64>,
    h: f64,
    loss: impl for<'g> Fn(&'g Graph<f64>, &ParamSet<f64>, bool) -> Var<'g, f64>,
) -> GradCheck {
    let g = Graph::new();
    let analytic = loss(&g, set, true).backward().for_params(&g, set);
    let value = |set: &ParamSet<f64>| {
        let g = Graph::new();
        loss(&g, set, false).item()
    };
    let mut report = GradCheck { max_rel_err: 0.0, worst: String::new(), checked: 0 };
    for i in 0..set.len() {
        if set.entries()[i].kind != ParamKind::Trainable {
            continue;
        }
        let n = set.entries()[i].value.len();
        for j in 0..n {
            let orig = set.entries()[i].value.data()[j];
            set.entries_mut()[i].value.data_mut()[j] = orig + h;
            let up = value(set);
            set.entries_mut()[i].value.data_mut()[j] = orig - h;
            let down = value(set);
            set.entries_mut()[i].value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].as_ref().map_or(0.0, |t| t.data()[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{}[{j}]", set.entries()[i].name);
            }
        }
    }
    report
}
