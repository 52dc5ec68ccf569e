//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};

/// Agreement between analytic and finite-difference gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Largest elementwise absolute difference.
    pub max_abs: f64,
    /// ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂).
    pub relative: f64,
    /// ‖numeric‖₂, to catch vacuous checks on all-zero gradients.
    pub numeric_norm: f64,
}

impl GradCheck {
    fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_abs: self.max_abs.max(other.max_abs),
            relative: self.relative.max(other.relative),
            numeric_norm: self.numeric_norm.max(other.numeric_norm),
        }
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h`, input by input.
pub fn check(inputs: &[Tensor], h: f64, f: impl Fn(&mut Graph, &[Var]) -> Var) -> GradCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut report = GradCheck {
        max_abs: 0.0,
        relative: 0.0,
        numeric_norm: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let fp = eval(&probe);
            probe[i].data_mut()[j] = x0 - h;
            let fm = eval(&probe);
            probe[i].data_mut()[j] = x0;
            *slot = (fp - fm) / (2.0 * h);
        }
        report = report.merge(compare(analytic.data(), &numeric));
    }
    report
}

/// Elementwise and norm-wise comparison of two gradient vectors.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let mut max_abs: f64 = 0.0;
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for (a, n) in analytic.iter().zip(numeric) {
        max_abs = max_abs.max((a - n).abs());
        diff2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
    }
    let denom = a2.sqrt().max(n2.sqrt());
    GradCheck {
        max_abs,
        relative: if denom > 0.0 { diff2.sqrt() / denom } else { 0.0 },
        numeric_norm: n2.sqrt(),
    }
}
