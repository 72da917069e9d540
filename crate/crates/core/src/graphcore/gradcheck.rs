//! Finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;
use std::fmt;

use super::{backward, evaluate, Bindings, GradientMap, Graph, GraphError, NodeId, Tensor};

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_relative_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_relative_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<4} {:<24} max_rel_err={:.3e} (at {})",
                if p.passed { "ok" } else { "FAIL" },
                p.name,
                p.max_relative_error,
                p.worst_index
            )?;
        }
        Ok(())
    }
}

/// Compares two gradient collections coordinate by coordinate.
///
/// Every entry of `analytic` must have a same-shaped entry in `numeric`.
pub fn compare(analytic: &GradientMap, numeric: &GradientMap, tolerance: f64) -> GradCheckReport {
    let params = analytic
        .iter()
        .map(|(name, a)| {
            let n = numeric
                .get(name)
                .unwrap_or_else(|| panic!("numeric gradient missing for {name}"));
            assert_eq!(a.shape(), n.shape(), "gradient shape mismatch for {name}");
            let (worst_index, max_relative_error) = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| relative_error(x, y))
                .enumerate()
                .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
            ParamCheck {
                name: name.clone(),
                max_relative_error,
                worst_index,
                passed: max_relative_error < tolerance,
            }
        })
        .collect();
    GradCheckReport { tolerance, params }
}

/// Central differences of an arbitrary scalar function of named tensors.
pub fn central_differences<E>(
    point: &BTreeMap<String, Tensor>,
    names: &[&str],
    step: f64,
    mut f: impl FnMut(&BTreeMap<String, Tensor>) -> Result<f64, E>,
) -> Result<GradientMap, E> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut work = point.clone();
    let mut grads = GradientMap::new();
    for &name in names {
        let len = point
            .get(name)
            .unwrap_or_else(|| panic!("no tensor named {name}"))
            .len();
        let mut grad = vec![0.0; len];
        for (i, slot) in grad.iter_mut().enumerate() {
            let orig = point[name].data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        grads.insert(name, Tensor::new(point[name].shape(), grad).expect("same shape"));
    }
    Ok(grads)
}

/// Central-difference gradient of a graph's scalar output w.r.t. named inputs.
pub fn numeric_gradient(
    graph: &Graph,
    bindings: &Bindings<'_>,
    output: NodeId,
    wrt: &[&str],
    step: f64,
) -> Result<GradientMap, GraphError> {
    let point: BTreeMap<String, Tensor> = wrt
        .iter()
        .map(|&name| {
            bindings
                .get(name)
                .cloned()
                .map(|t| (name.to_string(), t))
                .ok_or_else(|| GraphError::Unbound(name.to_string()))
        })
        .collect::<Result<_, _>>()?;
    central_differences(&point, wrt, step, |perturbed| {
        let mut b = bindings.clone();
        for (name, t) in perturbed {
            b.bind(name.clone(), t);
        }
        Ok(evaluate(graph, &b)?.scalar(output))
    })
}

/// Checks `backward` against central differences for every `wrt` input.
pub fn grad_check(
    graph: &Graph,
    bindings: &Bindings<'_>,
    output: NodeId,
    wrt: &[&str],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, GraphError> {
    let eval = evaluate(graph, bindings)?;
    let analytic = backward(graph, &eval, output, wrt)?;
    let numeric = numeric_gradient(graph, bindings, output, wrt, step)?;
    Ok(compare(&analytic, &numeric, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_is_exact() {
        let mut g = Graph::new();
        let w = g.input("w", &[3]).unwrap();
        let x = g.input("x", &[3]).unwrap();
        let y = g.matmul(w, x).unwrap();
        let (wv, xv) = (
            Tensor::vector(vec![0.3, -1.2, 2.0]),
            Tensor::vector(vec![1.5, 0.25, -0.75]),
        );
        let mut b = Bindings::new();
        b.bind("w", &wv).bind("x", &xv);
        let report = grad_check(&g, &b, y, &["w", "x"], 1e-5, 1e-9).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_error() < 1e-9);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]).unwrap();
        let t = g.tanh(x).unwrap();
        let s = g.sum(t, None).unwrap();
        let xv = Tensor::vector(vec![0.4, -0.3]);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        let ev = evaluate(&g, &b).unwrap();
        let mut analytic = backward(&g, &ev, s, &["x"]).unwrap();
        analytic.get_mut("x").unwrap().data_mut()[1] += 0.1;
        let numeric = numeric_gradient(&g, &b, s, &["x"], 1e-5).unwrap();
        let report = compare(&analytic, &numeric, 1e-4);
        assert!(!report.passed());
        let fail: Vec<_> = report.failures().collect();
        assert_eq!(fail.len(), 1);
        assert_eq!(fail[0].name, "x");
        assert_eq!(fail[0].worst_index, 1);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
