//! Tensor core: dense arrays, kernels, a recording autodiff graph, and a
//! central-difference gradient oracle.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{Element, Tensor};

use crate::error::{Error, Result};

/// Central-difference derivative of `f` w.r.t. selected coordinates.
///
/// `coords` lists `(parameter index, flat element index)` pairs; the result
/// holds one derivative per pair, in order.
pub fn finite_diff_coords<F, L>(mut f: L, params: &[Tensor<F>], coords: &[(usize, usize)], h: f64) -> Result<Vec<f64>>
where
    F: Element,
    L: FnMut(&[Tensor<F>]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &(p, i) in coords {
        if p >= work.len() || i >= work[p].numel() {
            return Err(Error::invalid(format!("probe ({p}, {i}) out of range")));
        }
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = F::of(orig.f64() + h);
        let plus = f(&work)?;
        work[p].data_mut()[i] = F::of(orig.f64() - h);
        let minus = f(&work)?;
        work[p].data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("probe of parameter {p} element {i}")));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference gradient of `f` w.r.t. every element of every parameter.
pub fn finite_diff_grad<F, L>(f: L, params: &[Tensor<F>], h: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Element,
    L: FnMut(&[Tensor<F>]) -> Result<f64>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    let flat = finite_diff_coords(f, params, &coords, h)?;
    let mut out = Vec::with_capacity(params.len());
    let mut offset = 0;
    for t in params {
        let n = t.numel();
        out.push(Tensor::new(t.shape(), flat[offset..offset + n].to_vec())?);
        offset += n;
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, floor)`: relative error with an absolute floor for
/// near-zero derivatives.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_difference() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff_grad(|p| Ok(p[0].item() * p[0].item()), &[x], 1e-4).unwrap();
        assert!((g[0].item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::<f64>::from_fn(&[3], |i| i as f64);
        let g = finite_diff_grad(|_| Ok(2.5), &[x], 1e-3).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let x = Tensor::<f64>::scalar(0.0);
        let r = finite_diff_grad(|p| Ok(1.0 / p[0].item().abs().min(1e-300) * f64::INFINITY), &[x], 1e-3);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
