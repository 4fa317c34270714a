//! Central finite-difference gradient oracle.

use super::Tensor;

/// Central-difference estimate of `∂f/∂inputs[which][index]`.
pub fn central_difference(
    f: &mut impl FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    index: usize,
    h: f64,
) -> f64 {
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[index] += h;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[index] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Full numerical gradient of `f` with respect to `inputs[which]`.
pub fn numerical_gradient(
    f: &mut impl FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    h: f64,
) -> Tensor {
    let n = inputs[which].numel();
    let data = (0..n).map(|i| central_difference(f, inputs, which, i, h)).collect();
    Tensor::new(inputs[which].shape().to_vec(), data).expect("same shape")
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest element-wise relative error between two gradients.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| relative_error(a, b, floor))
        .fold(0.0, f64::max)
}

/// Largest relative error between tape gradients of the scalar built by
/// `build` and central differences, over every element of every input.
pub fn tape_gradient_error(
    inputs: &[Tensor],
    build: impl Fn(&mut super::Tape, &[super::Var]) -> super::Var,
    h: f64,
) -> crate::Result<f64> {
    use super::Tape;
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out)?;
    let mut f = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<_> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = build(&mut t, &vs);
        t.value(o).data()[0]
    };
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = numerical_gradient(&mut f, inputs, i, h);
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-6));
    }
    Ok(worst)
}
