use super::{ParamStore, Tape, Tensor, Var};

/// Coordinates checked per parameter when sampling. `None` checks them all.
fn coordinates(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(n) if n < len => {
            let stride = len as f64 / n as f64;
            (0..n).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

fn evaluate<F>(params: &ParamStore<f64>, f: &F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Max over checked coordinates of `|a − n| / max(1, |a|, |n|)` where `a` is
/// the supplied analytic gradient and `n` the central difference with step
/// `h`. Parameters are restored before returning.
pub fn finite_difference_error<F>(
    params: &mut ParamStore<f64>,
    h: f64,
    analytic: &[Tensor<f64>],
    limit: Option<usize>,
    f: F,
) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut worst = 0.0f64;
    let ids: Vec<_> = params.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        for c in coordinates(grad.len(), limit) {
            let original = params.get(id).data()[c];
            params.get_mut(id).data_mut()[c] = original + h;
            let plus = evaluate(params, &f);
            params.get_mut(id).data_mut()[c] = original - h;
            let minus = evaluate(params, &f);
            params.get_mut(id).data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[c];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    worst
}

/// Reverse-mode gradients of `f` checked against central differences.
pub fn grad_check<F>(params: &mut ParamStore<f64>, h: f64, limit: Option<usize>, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let analytic = params.collect_grads(&grads, &vars);
    finite_difference_error(params, h, &analytic, limit, f)
}
