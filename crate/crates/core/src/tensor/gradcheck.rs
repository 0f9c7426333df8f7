use super::{ParamStore, Real, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct FdEntry {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&FdEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Relative error of one parameter tensor: the largest elementwise gap
/// divided by the larger of the two gradients' max-norms. The scale is
/// floored at `sqrt(machine epsilon)` so an all-zero gradient compares
/// against rounding noise rather than zero.
pub fn relative_error<T: Real>(analytic: &[f64], numeric: &[f64]) -> f64 {
    let floor = T::epsilon().as_f64().sqrt();
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(floor);
    let gap = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    gap / scale
}

/// Compares tape gradients with central differences for every trainable
/// parameter in `store`. Differences at `step` and `2 * step` are combined
/// by Richardson extrapolation, which cancels the second-order error term.
pub fn finite_difference_check<T, F>(
    store: &mut ParamStore<T>,
    loss_fn: F,
    step: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    T: Real,
    F: for<'a> Fn(&mut Tape<'a, T>, &'a ParamStore<T>) -> Result<Var>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut report = FdReport {
        entries: Vec::new(),
        tolerance,
    };
    let grads = {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        let mut g = tape.backward(loss)?;
        g.fill_unreached(store);
        g
    };
    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        Ok(tape.scalar_f64(loss))
    };

    let names: Vec<String> = store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    let h = T::lit(step);
    for name in names {
        let analytic: Vec<f64> = grads
            .get(&name)
            .expect("trainable parameter has a gradient entry")
            .data()
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let n = analytic.len();
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.by_name(&name).expect("present").tensor.data()[i];
            let mut central = |h: T| -> Result<f64> {
                let (up, down) = (orig + h, orig - h);
                store.by_name_mut(&name).expect("present").tensor.data_mut()[i] = up;
                let lp = eval(store)?;
                store.by_name_mut(&name).expect("present").tensor.data_mut()[i] = down;
                let lm = eval(store)?;
                store.by_name_mut(&name).expect("present").tensor.data_mut()[i] = orig;
                Ok((lp - lm) / (up - down).as_f64())
            };
            let (near, far) = (central(h)?, central(h + h)?);
            numeric.push((4.0 * near - far) / 3.0);
        }
        report.entries.push(FdEntry {
            name,
            elements: n,
            max_rel_err: relative_error::<T>(&analytic, &numeric),
        });
    }
    Ok(report)
}
