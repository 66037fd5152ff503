use super::{ParamStore, Tape, TensorError, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` over every checked entry.
    pub max_relative_error: f64,
    /// Parameter and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Central-difference check of the reverse-mode gradient of a scalar graph.
///
/// `build` must be a pure function of the parameter values. When
/// `max_entries_per_param` is set, large tensors are checked at evenly spaced
/// flat indices instead of exhaustively.
pub fn grad_check<F>(
    build: F,
    params: &ParamStore,
    epsilon: f64,
    max_entries_per_param: Option<usize>,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(TensorError::GradCheck(format!("epsilon {epsilon} outside [1e-7, 1e-4]")));
    }
    let eval = |p: &ParamStore| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, p)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(TensorError::GradCheck(format!("loss shape {:?} is not scalar", v.shape())));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let grads = tape.backward(loss)?;

    let mut work = params.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, entries_checked: 0 };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).map(|a| a.len()).unwrap_or(0);
        let indices: Vec<usize> = match max_entries_per_param {
            Some(cap) if cap < len => (0..cap).map(|k| k * len / cap).collect(),
            _ => (0..len).collect(),
        };
        for idx in indices {
            let orig = params.get(&name).expect("listed").data()[idx];
            work.get_mut(&name).expect("listed").data_mut()[idx] = orig + epsilon;
            let plus = eval(&work)?;
            work.get_mut(&name).expect("listed").data_mut()[idx] = orig - epsilon;
            let minus = eval(&work)?;
            work.get_mut(&name).expect("listed").data_mut()[idx] = orig;
            let fd = (plus - minus) / (2.0 * epsilon);
            if !fd.is_finite() {
                return Err(TensorError::GradCheck(format!("non-finite difference at {name}[{idx}]")));
            }
            let ad = grads.param(&name).map(|g| g.data()[idx]).unwrap_or(0.0);
            let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
