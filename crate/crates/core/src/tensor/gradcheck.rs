use super::{BoundParams, Graph, ParamStore, Rng, Var};
use crate::error::{Error, Result};

/// Settings for comparing analytic gradients with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Relative error denominator floor, in units of the loss magnitude:
    /// `|a − n| / max(|a|, |n|, floor·max(1, |L|))`. Central-difference
    /// roundoff grows with `|L|`, so gradients below this are noise.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (chosen at random).
    pub max_probes_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_probes_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

fn evaluate<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &BoundParams<'g, f64>) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let loss = f(&g, &p)?;
    let v = loss.value();
    if v.numel() != 1 {
        return Err(Error::Dimension(format!(
            "gradient check needs a scalar loss, got {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of a scalar `f` against central finite
/// differences, at 64-bit precision, for every tensor in `store`.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    f: F,
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &BoundParams<'g, f64>) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let bound = store.bind(&g);
    let loss = f(&g, &bound)?;
    let value = loss.value();
    if value.numel() != 1 {
        return Err(Error::Dimension(format!(
            "gradient check needs a scalar loss, got {:?}",
            value.shape()
        )));
    }
    let floor = config.floor * value.item().abs().max(1.0);
    let grads = g.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = bound
        .iter()
        .map(|(name, var)| (name.to_owned(), grads.wrt(var).into_data()))
        .collect();
    drop(bound);

    let mut rng = Rng::new(config.seed).split("grad-check");
    let mut work = store.clone();
    let mut params = Vec::new();
    for (name, analytic) in analytic {
        let n = analytic.len();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(limit) = config.max_probes_per_param {
            if limit < n {
                rng.shuffle(&mut coords);
                coords.truncate(limit);
                coords.sort_unstable();
            }
        }
        let mut check = ParamCheck {
            name: name.clone(),
            probes: coords.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in coords {
            let orig = work.get(&name).expect("bound name").data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + config.step;
            let plus = evaluate(&work, &f)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - config.step;
            let minus = evaluate(&work, &f)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * config.step);
            let abs = (analytic[i] - numeric).abs();
            let rel = abs / analytic[i].abs().max(numeric.abs()).max(floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
        }
        params.push(check);
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err <= config.tol,
        params,
        max_rel_err,
        tol: config.tol,
    })
}
