//! Central finite-difference verification of tape gradients.

pub mod suite;

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Role};

/// Gradients whose magnitude is below this are compared absolutely against
/// it instead of relatively.
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, max_coords_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ParamError {
    pub id: ParamId,
    pub name: String,
    pub role: Role,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink (PReLU sign change or
    /// pooling winner change) and were therefore not compared.
    pub skipped: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel).fold(0.0, f64::max)
    }

    pub fn mean_rel(&self) -> f64 {
        let (sum, n) = self
            .params
            .iter()
            .fold((0.0, 0usize), |(s, n), p| (s + p.mean_rel * p.checked as f64, n + p.checked));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.params.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "  {:>5} {:<28} {:<12} checked {:>5} skipped {:>3} max {:.3e} mean {:.3e}",
                p.id.to_string(),
                p.name,
                p.role.as_str(),
                p.checked,
                p.skipped,
                p.max_rel,
                p.mean_rel
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar objective, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Compare analytic gradients of the scalar built by `f` against central
/// differences for every parameter in `store`.
///
/// `f` must be a pure function of the parameter values; it is evaluated
/// twice at the base point and rejected if the results differ.
pub fn grad_check<F>(store: &mut ParamStore, opts: &GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check_with_tape(store, opts, Tape::new, &mut f)
}

/// As [`grad_check`], building each tape with `make_tape` (used to inject
/// backward faults).
pub fn grad_check_with_tape<F>(
    store: &mut ParamStore,
    opts: &GradCheckOptions,
    make_tape: impl Fn() -> Tape,
    f: &mut F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = make_tape();
    let out = f(&mut tape, store)?;
    let base = scalar_of(&tape, out)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(out)?;
    store.zero_grad();
    tape.accumulate_param_grads(&grads, store)?;

    let mut again = make_tape();
    let out2 = f(&mut again, store)?;
    let second = scalar_of(&again, out2)?;
    if second.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic { first: base, second });
    }

    let mut eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut t = make_tape();
        let v = f(&mut t, store)?;
        Ok((scalar_of(&t, v)?, t.branch_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<ParamId> = store.iter().map(|p| p.id).collect();
    let mut report = GradCheckReport { params: Vec::with_capacity(ids.len()) };
    for id in ids {
        let len = store.get(id).value.len();
        let mut coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < len => sample(&mut rng, len, m).into_vec(),
            _ => (0..len).collect(),
        };
        coords.sort_unstable();
        let analytic = store.get(id).grad.clone();
        let mut entry = ParamError {
            id,
            name: store.get(id).name.clone(),
            role: store.get(id).role,
            checked: 0,
            skipped: 0,
            max_rel: 0.0,
            mean_rel: 0.0,
            worst_index: 0,
        };
        let mut sum = 0.0;
        for &i in &coords {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.eps;
            let (plus, sig_plus) = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - opts.eps;
            let (minus, sig_minus) = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                entry.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let rel = relative_error(analytic.data()[i], numeric);
            sum += rel;
            entry.checked += 1;
            if rel > entry.max_rel {
                entry.max_rel = rel;
                entry.worst_index = i;
            }
        }
        if entry.checked > 0 {
            entry.mean_rel = sum / entry.checked as f64;
        }
        report.params.push(entry);
    }
    Ok(report)
}
