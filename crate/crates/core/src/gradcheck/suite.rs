//! The stock gradient suite: every tape primitive on its own and the
//! composed skip-connection block, each checked against central
//! differences with inputs treated as parameters.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check_with_tape, GradCheckOptions, GradCheckReport};
use crate::autodiff::{BnMode, BnState, Fault, Tape, Var};
use crate::error::Result;
use crate::kernels::Padding;
use crate::network::nearest_neighbor_kernel;
use crate::params::{ParamId, ParamStore, Role};
use crate::tensor::Tensor;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const COMPOSED_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
    pub elapsed_ms: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel() < self.tolerance && self.report.checked() > 0
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let worst = self.report.worst().map_or_else(String::new, |w| {
            format!(" worst {} {}[{}]", w.id, w.name, w.worst_index)
        });
        writeln!(
            f,
            "{} {:<22} max_rel {:.3e} tol {:.0e} checked {}{worst}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.report.max_rel(),
            self.tolerance,
            self.report.checked()
        )?;
        write!(f, "{}", self.report)
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    /// Parameter with the largest relative error over all cases.
    pub fn worst(&self) -> Option<(&'static str, &super::ParamError)> {
        self.cases
            .iter()
            .filter_map(|c| c.report.worst().map(|w| (c.name, w)))
            .max_by(|a, b| a.1.max_rel.total_cmp(&b.1.max_rel))
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            write!(f, "{c}")?;
        }
        if let Some((case, w)) = self.worst() {
            writeln!(f, "worst parameter: {} ({}, case {case}) max_rel {:.3e}", w.id, w.name, w.max_rel)?;
        }
        writeln!(f, "{}", if self.passed() { "gradient suite PASSED" } else { "gradient suite FAILED" })
    }
}

type Build = Box<dyn FnMut(&mut Tape, &ParamStore) -> Result<Var>>;

struct Case {
    name: &'static str,
    tolerance: f64,
    store: ParamStore,
    build: Build,
}

/// Values bounded away from zero so PReLU inputs rarely sit near the kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

fn conv_case(name: &'static str, x: [usize; 4], k: [usize; 4], stride: usize, padding: Padding, rng: &mut ChaCha8Rng) -> Case {
    let mut s = ParamStore::new();
    let xi = s.add("x", Role::Input, Tensor::uniform(&x, -1.0, 1.0, rng));
    let ki = s.add("kernel", Role::ConvKernel, Tensor::uniform(&k, -0.5, 0.5, rng));
    let bi = s.add("bias", Role::Bias, Tensor::uniform(&[k[0]], -0.5, 0.5, rng));
    let mut w = None;
    let build: Build = Box::new(move |t, s| {
        let (x, k, b) = (t.param(s, xi), t.param(s, ki), t.param(s, bi));
        let y = t.conv2d(x, k, b, stride, padding)?;
        let weights = w.get_or_insert_with(|| projection(t.value(y).shape(), 11)).clone();
        t.weighted_sum(y, weights)
    });
    Case { name, tolerance: PRIMITIVE_TOLERANCE, store: s, build }
}

fn tconv_case(name: &'static str, x: [usize; 4], k: [usize; 4], rng: &mut ChaCha8Rng) -> Case {
    let mut s = ParamStore::new();
    let xi = s.add("x", Role::Input, Tensor::uniform(&x, -1.0, 1.0, rng));
    let ki = s.add("kernel", Role::ConvKernel, Tensor::uniform(&k, -0.5, 0.5, rng));
    let bi = s.add("bias", Role::Bias, Tensor::uniform(&[k[1]], -0.5, 0.5, rng));
    let mut w = None;
    let build: Build = Box::new(move |t, s| {
        let (x, k, b) = (t.param(s, xi), t.param(s, ki), t.param(s, bi));
        let y = t.tconv2d(x, k, b, 2)?;
        let weights = w.get_or_insert_with(|| projection(t.value(y).shape(), 12)).clone();
        t.weighted_sum(y, weights)
    });
    Case { name, tolerance: PRIMITIVE_TOLERANCE, store: s, build }
}

fn unary_case(
    name: &'static str,
    x: Tensor,
    extra: Vec<(&'static str, Role, Tensor)>,
    mut op: impl FnMut(&mut Tape, Var, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let mut s = ParamStore::new();
    let xi = s.add("x", Role::Input, x);
    let ids: Vec<ParamId> = extra.into_iter().map(|(n, r, v)| s.add(n, r, v)).collect();
    let mut w = None;
    let build: Build = Box::new(move |t, s| {
        let x = t.param(s, xi);
        let vars: Vec<Var> = ids.iter().map(|&i| t.param(s, i)).collect();
        let y = op(t, x, &vars)?;
        let weights = w.get_or_insert_with(|| projection(t.value(y).shape(), 13)).clone();
        t.weighted_sum(y, weights)
    });
    Case { name, tolerance: PRIMITIVE_TOLERANCE, store: s, build }
}

fn binary_case(
    name: &'static str,
    a: Tensor,
    b: Tensor,
    op: impl Fn(&mut Tape, Var, Var) -> Result<Var> + 'static,
    project: bool,
) -> Case {
    let mut s = ParamStore::new();
    let ai = s.add("a", Role::Input, a);
    let bi = s.add("b", Role::Input, b);
    let mut w = None;
    let build: Build = Box::new(move |t, s| {
        let (a, b) = (t.param(s, ai), t.param(s, bi));
        let y = op(t, a, b)?;
        if !project {
            return Ok(y);
        }
        let weights = w.get_or_insert_with(|| projection(t.value(y).shape(), 14)).clone();
        t.weighted_sum(y, weights)
    });
    Case { name, tolerance: PRIMITIVE_TOLERANCE, store: s, build }
}

/// `c − PReLU(tconv(maxpool(c)))` followed by conv, batch norm (running
/// moments), PReLU: the mU-Net skip connection in evaluation mode.
fn skip_block_case(rng: &mut ChaCha8Rng) -> Case {
    let ch = 3;
    let mut s = ParamStore::new();
    let ci = s.add("c", Role::Input, Tensor::uniform(&[2, ch, 8, 8], -1.0, 1.0, rng));
    // Start from the nearest-neighbour kernel so the residual is non-trivial
    // but not degenerate.
    let mut rk = nearest_neighbor_kernel(ch);
    for v in rk.data_mut() {
        *v = *v * 0.8 + rand::Rng::gen_range(rng, -0.2..0.2);
    }
    let rki = s.add("residual.kernel", Role::ConvKernel, rk);
    let rbi = s.add("residual.bias", Role::Bias, Tensor::uniform(&[ch], -0.1, 0.1, rng));
    let rai = s.add("residual.alpha", Role::PreluAlpha, Tensor::full(&[ch], 0.25));
    let ki = s.add("conv.kernel", Role::ConvKernel, Tensor::uniform(&[ch, ch, 3, 3], -0.4, 0.4, rng));
    let bi = s.add("conv.bias", Role::Bias, Tensor::uniform(&[ch], -0.1, 0.1, rng));
    let gi = s.add("conv.bn.scale", Role::BnScale, Tensor::uniform(&[ch], 0.5, 1.5, rng));
    let hi = s.add("conv.bn.shift", Role::BnShift, Tensor::uniform(&[ch], -0.2, 0.2, rng));
    let ai = s.add("conv.alpha", Role::PreluAlpha, Tensor::full(&[ch], 0.25));
    let bn = BnState { mean: vec![0.05, -0.1, 0.0], var: vec![0.8, 1.2, 0.5] };
    let mut w = None;
    let build: Build = Box::new(move |t, s| {
        let c = t.param(s, ci);
        let pooled = t.maxpool2x2(c)?;
        let (rk, rb, ra) = (t.param(s, rki), t.param(s, rbi), t.param(s, rai));
        let up = t.tconv2d(pooled, rk, rb, 2)?;
        let cu = t.prelu(up, ra)?;
        let fm_a = t.sub(c, cu)?;
        let (k, b) = (t.param(s, ki), t.param(s, bi));
        let y = t.conv2d(fm_a, k, b, 1, Padding::Same)?;
        let (g, h) = (t.param(s, gi), t.param(s, hi));
        let y = t.batch_norm(y, g, h, BnMode::Eval(&bn))?;
        let a = t.param(s, ai);
        let y = t.prelu(y, a)?;
        let weights = w.get_or_insert_with(|| projection(t.value(y).shape(), 15)).clone();
        t.weighted_sum(y, weights)
    });
    Case { name: "skip_block", tolerance: COMPOSED_TOLERANCE, store: s, build }
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = vec![
        conv_case("conv2d_same", [2, 3, 6, 6], [4, 3, 3, 3], 1, Padding::Same, r),
        conv_case("conv2d_same_stride2", [1, 2, 7, 7], [3, 2, 3, 3], 2, Padding::Same, r),
        conv_case("conv2d_valid", [2, 2, 6, 5], [3, 2, 3, 2], 1, Padding::Valid, r),
        conv_case("conv2d_1x1", [2, 4, 5, 5], [3, 4, 1, 1], 1, Padding::Same, r),
        tconv_case("tconv2d_3x3", [2, 3, 4, 4], [3, 2, 3, 3], r),
        tconv_case("tconv2d_2x2", [1, 4, 3, 3], [4, 2, 2, 2], r),
    ];
    out.push(unary_case("maxpool2x2", Tensor::uniform(&[2, 3, 6, 6], -1.0, 1.0, r), vec![], |t, x, _| t.maxpool2x2(x)));
    out.push(unary_case(
        "prelu",
        away_from_zero(&[2, 3, 4, 4], r),
        vec![("alpha", Role::PreluAlpha, Tensor::uniform(&[3], 0.1, 0.9, r))],
        |t, x, v| t.prelu(x, v[0]),
    ));
    let bn_params = |r: &mut ChaCha8Rng| {
        vec![
            ("scale", Role::BnScale, Tensor::uniform(&[3], 0.5, 1.5, r)),
            ("shift", Role::BnShift, Tensor::uniform(&[3], -0.5, 0.5, r)),
        ]
    };
    let mut train_state = BnState::new(3);
    out.push(unary_case("batch_norm_train", Tensor::uniform(&[4, 3, 3, 3], -1.0, 2.0, r), bn_params(r), move |t, x, v| {
        t.batch_norm(x, v[0], v[1], BnMode::Train { state: &mut train_state, decay: 0.9 })
    }));
    let eval_state = BnState { mean: vec![0.3, -0.2, 0.1], var: vec![0.5, 1.5, 2.0] };
    out.push(unary_case("batch_norm_eval", Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, r), bn_params(r), move |t, x, v| {
        t.batch_norm(x, v[0], v[1], BnMode::Eval(&eval_state))
    }));
    out.push(unary_case("dropout", Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, r), vec![], |t, x, _| {
        // A fresh generator per evaluation keeps the mask fixed.
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        t.dropout(x, 0.8, &mut mask_rng)
    }));
    let pair = |r: &mut ChaCha8Rng, s: [usize; 4]| (Tensor::uniform(&s, -1.0, 1.0, r), Tensor::uniform(&s, -1.0, 1.0, r));
    let (a, b) = pair(r, [2, 3, 3, 3]);
    out.push(binary_case("add", a, b, |t, a, b| t.add(a, b), true));
    let (a, b) = pair(r, [2, 3, 3, 3]);
    out.push(binary_case("sub", a, b, |t, a, b| t.sub(a, b), true));
    let a = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, r);
    let b = Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, r);
    out.push(binary_case("concat_channels", a, b, |t, a, b| t.concat_channels(a, b), true));
    let (a, b) = pair(r, [2, 3, 4, 4]);
    out.push(binary_case("mse_loss", a, b, |t, a, b| t.mse_loss(a, b), false));
    out.push(skip_block_case(r));
    out
}

/// Run every case. A `fault` is injected into every tape.
pub fn run_suite(opts: &GradCheckOptions, fault: Option<Fault>) -> Result<SuiteReport> {
    let mut results = Vec::new();
    for mut case in cases(opts.seed) {
        let start = Instant::now();
        let make = || fault.map_or_else(Tape::new, Tape::with_fault);
        let report = grad_check_with_tape(&mut case.store, opts, make, &mut case.build)?;
        results.push(CaseResult {
            name: case.name,
            tolerance: case.tolerance,
            report,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(SuiteReport { cases: results })
}
