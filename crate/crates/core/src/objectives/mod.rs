//! Denoising objectives for the first- and second-order scores, their
//! antithetic variance-reduced forms, the training loop, and the Tweedie
//! posterior-moment formulas.

mod train;
pub mod tweedie;

pub use train::{read_train_log, train, write_train_log, Objective, TrainConfig, TrainLogRow, TrainOutcome};
pub use tweedie::{moment_recursion, posterior_cov, posterior_second_moment, tweedie_mean, ScoreOracle};

use crate::autodiff::{MlpVars, Tape, Var};
use crate::distributions::check_sigma;
use crate::error::{invalid, shape_err, Result};
use crate::linalg::Matrix;
use crate::models::{FirstOrderModel, PairVars, ScoreModelPair};
use crate::rng::standard_normal_matrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Clean anchors `x` and their standard-normal noise `z`, one per row.
/// The noisy points are `x̃ = x + σ z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub z: Matrix,
}

impl Batch {
    pub fn new(x: Matrix, z: Matrix) -> Result<Self> {
        x.check_same_shape(&z)?;
        if x.rows() == 0 {
            return Err(invalid("empty batch"));
        }
        Ok(Self { x, z })
    }

    /// Draws fresh noise for the given anchors.
    pub fn with_noise<R: Rng + ?Sized>(x: Matrix, rng: &mut R) -> Result<Self> {
        let z = standard_normal_matrix(rng, x.rows(), x.cols());
        Self::new(x, z)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// `x + s σ z`; `s = 1` gives `x̃`, `s = -1` its antithetic twin.
    pub fn shifted(&self, sigma: f64, s: f64) -> Matrix {
        self.x.zip_map(&self.z, |a, b| a + s * sigma * b).expect("same shape")
    }

    pub fn noisy(&self, sigma: f64) -> Matrix {
        self.shifted(sigma, 1.0)
    }
}

/// Loss value with gradients in parameter order.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub dsm: f64,
    pub d2sm: f64,
    pub grad_norm: f64,
}

pub fn grad_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::frobenius_sq).sum::<f64>().sqrt()
}

// Value-level residuals on precomputed model outputs. They are independent of
// the tape and serve as reference values.

/// `mean ½‖s₁ + z/σ‖²`
pub fn dsm_value(s1: &Matrix, z: &Matrix, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    s1.check_same_shape(z)?;
    let r = s1.zip_map(z, |s, zz| s + zz / sigma)?;
    Ok(0.5 * r.frobenius_sq() / s1.rows() as f64)
}

/// `mean ‖s₂ + s₁s₁ᵀ + (I − zzᵀ)/σ²‖²_F` with `s₂` as `B x D²` rows.
pub fn d2sm_value(s1: &Matrix, s2: &Matrix, z: &Matrix, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let (b, d) = s1.shape();
    check_d2(s2, b, d)?;
    let mut total = 0.0;
    for n in 0..b {
        let (s, zz, h) = (s1.row(n), z.row(n), s2.row(n));
        for i in 0..d {
            for j in 0..d {
                let eye = if i == j { 1.0 } else { 0.0 };
                let r = h[i * d + j] + s[i] * s[j] + (eye - zz[i] * zz[j]) / (sigma * sigma);
                total += r * r;
            }
        }
    }
    Ok(total / b as f64)
}

/// `mean ‖diag(s₂) + s₁⊙s₁ + (1 − z⊙z)/σ²‖²` with the diagonal as `B x D`.
pub fn d2sm_diag_value(s1: &Matrix, s2_diag: &Matrix, z: &Matrix, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    s1.check_same_shape(s2_diag)?;
    s1.check_same_shape(z)?;
    let mut total = 0.0;
    for ((s, h), zz) in s1.as_slice().iter().zip(s2_diag.as_slice()).zip(z.as_slice()) {
        let r = h + s * s + (1.0 - zz * zz) / (sigma * sigma);
        total += r * r;
    }
    Ok(total / s1.rows() as f64)
}

/// `mean [½‖s₁(x̃)‖² + (s₁(x̃) − s₁(x))ᵀz / σ]`
pub fn dsm_vr_value(s1_noisy: &Matrix, s1_clean: &Matrix, z: &Matrix, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    s1_noisy.check_same_shape(s1_clean)?;
    s1_noisy.check_same_shape(z)?;
    let mut total = 0.0;
    for ((a, c), zz) in s1_noisy.as_slice().iter().zip(s1_clean.as_slice()).zip(z.as_slice()) {
        total += 0.5 * a * a + (a - c) * zz / sigma;
    }
    Ok(total / s1_noisy.rows() as f64)
}

/// `mean Σ [ψ₊² + ψ₋² + 2 (C/σ²) ⊙ (ψ₊ + ψ₋ − 2ψ₀)]` for `ψ` given as
/// matching rows (`B x D²` with `C = I − zzᵀ`, or `B x D` with `C = 1 − z⊙z`).
pub fn d2sm_vr_value(psi_plus: &Matrix, psi_minus: &Matrix, psi_center: &Matrix, z: &Matrix, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    psi_plus.check_same_shape(psi_minus)?;
    psi_plus.check_same_shape(psi_center)?;
    let c = noise_target(z, psi_plus.cols(), sigma)?;
    let mut total = 0.0;
    for k in 0..psi_plus.len() {
        let (p, m, o) = (psi_plus.as_slice()[k], psi_minus.as_slice()[k], psi_center.as_slice()[k]);
        total += p * p + m * m + 2.0 * c.as_slice()[k] * (p + m - 2.0 * o);
    }
    Ok(total / psi_plus.rows() as f64)
}

/// `s₂ + s₁s₁ᵀ` per row, full (`B x D²`) or diagonal (`B x D`) by the shape of `s2`.
pub fn psi_value(s1: &Matrix, s2: &Matrix) -> Result<Matrix> {
    let (b, d) = s1.shape();
    if s2.shape() == (b, d) {
        return s2.zip_map(&s1.map(|v| v * v), |a, c| a + c);
    }
    check_d2(s2, b, d)?;
    let mut out = s2.clone();
    for n in 0..b {
        let s = s1.row(n);
        let o = out.row_mut(n);
        for i in 0..d {
            for j in 0..d {
                o[i * d + j] += s[i] * s[j];
            }
        }
    }
    Ok(out)
}

fn check_d2(s2: &Matrix, b: usize, d: usize) -> Result<()> {
    if s2.shape() != (b, d * d) {
        return Err(shape_err(format!("({b}, {})", d * d), format!("{:?}", s2.shape())));
    }
    Ok(())
}

/// `(I − zzᵀ)/σ²` as `B x D²` rows when `cols == D²`, `(1 − z⊙z)/σ²` when `cols == D`.
fn noise_target(z: &Matrix, cols: usize, sigma: f64) -> Result<Matrix> {
    let (b, d) = z.shape();
    let s2 = sigma * sigma;
    if cols == d {
        return Ok(z.map(|v| (1.0 - v * v) / s2));
    }
    if cols != d * d {
        return Err(shape_err(format!("{d} or {} columns", d * d), cols));
    }
    let mut out = Matrix::zeros(b, d * d);
    for n in 0..b {
        let zz = z.row(n);
        let o = out.row_mut(n);
        for i in 0..d {
            for j in 0..d {
                let eye = if i == j { 1.0 } else { 0.0 };
                o[i * d + j] = (eye - zz[i] * zz[j]) / s2;
            }
        }
    }
    Ok(out)
}

// Tape builders. Each returns the scalar batch-mean node.

fn dsm_node(tape: &mut Tape, s1: Var, z: &Matrix, sigma: f64) -> Result<Var> {
    let t = tape.leaf(z.scale(1.0 / sigma));
    let r = tape.add(s1, t)?;
    let ss = tape.sum_squares(r)?;
    Ok(tape.scale(ss, 0.5 / z.rows() as f64))
}

fn dsm_vr_node(tape: &mut Tape, s1_noisy: Var, s1_clean: Var, z: &Matrix, sigma: f64) -> Result<Var> {
    let b = z.rows() as f64;
    let sq = tape.sum_squares(s1_noisy)?;
    let sq = tape.scale(sq, 0.5);
    let diff = tape.sub(s1_noisy, s1_clean)?;
    let zl = tape.leaf(z.scale(1.0 / sigma));
    let cross = tape.mul(diff, zl)?;
    let cross = tape.sum(cross);
    let total = tape.add(sq, cross)?;
    Ok(tape.scale(total, 1.0 / b))
}

fn dsm_antithetic_node(tape: &mut Tape, s_plus: Var, s_minus: Var, z: &Matrix, sigma: f64) -> Result<Var> {
    let b = z.rows() as f64;
    let a = tape.sum_squares(s_plus)?;
    let m = tape.sum_squares(s_minus)?;
    let sq = tape.add(a, m)?;
    let sq = tape.scale(sq, 0.25);
    let diff = tape.sub(s_plus, s_minus)?;
    let zl = tape.leaf(z.scale(0.5 / sigma));
    let cross = tape.mul(diff, zl)?;
    let cross = tape.sum(cross);
    let total = tape.add(sq, cross)?;
    Ok(tape.scale(total, 1.0 / b))
}

/// `ψ = s₂ + s₁s₁ᵀ` on the tape.
fn psi_node(tape: &mut Tape, vars: &PairVars, s1: Var, x: Var, diag: bool) -> Result<Var> {
    if diag {
        let s2 = vars.s2_diag(tape, x)?;
        let sq = tape.mul(s1, s1)?;
        tape.add(s2, sq)
    } else {
        let s2 = vars.s2_full(tape, x)?;
        let outer = tape.row_gram(s1, 1)?;
        tape.add(s2, outer)
    }
}

fn d2sm_node(tape: &mut Tape, psi: Var, z: &Matrix, sigma: f64) -> Result<Var> {
    let c = noise_target(z, tape.value(psi).cols(), sigma)?;
    let c = tape.leaf(c);
    let r = tape.add(psi, c)?;
    let ss = tape.sum_squares(r)?;
    Ok(tape.scale(ss, 1.0 / z.rows() as f64))
}

fn d2sm_vr_node(tape: &mut Tape, plus: Var, minus: Var, center: Var, z: &Matrix, sigma: f64) -> Result<Var> {
    let c = noise_target(z, tape.value(plus).cols(), sigma)?;
    let c = tape.leaf(c.scale(2.0));
    let a = tape.sum_squares(plus)?;
    let m = tape.sum_squares(minus)?;
    let pm = tape.add(plus, minus)?;
    let c2 = tape.scale(center, 2.0);
    let corr = tape.sub(pm, c2)?;
    let corr = tape.mul(c, corr)?;
    let corr = tape.sum(corr);
    let t = tape.add(a, m)?;
    let t = tape.add(t, corr)?;
    Ok(tape.scale(t, 1.0 / z.rows() as f64))
}

fn s1_only(model: &FirstOrderModel, batch: &Batch, sigma: f64, build: impl FnOnce(&mut Tape, &MlpVars) -> Result<Var>) -> Result<LossValue> {
    check_sigma(sigma)?;
    if batch.dim() != model.dim() {
        return Err(shape_err(format!("batch dim {}", model.dim()), batch.dim()));
    }
    let mut tape = Tape::new();
    let vars = model.net.register(&mut tape);
    let loss = build(&mut tape, &vars)?;
    let g = tape.backward(loss)?;
    Ok(LossValue {
        value: tape.scalar(loss),
        grads: vars.grads(&g),
    })
}

/// Plain denoising score matching on `x̃ = x + σz`.
pub fn loss_dsm(model: &FirstOrderModel, batch: &Batch, sigma: f64) -> Result<LossValue> {
    s1_only(model, batch, sigma, |tape, vars| {
        let x = tape.leaf(batch.noisy(sigma));
        let s = vars.forward(tape, x)?;
        dsm_node(tape, s, &batch.z, sigma)
    })
}

/// DSM with the clean-point control variate `s₁(x)ᵀz/σ` removed, along with
/// the constant `‖z‖²/(2σ²)`. Same gradient in expectation as [`loss_dsm`].
pub fn loss_dsm_vr(model: &FirstOrderModel, batch: &Batch, sigma: f64) -> Result<LossValue> {
    s1_only(model, batch, sigma, |tape, vars| {
        let xp = tape.leaf(batch.noisy(sigma));
        let x0 = tape.leaf(batch.x.clone());
        let sp = vars.forward(tape, xp)?;
        let s0 = vars.forward(tape, x0)?;
        dsm_vr_node(tape, sp, s0, &batch.z, sigma)
    })
}

fn pair_loss(pair: &ScoreModelPair, batch: &Batch, sigma: f64, build: impl FnOnce(&mut Tape, &PairVars) -> Result<(Var, Var, Var)>) -> Result<(f64, f64, f64, Vec<Matrix>)> {
    check_sigma(sigma)?;
    if batch.dim() != pair.dim() {
        return Err(shape_err(format!("batch dim {}", pair.dim()), batch.dim()));
    }
    let mut tape = Tape::new();
    let vars = pair.register(&mut tape);
    let (total, dsm, d2sm) = build(&mut tape, &vars)?;
    let g = tape.backward(total)?;
    Ok((tape.scalar(total), tape.scalar(dsm), tape.scalar(d2sm), vars.grads(&g)))
}

fn single(pair: &ScoreModelPair, batch: &Batch, sigma: f64, diag: bool, vr: bool) -> Result<LossValue> {
    let opts = JointOptions {
        diag,
        variance_reduction: vr,
        detach_first_order: false,
    };
    let (value, _, _, grads) = pair_loss(pair, batch, sigma, |tape, vars| {
        let t = d2sm_term(tape, vars, batch, sigma, opts)?.0;
        Ok((t, t, t))
    })?;
    Ok(LossValue { value, grads })
}

/// Switches for [`loss_joint`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointOptions {
    /// Diagonal residual only.
    pub diag: bool,
    /// Antithetic evaluation at `x ± σz` and `x`.
    pub variance_reduction: bool,
    /// Treat `s₁` as a constant inside the second-order term, so the
    /// first-order net is fit by the DSM term alone.
    pub detach_first_order: bool,
}

fn constant_if(tape: &mut Tape, v: Var, detach: bool) -> Var {
    if detach {
        let value = tape.value(v).clone();
        tape.leaf(value)
    } else {
        v
    }
}

/// Returns the second-order term, `s₁(x + σz)` and, with variance
/// reduction, `s₁(x − σz)`.
fn d2sm_term(tape: &mut Tape, vars: &PairVars, batch: &Batch, sigma: f64, opts: JointOptions) -> Result<(Var, Var, Option<Var>)> {
    let (diag, detach) = (opts.diag, opts.detach_first_order);
    let xp = tape.leaf(batch.noisy(sigma));
    let sp = vars.s1(tape, xp)?;
    let c = constant_if(tape, sp, detach);
    let pp = psi_node(tape, vars, c, xp, diag)?;
    if !opts.variance_reduction {
        return Ok((d2sm_node(tape, pp, &batch.z, sigma)?, sp, None));
    }
    let xm = tape.leaf(batch.shifted(sigma, -1.0));
    let x0 = tape.leaf(batch.x.clone());
    let sm = vars.s1(tape, xm)?;
    let s0 = vars.s1(tape, x0)?;
    let c = constant_if(tape, sm, detach);
    let pm = psi_node(tape, vars, c, xm, diag)?;
    let c = constant_if(tape, s0, detach);
    let p0 = psi_node(tape, vars, c, x0, diag)?;
    Ok((d2sm_vr_node(tape, pp, pm, p0, &batch.z, sigma)?, sp, Some(sm)))
}

/// Second-order denoising score matching with the full `D x D` residual.
pub fn loss_d2sm(pair: &ScoreModelPair, batch: &Batch, sigma: f64) -> Result<LossValue> {
    single(pair, batch, sigma, false, false)
}

/// Diagonal-only residual; works with either model mode.
pub fn loss_d2sm_diag(pair: &ScoreModelPair, batch: &Batch, sigma: f64) -> Result<LossValue> {
    single(pair, batch, sigma, true, false)
}

/// Antithetic form evaluated at `x ± σz` and `x`. The value sums both
/// antithetic members, so its gradient is twice that of [`loss_d2sm`] in
/// expectation.
pub fn loss_d2sm_vr(pair: &ScoreModelPair, batch: &Batch, sigma: f64, diag: bool) -> Result<LossValue> {
    single(pair, batch, sigma, diag, true)
}

/// `d2sm + γ·dsm`. With `vr` both terms are means over the antithetic pair
/// `(x, z)`, `(x, −z)`: the second-order term is half of [`loss_d2sm_vr`] and
/// the first-order term is [`dsm_vr_value`] averaged over the pair, where the
/// clean-point evaluations cancel and leave
/// `¼(‖s₁(x₊)‖² + ‖s₁(x₋)‖²) + (s₁(x₊) − s₁(x₋))ᵀz / (2σ)`.
/// Expected gradients match the plain loss.
pub fn loss_joint(pair: &ScoreModelPair, batch: &Batch, sigma: f64, gamma: f64, opts: JointOptions) -> Result<(LossReport, Vec<Matrix>)> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(invalid(format!("joint weight must be non-negative, got {gamma}")));
    }
    let (total, dsm, d2sm, grads) = pair_loss(pair, batch, sigma, |tape, vars| {
        let (d2, sp, s0) = d2sm_term(tape, vars, batch, sigma, opts)?;
        let (d2, d1) = match s0 {
            Some(sm) => (tape.scale(d2, 0.5), dsm_antithetic_node(tape, sp, sm, &batch.z, sigma)?),
            None => (d2, dsm_node(tape, sp, &batch.z, sigma)?),
        };
        let w = tape.scale(d1, gamma);
        Ok((tape.add(d2, w)?, d1, d2))
    })?;
    let report = LossReport {
        step: 0,
        total,
        dsm,
        d2sm,
        grad_norm: grad_norm(&grads),
    };
    Ok((report, grads))
}

/// DSM on the first-order net of a pair; gradients cover every pair parameter
/// (zero for the second-order nets).
pub fn loss_dsm_pair(pair: &ScoreModelPair, batch: &Batch, sigma: f64, vr: bool) -> Result<(LossReport, Vec<Matrix>)> {
    let (total, _, _, grads) = pair_loss(pair, batch, sigma, |tape, vars| {
        let s1 = vars.s1_vars();
        let xp = tape.leaf(batch.noisy(sigma));
        let sp = s1.forward(tape, xp)?;
        let l = if vr {
            let x0 = tape.leaf(batch.x.clone());
            let s0 = s1.forward(tape, x0)?;
            dsm_vr_node(tape, sp, s0, &batch.z, sigma)?
        } else {
            dsm_node(tape, sp, &batch.z, sigma)?
        };
        Ok((l, l, l))
    })?;
    let report = LossReport {
        step: 0,
        total,
        dsm: total,
        d2sm: 0.0,
        grad_norm: grad_norm(&grads),
    };
    Ok((report, grads))
}
