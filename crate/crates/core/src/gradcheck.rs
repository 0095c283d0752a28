//! Model-level gradient self-check: every loss term and both composed
//! objectives against central differences on a tiny model, plus the
//! gradient-reversal contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autograd::{relative_error, Var};
use crate::error::Result;
use crate::losses::{self, LossWeights, TrainLossParts};
use crate::model::{Graph, MindCrossModel, ModelConfig, ParamId};
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Allowed elementwise gap between the reversed and the negated plain gradient.
pub const GRL_TOLERANCE: f64 = 1e-10;

const STEP: f64 = 1e-5;
const SUBJECTS: [&str; 3] = ["a", "b", "c"];
const NEW_SUBJECT: &str = "n";
const ROWS_PER_SUBJECT: usize = 3;
const IN_DIM: usize = 6;
const HIDDEN: usize = 4;
const EMBED_DIM: usize = 3;
const GRL_SCALE: f64 = 0.7;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Flip the sign of the gradient-reversal backward pass (mutation test).
    pub inject_grl_sign_bug: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct LossCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GrlCheck {
    pub scale: f64,
    pub forward_bit_exact: bool,
    /// Max over shared-encoder coordinates of `|g_grl + scale·g_plain|`.
    pub max_abs_deviation: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub losses: Vec<LossCheck>,
    pub grl: GrlCheck,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.grl.passed && self.losses.iter().all(|l| l.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<28} {:>12} {:>8}  result\n", "check", "max_rel_err", "coords");
        for l in &self.losses {
            out += &format!(
                "{:<28} {:>12.3e} {:>8}  {}\n",
                l.name,
                l.max_rel_error,
                l.checked,
                if l.passed { "pass" } else { "FAIL" }
            );
        }
        out += &format!(
            "{:<28} {:>12.3e} {:>8}  {}{}\n",
            "grl_negation",
            self.grl.max_abs_deviation,
            "-",
            if self.grl.passed { "pass" } else { "FAIL" },
            if self.grl.forward_bit_exact { "" } else { " (forward differs)" }
        );
        out
    }
}

struct Fixture {
    x: Vec<Tensor>,
    e: Vec<Tensor>,
    x_new: Tensor,
    e_new: Tensor,
    weights: LossWeights,
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

fn fixture(seed: u64) -> Result<(MindCrossModel, Fixture)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::new(IN_DIM, HIDDEN, EMBED_DIM, SUBJECTS.iter().map(|s| s.to_string()).collect());
    cfg.grl_scale = GRL_SCALE;
    let mut model = MindCrossModel::build(cfg, &mut rng)?;
    model.add_new_subject(NEW_SUBJECT, &mut rng)?;
    model.set_trainable(|_| true);
    // Non-default gains and biases so every layer-norm path is exercised.
    for g in model.params_mut().iter_mut() {
        if g.name.contains("norm") {
            for v in g.tensor.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += 0.3 * z;
            }
        }
    }
    let x = SUBJECTS.iter().map(|_| gaussian(ROWS_PER_SUBJECT, IN_DIM, &mut rng)).collect();
    let e = SUBJECTS.iter().map(|_| gaussian(ROWS_PER_SUBJECT, EMBED_DIM, &mut rng)).collect();
    let x_new = gaussian(ROWS_PER_SUBJECT, IN_DIM, &mut rng);
    let e_new = gaussian(ROWS_PER_SUBJECT, EMBED_DIM, &mut rng);
    // Distinct weights so a mis-weighted term cannot hide behind symmetry.
    let weights = LossWeights {
        alpha: 0.3,
        beta: 0.2,
        gamma: 0.4,
        zeta: 0.15,
        alpha_c: 0.25,
        beta_c: 0.35,
        ..LossWeights::default()
    };
    Ok((
        model,
        Fixture {
            x,
            e,
            x_new,
            e_new,
            weights,
        },
    ))
}

#[derive(Clone, Copy, PartialEq)]
enum Objective {
    Softclip,
    Alignment,
    Reconstruction,
    DomainClassification,
    DomainAlignmentGrl,
    DomainAlignmentKl,
    DomainAlignmentL1,
    DomainAlignmentL2,
    Difference,
    TotalTrainGrl,
    TotalTrainKl,
    TotalTrainLp,
    TotalCalibration,
}

impl Objective {
    const ALL: [Objective; 13] = [
        Objective::Softclip,
        Objective::Alignment,
        Objective::Reconstruction,
        Objective::DomainClassification,
        Objective::DomainAlignmentGrl,
        Objective::DomainAlignmentKl,
        Objective::DomainAlignmentL1,
        Objective::DomainAlignmentL2,
        Objective::Difference,
        Objective::TotalTrainGrl,
        Objective::TotalTrainKl,
        Objective::TotalTrainLp,
        Objective::TotalCalibration,
    ];

    fn name(self) -> &'static str {
        match self {
            Objective::Softclip => "softclip",
            Objective::Alignment => "alignment",
            Objective::Reconstruction => "reconstruction",
            Objective::DomainClassification => "domain_classification",
            Objective::DomainAlignmentGrl => "domain_alignment_grl",
            Objective::DomainAlignmentKl => "domain_alignment_kl",
            Objective::DomainAlignmentL1 => "domain_alignment_lp1",
            Objective::DomainAlignmentL2 => "domain_alignment_lp2",
            Objective::Difference => "difference",
            Objective::TotalTrainGrl => "total_train_grl",
            Objective::TotalTrainKl => "total_train_kl",
            Objective::TotalTrainLp => "total_train_lp",
            Objective::TotalCalibration => "total_calibration",
        }
    }

    /// Weight with which the reversed alignment term enters the objective.
    fn grl_weight(self, w: &LossWeights) -> Option<f64> {
        match self {
            Objective::DomainAlignmentGrl => Some(1.0),
            Objective::TotalTrainGrl => Some(w.gamma),
            _ => None,
        }
    }
}

/// Records `obj` on `g`, or only the part of it selected by `part`.
fn record(g: &mut Graph, fx: &Fixture, obj: Objective, part: Part) -> Result<Var> {
    let w = &fx.weights;
    let model = g.model();
    if obj == Objective::TotalCalibration {
        let x = g.input(fx.x_new.clone());
        let e = g.input(fx.e_new.clone());
        let core = g.forward_core(&[(NEW_SUBJECT, x)])?;
        let t = &mut g.tape;
        let align = losses::alignment_loss(t, core.e_hat, e, w.tau, w.normalize_clip)?;
        let rec = losses::reconstruction_loss(t, core.x_hat_s, core.x_hat_r, x)?;
        let diff = losses::difference_loss(t, core.s, core.r)?;
        return losses::total_calibration_loss(t, align, rec, diff, w);
    }
    let xs: Vec<Var> = fx.x.iter().map(|x| g.input(x.clone())).collect();
    let inputs: Vec<(&str, Var)> = SUBJECTS.iter().copied().zip(xs.iter().copied()).collect();
    let x = g.tape.concat_rows(&xs)?;
    let es: Vec<Var> = fx.e.iter().map(|e| g.input(e.clone())).collect();
    let e = g.tape.concat_rows(&es)?;
    let labels: Vec<usize> = (0..SUBJECTS.len()).flat_map(|i| [i; ROWS_PER_SUBJECT]).collect();
    let n = SUBJECTS.len();
    let out = g.forward_train(&inputs)?;
    let core = out.core;
    let da = |g: &mut Graph, variant: Objective| -> Result<Var> {
        match variant {
            Objective::DomainAlignmentKl | Objective::TotalTrainKl => {
                let pw = g.param(model.kl_projection.weight);
                let pb = g.param(model.kl_projection.bias);
                losses::domain_alignment_loss_kl(&mut g.tape, core.r, &labels, n, pw, pb)
            }
            Objective::DomainAlignmentL1 => losses::domain_alignment_loss_lp(&mut g.tape, core.r, &labels, n, 1),
            Objective::DomainAlignmentL2 | Objective::TotalTrainLp => {
                losses::domain_alignment_loss_lp(&mut g.tape, core.r, &labels, n, 2)
            }
            _ => losses::domain_alignment_loss_grl(&mut g.tape, out.da_logits, &labels),
        }
    };
    let grl_weight = obj.grl_weight(w);
    if part == Part::GrlTerm {
        return match grl_weight {
            Some(_) => da(g, obj),
            None => Ok(g.input(Tensor::scalar(0.0))),
        };
    }
    let t = &mut g.tape;
    match obj {
        Objective::Softclip => losses::softclip_loss(t, core.e_hat, e, w.tau, w.normalize_clip),
        Objective::Alignment => losses::alignment_loss(t, core.e_hat, e, w.tau, w.normalize_clip),
        Objective::Reconstruction => losses::reconstruction_loss(t, core.x_hat_s, core.x_hat_r, x),
        Objective::DomainClassification => losses::domain_classification_loss(t, out.dc_logits, &labels),
        Objective::Difference => losses::difference_loss(t, core.s, core.r),
        Objective::DomainAlignmentGrl if part == Part::WithoutGrlTerm => Ok(g.input(Tensor::scalar(0.0))),
        Objective::TotalTrainGrl | Objective::TotalTrainKl | Objective::TotalTrainLp => {
            let align = losses::alignment_loss(t, core.e_hat, e, w.tau, w.normalize_clip)?;
            let rec = losses::reconstruction_loss(t, core.x_hat_s, core.x_hat_r, x)?;
            let dc = losses::domain_classification_loss(t, out.dc_logits, &labels)?;
            let diff = losses::difference_loss(t, core.s, core.r)?;
            let da = if part == Part::WithoutGrlTerm && grl_weight.is_some() {
                g.input(Tensor::scalar(0.0))
            } else {
                da(g, obj)?
            };
            losses::total_train_loss(&mut g.tape, &TrainLossParts { align, rec, dc, da, diff }, w)
        }
        _ => da(g, obj),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Full,
    WithoutGrlTerm,
    GrlTerm,
}

fn evaluate(model: &MindCrossModel, fx: &Fixture, obj: Objective, part: Part) -> Result<f64> {
    let mut g = Graph::eval_with_grads(model);
    let v = record(&mut g, fx, obj, part)?;
    Ok(g.tape.value(v).item())
}

fn analytic(model: &MindCrossModel, fx: &Fixture, obj: Objective, sign_bug: bool) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::eval_with_grads(model);
    g.tape.inject_grl_sign_bug(sign_bug);
    let loss = record(&mut g, fx, obj, Part::Full)?;
    g.tape.backward(loss)?;
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
    for (id, gr) in g.param_grads() {
        grads[id.index()] = gr;
    }
    Ok(grads)
}

/// Parameters upstream of the reversal node see the alignment term with
/// weight `-scale`.
fn upstream_of_grl(name: &str) -> bool {
    name.starts_with("encoder/shared/")
}

#[allow(clippy::needless_range_loop)]
fn check_objective(
    model: &mut MindCrossModel,
    fx: &Fixture,
    obj: Objective,
    opts: &GradcheckOptions,
    tol: f64,
) -> Result<LossCheck> {
    let grads = analytic(model, fx, obj, opts.inject_grl_sign_bug)?;
    let grl_weight = obj.grl_weight(&fx.weights);
    let scale = model.config().grl_scale;
    let ids: Vec<(ParamId, String)> = model.params().iter().map(|(id, p)| (id, p.name.clone())).collect();
    let mut worst = (0.0f64, None);
    let mut checked = 0;
    for (id, name) in ids {
        let factor = match grl_weight {
            Some(_) if upstream_of_grl(&name) => -scale,
            _ => 1.0,
        };
        for k in 0..model.params().get(id).tensor.len() {
            let orig = model.params().get(id).tensor.data()[k];
            let mut central = |part: Part| -> Result<f64> {
                model.params_mut().get_mut(id).tensor.data_mut()[k] = orig + STEP;
                let plus = evaluate(model, fx, obj, part)?;
                model.params_mut().get_mut(id).tensor.data_mut()[k] = orig - STEP;
                let minus = evaluate(model, fx, obj, part)?;
                model.params_mut().get_mut(id).tensor.data_mut()[k] = orig;
                Ok((plus - minus) / (2.0 * STEP))
            };
            let numeric = match grl_weight {
                None => central(Part::Full)?,
                Some(wt) => central(Part::WithoutGrlTerm)? + factor * wt * central(Part::GrlTerm)?,
            };
            let err = relative_error(grads[id.index()][k], numeric);
            checked += 1;
            if err > worst.0 || worst.1.is_none() {
                worst = (err, Some(format!("{name}[{k}]")));
            }
        }
    }
    Ok(LossCheck {
        name: obj.name().to_string(),
        max_rel_error: worst.0,
        worst_param: worst.1,
        checked,
        passed: worst.0 <= tol,
    })
}

/// Compares shared-encoder gradients of the alignment classifier loss with
/// and without the reversal node.
type Grads = Vec<(ParamId, Vec<f64>)>;

fn check_grl(model: &MindCrossModel, fx: &Fixture, sign_bug: bool) -> Result<GrlCheck> {
    let labels: Vec<usize> = (0..SUBJECTS.len()).flat_map(|i| [i; ROWS_PER_SUBJECT]).collect();
    let scale = model.config().grl_scale;
    let run = |reverse: bool| -> Result<(Tensor, Grads)> {
        let mut g = Graph::eval_with_grads(model);
        g.tape.inject_grl_sign_bug(sign_bug);
        let xs: Vec<Var> = fx.x.iter().map(|x| g.input(x.clone())).collect();
        let x = g.tape.concat_rows(&xs)?;
        let r = g.shared(x)?;
        let r = if reverse { g.tape.grad_reverse(r, scale)? } else { r };
        let logits = g.classify(model.da_classifier, r)?;
        let loss = losses::domain_alignment_loss_grl(&mut g.tape, logits, &labels)?;
        g.tape.backward(loss)?;
        Ok((g.tape.value(logits).clone(), g.param_grads()))
    };
    let (with_logits, with_grads) = run(true)?;
    let (plain_logits, plain_grads) = run(false)?;
    let forward_bit_exact = with_logits.data().iter().map(|v| v.to_bits()).eq(plain_logits.data().iter().map(|v| v.to_bits()));
    let mut max_abs_deviation = 0.0f64;
    let mut compared = 0;
    for ((id, gw), (_, gp)) in with_grads.iter().zip(&plain_grads) {
        if !upstream_of_grl(&model.params().get(*id).name) {
            continue;
        }
        for (a, b) in gw.iter().zip(gp) {
            max_abs_deviation = max_abs_deviation.max((a + scale * b).abs());
            compared += 1;
        }
    }
    Ok(GrlCheck {
        scale,
        forward_bit_exact,
        max_abs_deviation,
        passed: forward_bit_exact && compared > 0 && max_abs_deviation <= GRL_TOLERANCE,
    })
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (mut model, fx) = fixture(opts.seed)?;
    let losses = Objective::ALL
        .iter()
        .map(|&obj| check_objective(&mut model, &fx, obj, opts, DEFAULT_TOLERANCE))
        .collect::<Result<Vec<_>>>()?;
    let grl = check_grl(&model, &fx, opts.inject_grl_sign_bug)?;
    Ok(GradcheckReport {
        tolerance: DEFAULT_TOLERANCE,
        losses,
        grl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_model_passes() {
        let r = run_gradcheck(&GradcheckOptions::default()).unwrap();
        assert!(r.passed(), "{}", r.table());
        assert_eq!(r.losses.len(), Objective::ALL.len());
        assert!(r.table().contains("grl_negation"));
    }

    #[test]
    fn sign_bug_is_caught() {
        let r = run_gradcheck(&GradcheckOptions {
            inject_grl_sign_bug: true,
            ..Default::default()
        })
        .unwrap();
        assert!(!r.grl.passed);
        assert!(r.grl.forward_bit_exact);
        let failed: Vec<&str> = r.losses.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect();
        assert_eq!(failed, ["domain_alignment_grl", "total_train_grl"]);
    }
}
