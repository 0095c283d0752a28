//! Training and calibration objectives. Every function records its
//! computation on the caller's tape and returns a scalar `Var`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn default_weight() -> f64 {
    0.1
}

fn default_tau() -> f64 {
    0.125
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "default_weight")]
    pub alpha: f64,
    #[serde(default = "default_weight")]
    pub beta: f64,
    #[serde(default = "default_weight")]
    pub gamma: f64,
    #[serde(default = "default_weight")]
    pub zeta: f64,
    #[serde(default = "default_weight")]
    pub alpha_c: f64,
    #[serde(default = "default_weight")]
    pub beta_c: f64,
    /// SoftCLIP temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// L2-normalize rows before SoftCLIP dot products.
    #[serde(default = "default_true")]
    pub normalize_clip: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            zeta: 0.1,
            alpha_c: 0.1,
            beta_c: 0.1,
            tau: default_tau(),
            normalize_clip: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("weights.alpha", self.alpha),
            ("weights.beta", self.beta),
            ("weights.gamma", self.gamma),
            ("weights.zeta", self.zeta),
            ("weights.alpha_c", self.alpha_c),
            ("weights.beta_c", self.beta_c),
            ("weights.tau", self.tau),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(name, "must be a positive finite number"));
            }
        }
        Ok(())
    }
}

fn rows(t: &Tape, v: Var) -> usize {
    t.shape(v).first().copied().unwrap_or(1)
}

fn same_shape(t: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if t.shape(a) != t.shape(b) {
        return Err(Error::Shape {
            op,
            lhs: t.shape(a).to_vec(),
            rhs: t.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Mean over the batch of `‖x̂_s − x‖²/m + ‖x̂_r − x‖²/m`.
pub fn reconstruction_loss(t: &mut Tape, x_hat_s: Var, x_hat_r: Var, x: Var) -> Result<Var> {
    same_shape(t, "reconstruction_loss", x_hat_s, x)?;
    same_shape(t, "reconstruction_loss", x_hat_r, x)?;
    let n = t.value(x).len() as f64;
    let ds = t.sub(x_hat_s, x)?;
    let ds = t.square(ds);
    let dr = t.sub(x_hat_r, x)?;
    let dr = t.square(dr);
    let total = t.add(ds, dr)?;
    let total = t.sum(total);
    Ok(t.scale(total, 1.0 / n))
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// `−Σ_b log softmax(logits_b)[label_b]`, summed over the batch.
pub fn cross_entropy_sum(t: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = t.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let targets = t.constant(one_hot(labels, shape[1])?);
    let lp = t.log_softmax(logits, 1)?;
    let picked = t.hadamard(lp, targets)?;
    let s = t.sum(picked);
    Ok(t.scale(s, -1.0))
}

/// Batch-mean cross-entropy, used for reporting.
pub fn cross_entropy_mean(t: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = cross_entropy_sum(t, logits, labels)?;
    Ok(t.scale(s, 1.0 / labels.len() as f64))
}

/// Subject-prediction loss on specific features.
pub fn domain_classification_loss(t: &mut Tape, dc_logits: Var, labels: &[usize]) -> Result<Var> {
    cross_entropy_sum(t, dc_logits, labels)
}

/// Same formula as [`domain_classification_loss`]; the logits are expected
/// to come from a classifier placed behind a gradient-reversal node, which is
/// what turns the minimization adversarial for the shared encoder.
pub fn domain_alignment_loss_grl(t: &mut Tape, da_logits: Var, labels: &[usize]) -> Result<Var> {
    cross_entropy_sum(t, da_logits, labels)
}

/// Per-subject mean rows of `features`, for subjects present in `labels`.
fn subject_means(t: &mut Tape, features: Var, labels: &[usize], n_subjects: usize) -> Result<(Var, usize)> {
    let b = rows(t, features);
    if labels.len() != b {
        return Err(Error::Shape {
            op: "subject_means",
            lhs: t.shape(features).to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut counts = vec![0usize; n_subjects];
    for &l in labels {
        if l >= n_subjects {
            return Err(Error::invalid(format!("subject label {l} out of range for {n_subjects}")));
        }
        counts[l] += 1;
    }
    let present: Vec<usize> = (0..n_subjects).filter(|&i| counts[i] > 0).collect();
    if present.len() < 2 {
        return Err(Error::invalid("alignment across subjects needs at least two subjects in the batch"));
    }
    let mut avg = vec![0.0; present.len() * b];
    for (row, &subj) in present.iter().enumerate() {
        for (j, &l) in labels.iter().enumerate() {
            if l == subj {
                avg[row * b + j] = 1.0 / counts[subj] as f64;
            }
        }
    }
    let avg = t.constant(Tensor::new(vec![present.len(), b], avg)?);
    Ok((t.matmul(avg, features)?, present.len()))
}

/// `1/N² Σ_{i,k} KL(σ(δ(r̄ⁱ)) ‖ σ(δ(r̄ᵏ)))` over per-subject batch means,
/// with `δ(x) = x·W + b`. Subjects absent from the batch are skipped.
pub fn domain_alignment_loss_kl(
    t: &mut Tape,
    r: Var,
    labels: &[usize],
    n_subjects: usize,
    proj_weight: Var,
    proj_bias: Var,
) -> Result<Var> {
    let (means, n) = subject_means(t, r, labels, n_subjects)?;
    let z = t.matmul(means, proj_weight)?;
    let z = t.add_bias(z, proj_bias)?;
    let p = t.softmax(z, 1)?;
    let lp = t.log_softmax(z, 1)?;
    // Σ_{i,k} Σ_c p_ic (lp_ic − lp_kc) = n Σ p⊙lp − Σ_c (Σ_i p_ic)(Σ_k lp_kc)
    let self_term = t.hadamard(p, lp)?;
    let self_term = t.sum(self_term);
    let self_term = t.scale(self_term, n as f64);
    let ones = t.constant(Tensor::filled(vec![1, n], 1.0));
    let col_p = t.matmul(ones, p)?;
    let col_lp = t.matmul(ones, lp)?;
    let cross = t.hadamard(col_p, col_lp)?;
    let cross = t.sum(cross);
    let total = t.sub(self_term, cross)?;
    Ok(t.scale(total, 1.0 / (n * n) as f64))
}

/// `1/N² Σ_{i,k} ‖r̄ⁱ − r̄ᵏ‖_p` over per-subject batch means, `p ∈ {1, 2}`.
pub fn domain_alignment_loss_lp(t: &mut Tape, features: Var, labels: &[usize], n_subjects: usize, p: u32) -> Result<Var> {
    if p != 1 && p != 2 {
        return Err(Error::invalid(format!("p-norm alignment supports p in {{1, 2}}, got {p}")));
    }
    let (means, n) = subject_means(t, features, labels, n_subjects)?;
    let pairs = n * (n - 1);
    let mut delta = vec![0.0; pairs * n];
    let mut row = 0;
    for i in 0..n {
        for k in 0..n {
            if i != k {
                delta[row * n + i] = 1.0;
                delta[row * n + k] = -1.0;
                row += 1;
            }
        }
    }
    let delta = t.constant(Tensor::new(vec![pairs, n], delta)?);
    let diffs = t.matmul(delta, means)?;
    let norms = if p == 2 {
        let sq = t.square(diffs);
        let s = t.sum_last(sq);
        t.sqrt(s)
    } else {
        let a = t.abs(diffs);
        t.sum_last(a)
    };
    let total = t.sum(norms);
    Ok(t.scale(total, 1.0 / (n * n) as f64))
}

/// Batch mean of `‖s ⊙ r‖²`.
pub fn difference_loss(t: &mut Tape, s: Var, r: Var) -> Result<Var> {
    same_shape(t, "difference_loss", s, r)?;
    let b = rows(t, s) as f64;
    let h = t.hadamard(s, r)?;
    let h = t.square(h);
    let total = t.sum(h);
    Ok(t.scale(total, 1.0 / b))
}

/// SoftCLIP: cross-entropy between the soft similarity distribution of the
/// targets among themselves and that of predictions against targets,
/// normalized by the batch size.
pub fn softclip_loss(t: &mut Tape, pred: Var, target: Var, tau: f64, normalize: bool) -> Result<Var> {
    same_shape(t, "softclip_loss", pred, target)?;
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let b = rows(t, pred) as f64;
    let (p, e) = if normalize {
        (t.l2_normalize_rows(pred)?, t.l2_normalize_rows(target)?)
    } else {
        (pred, target)
    };
    let target_logits = t.matmul_nt(e, e)?;
    let target_logits = t.scale(target_logits, 1.0 / tau);
    let soft = t.softmax(target_logits, 1)?;
    let pred_logits = t.matmul_nt(p, e)?;
    let pred_logits = t.scale(pred_logits, 1.0 / tau);
    let lp = t.log_softmax(pred_logits, 1)?;
    let prod = t.hadamard(soft, lp)?;
    let total = t.sum(prod);
    Ok(t.scale(total, -1.0 / b))
}

/// SoftCLIP plus the batch-mean squared error `‖e − ê‖²`.
pub fn alignment_loss(t: &mut Tape, pred: Var, target: Var, tau: f64, normalize: bool) -> Result<Var> {
    let clip = softclip_loss(t, pred, target, tau, normalize)?;
    let b = rows(t, pred) as f64;
    let d = t.sub(target, pred)?;
    let d = t.square(d);
    let mse = t.sum(d);
    let mse = t.scale(mse, 1.0 / b);
    t.add(clip, mse)
}

/// Scalar components of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct TrainLossParts {
    pub align: Var,
    pub rec: Var,
    pub dc: Var,
    pub da: Var,
    pub diff: Var,
}

/// `L_align + α·L_rec + β·L_c + γ·L_da + ζ·L_diff`.
pub fn total_train_loss(t: &mut Tape, parts: &TrainLossParts, w: &LossWeights) -> Result<Var> {
    let mut total = parts.align;
    for (v, c) in [(parts.rec, w.alpha), (parts.dc, w.beta), (parts.da, w.gamma), (parts.diff, w.zeta)] {
        let term = t.scale(v, c);
        total = t.add(total, term)?;
    }
    Ok(total)
}

/// `L_align + α′·L_rec + β′·L_diff`, with the reconstruction term taken on
/// the new subject's data only.
pub fn total_calibration_loss(t: &mut Tape, align: Var, rec_new: Var, diff: Var, w: &LossWeights) -> Result<Var> {
    let rec = t.scale(rec_new, w.alpha_c);
    let diff = t.scale(diff, w.beta_c);
    let total = t.add(align, rec)?;
    t.add(total, diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check_tape_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn eval(build: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut t = Tape::new();
        let v = build(&mut t).unwrap();
        t.value(v).item()
    }

    fn c(t: &mut Tape, rows: &[&[f64]]) -> Var {
        t.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn reconstruction_examples() {
        let v = eval(|t| {
            let x = c(t, &[&[0.3, -1.0]]);
            reconstruction_loss(t, x, x, x)
        });
        assert_eq!(v, 0.0);
        let v = eval(|t| {
            let x = c(t, &[&[0.0, 0.0]]);
            let xs = c(t, &[&[1.0, 1.0]]);
            reconstruction_loss(t, xs, x, x)
        });
        assert_eq!(v, 1.0);
        let mut t = Tape::new();
        let a = c(&mut t, &[&[0.0, 0.0]]);
        let b = c(&mut t, &[&[0.0, 0.0, 0.0]]);
        assert!(reconstruction_loss(&mut t, a, a, b).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let v = eval(|t| {
            let z = c(t, &[&[0.0, 0.0, 0.0, 0.0]]);
            domain_classification_loss(t, z, &[2])
        });
        assert!((v - 4f64.ln()).abs() < 1e-15);
        let v = eval(|t| {
            let z = c(t, &[&[0.0, 800.0, 0.0]]);
            domain_classification_loss(t, z, &[1])
        });
        assert!(v.abs() < 1e-300);
        let mut t = Tape::new();
        let z = c(&mut t, &[&[0.0, 0.0]]);
        assert!(domain_classification_loss(&mut t, z, &[2]).is_err());
    }

    #[test]
    fn cross_entropy_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random(vec![5, 3], &mut rng);
        let labels = [0, 2, 1, 1, 0];
        let mut oracle = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = logits.row(i);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            oracle -= (row[l].exp() / denom).ln();
        }
        let v = eval(|t| {
            let z = t.constant(logits.clone());
            domain_classification_loss(t, z, &labels)
        });
        assert!((v - oracle).abs() < 1e-12);
        let g = eval(|t| {
            let z = t.constant(logits.clone());
            domain_alignment_loss_grl(t, z, &labels)
        });
        assert_eq!(g, v);
        let uniform = eval(|t| {
            let z = t.constant(Tensor::zeros(vec![3, 5]));
            domain_alignment_loss_grl(t, z, &[0, 1, 4])
        });
        assert!((uniform - 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_alignment_examples() {
        // Identity projection turns log-probability rows into those distributions.
        let kl = |rows: &[&[f64]]| {
            eval(|t| {
                let r = c(t, rows);
                let w = t.constant(Tensor::identity(2));
                let b = t.constant(Tensor::zeros(vec![2]));
                domain_alignment_loss_kl(t, r, &[0, 1], 2, w, b)
            })
        };
        let same = kl(&[&[0.2, -0.4], &[0.2, -0.4]]);
        assert!(same.abs() < 1e-15);
        let p = [0.9f64, 0.1];
        let q = [0.5f64, 0.5];
        let kl_pq = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl_pq - 0.3681).abs() < 1e-4);
        let kl_qp: f64 = q.iter().zip(&p).map(|(a, b)| a * (a / b).ln()).sum();
        let v = kl(&[&[p[0].ln(), p[1].ln()], &[q[0].ln(), q[1].ln()]]);
        assert!((v - (kl_pq + kl_qp) / 4.0).abs() < 1e-12);

        let mut t = Tape::new();
        let r = c(&mut t, &[&[0.0, 0.0]]);
        let w = t.constant(Tensor::identity(2));
        let b = t.constant(Tensor::zeros(vec![2]));
        assert!(domain_alignment_loss_kl(&mut t, r, &[0], 2, w, b).is_err());
    }

    #[test]
    fn kl_alignment_skips_absent_subjects_and_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let r = random(vec![6, 3], &mut rng);
            let w = random(vec![3, 4], &mut rng);
            let v = eval(|t| {
                let r = t.constant(r.clone());
                let w = t.constant(w.clone());
                let b = t.constant(Tensor::zeros(vec![4]));
                domain_alignment_loss_kl(t, r, &[0, 0, 2, 2, 3, 3], 5, w, b)
            });
            assert!(v >= -1e-15);
        }
    }

    #[test]
    fn lp_alignment_examples() {
        let v = eval(|t| {
            let f = c(t, &[&[0.0, 0.0], &[3.0, 4.0]]);
            domain_alignment_loss_lp(t, f, &[0, 1], 2, 2)
        });
        assert!((v - 2.5).abs() < 1e-15);
        let v = eval(|t| {
            let f = c(t, &[&[1.0, 2.0], &[3.0, 4.0], &[1.0, 2.0], &[3.0, 4.0]]);
            domain_alignment_loss_lp(t, f, &[0, 0, 1, 1], 2, 1)
        });
        assert_eq!(v, 0.0);
        let mut t = Tape::new();
        let f = c(&mut t, &[&[1.0], &[2.0]]);
        assert!(domain_alignment_loss_lp(&mut t, f, &[0, 1], 2, 3).is_err());
    }

    #[test]
    fn lp_alignment_is_permutation_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random(vec![6, 3], &mut rng);
        let labels = [0, 1, 2, 0, 1, 2];
        let permuted = [2, 0, 1, 2, 0, 1];
        for p in [1, 2] {
            let a = eval(|t| {
                let v = t.constant(f.clone());
                domain_alignment_loss_lp(t, v, &labels, 3, p)
            });
            let b = eval(|t| {
                let v = t.constant(f.clone());
                domain_alignment_loss_lp(t, v, &permuted, 3, p)
            });
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn difference_examples() {
        let v = eval(|t| {
            let s = c(t, &[&[1.0, 0.0]]);
            let r = c(t, &[&[0.0, 1.0]]);
            difference_loss(t, s, r)
        });
        assert_eq!(v, 0.0);
        let v = eval(|t| {
            let s = c(t, &[&[1.0, 2.0]]);
            let r = c(t, &[&[3.0, 4.0]]);
            difference_loss(t, s, r)
        });
        assert_eq!(v, 73.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random(vec![3, 4], &mut rng);
        let r = random(vec![3, 4], &mut rng);
        let base = eval(|t| {
            let (s, r) = (t.constant(s.clone()), t.constant(r.clone()));
            difference_loss(t, s, r)
        });
        let doubled = eval(|t| {
            let s = t.constant(s.clone());
            let s = t.scale(s, 2.0);
            let r = t.constant(r.clone());
            difference_loss(t, s, r)
        });
        assert!((doubled - 4.0 * base).abs() < 1e-12);
    }

    /// Independent double loop over the SoftCLIP definition.
    fn softclip_oracle(pred: &Tensor, target: &Tensor, tau: f64, normalize: bool) -> f64 {
        let b = pred.rows();
        let norm = |v: &[f64]| -> Vec<f64> {
            if !normalize {
                return v.to_vec();
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        };
        let p: Vec<Vec<f64>> = (0..b).map(|i| norm(pred.row(i))).collect();
        let e: Vec<Vec<f64>> = (0..b).map(|i| norm(target.row(i))).collect();
        let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for k in 0..b {
            let tden: f64 = (0..b).map(|m| (dot(&e[k], &e[m]) / tau).exp()).sum();
            let pden: f64 = (0..b).map(|m| (dot(&p[k], &e[m]) / tau).exp()).sum();
            for l in 0..b {
                let soft = (dot(&e[k], &e[l]) / tau).exp() / tden;
                let logp = ((dot(&p[k], &e[l]) / tau).exp() / pden).ln();
                total -= soft * logp;
            }
        }
        total / b as f64
    }

    #[test]
    fn softclip_single_row_is_zero() {
        let v = eval(|t| {
            let p = c(t, &[&[0.3, -2.0, 1.0]]);
            let e = c(t, &[&[1.0, 0.5, 0.0]]);
            softclip_loss(t, p, e, 0.125, true)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn softclip_orthogonal_pair_matches_double_loop() {
        let pred = Tensor::from_rows(&[[0.8, 0.3], [-0.2, 1.1]]).unwrap();
        let target = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        for normalize in [true, false] {
            let v = eval(|t| {
                let p = t.constant(pred.clone());
                let e = t.constant(target.clone());
                softclip_loss(t, p, e, 1.0, normalize)
            });
            assert!((v - softclip_oracle(&pred, &target, 1.0, normalize)).abs() < 1e-12);
        }
    }

    #[test]
    fn softclip_random_matches_double_loop_and_prefers_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let pred = random(vec![5, 4], &mut rng);
            let target = random(vec![5, 4], &mut rng);
            let v = eval(|t| {
                let p = t.constant(pred.clone());
                let e = t.constant(target.clone());
                softclip_loss(t, p, e, 0.125, true)
            });
            assert!((v - softclip_oracle(&pred, &target, 0.125, true)).abs() < 1e-10);
        }
        let e = Tensor::identity(4);
        let shuffled = e.select_rows(&[1, 2, 3, 0]);
        let at = |p: &Tensor| {
            eval(|t| {
                let pv = t.constant(p.clone());
                let ev = t.constant(e.clone());
                softclip_loss(t, pv, ev, 0.05, true)
            })
        };
        assert!(at(&e) <= at(&shuffled));
        // Common positive rescaling of targets is invisible after normalization.
        let pred = random(vec![3, 4], &mut rng);
        let target = random(vec![3, 4], &mut rng);
        let a = softclip_oracle(&pred, &target, 0.125, true);
        let v = eval(|t| {
            let p = t.constant(pred.clone());
            let e = t.constant(target.clone());
            let e = t.scale(e, 3.5);
            softclip_loss(t, p, e, 0.125, true)
        });
        assert!((a - v).abs() < 1e-12);
    }

    #[test]
    fn softclip_zero_row_errors() {
        let mut t = Tape::new();
        let p = c(&mut t, &[&[0.0, 0.0], &[1.0, 0.0]]);
        let e = c(&mut t, &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(softclip_loss(&mut t, p, e, 0.1, true), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn alignment_examples() {
        let v = eval(|t| {
            let e = c(t, &[&[0.6, 0.8]]);
            alignment_loss(t, e, e, 0.125, true)
        });
        assert_eq!(v, 0.0);
        let v = eval(|t| {
            let p = c(t, &[&[0.0, 1.0]]);
            let e = c(t, &[&[1.0, 0.0]]);
            alignment_loss(t, p, e, 0.125, true)
        });
        assert_eq!(v, 2.0);
    }

    #[test]
    fn alignment_decreases_along_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let e = random(vec![4, 3], &mut rng);
        let start = random(vec![4, 3], &mut rng);
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let a = step as f64 / 10.0;
            let p: Vec<f64> = start
                .data()
                .iter()
                .zip(e.data())
                .map(|(s, t)| (1.0 - a) * s + a * t)
                .collect();
            let p = Tensor::new(vec![4, 3], p).unwrap();
            let v = eval(|t| {
                let pv = t.constant(p.clone());
                let ev = t.constant(e.clone());
                alignment_loss(t, pv, ev, 0.5, true)
            });
            assert!(v < last, "step {step}: {v} >= {last}");
            last = v;
        }
    }

    #[test]
    fn totals() {
        let w = LossWeights::default();
        let parts = |t: &mut Tape, v: f64| TrainLossParts {
            align: t.constant(Tensor::scalar(v)),
            rec: t.constant(Tensor::scalar(v)),
            dc: t.constant(Tensor::scalar(v)),
            da: t.constant(Tensor::scalar(v)),
            diff: t.constant(Tensor::scalar(v)),
        };
        assert_eq!(eval(|t| { let p = parts(t, 0.0); total_train_loss(t, &p, &w) }), 0.0);
        assert!((eval(|t| { let p = parts(t, 1.0); total_train_loss(t, &p, &w) }) - 1.4).abs() < 1e-15);
        let calib = |v: f64| {
            eval(|t| {
                let a = t.constant(Tensor::scalar(v));
                total_calibration_loss(t, a, a, a, &w)
            })
        };
        assert_eq!(calib(0.0), 0.0);
        assert!((calib(1.0) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn total_gradient_is_weighted_sum_of_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(vec![2, 3], &mut rng);
        let w = LossWeights {
            alpha: 0.3,
            beta: 0.7,
            gamma: 1.1,
            zeta: 0.2,
            ..LossWeights::default()
        };
        let build = |t: &mut Tape, xv: Var| -> Result<[Var; 5]> {
            let a = t.square(xv);
            let a = t.sum(a);
            let b = t.gelu(xv);
            let b = t.sum(b);
            let c = t.abs(xv);
            let c = t.sum(c);
            let d = t.scale(xv, 2.0);
            let d = t.sum(d);
            let e = t.log_softmax(xv, 1)?;
            let e = t.sum(e);
            Ok([a, b, c, d, e])
        };
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let [a, b, cc, d, e] = build(&mut t, xv).unwrap();
        let parts = TrainLossParts { align: a, rec: b, dc: cc, da: d, diff: e };
        let total = total_train_loss(&mut t, &parts, &w).unwrap();
        t.backward(total).unwrap();
        let combined = t.grad(xv).unwrap().to_vec();
        let mut expected = vec![0.0; x.len()];
        for (k, coef) in [1.0, w.alpha, w.beta, w.gamma, w.zeta].into_iter().enumerate() {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone(), true);
            let comps = build(&mut t, xv).unwrap();
            t.backward(comps[k]).unwrap();
            for (e, g) in expected.iter_mut().zip(t.grad(xv).unwrap()) {
                *e += coef * g;
            }
        }
        for (a, b) in combined.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_pass_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ps = [
            random(vec![4, 4], &mut rng),
            random(vec![4, 4], &mut rng),
            random(vec![4, 4], &mut rng),
            random(vec![4, 3], &mut rng),
            random(vec![3], &mut rng),
        ];
        let labels = [0usize, 1, 2, 1];
        type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
        let cases: Vec<(&str, Build)> = vec![
            ("rec", Box::new(|t, v| reconstruction_loss(t, v[0], v[1], v[2]))),
            ("ce", Box::new(move |t, v| cross_entropy_sum(t, v[3], &labels))),
            ("kl", Box::new(move |t, v| domain_alignment_loss_kl(t, v[0], &labels, 3, v[3], v[4]))),
            ("lp2", Box::new(move |t, v| domain_alignment_loss_lp(t, v[0], &labels, 3, 2))),
            ("lp1", Box::new(move |t, v| domain_alignment_loss_lp(t, v[1], &labels, 3, 1))),
            ("diff", Box::new(|t, v| difference_loss(t, v[0], v[1]))),
            ("softclip", Box::new(|t, v| softclip_loss(t, v[0], v[1], 0.125, true))),
            ("softclip raw", Box::new(|t, v| softclip_loss(t, v[0], v[1], 1.0, false))),
            ("align", Box::new(|t, v| alignment_loss(t, v[0], v[2], 0.125, true))),
        ];
        for (name, build) in cases {
            let rep = check_tape_gradients(|t, v| build(t, v), &ps, 1e-5).unwrap();
            assert!(rep.max_rel_error <= 1e-4, "{name}: {rep:?}");
        }
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights {
            tau: 0.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
