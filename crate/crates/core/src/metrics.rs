//! Threshold-sweep and rank metrics, and Welch's t-test.

use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Descending score order; ties are adjacent.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Positive and negative counts per distinct score, highest score first.
fn score_groups(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, u64, u64)>> {
    if scores.len() != labels.len() {
        bail!(Contract, "{} scores for {} labels", scores.len(), labels.len());
    }
    if let Some(v) = scores.iter().find(|v| v.is_nan()) {
        bail!(Contract, "score {v} is not a number");
    }
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in order_desc(scores) {
        let (s, pos) = (scores[i], labels[i] != 0);
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if pos {
                    g.1 += 1;
                } else {
                    g.2 += 1;
                }
            }
            _ => groups.push((s, u64::from(pos), u64::from(!pos))),
        }
    }
    Ok(groups)
}

/// Average precision: `Σ (Rₖ − Rₖ₋₁) · Pₖ` over distinct score thresholds,
/// highest first, with tied scores entering together.
pub fn pixel_ap(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let groups = score_groups(scores, labels)?;
    let positives: u64 = groups.iter().map(|g| g.1).sum();
    if positives == 0 {
        bail!(Contract, "average precision needs at least one positive");
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (_, p, n) in groups {
        tp += p;
        fp += n;
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Dice at the lowest threshold whose false-positive rate is within `fpr`.
///
/// Pixels with score `≥ t` are predicted positive. `t` runs over the distinct
/// scores; if even the highest one exceeds the budget nothing is predicted.
pub fn dice_at_fpr(scores: &[f64], labels: &[u8], fpr: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fpr) {
        bail!(Range, "false positive rate {fpr} outside [0, 1]");
    }
    let groups = score_groups(scores, labels)?;
    let positives: u64 = groups.iter().map(|g| g.1).sum();
    let negatives: u64 = groups.iter().map(|g| g.2).sum();
    if positives == 0 || negatives == 0 {
        bail!(Contract, "dice at fpr needs both classes ({positives} positive, {negatives} negative)");
    }
    let budget = fpr * negatives as f64;
    let (mut tp, mut fp) = (0u64, 0u64);
    let (mut best_tp, mut best_fp) = (0u64, 0u64);
    for (_, p, n) in groups {
        tp += p;
        fp += n;
        if fp as f64 > budget {
            break;
        }
        (best_tp, best_fp) = (tp, fp);
    }
    let fneg = positives - best_tp;
    Ok(2.0 * best_tp as f64 / (2 * best_tp + best_fp + fneg) as f64)
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn image_auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let groups = score_groups(scores, labels)?;
    let positives: u64 = groups.iter().map(|g| g.1).sum();
    let negatives: u64 = groups.iter().map(|g| g.2).sum();
    if positives == 0 || negatives == 0 {
        bail!(Contract, "AUROC needs both classes ({positives} positive, {negatives} negative)");
    }
    // Twice the Mann-Whitney U, kept integral so ties stay exact.
    let mut u2 = 0u128;
    let mut neg_below = negatives;
    for (_, p, n) in groups {
        neg_below -= n;
        u2 += p as u128 * (2 * neg_below as u128 + n as u128);
    }
    Ok(u2 as f64 / (2.0 * positives as f64 * negatives as f64))
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    match x.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (x[0], 0.0),
        _ => {
            let (m, v) = mean_var(x);
            (m, libm::sqrt(v))
        }
    }
}

/// Two-sided Welch test. Returns `(t, p)`.
///
/// With zero variance in both samples, equal means give `(0, 1)` and
/// different means an infinite `t` with `p = 0`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        bail!(Contract, "welch test needs two values per sample, got {} and {}", a.len(), b.len());
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        bail!(Contract, "welch test samples must be finite");
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(ma - mb), 0.0)
        });
    }
    let t = (ma - mb) / libm::sqrt(se2);
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    Ok((t, student_t_two_sided(t, df)))
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// `I_x(a, b)` by the continued fraction, using the symmetry relation where
/// it converges faster.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * libm::log(x) + b * libm::log1p(-x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
