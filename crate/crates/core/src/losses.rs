//! Supervision losses on class-logit volumes and the total objective.
//!
//! Every loss has an internal form that also accumulates `∂loss/∂logits`
//! into a caller-provided buffer laid out like the logit volume.

use crate::error::{Error, Result};
use crate::grid::{LabelGrid, SemanticVolume};
use crate::harmonics::{orth_loss, ShProjection};
use crate::predict::fuse;
use crate::scene::AnchorSet;
use serde::{Deserialize, Serialize};

/// Label of voxels excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;
/// Probability floor inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// Adds `J_softmaxᵀ g` (the logit gradient given `g = ∂L/∂p`) to `out`.
#[inline]
fn softmax_vjp_add(p: &[f64], g: &[f64], out: &mut [f64]) {
    let pg: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, pk), gk) in out.iter_mut().zip(p).zip(g) {
        *o += pk * (gk - pg);
    }
}

fn check_labels(pred: &SemanticVolume, gt: &LabelGrid, what: &str, ignore: u8) -> Result<()> {
    pred.check_dims(gt, what)?;
    let nc = pred.channels();
    if let Some(bad) = gt.as_slice().iter().find(|&&l| l != ignore && l as usize >= nc) {
        return Err(Error::invalid(format!(
            "{what}: label {bad} out of range for {nc} classes"
        )));
    }
    Ok(())
}

fn all_probs(pred: &SemanticVolume) -> Vec<f64> {
    let nc = pred.channels();
    let mut probs = vec![0.0; pred.as_slice().len()];
    for (p, l) in probs.chunks_exact_mut(nc).zip(pred.as_slice().chunks_exact(nc)) {
        softmax_into(l, p);
    }
    probs
}

/// Mean softmax cross-entropy over non-ignored voxels (0 if none).
pub fn ce_loss(pred: &SemanticVolume, gt: &LabelGrid, ignore: u8) -> Result<f64> {
    ce_accumulate(pred, gt, ignore, None)
}

pub(crate) fn ce_accumulate(
    pred: &SemanticVolume,
    gt: &LabelGrid,
    ignore: u8,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    check_labels(pred, gt, "ce_loss", ignore)?;
    let nc = pred.channels();
    let valid = gt.as_slice().iter().filter(|&&l| l != ignore).count();
    if valid == 0 {
        return Ok(0.0);
    }
    let inv = 1.0 / valid as f64;
    let mut total = 0.0;
    let mut p = vec![0.0; nc];
    let mut grad = grad;
    for (v, logits) in pred.as_slice().chunks_exact(nc).enumerate() {
        let label = gt.label(v);
        if label == ignore {
            continue;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[label as usize];
        if let Some(g) = grad.as_deref_mut() {
            softmax_into(logits, &mut p);
            let out = &mut g[v * nc..(v + 1) * nc];
            for (c, (o, pc)) in out.iter_mut().zip(&p).enumerate() {
                let target = if c == label as usize { 1.0 } else { 0.0 };
                *o += (pc - target) * inv;
            }
        }
    }
    Ok(total * inv)
}

/// Lovász-softmax loss on logits, averaged over classes present in the
/// ground truth.
pub fn lovasz_loss(pred: &SemanticVolume, gt: &LabelGrid, ignore: u8) -> Result<f64> {
    lovasz_accumulate(pred, gt, ignore, None)
}

/// Lovász-softmax on explicit per-voxel class probabilities (channel
/// fastest), e.g. hard one-hot predictions.
pub fn lovasz_softmax_probs(probs: &[f64], channels: usize, gt: &[u8], ignore: u8) -> Result<f64> {
    if channels == 0 || probs.len() != gt.len() * channels {
        return Err(Error::invalid(format!(
            "{} probabilities for {} voxels x {channels} classes",
            probs.len(),
            gt.len()
        )));
    }
    Ok(lovasz_core(probs, channels, gt, ignore, None))
}

pub(crate) fn lovasz_accumulate(
    pred: &SemanticVolume,
    gt: &LabelGrid,
    ignore: u8,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    check_labels(pred, gt, "lovasz_loss", ignore)?;
    let nc = pred.channels();
    let probs = all_probs(pred);
    match grad {
        None => Ok(lovasz_core(&probs, nc, gt.as_slice(), ignore, None)),
        Some(g) => {
            let mut dprobs = vec![0.0; probs.len()];
            let loss = lovasz_core(&probs, nc, gt.as_slice(), ignore, Some(&mut dprobs));
            for ((p, dp), out) in probs
                .chunks_exact(nc)
                .zip(dprobs.chunks_exact(nc))
                .zip(g.chunks_exact_mut(nc))
            {
                softmax_vjp_add(p, dp, out);
            }
            Ok(loss)
        }
    }
}

/// Core of the Lovász extension of the Jaccard loss. With `dprobs`, adds
/// the fixed-permutation subgradient w.r.t. the probabilities.
fn lovasz_core(probs: &[f64], nc: usize, gt: &[u8], ignore: u8, mut dprobs: Option<&mut [f64]>) -> f64 {
    let valid: Vec<usize> = (0..gt.len()).filter(|&v| gt[v] != ignore).collect();
    let present: Vec<usize> = (0..nc)
        .filter(|&c| valid.iter().any(|&v| gt[v] as usize == c))
        .collect();
    if present.is_empty() {
        return 0.0;
    }
    let scale = 1.0 / present.len() as f64;
    let mut total = 0.0;
    let mut order: Vec<(f64, usize, bool)> = Vec::with_capacity(valid.len());
    for &c in &present {
        order.clear();
        let mut gts = 0.0;
        for &v in &valid {
            let fg = gt[v] as usize == c;
            gts += fg as u8 as f64;
            let p = probs[v * nc + c];
            let err = if fg { 1.0 - p } else { p };
            order.push((err, v, fg));
        }
        // Descending error; equal errors keep ascending voxel order.
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let (mut cum_fg, mut cum_bg, mut prev) = (0.0, 0.0, 0.0);
        let mut class_loss = 0.0;
        for &(err, v, fg) in &order {
            if fg {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
            let weight = jaccard - prev;
            prev = jaccard;
            class_loss += err * weight;
            if let Some(dp) = dprobs.as_deref_mut() {
                let derr = if fg { -1.0 } else { 1.0 };
                dp[v * nc + c] += scale * weight * derr;
            }
        }
        total += class_loss;
    }
    total * scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalVariant {
    /// One precision/recall/specificity triple per class present in the
    /// ground truth, averaged.
    Semantic,
    /// Classes collapsed to occupied versus empty (channel 0).
    Geometric,
}

/// Precision, recall and specificity of soft predictions for one class;
/// `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalTerms {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
}

/// Statistics of soft mass `p` against binary targets `t`.
struct SoftCounts {
    inter: f64,
    mass: f64,
    target: f64,
    neg: f64,
    neg_hit: f64,
}

impl SoftCounts {
    fn from_iter(it: impl Iterator<Item = (f64, bool)>) -> Self {
        let mut s = SoftCounts {
            inter: 0.0,
            mass: 0.0,
            target: 0.0,
            neg: 0.0,
            neg_hit: 0.0,
        };
        for (p, t) in it {
            s.mass += p;
            if t {
                s.inter += p;
                s.target += 1.0;
            } else {
                s.neg += 1.0;
                s.neg_hit += 1.0 - p;
            }
        }
        s
    }

    fn terms(&self) -> ScalTerms {
        ScalTerms {
            precision: (self.mass > 0.0).then(|| self.inter / self.mass),
            recall: (self.target > 0.0).then(|| self.inter / self.target),
            specificity: (self.neg > 0.0).then(|| self.neg_hit / self.neg),
        }
    }

    /// `-(log P + log R + log S)` and the coefficients `(a, b)` such that
    /// `∂loss/∂p = a + b·[t]` for a voxel with target flag `t`.
    fn loss_and_slope(&self) -> (f64, f64, f64) {
        let (mut loss, mut a, mut b) = (0.0, 0.0, 0.0);
        if self.mass > 0.0 {
            let prec = self.inter / self.mass;
            let (l, dl) = neg_log(prec);
            loss += l;
            // ∂P/∂p = t/mass - inter/mass²
            b += dl / self.mass;
            a -= dl * self.inter / (self.mass * self.mass);
        }
        if self.target > 0.0 {
            let (l, dl) = neg_log(self.inter / self.target);
            loss += l;
            b += dl / self.target;
        }
        if self.neg > 0.0 {
            let (l, dl) = neg_log(self.neg_hit / self.neg);
            loss += l;
            // ∂S/∂p = -(1-t)/neg
            a -= dl / self.neg;
            b += dl / self.neg;
        }
        (loss, a, b)
    }
}

/// `-ln(max(x, floor))` and its derivative (0 below the floor).
#[inline]
fn neg_log(x: f64) -> (f64, f64) {
    if x > PROB_FLOOR {
        (-x.ln(), -1.0 / x)
    } else {
        (-PROB_FLOOR.ln(), 0.0)
    }
}

/// Per-class soft precision/recall/specificity over non-ignored voxels.
pub fn scal_terms(pred: &SemanticVolume, gt: &LabelGrid, class: usize, ignore: u8) -> Result<ScalTerms> {
    check_labels(pred, gt, "scal_terms", ignore)?;
    let nc = pred.channels();
    if class >= nc {
        return Err(Error::invalid(format!("class {class} out of range for {nc} classes")));
    }
    let probs = all_probs(pred);
    let counts = SoftCounts::from_iter(
        (0..gt.num_voxels())
            .filter(|&v| gt.label(v) != ignore)
            .map(|v| (probs[v * nc + class], gt.label(v) as usize == class)),
    );
    Ok(counts.terms())
}

/// Scene-class affinity loss.
pub fn scal_loss(pred: &SemanticVolume, gt: &LabelGrid, variant: ScalVariant, ignore: u8) -> Result<f64> {
    scal_accumulate(pred, gt, variant, ignore, None)
}

pub(crate) fn scal_accumulate(
    pred: &SemanticVolume,
    gt: &LabelGrid,
    variant: ScalVariant,
    ignore: u8,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    check_labels(pred, gt, "scal_loss", ignore)?;
    let nc = pred.channels();
    let probs = all_probs(pred);
    let valid: Vec<usize> = (0..gt.num_voxels()).filter(|&v| gt.label(v) != ignore).collect();
    let mut dprobs = grad.as_ref().map(|_| vec![0.0; probs.len()]);

    let loss = match variant {
        ScalVariant::Semantic => {
            let present: Vec<usize> = (0..nc)
                .filter(|&c| valid.iter().any(|&v| gt.label(v) as usize == c))
                .collect();
            if present.is_empty() {
                return Ok(0.0);
            }
            let scale = 1.0 / present.len() as f64;
            let mut total = 0.0;
            for &c in &present {
                let counts =
                    SoftCounts::from_iter(valid.iter().map(|&v| (probs[v * nc + c], gt.label(v) as usize == c)));
                let (l, a, b) = counts.loss_and_slope();
                total += l;
                if let Some(dp) = dprobs.as_deref_mut() {
                    for &v in &valid {
                        let t = gt.label(v) as usize == c;
                        dp[v * nc + c] += scale * (a + if t { b } else { 0.0 });
                    }
                }
            }
            total * scale
        }
        ScalVariant::Geometric => {
            if valid.is_empty() {
                return Ok(0.0);
            }
            let counts = SoftCounts::from_iter(valid.iter().map(|&v| (1.0 - probs[v * nc], gt.label(v) != 0)));
            let (l, a, b) = counts.loss_and_slope();
            if let Some(dp) = dprobs.as_deref_mut() {
                for &v in &valid {
                    let t = gt.label(v) != 0;
                    // p_occ = 1 - p_0
                    dp[v * nc] -= a + if t { b } else { 0.0 };
                }
            }
            l
        }
    };

    if let (Some(g), Some(dp)) = (grad, dprobs) {
        for &v in &valid {
            let r = v * nc..(v + 1) * nc;
            softmax_vjp_add(&probs[r.clone()], &dp[r.clone()], &mut g[r]);
        }
    }
    Ok(loss)
}

/// Mean over anchors of the symmetric KL divergence between the two
/// branches' class distributions.
pub fn align_loss(v_voxel: &SemanticVolume, v_gauss: &SemanticVolume, anchors: &AnchorSet) -> Result<f64> {
    align_accumulate(v_voxel, v_gauss, &anchors.indices, None, None)
}

pub(crate) fn align_accumulate(
    v_voxel: &SemanticVolume,
    v_gauss: &SemanticVolume,
    anchors: &[usize],
    mut grad_voxel: Option<&mut [f64]>,
    mut grad_gauss: Option<&mut [f64]>,
) -> Result<f64> {
    if !v_voxel.same_shape(v_gauss) {
        return Err(Error::invalid("align_loss: branch volumes differ in shape"));
    }
    let n = v_voxel.num_voxels();
    if let Some(&bad) = anchors.iter().find(|&&a| a >= n) {
        return Err(Error::invalid(format!("anchor index {bad} outside grid of {n} voxels")));
    }
    if anchors.is_empty() {
        return Ok(0.0);
    }
    let nc = v_voxel.channels();
    let scale = 1.0 / anchors.len() as f64;
    let (mut p, mut q) = (vec![0.0; nc], vec![0.0; nc]);
    let (mut gp, mut gq) = (vec![0.0; nc], vec![0.0; nc]);
    let mut total = 0.0;
    for &a in anchors {
        softmax_into(v_voxel.voxel(a), &mut p);
        softmax_into(v_gauss.voxel(a), &mut q);
        let mut kl = 0.0;
        for c in 0..nc {
            let (lp, lq) = (p[c].max(PROB_FLOOR).ln(), q[c].max(PROB_FLOOR).ln());
            let diff = p[c] - q[c];
            kl += diff * (lp - lq);
            let dlp = if p[c] > PROB_FLOOR { 1.0 / p[c] } else { 0.0 };
            let dlq = if q[c] > PROB_FLOOR { 1.0 / q[c] } else { 0.0 };
            gp[c] = scale * ((lp - lq) + diff * dlp);
            gq[c] = scale * (-(lp - lq) - diff * dlq);
        }
        total += kl;
        if let Some(g) = grad_voxel.as_deref_mut() {
            softmax_vjp_add(&p, &gp, &mut g[a * nc..(a + 1) * nc]);
        }
        if let Some(g) = grad_gauss.as_deref_mut() {
            softmax_vjp_add(&q, &gq, &mut g[a * nc..(a + 1) * nc]);
        }
    }
    Ok(total * scale)
}

/// Per-term values of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub lovasz: f64,
    /// Semantic plus geometric affinity terms.
    pub scal: f64,
    /// Already weighted by the projection's λ.
    pub orth: f64,
    pub align: f64,
}

impl LossBreakdown {
    pub const TERMS: [&'static str; 5] = ["ce", "lovasz", "scal", "orth", "align"];

    /// Unweighted sum of all terms.
    pub fn total(&self) -> f64 {
        self.ce + self.lovasz + self.scal + self.orth + self.align
    }

    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("ce", self.ce),
            ("lovasz", self.lovasz),
            ("scal", self.scal),
            ("orth", self.orth),
            ("align", self.align),
        ]
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite())
    }
}

/// Evaluates the full objective: the three supervision losses on the fused
/// prediction, the orthogonality penalty and the anchor alignment.
pub fn total_loss(
    v_voxel: &SemanticVolume,
    v_gauss: &SemanticVolume,
    gt: &LabelGrid,
    anchors: &AnchorSet,
    projection: &ShProjection,
    ignore: u8,
) -> Result<LossBreakdown> {
    let fused = fuse(v_voxel, v_gauss)?;
    Ok(LossBreakdown {
        ce: ce_loss(&fused, gt, ignore)?,
        lovasz: lovasz_loss(&fused, gt, ignore)?,
        scal: scal_loss(&fused, gt, ScalVariant::Semantic, ignore)?
            + scal_loss(&fused, gt, ScalVariant::Geometric, ignore)?,
        orth: orth_loss(projection),
        align: align_loss(v_voxel, v_gauss, anchors)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: [usize; 3]) -> GridSpec {
        GridSpec::new(dims, 1.0, [0.0; 3]).unwrap()
    }

    fn random_case(dims: [usize; 3], nc: usize, seed: u64) -> (SemanticVolume, LabelGrid) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = grid(dims);
        let n = g.num_voxels();
        let logits = (0..n * nc).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..nc as u8)).collect();
        (
            SemanticVolume::from_vec(g, nc, logits).unwrap(),
            LabelGrid::labels(g, labels).unwrap(),
        )
    }

    fn one_hot_logits(labels: &LabelGrid, nc: usize, margin: f64) -> SemanticVolume {
        let mut v = SemanticVolume::zeros(*labels.spec(), nc);
        for i in 0..labels.num_voxels() {
            v.voxel_mut(i)[labels.label(i) as usize] = margin;
        }
        v
    }

    #[test]
    fn ce_cases() {
        let (_, gt) = random_case([3, 3, 1], 4, 1);
        assert!(ce_loss(&one_hot_logits(&gt, 4, 60.0), &gt, IGNORE_LABEL).unwrap() < 1e-25);
        let uniform = SemanticVolume::zeros(*gt.spec(), 4);
        assert!((ce_loss(&uniform, &gt, IGNORE_LABEL).unwrap() - 4f64.ln()).abs() < 1e-15);
        let ignored = LabelGrid::labels(*gt.spec(), vec![IGNORE_LABEL; 9]).unwrap();
        assert_eq!(ce_loss(&uniform, &ignored, IGNORE_LABEL).unwrap(), 0.0);
        let bad = LabelGrid::labels(*gt.spec(), vec![7; 9]).unwrap();
        assert!(ce_loss(&uniform, &bad, IGNORE_LABEL).is_err());
    }

    #[test]
    fn ce_against_log_sum_exp() {
        let (pred, mut gt) = random_case([3, 3, 1], 3, 2);
        gt.as_mut_slice()[4] = IGNORE_LABEL;
        let mut total = 0.0;
        let mut count = 0.0;
        for v in 0..9 {
            if gt.label(v) == IGNORE_LABEL {
                continue;
            }
            let l = pred.voxel(v);
            let lse = l.iter().map(|x| x.exp()).sum::<f64>().ln();
            total += lse - l[gt.label(v) as usize];
            count += 1.0;
        }
        assert!((ce_loss(&pred, &gt, IGNORE_LABEL).unwrap() - total / count).abs() < 1e-14);
    }

    #[test]
    fn lovasz_perfect_is_zero() {
        let (_, gt) = random_case([4, 3, 2], 3, 3);
        let mut probs = vec![0.0; gt.num_voxels() * 3];
        for v in 0..gt.num_voxels() {
            probs[v * 3 + gt.label(v) as usize] = 1.0;
        }
        assert_eq!(
            lovasz_softmax_probs(&probs, 3, gt.as_slice(), IGNORE_LABEL).unwrap(),
            0.0
        );
        let l = lovasz_loss(&one_hot_logits(&gt, 3, 40.0), &gt, IGNORE_LABEL).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn lovasz_against_direct_extension() {
        // Oracle: Lovász extension as Σ_i e_(i) (J(S_i) - J(S_{i-1})) with the
        // Jaccard loss recomputed from explicit sets for each prefix.
        let (pred, gt) = random_case([3, 2, 2], 3, 4);
        let nc = 3;
        let n = gt.num_voxels();
        let probs: Vec<Vec<f64>> = (0..n).map(|v| softmax(pred.voxel(v))).collect();
        let mut total = 0.0;
        let mut present = 0.0;
        for c in 0..nc {
            let fg: Vec<bool> = (0..n).map(|v| gt.label(v) as usize == c).collect();
            if !fg.iter().any(|&f| f) {
                continue;
            }
            present += 1.0;
            let err: Vec<f64> = (0..n)
                .map(|v| if fg[v] { 1.0 - probs[v][c] } else { probs[v][c] })
                .collect();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| err[b].total_cmp(&err[a]));
            let jaccard_loss = |set: &[usize]| {
                // Mispredicted set `set`: predicted fg = fg xor in-set.
                let pred_fg: Vec<bool> = (0..n).map(|v| fg[v] != set.contains(&v)).collect();
                let inter = (0..n).filter(|&v| fg[v] && pred_fg[v]).count() as f64;
                let union = (0..n).filter(|&v| fg[v] || pred_fg[v]).count() as f64;
                1.0 - inter / union
            };
            let mut prev = 0.0;
            for i in 0..n {
                let j = jaccard_loss(&idx[..=i]);
                total += err[idx[i]] * (j - prev);
                prev = j;
            }
        }
        let want = total / present;
        assert!((lovasz_loss(&pred, &gt, IGNORE_LABEL).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn scal_cases() {
        let (_, gt) = random_case([3, 3, 2], 3, 5);
        let perfect = one_hot_logits(&gt, 3, 60.0);
        for variant in [ScalVariant::Semantic, ScalVariant::Geometric] {
            assert!(scal_loss(&perfect, &gt, variant, IGNORE_LABEL).unwrap() < 1e-20);
        }
        // Uniform mass: precision equals prevalence.
        let uniform = SemanticVolume::zeros(*gt.spec(), 3);
        for c in 0..3 {
            let t = scal_terms(&uniform, &gt, c, IGNORE_LABEL).unwrap();
            let prevalence = gt.as_slice().iter().filter(|&&l| l as usize == c).count() as f64 / 18.0;
            assert!((t.precision.unwrap() - prevalence).abs() < 1e-15);
        }
    }

    #[test]
    fn scal_against_direct_counts() {
        let g = grid([2, 2, 1]);
        let pred = SemanticVolume::from_vec(g, 2, vec![0.3, -0.2, 1.1, 0.4, -0.5, 0.9, 0.0, 0.2]).unwrap();
        let gt = LabelGrid::labels(g, vec![0, 1, 1, 0]).unwrap();
        let p1: Vec<f64> = (0..4).map(|v| softmax(pred.voxel(v))[1]).collect();
        let t1 = [false, true, true, false];
        let class = |p: &[f64], t: &[bool]| {
            let inter: f64 = (0..4).filter(|&v| t[v]).map(|v| p[v]).sum();
            let mass: f64 = p.iter().sum();
            let pos = t.iter().filter(|&&x| x).count() as f64;
            let neg_hit: f64 = (0..4).filter(|&v| !t[v]).map(|v| 1.0 - p[v]).sum();
            -((inter / mass).ln() + (inter / pos).ln() + (neg_hit / (4.0 - pos)).ln())
        };
        let p0: Vec<f64> = p1.iter().map(|p| 1.0 - p).collect();
        let t0: Vec<bool> = t1.iter().map(|t| !t).collect();
        let sem = 0.5 * (class(&p0, &t0) + class(&p1, &t1));
        let got = scal_loss(&pred, &gt, ScalVariant::Semantic, IGNORE_LABEL).unwrap();
        assert!((got - sem).abs() < 1e-14);
        // Two classes: occupancy is class 1.
        let geo = scal_loss(&pred, &gt, ScalVariant::Geometric, IGNORE_LABEL).unwrap();
        assert!((geo - class(&p1, &t1)).abs() < 1e-14);
    }

    #[test]
    fn align_cases() {
        let g = grid([1, 1, 2]);
        let a = SemanticVolume::from_vec(g, 2, vec![0.0, 0.0, 1.0, 2.0]).unwrap();
        let b = SemanticVolume::from_vec(g, 2, vec![9f64.ln(), 0.0, 3.0, -1.0]).unwrap();
        let anchors = |idx: Vec<usize>| AnchorSet {
            positions: idx.iter().map(|&i| g.unravel(i)).collect(),
            features: vec![],
            scores: vec![0.0; idx.len()],
            indices: idx,
            channels: 0,
        };
        assert_eq!(align_loss(&a, &a, &anchors(vec![0, 1])).unwrap(), 0.0);
        // p = (0.5, 0.5), q = (0.9, 0.1): Σ (p-q)(ln p - ln q) = 0.4 ln 9
        let want = 0.4 * 9f64.ln();
        let got = align_loss(&a, &b, &anchors(vec![0])).unwrap();
        assert!((got - want).abs() < 1e-14);
        assert!((got - 0.8789).abs() < 1e-4);
        // Shift invariance and symmetry.
        let shifted = SemanticVolume::from_vec(g, 2, a.as_slice().iter().map(|x| x + 3.5).collect()).unwrap();
        assert!((align_loss(&shifted, &b, &anchors(vec![0])).unwrap() - got).abs() < 1e-14);
        assert_eq!(
            align_loss(&b, &a, &anchors(vec![0, 1])).unwrap(),
            align_loss(&a, &b, &anchors(vec![0, 1])).unwrap()
        );
        assert!(align_loss(&a, &b, &anchors(vec![2])).is_err());
    }

    fn fd_check(f: impl Fn(&SemanticVolume) -> f64, pred: &SemanticVolume, analytic: &[f64], tol: f64) {
        let h = 1e-6;
        for i in 0..analytic.len() {
            let mut p = pred.clone();
            p.as_mut_slice()[i] += h;
            let mut m = pred.clone();
            m.as_mut_slice()[i] -= h;
            let numeric = (f(&p) - f(&m)) / (2.0 * h);
            let denom = numeric.abs() + analytic[i].abs();
            if denom > 1e-8 {
                let rel = (numeric - analytic[i]).abs() / denom;
                assert!(rel < tol, "coord {i}: numeric {numeric} analytic {}", analytic[i]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (pred, mut gt) = random_case([3, 2, 2], 3, 9);
        gt.as_mut_slice()[5] = IGNORE_LABEL;
        let n = pred.as_slice().len();

        let mut g = vec![0.0; n];
        ce_accumulate(&pred, &gt, IGNORE_LABEL, Some(&mut g)).unwrap();
        fd_check(|p| ce_loss(p, &gt, IGNORE_LABEL).unwrap(), &pred, &g, 1e-4);

        let mut g = vec![0.0; n];
        lovasz_accumulate(&pred, &gt, IGNORE_LABEL, Some(&mut g)).unwrap();
        fd_check(|p| lovasz_loss(p, &gt, IGNORE_LABEL).unwrap(), &pred, &g, 1e-4);

        for variant in [ScalVariant::Semantic, ScalVariant::Geometric] {
            let mut g = vec![0.0; n];
            scal_accumulate(&pred, &gt, variant, IGNORE_LABEL, Some(&mut g)).unwrap();
            fd_check(|p| scal_loss(p, &gt, variant, IGNORE_LABEL).unwrap(), &pred, &g, 1e-4);
        }

        let (other, _) = random_case([3, 2, 2], 3, 10);
        let anchors = vec![0, 3, 7, 11];
        let (mut ga, mut gb) = (vec![0.0; n], vec![0.0; n]);
        align_accumulate(&pred, &other, &anchors, Some(&mut ga), Some(&mut gb)).unwrap();
        fd_check(
            |p| align_accumulate(p, &other, &anchors, None, None).unwrap(),
            &pred,
            &ga,
            1e-4,
        );
        fd_check(
            |p| align_accumulate(&pred, p, &anchors, None, None).unwrap(),
            &other,
            &gb,
            1e-4,
        );
    }

    #[test]
    fn breakdown_sum_and_divergence() {
        let b = LossBreakdown::default();
        assert_eq!(b.total(), 0.0);
        let b = LossBreakdown {
            orth: 3e-6,
            ..Default::default()
        };
        assert_eq!(b.total(), 3e-6);
        let b = LossBreakdown {
            scal: f64::NAN,
            ..Default::default()
        };
        assert_eq!(b.non_finite().map(|t| t.0), Some("scal"));
    }
}
