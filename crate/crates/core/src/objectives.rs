//! Loss terms: classification, few-shot, consistency-discrepancy triplet,
//! global-crop consistency and global-adversarial KL.

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// Weight of the soft global-target term in the consistency loss.
    pub lambda: f64,
    /// Triplet margin.
    pub delta: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 0.2,
            delta: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.delta <= 0.0 {
            return Err(invalid(format!("delta {} must be positive", self.delta)));
        }
        Ok(())
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(invalid(format!("label {l} outside [0, {classes})")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

fn rows_cols(logits: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return Err(invalid(format!("{op}: logits must be rank 2, got {:?}", logits.shape())));
    }
    Ok((logits.shape()[0], logits.shape()[1]))
}

/// Mean over rows of `-log softmax(logits)[y]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = rows_cols(logits, "cross_entropy")?;
    if labels.len() != n {
        return Err(invalid(format!("cross_entropy: {} labels for {n} rows", labels.len())));
    }
    let mask = one_hot(labels, c)?;
    logits.log_softmax()?.mul(&mask)?.sum()?.scale(-1.0 / n as f64)
}

/// Mean over rows of `-sum_c q_c log softmax(logits)_c` with a constant target `q`.
pub fn soft_cross_entropy(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (n, _) = rows_cols(logits, "soft_cross_entropy")?;
    if logits.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "soft_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    logits
        .log_softmax()?
        .mul(&target.detach())?
        .sum()?
        .scale(-1.0 / n as f64)
}

/// Detached softmax probabilities.
pub fn softmax_const(logits: &Tensor) -> Result<Tensor> {
    Ok(logits.detach().log_softmax()?.exp()?)
}

/// `CE(p_g, y) + sum_i CE(p_i, y)`.
pub fn loss_cls(p_g: &Tensor, p_crops: &[Tensor], y: &[usize], k: usize) -> Result<Tensor> {
    if p_crops.len() != k {
        return Err(invalid(format!("loss_cls: {} crop logits, expected {k}", p_crops.len())));
    }
    p_crops
        .iter()
        .try_fold(cross_entropy(p_g, y)?, |acc, p| acc.add(&cross_entropy(p, y)?))
}

/// `CE(p_g_fsl, y_fsl) + CE(p_adv_fsl, y_fsl)`.
pub fn loss_fsl(p_g_fsl: &Tensor, p_adv_fsl: &Tensor, y_fsl: &[usize]) -> Result<Tensor> {
    if p_g_fsl.shape() != p_adv_fsl.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_fsl",
            lhs: p_g_fsl.shape().to_vec(),
            rhs: p_adv_fsl.shape().to_vec(),
        });
    }
    cross_entropy(p_g_fsl, y_fsl)?.add(&cross_entropy(p_adv_fsl, y_fsl)?)
}

/// Batch mean of `max(0, |a - p|^2 - |a - n|^2 + delta)`.
pub fn loss_cdto(anchor: &Tensor, positive: &Tensor, negative: &Tensor, delta: f64) -> Result<Tensor> {
    let (b, _) = rows_cols(anchor, "loss_cdto")?;
    for t in [positive, negative] {
        if t.shape() != anchor.shape() {
            return Err(Error::ShapeMismatch {
                op: "loss_cdto",
                lhs: anchor.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    let dp = anchor.sub(positive)?;
    let dn = anchor.sub(negative)?;
    let dp2 = dp.mul(&dp)?.sum_axis(1)?;
    let dn2 = dn.mul(&dn)?.sum_axis(1)?;
    dp2.sub(&dn2)?
        .affine(1.0, delta)?
        .relu()?
        .sum()?
        .scale(1.0 / b as f64)
}

/// Elementwise mean of the crop embeddings: the crop prototype.
pub fn crop_prototype(crops: &[Tensor]) -> Result<Tensor> {
    let first = crops.first().ok_or_else(|| invalid("crop_prototype: no crops"))?;
    crops[1..]
        .iter()
        .try_fold(first.clone(), |acc, c| acc.add(c))?
        .scale(1.0 / crops.len() as f64)
}

/// `sum_i [lambda * CE_soft(p_i, softmax(p_g)) + (1 - lambda) * CE(p_i_fsl, y_fsl)]`
/// with the global prediction detached.
pub fn loss_con(
    p_crops: &[Tensor],
    p_g: &Tensor,
    p_crops_fsl: &[Tensor],
    y_fsl: &[usize],
    lambda: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("loss_con: lambda {lambda} outside [0, 1]")));
    }
    if p_crops.len() != p_crops_fsl.len() || p_crops.is_empty() {
        return Err(invalid(format!(
            "loss_con: {} crop logits vs {} crop few-shot logits",
            p_crops.len(),
            p_crops_fsl.len()
        )));
    }
    let target = softmax_const(p_g)?;
    let mut total = Tensor::scalar(0.0);
    for (p_i, p_i_fsl) in p_crops.iter().zip(p_crops_fsl) {
        let soft = soft_cross_entropy(p_i, &target)?.scale(lambda)?;
        let hard = cross_entropy(p_i_fsl, y_fsl)?.scale(1.0 - lambda)?;
        total = total.add(&soft.add(&hard)?)?;
    }
    Ok(total)
}

/// Row mean of `KL(softmax(p_g_fsl) || softmax(p_adv_fsl))` with the global
/// side detached.
pub fn loss_adv(p_adv_fsl: &Tensor, p_g_fsl: &Tensor) -> Result<Tensor> {
    let (n, _) = rows_cols(p_adv_fsl, "loss_adv")?;
    if p_adv_fsl.shape() != p_g_fsl.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_adv",
            lhs: p_adv_fsl.shape().to_vec(),
            rhs: p_g_fsl.shape().to_vec(),
        });
    }
    let log_q = p_g_fsl.detach().log_softmax()?;
    let q = log_q.exp()?;
    let neg_entropy: f64 = q.data().iter().zip(log_q.data()).map(|(p, l)| p * l).sum();
    let cross = p_adv_fsl.log_softmax()?.mul(&q)?.sum()?;
    cross.neg()?.affine(1.0 / n as f64, neg_entropy / n as f64)
}

/// The individual terms of one episode's objective. Absent terms are `None`.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub cls: Tensor,
    pub fsl: Tensor,
    pub cdto: Option<Tensor>,
    pub con: Option<Tensor>,
    pub adv: Option<Tensor>,
}

/// Scalar values of each term, zero where absent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub fsl: f64,
    pub cdto: f64,
    pub con: f64,
    pub adv: f64,
}

impl LossTerms {
    pub fn values(&self, total: &Tensor) -> LossValues {
        let v = |t: &Option<Tensor>| t.as_ref().map_or(0.0, Tensor::item);
        LossValues {
            total: total.item(),
            cls: self.cls.item(),
            fsl: self.fsl.item(),
            cdto: v(&self.cdto),
            con: v(&self.con),
            adv: v(&self.adv),
        }
    }
}

/// Unweighted sum of all present terms.
pub fn total_loss(terms: &LossTerms) -> Result<Tensor> {
    let mut total = terms.cls.add(&terms.fsl)?;
    for t in [&terms.cdto, &terms.con, &terms.adv].into_iter().flatten() {
        total = total.add(t)?;
    }
    Ok(total)
}
