//! Training objectives.
//!
//! All functions take batch-first tensors and return a scalar (rank-0)
//! tensor that stays attached to the autodiff graph. They work in any float
//! dtype; tests run them in both f32 and f64.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added to the textural denominator and to embedding norms before dividing.
pub const CONTRA_EPS: f64 = 1e-8;

/// Which per-pixel objective the segmentation game uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatForm {
    /// Binary cross-entropy on sigmoid probabilities.
    #[default]
    Bce,
    /// Margin loss on the raw (pre-sigmoid) scores.
    Hinge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_text: f64,
    pub lambda_sem: f64,
    pub lambda_rec: f64,
    pub temperature_t: f64,
    #[serde(rename = "num_shallow_layers_N")]
    pub num_shallow_layers: usize,
    #[serde(rename = "num_negatives_M")]
    pub num_negatives: usize,
    pub scat_form: ScatForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_text: 10.0,
            lambda_sem: 1.0,
            lambda_rec: 10.0,
            temperature_t: 0.07,
            num_shallow_layers: 3,
            num_negatives: 8,
            scat_form: ScatForm::Bce,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_adv", self.lambda_adv),
            ("lambda_text", self.lambda_text),
            ("lambda_sem", self.lambda_sem),
            ("lambda_rec", self.lambda_rec),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.temperature_t > 0.0 && self.temperature_t.is_finite()) {
            return Err(Error::config(format!(
                "temperature_t must be > 0, got {}",
                self.temperature_t
            )));
        }
        if self.num_shallow_layers == 0 || self.num_negatives == 0 {
            return Err(Error::config("num_shallow_layers_N and num_negatives_M must be >= 1"));
        }
        Ok(())
    }
}

/// Scalar loss values for one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "scat_S")]
    pub scat_s: f64,
    #[serde(rename = "scat_G")]
    pub scat_g: f64,
    pub contra_text: f64,
    pub contra_sem: f64,
    #[serde(rename = "adv_D")]
    pub adv_d: f64,
    #[serde(rename = "adv_G")]
    pub adv_g: f64,
    pub rec: f64,
    #[serde(rename = "total_G")]
    pub total_g: f64,
    #[serde(rename = "total_DS")]
    pub total_ds: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 9] {
        [
            ("scat_S", self.scat_s),
            ("scat_G", self.scat_g),
            ("contra_text", self.contra_text),
            ("contra_sem", self.contra_sem),
            ("adv_D", self.adv_d),
            ("adv_G", self.adv_g),
            ("rec", self.rec),
            ("total_G", self.total_g),
            ("total_DS", self.total_ds),
        ]
    }

    /// The first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::domain(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn as_float_like(mask: &Tensor, like: &Tensor) -> Result<Tensor> {
    Ok(mask.to_dtype(like.dtype())?)
}

/// Mean binary cross-entropy of probabilities `p` against `target`.
fn bce(p: &Tensor, target: &Tensor) -> Result<Tensor> {
    let one_minus_t = (target.ones_like()? - target)?;
    let one_minus_p = (p.ones_like()? - p)?;
    let ll = ((target * p.log()?)? + (one_minus_t * one_minus_p.log()?)?)?;
    Ok(ll.mean_all()?.neg()?)
}

/// Segmentation side of the SCAT game: label `x̄` with `m` and `x` as all-valid.
pub fn scat_loss_s(s_xbar: &Tensor, s_x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape(s_xbar, mask, "scat_loss_s")?;
    same_shape(s_xbar, s_x, "scat_loss_s")?;
    let m = as_float_like(mask, s_xbar)?;
    let fake = bce(s_xbar, &m)?;
    let real = bce(s_x, &s_x.ones_like()?)?;
    Ok((fake + real)?)
}

/// Generator side of the SCAT game: every pixel of `x̄` should read as valid.
/// With an all-ones target the BCE reduces to `-mean(log S(x̄))`.
pub fn scat_loss_g(s_xbar: &Tensor) -> Result<Tensor> {
    Ok(s_xbar.log()?.mean_all()?.neg()?)
}

/// Hinge form of [`scat_loss_s`] on pre-sigmoid scores.
pub fn scat_hinge_s(s_xbar_logits: &Tensor, s_x_logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape(s_xbar_logits, mask, "scat_hinge_s")?;
    same_shape(s_xbar_logits, s_x_logits, "scat_hinge_s")?;
    let m = as_float_like(mask, s_xbar_logits)?;
    let one_minus_m = (m.ones_like()? - &m)?;
    let valid = (s_xbar_logits.neg()? + 1.0)?.relu()?;
    let hole = (s_xbar_logits + 1.0)?.relu()?;
    let fake = ((m * valid)? + (one_minus_m * hole)?)?.mean_all()?;
    let real = (s_x_logits.neg()? + 1.0)?.relu()?.mean_all()?;
    Ok((fake + real)?)
}

pub fn scat_hinge_g(s_xbar_logits: &Tensor) -> Result<Tensor> {
    Ok(s_xbar_logits.mean_all()?.neg()?)
}

/// Per-sample mean absolute difference, `[B]`.
fn mean_abs_per_sample(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.flatten_from(1)?.mean(1)?)
}

/// Sum over layers of `d(x̄, x) / (d(x̄, x̃) + ε)` with `d` the mean L1
/// distance, averaged over the batch.
pub fn textural_contrastive(
    shallow_xbar: &[Tensor],
    shallow_x: &[Tensor],
    shallow_xtilde: &[Tensor],
) -> Result<Tensor> {
    let n = shallow_xbar.len();
    if n == 0 || shallow_x.len() != n || shallow_xtilde.len() != n {
        return Err(Error::domain(format!(
            "textural loss needs three equal nonempty layer lists, got {}, {}, {}",
            n,
            shallow_x.len(),
            shallow_xtilde.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for ((fb, fx), ft) in shallow_xbar.iter().zip(shallow_x).zip(shallow_xtilde) {
        same_shape(fb, fx, "textural_contrastive")?;
        same_shape(fb, ft, "textural_contrastive")?;
        let pull = mean_abs_per_sample(fb, fx)?;
        let push = (mean_abs_per_sample(fb, ft)? + CONTRA_EPS)?;
        let ratio = (pull / push)?;
        total = Some(match total {
            Some(t) => (t + ratio)?,
            None => ratio,
        });
    }
    Ok(total.expect("n > 0").mean_all()?)
}

/// `v / (‖v‖ + ε)` along the last dimension.
fn l2_normalize_last(v: &Tensor) -> Result<Tensor> {
    let norm = (v.sqr()?.sum_keepdim(D::Minus1)?.sqrt()? + CONTRA_EPS)?;
    Ok(v.broadcast_div(&norm)?)
}

/// InfoNCE over discriminator embeddings.
///
/// `emb_xbar`, `emb_x`: `[B, d]`; `neg_embs`: `[B, M, d]`. The positive pair
/// is `(x̄, x)`, the negatives are `(x̄, x̃_j)`. Embeddings are L2-normalized
/// first, so logits lie in `[-1/t, 1/t]`.
pub fn semantic_contrastive(
    emb_xbar: &Tensor,
    emb_x: &Tensor,
    neg_embs: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::domain(format!("temperature must be > 0, got {temperature}")));
    }
    same_shape(emb_xbar, emb_x, "semantic_contrastive")?;
    let (b, d) = emb_xbar.dims2()?;
    let (nb, _m, nd) = neg_embs.dims3()?;
    if (nb, nd) != (b, d) {
        return Err(Error::domain(format!(
            "negatives {:?} do not match embeddings [{b}, {d}]",
            neg_embs.dims()
        )));
    }
    let anchor = l2_normalize_last(emb_xbar)?;
    let pos = l2_normalize_last(emb_x)?;
    let negs = l2_normalize_last(neg_embs)?;
    let pos_logit = ((&anchor * &pos)?.sum(1)? / temperature)?;
    let neg_logits = (negs.broadcast_mul(&anchor.unsqueeze(1)?)?.sum(2)? / temperature)?;
    let logits = Tensor::cat(&[&pos_logit.unsqueeze(1)?, &neg_logits], 1)?;
    let max = logits.max_keepdim(1)?.detach();
    let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(1)?.log()? + max)?.squeeze(1)?;
    Ok((lse - pos_logit)?.mean_all()?)
}

pub fn total_contrastive(text: &Tensor, sem: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(((text * w.lambda_text)? + (sem * w.lambda_sem)?)?)
}

/// Hinge loss for the discriminator on critic values of any shape.
pub fn adv_hinge_d(critic_real: &Tensor, critic_fake: &Tensor) -> Result<Tensor> {
    let real = (critic_real.neg()? + 1.0)?.relu()?.mean_all()?;
    let fake = (critic_fake + 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

pub fn adv_hinge_g(critic_fake: &Tensor) -> Result<Tensor> {
    Ok(critic_fake.mean_all()?.neg()?)
}

/// Mean absolute error between the raw prediction `x̂` and the ground truth.
pub fn reconstruction(x_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
    same_shape(x_hat, x, "reconstruction")?;
    Ok((x_hat - x)?.abs()?.mean_all()?)
}

pub fn total_generator(
    adv_g: &Tensor,
    scat_g: &Tensor,
    contra: &Tensor,
    rec: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    let adversarial = ((adv_g + scat_g)? * w.lambda_adv)?;
    Ok(((adversarial + contra)? + (rec * w.lambda_rec)?)?)
}

pub fn total_ds(adv_d: &Tensor, scat_s: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(((adv_d + scat_s)? * w.lambda_adv)?)
}

/// Reads a rank-0 loss tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
