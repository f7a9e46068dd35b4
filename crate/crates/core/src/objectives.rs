//! Losses on descriptors with analytic gradients.
//!
//! * ratio term: `exp(1 - ‖x_i‖/‖x_j‖)`, small when `x_i` carries the larger
//!   norm;
//! * CosFace on cosine logits with an additive margin on the target class;
//! * triplet on cosine distance;
//! * the combined objective `ratio + λ · mean(CosFace(x_i), CosFace(x_j))`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::descriptor::norm;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub cosface_scale: f64,
    pub cosface_margin: f64,
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            cosface_scale: 16.0,
            cosface_margin: 0.35,
            triplet_margin: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be ≥ 0"));
        }
        if !(self.cosface_scale > 0.0) {
            return Err(Error::config("cosface_scale", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.cosface_margin) {
            return Err(Error::config("cosface_margin", "must lie in [0, 1)"));
        }
        if !(self.triplet_margin > 0.0) {
            return Err(Error::config("triplet_margin", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    pub grad_i: Vec<f64>,
    pub grad_j: Vec<f64>,
}

pub fn ratio_loss(x_i: &[f64], x_j: &[f64]) -> Result<PairLoss> {
    let ni = norm(x_i);
    let nj = norm(x_j);
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::ZeroNormDenominator);
    }
    let r = ni / nj;
    let value = (1.0 - r).exp();
    let gi = -value / (ni * nj);
    let gj = value * r / (nj * nj);
    Ok(PairLoss {
        value,
        grad_i: x_i.iter().map(|v| gi * v).collect(),
        grad_j: x_j.iter().map(|v| gj * v).collect(),
    })
}

/// Cosine similarity and its gradients with respect to both inputs.
pub(crate) fn cosine_with_grads(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormDenominator);
    }
    let cos = crate::descriptor::dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - cos * ai / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| ai / (na * nb) - cos * bi / (nb * nb))
        .collect();
    Ok((cos, ga, gb))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosFaceLoss {
    pub value: f64,
    pub grad_x: Vec<f64>,
    pub grad_proxies: Array2<f64>,
}

pub fn cosface_loss(
    x: &[f64],
    target: usize,
    proxies: ArrayView2<f64>,
    scale: f64,
    margin: f64,
) -> Result<CosFaceLoss> {
    let classes = proxies.nrows();
    if target >= classes {
        return Err(Error::config(
            "target_class",
            format!("class {target} out of range for {classes} proxies"),
        ));
    }
    if proxies.ncols() != x.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("proxies with {} columns", x.len()),
            found: format!("{}", proxies.ncols()),
        });
    }
    let nx = norm(x);
    if nx == 0.0 {
        return Err(Error::ZeroNormDenominator);
    }
    let mut cosines = Vec::with_capacity(classes);
    let mut proxy_norms = Vec::with_capacity(classes);
    for row in proxies.rows() {
        let np = row.dot(&row).sqrt();
        if np == 0.0 {
            return Err(Error::ZeroNormDenominator);
        }
        let d: f64 = row.iter().zip(x).map(|(p, v)| p * v).sum();
        cosines.push(d / (nx * np));
        proxy_norms.push(np);
    }
    let logits: Vec<f64> = cosines
        .iter()
        .enumerate()
        .map(|(c, &cos)| {
            let m = if c == target { margin } else { 0.0 };
            scale * (cos - m)
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + sum_exp.ln();
    let value = log_z - logits[target];

    let mut grad_x = vec![0.0; x.len()];
    let mut grad_proxies = Array2::zeros(proxies.dim());
    for (c, row) in proxies.rows().into_iter().enumerate() {
        let p = (logits[c] - log_z).exp();
        let dlogit = p - if c == target { 1.0 } else { 0.0 };
        let dcos = scale * dlogit;
        if dcos == 0.0 {
            continue;
        }
        let np = proxy_norms[c];
        let cos = cosines[c];
        for (k, (&xk, &pk)) in x.iter().zip(row.iter()).enumerate() {
            grad_x[k] += dcos * (pk / (nx * np) - cos * xk / (nx * nx));
            grad_proxies[[c, k]] = dcos * (xk / (nx * np) - cos * pk / (np * np));
        }
    }
    Ok(CosFaceLoss {
        value,
        grad_x,
        grad_proxies,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub value: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

/// `max(0, D(a,p) - D(a,n) + margin)` with `D = 1 - cos`. The subgradient at
/// the hinge is zero.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<TripletLoss> {
    let (cos_ap, ga_p, gp) = cosine_with_grads(anchor, positive)?;
    let (cos_an, ga_n, gn) = cosine_with_grads(anchor, negative)?;
    let raw = (1.0 - cos_ap) - (1.0 - cos_an) + margin;
    let d = anchor.len();
    if raw <= 0.0 {
        return Ok(TripletLoss {
            value: 0.0,
            grad_anchor: vec![0.0; d],
            grad_positive: vec![0.0; d],
            grad_negative: vec![0.0; d],
        });
    }
    Ok(TripletLoss {
        value: raw,
        grad_anchor: ga_n.iter().zip(&ga_p).map(|(n, p)| n - p).collect(),
        grad_positive: gp.iter().map(|v| -v).collect(),
        grad_negative: gn,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AslLoss {
    pub value: f64,
    pub ratio: f64,
    pub metric: f64,
    pub grad_i: Vec<f64>,
    pub grad_j: Vec<f64>,
    pub grad_proxies: Array2<f64>,
}

/// `exp(1 - R(x_i -> x_j)) + λ · (CosFace(x_i) + CosFace(x_j)) / 2`, where
/// `x_i` is the side expected to carry more content.
pub fn asl_loss(
    x_i: &[f64],
    x_j: &[f64],
    class_i: usize,
    class_j: usize,
    proxies: ArrayView2<f64>,
    cfg: &LossConfig,
) -> Result<AslLoss> {
    let ratio = ratio_loss(x_i, x_j)?;
    let mi = cosface_loss(x_i, class_i, proxies, cfg.cosface_scale, cfg.cosface_margin)?;
    let mj = cosface_loss(x_j, class_j, proxies, cfg.cosface_scale, cfg.cosface_margin)?;
    let w = 0.5 * cfg.lambda;
    let metric = 0.5 * (mi.value + mj.value);
    let grad_i = ratio.grad_i.iter().zip(&mi.grad_x).map(|(r, m)| r + w * m).collect();
    let grad_j = ratio.grad_j.iter().zip(&mj.grad_x).map(|(r, m)| r + w * m).collect();
    let grad_proxies = (mi.grad_proxies + mj.grad_proxies) * w;
    Ok(AslLoss {
        value: ratio.value + cfg.lambda * metric,
        ratio: ratio.value,
        metric,
        grad_i,
        grad_j,
        grad_proxies,
    })
}
