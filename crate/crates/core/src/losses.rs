//! Objectives and their analytic gradients, in double precision.
//!
//! * [`info_nce`]: normalised-temperature cross entropy over a batch of view
//!   pairs. Rows `2m` and `2m + 1` are the two views of source `m`; each row's
//!   softmax runs over every *other* row of the batch (`2B - 1` candidates).
//! * [`cce`]: categorical cross entropy on raw logits with an integer target.
//! * [`diou`]: `1 - IoU + ρ²(centres) / c²(enclosing diagonal)`. Predicted
//!   boxes may be mis-ordered; their width and height clamp to zero.
//! * [`combined_loss`]: `α · cce + (1 - α) · diou`.

use crate::data::BoundingBox;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-8;
pub const DIAGONAL_EPS: f64 = 1e-9;

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// `u·v / (max(‖u‖, ε) · max(‖v‖, ε))`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine_sim: length mismatch");
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    dot / (norm(u).max(NORM_EPS) * norm(v).max(NORM_EPS))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Embeddings of `2B` augmented views, paired as `(2m, 2m + 1)`.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub embeddings: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(embeddings: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        let batch = Self {
            embeddings,
            temperature,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Domain(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        let n = self.embeddings.len();
        if n % 2 != 0 {
            return Err(Error::Contract(format!("contrastive batch has odd row count {n}")));
        }
        if n < 4 {
            return Err(Error::Contract(format!(
                "contrastive batch needs at least 4 rows, got {n}"
            )));
        }
        let d = self.embeddings[0].len();
        if self.embeddings.iter().any(|r| r.len() != d) {
            return Err(Error::Contract("embedding rows differ in length".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn positive_of(row: usize) -> usize {
        row ^ 1
    }
}

pub fn info_nce(batch: &ContrastiveBatch) -> Result<f64> {
    info_nce_with_grad(batch).map(|(l, _)| l)
}

/// Loss and its gradient with respect to every embedding row.
pub fn info_nce_with_grad(batch: &ContrastiveBatch) -> Result<(f64, Vec<Vec<f64>>)> {
    batch.validate()?;
    let z = &batch.embeddings;
    let n = z.len();
    let tau = batch.temperature;

    let norms: Vec<f64> = z.iter().map(|r| norm(r)).collect();
    let unit: Vec<Vec<f64>> = z
        .iter()
        .zip(&norms)
        .map(|(r, &nr)| r.iter().map(|x| x / nr.max(NORM_EPS)).collect())
        .collect();
    let logits: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|k| unit[i].iter().zip(&unit[k]).map(|(a, b)| a * b).sum::<f64>() / tau)
                .collect()
        })
        .collect();

    // dL/dlogit[i][k], already divided by the 2B mean.
    let mut dlogits = vec![vec![0.0; n]; n];
    let mut loss = 0.0;
    for i in 0..n {
        let j = ContrastiveBatch::positive_of(i);
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| logits[i][k])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n)
            .filter(|&k| k != i)
            .map(|k| (logits[i][k] - max).exp())
            .sum();
        let lse = max + denom.ln();
        loss += lse - logits[i][j];
        for k in (0..n).filter(|&k| k != i) {
            let p = (logits[i][k] - lse).exp();
            dlogits[i][k] = (p - if k == j { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    loss /= n as f64;

    let dim = z[0].len();
    let mut dunit = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for k in 0..n {
            let g = dlogits[i][k] / tau;
            if g == 0.0 {
                continue;
            }
            for d in 0..dim {
                dunit[i][d] += g * unit[k][d];
                dunit[k][d] += g * unit[i][d];
            }
        }
    }
    let grads = (0..n)
        .map(|i| {
            if norms[i] > NORM_EPS {
                let proj: f64 = dunit[i].iter().zip(&unit[i]).map(|(a, b)| a * b).sum();
                dunit[i]
                    .iter()
                    .zip(&unit[i])
                    .map(|(g, u)| (g - proj * u) / norms[i])
                    .collect()
            } else {
                dunit[i].iter().map(|g| g / NORM_EPS).collect()
            }
        })
        .collect();
    Ok((loss, grads))
}

fn check_target(logits: &[f64], target: usize) -> Result<()> {
    if target >= logits.len() {
        return Err(Error::Contract(format!(
            "class index {target} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(())
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[target]`.
pub fn cce(logits: &[f64], target: usize) -> Result<f64> {
    check_target(logits, target)?;
    Ok(log_sum_exp(logits) - logits[target])
}

pub fn cce_with_grad(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    check_target(logits, target)?;
    let lse = log_sum_exp(logits);
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, l)| (l - lse).exp() - if k == target { 1.0 } else { 0.0 })
        .collect();
    Ok((lse - logits[target], grad))
}

pub fn diou(pred: [f64; 4], gt: &BoundingBox) -> f64 {
    diou_with_grad(pred, gt).0
}

/// Distance-IoU loss and its (sub)gradient with respect to `pred`.
pub fn diou_with_grad(pred: [f64; 4], gt: &BoundingBox) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = pred;
    let [g1, h1, g2, h2] = gt.to_array();

    let pw = (x2 - x1).max(0.0);
    let ph = (y2 - y1).max(0.0);
    let area_p = pw * ph;
    let area_g = (g2 - g1) * (h2 - h1);

    let iw_raw = x2.min(g2) - x1.max(g1);
    let ih_raw = y2.min(h2) - y1.max(h1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let union = area_p + area_g - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };

    let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
    let (gcx, gcy) = ((g1 + g2) / 2.0, (h1 + h2) / 2.0);
    let rho2 = (cx - gcx).powi(2) + (cy - gcy).powi(2);
    // enclosing box over all corners, so mis-ordered predictions stay inside it
    let (ex_hi, ex_lo) = (extreme(x1, x2, g2, true), extreme(x1, x2, g1, false));
    let (ey_hi, ey_lo) = (extreme(y1, y2, h2, true), extreme(y1, y2, h1, false));
    let ew = ex_hi.0 - ex_lo.0;
    let eh = ey_hi.0 - ey_lo.0;
    let c2_raw = ew * ew + eh * eh;
    let c2 = c2_raw.max(DIAGONAL_EPS);

    let loss = 1.0 - iou + rho2 / c2;

    // d(inter)/d(pred)
    let mut d_iw = [0.0; 4];
    if iw_raw > 0.0 {
        if x1 > g1 {
            d_iw[0] = -1.0;
        }
        if x2 < g2 {
            d_iw[2] = 1.0;
        }
    }
    let mut d_ih = [0.0; 4];
    if ih_raw > 0.0 {
        if y1 > h1 {
            d_ih[1] = -1.0;
        }
        if y2 < h2 {
            d_ih[3] = 1.0;
        }
    }
    let mut d_area = [0.0; 4];
    if x2 > x1 {
        d_area[0] = -ph;
        d_area[2] = ph;
    }
    if y2 > y1 {
        d_area[1] = -pw;
        d_area[3] = pw;
    }
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_inter = d_iw[k] * ih + iw * d_ih[k];
        let d_iou = if union > 0.0 {
            d_inter * (1.0 / union + inter / (union * union)) - inter * d_area[k] / (union * union)
        } else {
            0.0
        };
        grad[k] -= d_iou;
    }

    let d_rho2 = [cx - gcx, cy - gcy, cx - gcx, cy - gcy];
    let mut d_c2 = [0.0; 4];
    if c2_raw > DIAGONAL_EPS {
        for (ext, sign, d, base) in [(ex_hi, 1.0, ew, 0), (ex_lo, -1.0, ew, 0), (ey_hi, 1.0, eh, 1), (ey_lo, -1.0, eh, 1)] {
            if let Some(j) = ext.1 {
                d_c2[base + 2 * j] += sign * 2.0 * d;
            }
        }
    }
    for k in 0..4 {
        grad[k] += d_rho2[k] / c2 - rho2 * d_c2[k] / (c2 * c2);
    }
    (loss, grad)
}

/// Largest (or smallest) of two predicted coordinates and a ground-truth
/// one, with the predicted index (0 or 1) that attains it.
fn extreme(p0: f64, p1: f64, g: f64, largest: bool) -> (f64, Option<usize>) {
    let beats = |a: f64, b: f64| if largest { a > b } else { a < b };
    let (v, j) = if beats(p0, p1) { (p0, 0) } else { (p1, 1) };
    if beats(v, g) {
        (v, Some(j))
    } else {
        (g, None)
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// `α · cce + (1 - α) · diou`.
pub fn combined_loss(cce_value: f64, diou_value: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * cce_value + (1.0 - alpha) * diou_value)
}

/// One detector sample's combined loss and its gradients with respect to the
/// logits and the predicted box.
pub struct DetectionLoss {
    pub total: f64,
    pub cce: f64,
    pub diou: f64,
    pub d_logits: Vec<f64>,
    pub d_box: [f64; 4],
}

pub fn detection_loss(
    logits: &[f64],
    pred_box: [f64; 4],
    target: usize,
    gt: &BoundingBox,
    alpha: f64,
) -> Result<DetectionLoss> {
    check_alpha(alpha)?;
    let (c, dc) = cce_with_grad(logits, target)?;
    let (d, dd) = diou_with_grad(pred_box, gt);
    Ok(DetectionLoss {
        total: alpha * c + (1.0 - alpha) * d,
        cce: c,
        diou: d,
        d_logits: dc.into_iter().map(|g| alpha * g).collect(),
        d_box: dd.map(|g| (1.0 - alpha) * g),
    })
}

/// Mean cross entropy over a batch.
pub fn cce_batch(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::Contract("cce batch: empty or mismatched inputs".into()));
    }
    let mut total = 0.0;
    for (l, &t) in logits.iter().zip(targets) {
        total += cce(l, t)?;
    }
    Ok(total / logits.len() as f64)
}

/// Mean distance-IoU over a batch.
pub fn diou_batch(preds: &[[f64; 4]], gts: &[BoundingBox]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Contract("diou batch: empty or mismatched inputs".into()));
    }
    Ok(preds.iter().zip(gts).map(|(p, g)| diou(*p, g)).sum::<f64>() / preds.len() as f64)
}
