//! Softmax cross-entropy and temperature-softened distillation losses.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_logits(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "logits must be (batch, classes), got {:?}",
            logits.shape()
        )));
    }
    let (b, q) = (logits.shape()[0], logits.shape()[1]);
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= q) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside [0, {q})"
        )));
    }
    Ok((b, q))
}

/// Mean softmax cross-entropy over the batch, with its exact gradient
/// `(softmax - onehot) / batch` with respect to the logits.
pub fn ce_loss_and_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, q) = check_logits(logits, labels)?;
    let x = logits.data();
    let mut dlogits = vec![0.0; b * q];
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = &x[i * q..(i + 1) * q];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[y];
        let drow = &mut dlogits[i * q..(i + 1) * q];
        for (j, v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            drow[j] = (p - if j == y { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Ok((loss * inv_b, Tensor::new(vec![b, q], dlogits)?))
}

/// Distillation loss
/// `(1-λ)·CE(student, labels) + λ·T²·KL(softmax(teacher/T) ‖ softmax(student/T))`,
/// averaged over the batch. The gradient flows only through the student
/// logits. With `λ = 0` this is exactly [`ce_loss_and_grad`].
pub fn kd_loss_and_grad(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    temperature: f64,
    lambda: f64,
) -> Result<(f64, Tensor)> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "distillation temperature {temperature} must be positive"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "distillation weight {lambda} outside [0, 1]"
        )));
    }
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student_logits.shape(),
            teacher_logits.shape()
        )));
    }
    if lambda == 0.0 {
        return ce_loss_and_grad(student_logits, labels);
    }
    let (b, q) = check_logits(student_logits, labels)?;
    let (ce, mut dlogits) = ce_loss_and_grad(student_logits, labels)?;

    let inv_b = 1.0 / b as f64;
    let s = student_logits.data();
    let t = teacher_logits.data();
    let mut kl_sum = 0.0;
    let d = dlogits.data_mut();
    let mut ps = vec![0.0; q];
    let mut pt = vec![0.0; q];
    for i in 0..b {
        softened(&s[i * q..(i + 1) * q], temperature, &mut ps);
        softened(&t[i * q..(i + 1) * q], temperature, &mut pt);
        // Direct sum can drift a hair below zero when the distributions
        // coincide; clamp so the KL term is always non-negative.
        let kl: f64 = pt
            .iter()
            .zip(&ps)
            .map(|(&p, &qv)| if p > 0.0 { p * (p.ln() - qv.ln()) } else { 0.0 })
            .sum();
        kl_sum += kl.max(0.0);
        for j in 0..q {
            d[i * q + j] = (1.0 - lambda) * d[i * q + j]
                + lambda * temperature * (ps[j] - pt[j]) * inv_b;
        }
    }
    let loss = (1.0 - lambda) * ce + lambda * temperature * temperature * kl_sum * inv_b;
    Ok((loss, dlogits))
}

fn softened(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v / temperature - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
