//! Segmentation quality measures over label maps.

use crate::error::{Error, Result};

fn check(pred: &[u8], truth: &[u8], op: &'static str) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::shape(op, &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Empty(op));
    }
    Ok(())
}

/// Percentage of pixels whose predicted label matches the truth.
pub fn pixel_accuracy(pred: &[u8], truth: &[u8]) -> Result<f64> {
    check(pred, truth, "pixel_accuracy")?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Intersection over union for every class; a class absent from both maps scores 0.
pub fn iou_per_class(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<Vec<f64>> {
    check(pred, truth, "iou_per_class")?;
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p as usize, t as usize);
        if p >= num_classes || t >= num_classes {
            return Err(Error::invalid("iou_per_class", format!("label out of range for {num_classes} classes")));
        }
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    Ok(inter.iter().zip(&union).map(|(&i, &u)| if u == 0 { 0.0 } else { i as f64 / u as f64 }).collect())
}
