use super::model::Model;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Fraction of images whose argmax prediction equals the label.
pub fn accuracy(model: &Model<f32>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy on an empty dataset"));
    }
    let pred = model.predict(data.images())?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Fraction of triggered images from classes other than `target` that the
/// model assigns to `target`. Labels hold the true source class.
pub fn attack_success_rate(model: &Model<f32>, triggered: &Dataset, target: usize) -> Result<f64> {
    let pred = model.predict(triggered.images())?;
    let mut total = 0usize;
    let mut hits = 0usize;
    for (p, &l) in pred.iter().zip(triggered.labels()) {
        if l != target {
            total += 1;
            hits += usize::from(*p == target);
        }
    }
    if total == 0 {
        return Err(Error::invalid(format!(
            "no triggered images outside target class {target}"
        )));
    }
    Ok(hits as f64 / total as f64)
}
