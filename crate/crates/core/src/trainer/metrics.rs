use crate::error::{Error, Result};

/// `n × n` counts; row = true class, column = predicted class.
pub fn confusion_matrix(labels: &[usize], preds: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if labels.len() != preds.len() {
        return Err(Error::Config(format!("{} labels vs {} predictions", labels.len(), preds.len())));
    }
    if let Some(&c) = labels.iter().chain(preds).find(|&&c| c >= n_classes) {
        return Err(Error::Config(format!("class index {c} outside {n_classes} classes")));
    }
    let mut cm = vec![vec![0u64; n_classes]; n_classes];
    for (&l, &p) in labels.iter().zip(preds) {
        cm[l][p] += 1;
    }
    Ok(cm)
}

/// Mean per-class recall over the classes that occur in the labels.
pub fn uar_from_confusion(cm: &[Vec<u64>]) -> Result<f64> {
    let recalls: Vec<f64> = cm
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    if recalls.is_empty() {
        return Err(Error::Config("UAR of an empty label set".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Unweighted average recall. Classes absent from `labels` are left out of
/// the mean rather than counted as zero recall.
pub fn uar(labels: &[usize], preds: &[usize], n_classes: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Config("UAR of an empty label set".into()));
    }
    uar_from_confusion(&confusion_matrix(labels, preds, n_classes)?)
}
