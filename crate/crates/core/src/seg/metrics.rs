use crate::error::{Error, Result};
use crate::seg::data::{stack, LabeledGrid};
use crate::seg::model::SegModel;

/// Pixel-accuracy summary. `confusion[truth][predicted]` counts pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub global: f64,
    /// `None` for classes with no ground-truth pixel.
    pub per_class: Vec<Option<f64>>,
    pub class_average: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let n = confusion.len();
        if n == 0 || confusion.iter().any(|r| r.len() != n) {
            return Err(Error::contract("confusion matrix must be square and non-empty"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..n).map(|i| confusion[i][i]).sum();
        let per_class: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let truth: u64 = row.iter().sum();
                (truth > 0).then(|| row[i] as f64 / truth as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let class_average = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let global = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Ok(Self {
            global,
            per_class,
            class_average,
            confusion,
        })
    }

    pub fn pixels(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Index of the largest logit; ties go to the lowest class.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax predictions of `model` on `data`, scored against the labels.
/// Ignored pixels are excluded from every count.
pub fn evaluate(model: &SegModel, data: &[LabeledGrid]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let n = model.config().num_classes;
    let mut confusion = vec![vec![0u64; n]; n];
    for chunk in data.chunks(EVAL_BATCH) {
        let refs: Vec<&LabeledGrid> = chunk.iter().collect();
        let (images, targets) = stack(&refs)?;
        let logits = model.predict(&images)?;
        for (i, target) in targets.iter().enumerate() {
            if let Some(truth) = *target {
                if truth >= n {
                    return Err(Error::Label {
                        pixel: i,
                        label: truth,
                        classes: n,
                    });
                }
                confusion[truth][argmax(logits.row(i))] += 1;
            }
        }
    }
    EvalReport::from_confusion(confusion)
}

const EVAL_BATCH: usize = 16;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        let r = EvalReport::from_confusion(vec![vec![3, 1], vec![2, 4]]).unwrap();
        assert!((r.global - 0.7).abs() < 1e-12);
        assert!((r.per_class[0].unwrap() - 0.75).abs() < 1e-12);
        assert!((r.per_class[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.class_average - 0.708333).abs() < 1e-5);
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let r = EvalReport::from_confusion(vec![vec![5, 0], vec![0, 7]]).unwrap();
        assert_eq!((r.global, r.class_average), (1.0, 1.0));
        let r = EvalReport::from_confusion(vec![vec![6, 0], vec![6, 0]]).unwrap();
        assert_eq!((r.global, r.class_average), (0.5, 0.5));
    }

    #[test]
    fn absent_classes_skipped() {
        let r = EvalReport::from_confusion(vec![vec![2, 0, 0], vec![0, 0, 0], vec![1, 0, 1]]).unwrap();
        assert_eq!(r.per_class[1], None);
        assert!((r.class_average - 0.75).abs() < 1e-12);
    }

    #[test]
    fn argmax_shift_invariant() {
        let row = [0.3, 1.2, -0.4];
        let shifted: Vec<f64> = row.iter().map(|v| v + 17.5).collect();
        assert_eq!(argmax(&row), argmax(&shifted));
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }
}
