use super::{EvalError, LabeledDataset, MetricKind};
use crate::checkpoint::Checkpoint;
use crate::toybench::Mlp;

/// Class decisions of the toy MLP stored in `c` for every row of `data`.
pub fn predict(c: &Checkpoint, data: &LabeledDataset) -> Result<Vec<u32>, EvalError> {
    let net = Mlp::from_checkpoint(c).map_err(|e| EvalError::Architecture(e.to_string()))?;
    let arch = net.architecture();
    if arch.input_dim != data.dim() || arch.num_classes != data.num_classes() {
        return Err(EvalError::Architecture(format!(
            "model maps {} inputs to {} classes, dataset has {} inputs and {} classes",
            arch.input_dim,
            arch.num_classes,
            data.dim(),
            data.num_classes()
        )));
    }
    Ok((0..data.len())
        .map(|i| net.predict_row(data.row(i)))
        .collect())
}

/// Deterministic forward pass, argmax decision (lowest index on ties), then
/// `metric`.
pub fn evaluate_builtin(
    c: &Checkpoint,
    data: &LabeledDataset,
    metric: &MetricKind,
) -> Result<f64, EvalError> {
    let preds = predict(c, data)?;
    metric.score(&preds, data.labels(), data.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::Split;
    use crate::toybench::MlpArchitecture;

    #[test]
    fn zero_model_predicts_class_zero() {
        let arch = MlpArchitecture::new(2, vec![4], 3).unwrap();
        let c = arch.zeros().to_checkpoint();
        let data = LabeledDataset::new(
            "t",
            Split::Dev,
            2,
            3,
            vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0, 0.0, 0.0],
            vec![0, 2, 1, 0],
        )
        .unwrap();
        assert_eq!(predict(&c, &data).unwrap(), vec![0; 4]);
        assert_eq!(
            evaluate_builtin(&c, &data, &MetricKind::Accuracy).unwrap(),
            0.5
        );
    }

    #[test]
    fn repeat_calls_identical() {
        let arch = MlpArchitecture::new(2, vec![4], 2).unwrap();
        let c = arch.init(3).to_checkpoint();
        let data =
            LabeledDataset::new("t", Split::Dev, 2, 2, vec![0.3, -0.2, 1.0, 1.0], vec![1, 0])
                .unwrap();
        let a = evaluate_builtin(&c, &data, &MetricKind::MacroF1).unwrap();
        let b = evaluate_builtin(&c, &data, &MetricKind::MacroF1).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn dimension_mismatch() {
        let c = MlpArchitecture::new(3, vec![4], 2)
            .unwrap()
            .init(0)
            .to_checkpoint();
        let data = LabeledDataset::new("t", Split::Dev, 2, 2, vec![0.0, 0.0], vec![0]).unwrap();
        assert!(matches!(
            evaluate_builtin(&c, &data, &MetricKind::Accuracy),
            Err(EvalError::Architecture(_))
        ));
    }
}
