//! Minimal dense-network substrate: linear layers, batch norm, ReLU,
//! set max-pooling, sigmoid, softmax cross-entropy, reverse-mode gradients
//! and AdamW. All arithmetic is f64; only files store f32.

pub mod layers;
pub mod mat;
pub mod optim;
pub mod tape;

pub use layers::{
    mlp_forward, Activation, BatchNormParams, BoundLayer, DenseLayerParams, Mlp, Mode,
};
pub use mat::Mat;
pub use optim::{adamw_step, scheduled_lr, AdamWConfig, AdamWState};
pub use tape::{sigmoid, BatchStats, Gradients, Tape, Var};

/// Componentwise maximum over a non-empty set of rows.
pub fn maxpool_set(features: &Mat) -> crate::Result<Vec<f64>> {
    if features.rows == 0 {
        return Err(crate::Error::Contract("max over an empty set".into()));
    }
    let mut out = features.row(0).to_vec();
    for r in 1..features.rows {
        for (o, &v) in out.iter_mut().zip(features.row(r)) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy of `logits` against class indices.
pub fn cross_entropy_loss(logits: &Mat, targets: &[u32]) -> crate::Result<f64> {
    let mut tape = Tape::new(crate::Exec::Sequential);
    let l = tape.input(logits.clone());
    let loss = tape.cross_entropy(l, targets)?;
    Ok(tape.value(loss).data[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_examples() {
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(maxpool_set(&m).unwrap(), vec![3.0, 2.0]);
        let one = Mat::from_rows(&[vec![-1.0, 5.0]]).unwrap();
        assert_eq!(maxpool_set(&one).unwrap(), vec![-1.0, 5.0]);
        assert!(maxpool_set(&Mat::zeros(0, 2)).is_err());
    }
}
