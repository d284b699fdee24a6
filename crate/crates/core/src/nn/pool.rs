use crate::error::Result;
use crate::tensor::{reduce, reduce_backward, ReduceOp, Scalar, Tensor};

/// Descriptor pooling used by channel and spatial attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// N×C×H×W → N×C×1×1
    GlobalAvg,
    GlobalMax,
    /// N×C×H×W → N×1×H×W, statistic across channels per site
    ChannelMeanMap,
    ChannelMaxMap,
}

impl PoolKind {
    fn plan(self) -> (ReduceOp, &'static [usize]) {
        match self {
            PoolKind::GlobalAvg => (ReduceOp::Mean, &[2, 3]),
            PoolKind::GlobalMax => (ReduceOp::Max, &[2, 3]),
            PoolKind::ChannelMeanMap => (ReduceOp::Mean, &[1]),
            PoolKind::ChannelMaxMap => (ReduceOp::Max, &[1]),
        }
    }
}

pub fn pooling<T: Scalar>(kind: PoolKind, x: &Tensor<T>) -> Result<Tensor<T>> {
    x.nchw()?;
    let (op, axes) = kind.plan();
    reduce(x, op, axes, true)
}

pub fn pooling_backward<T: Scalar>(kind: PoolKind, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (op, axes) = kind.plan();
    reduce_backward(x, op, axes, dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_avg_of_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 4], 7.0).unwrap();
        let y = pooling(PoolKind::GlobalAvg, &x).unwrap();
        assert_eq!(y.dims(), &[2, 3, 1, 1]);
        assert!(y.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn channel_max_map_picks_dominant_channel() {
        let mut data = vec![0.0f64; 3 * 4];
        for i in 0..4 {
            data[4 + i] = 10.0 + i as f64;
        }
        let x = Tensor::new(&[1, 3, 2, 2], data).unwrap();
        let y = pooling(PoolKind::ChannelMaxMap, &x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn global_max_backward_hits_argmax_only() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.1f64, 0.9, 0.3, 0.2]).unwrap();
        let dy = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let g = pooling_backward(PoolKind::GlobalMax, &x, &dy).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
