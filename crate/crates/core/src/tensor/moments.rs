use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Assignment of the channel planes of an NCHW tensor to statistic
/// partitions.
///
/// A plane is the `H·W` block of one `(instance, channel)` pair. Every
/// partition covers the same number of elements. Moments are accumulated
/// in `f64`, visiting planes in memory order, so results do not depend
/// on how the caller iterates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionLayout {
    /// Plane index -> partition index.
    pub part_of_plane: Vec<usize>,
    pub plane_len: usize,
    pub parts: usize,
    /// Elements per partition.
    pub part_len: usize,
    /// Shape of the per-partition statistic tensors.
    pub stat_shape: Vec<usize>,
}

impl PartitionLayout {
    /// `groups` contiguous channel blocks per instance.
    pub fn grouped(shape: &[usize], groups: usize) -> Result<Self> {
        let (b, c, hw) = nchw(shape)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Partition(format!(
                "{c} channels cannot be split into {groups} equal groups"
            )));
        }
        let per_group = c / groups;
        let part_of_plane = (0..b * c).map(|q| (q / c) * groups + (q % c) / per_group).collect();
        Ok(Self {
            part_of_plane,
            plane_len: hw,
            parts: b * groups,
            part_len: per_group * hw,
            stat_shape: vec![b, groups],
        })
    }

    /// One partition per channel, spanning every instance.
    pub fn per_channel(shape: &[usize]) -> Result<Self> {
        let (b, c, hw) = nchw(shape)?;
        Ok(Self {
            part_of_plane: (0..b * c).map(|q| q % c).collect(),
            plane_len: hw,
            parts: c,
            part_len: b * hw,
            stat_shape: vec![c],
        })
    }

    /// Population mean and variance of every partition (two-pass).
    pub fn moments<T: Scalar>(&self, data: &[T]) -> (Vec<f64>, Vec<f64>) {
        let mut sum = vec![0.0f64; self.parts];
        for (plane, &p) in data.chunks_exact(self.plane_len).zip(&self.part_of_plane) {
            let acc = &mut sum[p];
            for &v in plane {
                *acc += v.as_f64();
            }
        }
        let n = self.part_len as f64;
        let mean: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
        let mut sq = vec![0.0f64; self.parts];
        for (plane, &p) in data.chunks_exact(self.plane_len).zip(&self.part_of_plane) {
            let m = mean[p];
            let acc = &mut sq[p];
            for &v in plane {
                let d = v.as_f64() - m;
                *acc += d * d;
            }
        }
        let var = sq.into_iter().map(|s| s / n).collect();
        (mean, var)
    }

    /// Per-partition sums of `f(i)` over flat element indices.
    pub fn reduce(&self, mut f: impl FnMut(usize) -> f64) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.parts];
        for (q, &p) in self.part_of_plane.iter().enumerate() {
            let base = q * self.plane_len;
            let a = &mut acc[p];
            for i in base..base + self.plane_len {
                *a += f(i);
            }
        }
        acc
    }

    pub fn stat_tensor<T: Scalar>(&self, values: &[f64]) -> Tensor<T> {
        Tensor::from_parts(
            self.stat_shape.clone(),
            values.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }
}

fn nchw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(Error::Shape(format!("expected NCHW tensor, got {shape:?}"))),
    }
}

/// Mean and population variance of each of `groups` contiguous channel
/// blocks, per instance. Both outputs are `B × groups`.
pub fn grouped_moments<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let layout = PartitionLayout::grouped(x.shape(), groups)?;
    let (mean, var) = layout.moments(x.data());
    Ok((layout.stat_tensor(&mean), layout.stat_tensor(&var)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_groups_of_two_channels() {
        let x = Tensor::<f64>::from_f64(&[1, 4, 1, 1], &[1.0, 3.0, 5.0, 9.0]).unwrap();
        let (m, v) = grouped_moments(&x, 2).unwrap();
        assert_eq!(m.shape(), &[1, 2]);
        assert_eq!(m.data(), &[2.0, 7.0]);
        assert_eq!(v.data(), &[1.0, 4.0]);
    }

    #[test]
    fn constant_tensor_has_zero_variance() {
        let x = Tensor::<f64>::full(&[2, 4, 3, 3], 1.75);
        let (m, v) = grouped_moments(&x, 4).unwrap();
        assert!(m.data().iter().all(|&a| a == 1.75));
        assert!(v.data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn indivisible_grouping_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 6, 2, 2]);
        assert!(matches!(grouped_moments(&x, 4), Err(Error::Partition(_))));
        assert!(matches!(grouped_moments(&x, 0), Err(Error::Partition(_))));
    }

    #[test]
    fn per_channel_spans_the_batch() {
        // channel 0 holds {0, 1} from instance 0 and {4, 5} from instance 1
        let x = Tensor::<f64>::from_fn(&[2, 2, 1, 2], |i| i as f64);
        let layout = PartitionLayout::per_channel(x.shape()).unwrap();
        let (m, _) = layout.moments(x.data());
        assert_eq!(m, vec![2.5, 4.5]);
    }

    #[test]
    fn f32_statistics_accumulate_in_f64() {
        // 1e8 + small values: f32 accumulation would lose the small part
        let mut v = vec![1.0f32; 16];
        v[0] = 1.0e8;
        let x = Tensor::new(&[1, 1, 4, 4], v).unwrap();
        let (m, _) = grouped_moments(&x, 1).unwrap();
        let expected = (1.0e8f64 + 15.0) / 16.0;
        assert_eq!(m.data()[0], expected as f32);
    }

    fn tensor_strategy() -> impl Strategy<Value = Tensor<f64>> {
        (1usize..3, 1usize..4, 1usize..4).prop_flat_map(|(b, g, hw)| {
            let c = g * 2;
            prop::collection::vec(-10.0f64..10.0, b * c * hw * hw)
                .prop_map(move |v| Tensor::new(&[b, c, hw, hw], v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn variance_is_shift_invariant(x in tensor_strategy(), shift in -50.0f64..50.0) {
            let groups = x.shape()[1] / 2;
            let (_, v0) = grouped_moments(&x, groups).unwrap();
            let (_, v1) = grouped_moments(&x.map(|a| a + shift), groups).unwrap();
            for (a, b) in v0.data().iter().zip(v1.data()) {
                prop_assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
            }
        }

        #[test]
        fn variance_scales_quadratically(x in tensor_strategy(), k in 0.1f64..10.0) {
            let groups = x.shape()[1] / 2;
            let (_, v0) = grouped_moments(&x, groups).unwrap();
            let (_, v1) = grouped_moments(&x.scale(k), groups).unwrap();
            for (a, b) in v0.data().iter().zip(v1.data()) {
                let expected = k * k * a;
                prop_assert!((b - expected).abs() <= 1e-8 * expected.abs().max(1e-12), "{} vs {}", b, expected);
                prop_assert!(*b >= 0.0);
            }
        }
    }
}
