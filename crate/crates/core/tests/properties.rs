use metanorm::ilm::{count_ilm_params, ilm_forward};
use metanorm::norm::standardize;
use metanorm::tensor::Tensor;
use metanorm::{EmbedDimRule, IlmOptions, IlmParams, KeySource, PartitionScheme};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn shape() -> impl Strategy<Value = [usize; 4]> {
    (
        1usize..4,
        prop::sample::select(vec![2usize, 4, 8]),
        1usize..4,
        1usize..4,
    )
        .prop_map(|(b, c, h, w)| [b, c, h, w])
}

fn tensor(shape: [usize; 4]) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-5.0f64..5.0, n).prop_map(move |v| Tensor::from_f64(&shape, &v).unwrap())
}

fn input() -> impl Strategy<Value = Tensor<f64>> {
    shape().prop_flat_map(tensor)
}

fn instance_schemes(c: usize) -> Vec<PartitionScheme> {
    vec![
        PartitionScheme::Layer,
        PartitionScheme::Instance,
        PartitionScheme::Group(c / 2),
    ]
}

/// Mean and population variance of each partition, computed directly
/// from the index arithmetic of the partition definitions.
fn oracle_moments(x: &Tensor<f64>, scheme: PartitionScheme) -> Vec<(f64, f64)> {
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let members: Vec<Vec<[usize; 4]>> = match scheme {
        PartitionScheme::Batch => (0..c)
            .map(|ci| {
                (0..b)
                    .flat_map(|bi| (0..h).flat_map(move |hi| (0..w).map(move |wi| [bi, ci, hi, wi])))
                    .collect()
            })
            .collect(),
        _ => {
            let g = match scheme {
                PartitionScheme::Layer => 1,
                PartitionScheme::Instance => c,
                PartitionScheme::Group(g) => g,
                PartitionScheme::Batch => unreachable!(),
            };
            let per = c / g;
            (0..b)
                .flat_map(|bi| {
                    (0..g).map(move |gi| {
                        (gi * per..(gi + 1) * per)
                            .flat_map(|ci| (0..h).flat_map(move |hi| (0..w).map(move |wi| [bi, ci, hi, wi])))
                            .collect()
                    })
                })
                .collect()
        }
    };
    members
        .iter()
        .map(|idx| {
            let n = idx.len() as f64;
            let mean = idx.iter().map(|i| x.at(i)).sum::<f64>() / n;
            let var = idx.iter().map(|i| (x.at(i) - mean).powi(2)).sum::<f64>() / n;
            (mean, var)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn standardized_partitions_have_zero_mean_unit_variance(x in input()) {
        let c = x.shape()[1];
        let mut schemes = instance_schemes(c);
        schemes.push(PartitionScheme::Batch);
        for scheme in schemes {
            let before = oracle_moments(&x, scheme);
            let (xs, _) = standardize(&x, scheme, EPS).unwrap();
            for ((m, v), (_, v0)) in oracle_moments(&xs, scheme).into_iter().zip(before) {
                prop_assert!(m.abs() <= 1e-6, "{scheme}: mean {m}");
                if v0 > 1e-3 {
                    let corrected = v * (v0 + EPS) / v0;
                    prop_assert!((corrected - 1.0).abs() <= 1e-5, "{scheme}: variance {corrected}");
                }
            }
        }
    }

    #[test]
    fn group_norm_extremes_match_layer_and_instance(x in input()) {
        let c = x.shape()[1];
        let gn1 = standardize(&x, PartitionScheme::Group(1), EPS).unwrap().0;
        let ln = standardize(&x, PartitionScheme::Layer, EPS).unwrap().0;
        prop_assert!(gn1.max_abs_diff(&ln).unwrap() <= 1e-12);
        let gnc = standardize(&x, PartitionScheme::Group(c), EPS).unwrap().0;
        let inn = standardize(&x, PartitionScheme::Instance, EPS).unwrap().0;
        prop_assert!(gnc.max_abs_diff(&inn).unwrap() <= 1e-12);
    }

    #[test]
    fn meta_normalization_is_batch_independent(x in input(), seed in any::<u64>(), k in prop::sample::select(vec![1usize, 2, 4])) {
        let c = x.shape()[1];
        let opts = IlmOptions { key_group_size: k, ..IlmOptions::default() };
        let params = IlmParams::<f64>::init(c, &opts, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let first = x.slice_outer(0, 1).unwrap();
        for scheme in instance_schemes(c) {
            for source in [KeySource::Input, KeySource::Standardized] {
                let together = ilm_forward(&x, scheme, &params, source, EPS).unwrap();
                let alone = ilm_forward(&first, scheme, &params, source, EPS).unwrap();
                let diff = together.slice_outer(0, 1).unwrap().max_abs_diff(&alone).unwrap();
                prop_assert!(diff <= 1e-12, "{scheme}: {diff}");
            }
        }
    }

    #[test]
    fn zero_weights_give_one_and_a_half_times_standardized(x in input()) {
        let c = x.shape()[1];
        let opts = IlmOptions { key_group_size: 2, ..IlmOptions::default() };
        let params = IlmParams::<f64>::zeros(c, &opts).unwrap();
        for scheme in instance_schemes(c) {
            let xs = standardize(&x, scheme, EPS).unwrap().0;
            let out = ilm_forward(&x, scheme, &params, KeySource::Input, EPS).unwrap();
            prop_assert!(out.max_abs_diff(&xs.scale(1.5)).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn extra_parameters_are_three_m_n(c in 1usize..2048, k in 1usize..64) {
        prop_assume!(c % k == 0);
        let n = c / k;
        let m = (n / 16).max(1);
        let (extra, base) = count_ilm_params(c, k, EmbedDimRule::NOver16Min1).unwrap();
        prop_assert_eq!(extra, 3 * m * n);
        prop_assert_eq!(base, 2 * c);
    }
}

#[test]
fn batch_norm_depends_on_the_batch() {
    let x = Tensor::<f64>::from_fn(&[4, 4, 2, 2], |i| ((i * 37) % 11) as f64 - 5.0);
    let together = standardize(&x, PartitionScheme::Batch, EPS).unwrap().0;
    let alone = standardize(&x.slice_outer(0, 2).unwrap(), PartitionScheme::Batch, EPS)
        .unwrap()
        .0;
    let diff = together.slice_outer(0, 2).unwrap().max_abs_diff(&alone).unwrap();
    assert!(diff > 1e-3, "{diff}");
}
