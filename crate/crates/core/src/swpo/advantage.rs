use super::SwpoError;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Group-normalized advantages `(g_i - mean) / std`.
pub fn advantage_sgrpo(g: &[f64]) -> Result<Vec<f64>, SwpoError> {
    let m = mean(g);
    let s = population_std(g);
    if !(s > 0.0) {
        return Err(SwpoError::ZeroStd);
    }
    Ok(g.iter().map(|x| (x - m) / s).collect())
}

/// Leave-one-out advantages `g_i - mean_{j != i} g_j`.
pub fn advantage_srloo(g: &[f64]) -> Result<Vec<f64>, SwpoError> {
    let k = g.len();
    if k < 2 {
        return Err(SwpoError::InvalidConfig(format!("group size {k} < 2")));
    }
    let total: f64 = g.iter().sum();
    Ok(g.iter().map(|x| x - (total - x) / (k - 1) as f64).collect())
}

/// The equivalent scaled form `K/(K-1) · (g_i - mean)`.
pub fn advantage_srloo_scaled(g: &[f64]) -> Result<Vec<f64>, SwpoError> {
    let k = g.len();
    if k < 2 {
        return Err(SwpoError::InvalidConfig(format!("group size {k} < 2")));
    }
    let m = mean(g);
    let c = k as f64 / (k - 1) as f64;
    Ok(g.iter().map(|x| c * (x - m)).collect())
}

/// Group mean-centering followed by normalization with batch statistics.
/// `tokens[s][i]` is the token count of emission `i` in group `s`; each
/// emission's centered return enters the batch moments once per token.
pub fn advantage_srfpp(groups: &[Vec<f64>], tokens: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, SwpoError> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(SwpoError::EmptyBatch);
    }
    if groups.len() != tokens.len() || groups.iter().zip(tokens).any(|(g, t)| g.len() != t.len()) {
        return Err(SwpoError::InvalidConfig("token counts do not match groups".into()));
    }
    let centered: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let m = mean(g);
            g.iter().map(|x| x - m).collect()
        })
        .collect();
    let (mut n, mut s1) = (0.0, 0.0);
    for (c, t) in centered.iter().zip(tokens) {
        for (a, &l) in c.iter().zip(t) {
            n += l as f64;
            s1 += l as f64 * a;
        }
    }
    if n == 0.0 {
        return Err(SwpoError::EmptyBatch);
    }
    let m = s1 / n;
    let mut s2 = 0.0;
    for (c, t) in centered.iter().zip(tokens) {
        for (a, &l) in c.iter().zip(t) {
            s2 += l as f64 * (a - m) * (a - m);
        }
    }
    let sd = (s2 / n).sqrt();
    if !(sd > 0.0) {
        return Err(SwpoError::ZeroBatchStd);
    }
    Ok(centered
        .into_iter()
        .map(|c| c.into_iter().map(|a| (a - m) / sd).collect())
        .collect())
}

/// Self-normalized inverse mean-return weights.
pub fn adaptive_group_weights(means: &[f64]) -> Result<Vec<f64>, SwpoError> {
    if means.is_empty() {
        return Err(SwpoError::EmptyBatch);
    }
    if means.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
        return Err(SwpoError::InvalidConfig("group means must be positive".into()));
    }
    let inv: Vec<f64> = means.iter().map(|m| 1.0 / m).collect();
    let z: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|x| x / z).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn sgrpo_examples() {
        let a = advantage_sgrpo(&[0.9, 0.1, 0.1, 0.1]).unwrap();
        assert!(close(&a, &[1.7321, -0.5774, -0.5774, -0.5774], 1e-4), "{a:?}");
        assert!(close(&advantage_sgrpo(&[0.8, 0.2]).unwrap(), &[1.0, -1.0], 1e-12));
        assert!(matches!(advantage_sgrpo(&[0.3, 0.3, 0.3]), Err(SwpoError::ZeroStd)));
    }

    #[test]
    fn srloo_examples() {
        let a = advantage_srloo(&[0.9, 0.1, 0.1, 0.1]).unwrap();
        assert!(close(&a, &[0.8, -0.2667, -0.2667, -0.2667], 1e-4), "{a:?}");
        assert_eq!(advantage_srloo(&[0.4, 0.4]).unwrap(), vec![0.0, 0.0]);
        assert!(advantage_srloo(&[0.4]).is_err());
    }

    #[test]
    fn srfpp_example() {
        let a = advantage_srfpp(&[vec![0.9, 0.1], vec![0.7, 0.3]], &[vec![1, 1], vec![1, 1]]).unwrap();
        let flat: Vec<f64> = a.concat();
        assert!(close(&flat, &[1.2649, -1.2649, 0.6325, -0.6325], 1e-4), "{flat:?}");
        assert!(matches!(
            advantage_srfpp(&[vec![0.5, 0.5]], &[vec![2, 3]]),
            Err(SwpoError::ZeroBatchStd)
        ));
        assert!(matches!(advantage_srfpp(&[], &[]), Err(SwpoError::EmptyBatch)));
    }

    #[test]
    fn single_group_srfpp_is_self_normalized_centering() {
        let g = [0.9, 0.2, 0.4];
        let a = advantage_srfpp(&[g.to_vec()], &[vec![1, 1, 1]]).unwrap();
        assert!(close(&a[0], &advantage_sgrpo(&g).unwrap(), 1e-12));
    }

    #[test]
    fn weight_examples() {
        assert!(close(&adaptive_group_weights(&[0.2, 0.8]).unwrap(), &[0.8, 0.2], 1e-12));
        assert!(close(&adaptive_group_weights(&[0.5, 0.5]).unwrap(), &[0.5, 0.5], 1e-12));
        assert_eq!(adaptive_group_weights(&[0.3]).unwrap(), vec![1.0]);
    }

    proptest! {
        #[test]
        fn sgrpo_is_standardized(g in prop::collection::vec(0.01f64..0.99, 2..9)) {
            prop_assume!(population_std(&g) > 1e-6);
            let a = advantage_sgrpo(&g).unwrap();
            prop_assert!(mean(&a).abs() < 1e-9);
            prop_assert!((population_std(&a) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn srloo_forms_agree_and_sum_to_zero(g in prop::collection::vec(0.0f64..1.0, 2..9)) {
            let a = advantage_srloo(&g).unwrap();
            let b = advantage_srloo_scaled(&g).unwrap();
            prop_assert!(close(&a, &b, 1e-12));
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn srfpp_is_standardized_over_tokens(
            groups in prop::collection::vec(prop::collection::vec((0.0f64..1.0, 1usize..6), 2..6), 1..5)
        ) {
            let g: Vec<Vec<f64>> = groups.iter().map(|v| v.iter().map(|x| x.0).collect()).collect();
            let t: Vec<Vec<usize>> = groups.iter().map(|v| v.iter().map(|x| x.1).collect()).collect();
            prop_assume!(g.iter().any(|x| population_std(x) > 1e-6));
            let a = advantage_srfpp(&g, &t).unwrap();
            let (mut n, mut s1, mut s2) = (0.0, 0.0, 0.0);
            for (ag, tg) in a.iter().zip(&t) {
                for (x, &l) in ag.iter().zip(tg) {
                    n += l as f64;
                    s1 += l as f64 * x;
                    s2 += l as f64 * x * x;
                }
            }
            prop_assert!((s1 / n).abs() < 1e-9);
            prop_assert!((s2 / n - 1.0).abs() < 1e-9);
        }

        #[test]
        fn sgrpo_ranking_survives_scaling(g in prop::collection::vec(0.01f64..0.99, 2..9), c in 0.1f64..10.0) {
            prop_assume!(population_std(&g) > 1e-6);
            let a = advantage_sgrpo(&g).unwrap();
            let m = mean(&g);
            let scaled: Vec<f64> = g.iter().map(|x| m + c * (x - m)).collect();
            let b = advantage_sgrpo(&scaled).unwrap();
            prop_assert!(close(&a, &b, 1e-9));
        }

        #[test]
        fn weights_form_a_simplex_decreasing_in_mean(
            means in prop::collection::vec(0.01f64..0.99, 1..8),
            bump in 0.001f64..0.5,
        ) {
            let u = adaptive_group_weights(&means).unwrap();
            prop_assert!(u.iter().all(|&x| x >= 0.0));
            prop_assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if means.len() > 1 {
                let mut higher = means.clone();
                higher[0] = (higher[0] + bump).min(0.999);
                prop_assume!(higher[0] > means[0]);
                let v = adaptive_group_weights(&higher).unwrap();
                prop_assert!(v[0] < u[0]);
            }
        }
    }
}
