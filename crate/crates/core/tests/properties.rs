use fracctl::fbm::{PathKind, SampledPath};
use fracctl::lie::{cbhd_log, matrix_exp, ConstantFamily};
use fracctl::lift::{chen_defect, lift_piecewise_linear};
use fracctl::regress::fit;
use fracctl::util::{order_median, quantile};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn path(levels: u32, dim: usize) -> impl Strategy<Value = SampledPath> {
    let n = ((1usize << levels) + 1) * dim;
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |mut v| {
        v[..dim].iter_mut().for_each(|x| *x = 0.0);
        SampledPath::new(1.0, levels, dim, v, PathKind::Raw).unwrap()
    })
}

fn strictly_upper(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| DMatrix::from_fn(n, n, |i, j| if j > i { v[i * n + j] } else { 0.0 }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chen_relation_holds_on_any_piecewise_linear_path(p in path(5, 3), a in 0usize..=32, b in 0usize..=32, c in 0usize..=32) {
        let mut ix = [a, b, c];
        ix.sort();
        let lift = lift_piecewise_linear(&p);
        let t = |i: usize| p.times[i];
        let d = chen_defect(&lift, t(ix[0]), t(ix[1]), t(ix[2])).unwrap();
        let scale = 1.0 + lift.second(ix[0], ix[2]).amax();
        prop_assert!(d.amax() < 1e-12 * scale, "defect {}", d.amax());
    }

    #[test]
    fn symmetric_part_of_the_lift_is_half_the_squared_increment(p in path(4, 2), a in 0usize..=16, b in 0usize..=16) {
        let (s, t) = (a.min(b), a.max(b));
        let lift = lift_piecewise_linear(&p);
        let m = lift.second(s, t);
        let dx = lift.first(s, t);
        for i in 0..2 {
            for j in 0..2 {
                let sym = 0.5 * (m[(i, j)] + m[(j, i)]);
                prop_assert!((sym - 0.5 * dx[i] * dx[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn restriction_keeps_every_stride_point(p in path(6, 2), level in 0u32..=6) {
        let r = p.restrict(level).unwrap();
        let stride = 1usize << (6 - level);
        prop_assert_eq!(r.len(), (1usize << level) + 1);
        for i in 0..r.len() {
            prop_assert_eq!(r.at(i), p.at(i * stride));
            prop_assert_eq!(r.times[i], p.times[i * stride]);
        }
    }

    #[test]
    fn exponential_of_a_nilpotent_matrix_is_inverted_by_its_negative(k in strictly_upper(4)) {
        let e = matrix_exp(&k, Some(4));
        let f = matrix_exp(&-&k, Some(4));
        prop_assert!((&e * &f - DMatrix::identity(4, 4)).amax() < 1e-12);
        let series = DMatrix::identity(4, 4) + &k + &k * &k / 2.0 + &k * &k * &k / 6.0;
        prop_assert!((e - series).amax() < 1e-12);
    }

    #[test]
    fn cbhd_is_exact_along_a_straight_line(a1 in strictly_upper(3), a2 in strictly_upper(3), v in prop::array::uniform2(-2.0f64..2.0)) {
        let line = SampledPath::from_fn(1.0, 4, 2, |t, out| {
            out[0] = v[0] * t;
            out[1] = v[1] * t;
        });
        let fam = ConstantFamily::new(vec![a1.clone(), a2.clone()], 2);
        let k = cbhd_log(&fam, &line, 0.75).unwrap().matrix();
        let want = -(a1 * v[0] + a2 * v[1]) * 0.75;
        prop_assert!((k - want).amax() < 1e-12);
    }

    #[test]
    fn commuting_generators_give_the_exponential_of_the_endpoint(p in path(6, 2), a in prop::array::uniform2(-1.0f64..1.0), b in prop::array::uniform2(-1.0f64..1.0), i in 1usize..=64) {
        let m1 = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&a));
        let m2 = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&b));
        let fam = ConstantFamily::new(vec![m1.clone(), m2.clone()], 1);
        let t = p.times[i];
        let k = cbhd_log(&fam, &p, t).unwrap().matrix();
        let x = p.at(i);
        prop_assert!((k + m1 * x[0] + m2 * x[1]).amax() < 1e-12);
    }

    #[test]
    fn regression_reproduces_exact_linear_targets(xs in prop::collection::vec(prop::array::uniform2(-3.0f64..3.0), 12..60), beta in prop::array::uniform3(-5.0f64..5.0)) {
        let n = xs.len();
        let design = DMatrix::from_fn(n, 3, |r, c| if c == 0 { 1.0 } else { xs[r][c - 1] });
        prop_assume!(design.clone().svd(false, false).singular_values.min() > 1e-3);
        let y = DMatrix::from_fn(n, 1, |r, _| beta[0] + beta[1] * xs[r][0] + beta[2] * xs[r][1]);
        let f = fit(&design, &y).unwrap();
        prop_assert_eq!(f.rank, 3);
        prop_assert!((f.predict(&design) - &y).amax() < 1e-9);
        let (v, se) = f.predict_one(&[1.0, 0.5, -0.25], 0);
        prop_assert!((v - (beta[0] + 0.5 * beta[1] - 0.25 * beta[2])).abs() < 1e-9);
        prop_assert!(se < 1e-6);
    }

    #[test]
    fn order_statistics_are_bracketed(xs in prop::collection::vec(-1e3f64..1e3, 1..50), q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let m = order_median(&xs);
        prop_assert!(lo <= m && m <= hi);
        prop_assert!(xs.contains(&m));
        let (a, b) = (q1.min(q2), q1.max(q2));
        prop_assert!(quantile(&xs, a) <= quantile(&xs, b));
    }
}
