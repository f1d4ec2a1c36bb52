use super::*;

fn bundle(g_f: &[f64], g_p_bar: &[f64], k: usize) -> GradientBundle {
    GradientBundle::new(g_f.to_vec(), vec![g_p_bar.to_vec()], k).unwrap()
}

#[test]
fn deflection_examples() {
    assert_eq!(
        deflection_vector(&bundle(&[1.0, 0.0], &[0.0, 1.0], 2)),
        vec![-0.5, 1.0]
    );
    assert_eq!(
        deflection_vector(&bundle(&[0.0, 0.0], &[0.3, -2.0], 3)),
        vec![0.3, -2.0]
    );
    let u = deflection_vector(&bundle(&[2.0, -4.0], &[1.0, -2.0], 2));
    assert!(u.iter().all(|x| *x == 0.0));
}

#[test]
fn update_vector_examples() {
    let b = bundle(&[1.0, 0.0], &[0.0, 1.0], 2);
    assert_eq!(update_vector(&b, 0.0), vec![-1.0, 0.0]);
    assert_eq!(update_vector(&b, 1.0), vec![-1.5, 1.0]);
    let flat = bundle(&[2.0, -4.0], &[1.0, -2.0], 2);
    assert_eq!(update_vector(&flat, 7.0), vec![-2.0, 4.0]);
}

#[test]
fn optimal_rate_examples() {
    let d = optimal_smoothing_rate(&bundle(&[1.0, 0.0], &[0.0, 1.0], 2)).unwrap();
    assert!((d.r_star + 0.4).abs() < 1e-15);
    assert!((d.inner + 0.5).abs() < 1e-15);
    assert!((d.u_norm_sq - 1.25).abs() < 1e-15);
    assert!(d.d_star_norm_sq <= d.d0_norm_sq);
    let orth = optimal_smoothing_rate(&bundle(&[1.0, 0.0], &[0.5, 1.0], 2)).unwrap();
    assert_eq!(orth.r_star, 0.0);
    assert!(matches!(
        optimal_smoothing_rate(&bundle(&[2.0, -4.0], &[1.0, -2.0], 2)),
        Err(SmoothingError::DegenerateDeflection)
    ));
}

#[test]
fn grid_search_agrees_with_closed_form_on_example() {
    let b = bundle(&[1.0, 0.0], &[0.0, 1.0], 2);
    let norm = |r: f64| {
        let d = update_vector(&b, r);
        dot(&d, &d)
    };
    let best = (0..=100_000)
        .map(|i| -5.0 + i as f64 * 1e-4)
        .min_by(|a, b| norm(*a).total_cmp(&norm(*b)))
        .unwrap();
    assert!((best + 0.4).abs() < 1e-4);
}

#[test]
fn bundle_mean_and_validation() {
    let b = GradientBundle::new(vec![0.0; 2], vec![vec![1.0, 2.0], vec![3.0, -2.0]], 3).unwrap();
    assert_eq!(b.g_p_bar(), &[2.0, 0.0]);
    assert!(matches!(
        GradientBundle::new(vec![0.0; 2], vec![vec![1.0]], 3),
        Err(SmoothingError::DimensionMismatch {
            expected: 2,
            got: 1
        })
    ));
    assert!(GradientBundle::new(vec![0.0], vec![], 0).is_err());
}

#[test]
fn sign_profile_counts() {
    let neg = bundle(&[1.0, 0.0], &[0.0, 1.0], 2);
    let zero = bundle(&[1.0, 0.0], &[0.5, 1.0], 2);
    let pos = bundle(&[1.0, 0.0], &[1.0, 0.0], 4);
    let p = sign_profile(&[neg.clone(), zero.clone(), pos.clone()]).unwrap();
    assert_eq!(p.rows[0].sign, Sign::Negative);
    assert_eq!(p.rows[1].sign, Sign::Zero);
    assert_eq!(p.rows[2].sign, Sign::Positive);
    assert_eq!(
        (p.summary.positive, p.summary.negative, p.summary.zero),
        (1, 1, 1)
    );
    let doubled = sign_profile(&[neg.clone(), zero.clone(), pos.clone(), neg, zero, pos]).unwrap();
    assert_eq!(doubled.summary.instances, 6);
    assert_eq!(doubled.summary.negative, 2);
    assert!(sign_profile(&[]).is_err());
}

#[test]
fn sign_profile_round_trips() {
    let p = sign_profile(&[
        bundle(&[1.0, 0.3], &[0.1, 1.0], 2),
        bundle(&[0.2, 0.7], &[0.9, -1.0], 3),
    ])
    .unwrap();
    let mut buf = Vec::new();
    p.write_jsonl(&mut buf).unwrap();
    let back = SignProfile::read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, p);
    let truncated: Vec<u8> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .bytes()
        .collect();
    assert!(SignProfile::read_jsonl(truncated.as_slice()).is_err());
}
