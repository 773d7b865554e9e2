mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use storyprobe_core::assessment::Wave;
use storyprobe_core::stats::{
    build_dataset, correlation_report, Column, format_rho, render_text, spearman, spearman_exact,
    StatsError, StudyInstruments,
};

/// Average ranks by counting: rank = #smaller + (#equal + 1) / 2.
fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|a| {
            let less = v.iter().filter(|b| *b < a).count() as f64;
            let eq = v.iter().filter(|b| *b == a).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx * syy).sqrt()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn oracle_exact_p(x: &[f64], y: &[f64]) -> f64 {
    let rho = pearson(&ranks(x), &ranks(y)).abs();
    let perms = permutations(x.len());
    let hits = perms
        .iter()
        .filter(|p| {
            let yp: Vec<f64> = p.iter().map(|&i| y[i]).collect();
            pearson(&ranks(x), &ranks(&yp)).abs() >= rho - 1e-12
        })
        .count();
    hits as f64 / perms.len() as f64
}

#[test]
fn textbook_values() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(spearman(&x, &[2.0, 4.0, 6.0, 8.0, 10.0]).unwrap().rho, 1.0);
    assert_eq!(spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap().rho, -1.0);
    // d = (1,-1,1,-1,0), 1 - 6*4/120
    let r = spearman(&x, &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
    assert!((r.rho - 0.8).abs() < 1e-15);
    // with ties: ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4)
    let r = spearman(&[1.0, 2.0, 2.0, 3.0], &x[..4]).unwrap();
    assert!((r.rho - 0.948_683_298_050_513_8).abs() < 1e-12, "{}", r.rho);
}

#[test]
fn t_approximation_against_a_reference_value() {
    // rho = .520 with n = 33: t = 3.389, two-sided p ~ .0019
    let n = 33;
    let p = storyprobe_core::stats::t_approx_p(0.52, n);
    assert!((p - 0.00192).abs() < 5e-5, "{p}");
}

#[test]
fn degenerate_inputs_are_errors() {
    assert_eq!(spearman(&[1.0, 2.0], &[1.0, 2.0]), Err(StatsError::TooFew(2)));
    assert_eq!(
        spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0]),
        Err(StatsError::LengthMismatch { x: 3, y: 2 })
    );
    assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(StatsError::ZeroVariance));
    assert_eq!(spearman(&[1.0, f64::NAN, 3.0], &[1.0, 2.0, 3.0]), Err(StatsError::NonFinite(1)));
}

proptest! {
    #[test]
    fn rho_matches_ranked_pearson(
        pairs in prop::collection::vec((1u8..=5, 1u8..=5), 3..12)
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let y: Vec<f64> = pairs.iter().map(|p| f64::from(p.1)).collect();
        let (rx, ry) = (ranks(&x), ranks(&y));
        match spearman(&x, &y) {
            Ok(r) => prop_assert!((r.rho - pearson(&rx, &ry)).abs() < 1e-12),
            Err(e) => prop_assert_eq!(e, StatsError::ZeroVariance),
        }
    }

    #[test]
    fn exact_p_matches_enumeration(
        pairs in prop::collection::vec((1u8..=4, 1u8..=4), 3..7)
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let y: Vec<f64> = pairs.iter().map(|p| f64::from(p.1)).collect();
        if let Ok(r) = spearman_exact(&x, &y) {
            prop_assert!((r.p_value - oracle_exact_p(&x, &y)).abs() < 1e-12);
        }
    }
}

#[test]
fn report_from_scored_responses() {
    let climate = common::climate();
    let big_five = common::big_five();
    let political = common::political();
    let ingame = common::ingame();
    let inst = StudyInstruments {
        climate: &climate,
        big_five: &big_five,
        political: &political,
        ingame: &ingame,
    };
    let mut responses = Vec::new();
    for k in 0..5u8 {
        let pid = format!("p{k}");
        // climate answers rise with k and are mirrored on reversed items
        let v = k + 1;
        responses.push(common::record(&climate, &pid, Wave::Pre, |i| if i < 2 { v } else { 6 - v }));
        responses.push(common::record(&climate, &pid, Wave::Post, |i| if i < 2 { v } else { 6 - v }));
        responses.push(common::record(&big_five, &pid, Wave::Pre, |i| ((i as u8 + k) % 5) + 1));
        responses.push(common::record(&political, &pid, Wave::Pre, |_| 5 - k));
        responses.push(common::record(&political, &pid, Wave::Post, |_| 5 - k));
        responses.push(common::record(&ingame, &pid, Wave::InGame, |i| (i as u8 + k) % 3 + 1));
    }
    // p5 never came back for the post wave
    responses.push(common::record(&climate, "p5", Wave::Pre, |_| 3));

    let data = build_dataset(&inst, &responses, &[], &BTreeMap::new());
    assert_eq!(data.rows.len(), 5);
    assert_eq!(data.exclusions.len(), 1);
    assert_eq!(data.exclusions[0].participant_id, "p5");
    let pre: Vec<f64> = data.rows.iter().map(|r| r.pre_climate).collect();
    assert_eq!(pre, [1.0, 2.0, 3.0, 4.0, 5.0]);

    let report = correlation_report(&data.rows).unwrap();
    assert_eq!(report.n, 5);
    let pre_post = report
        .overall
        .iter()
        .find(|c| (c.x, c.y) == (Column::Pre, Column::Post))
        .expect("pre/post cell");
    assert_eq!(pre_post.result.unwrap().rho, 1.0);
    let text = render_text(&report);
    for label in ["Conscientiousness", "Neuroticism", "Openness", "Agreeableness", "Extraversion"] {
        assert!(text.contains(label), "{label}");
    }
    assert!(text.contains("N=5, R=correlation"));
    assert_eq!(correlation_report(&data.rows[..2]), Err(StatsError::TooFew(2)));
}

#[test]
fn rho_formatting() {
    assert_eq!(format_rho(0.52), ".520");
    assert_eq!(format_rho(-0.0172), "-.017");
    assert_eq!(format_rho(1.0), "1.000");
    assert_eq!(format_rho(-0.0001), ".000");
}
