#![allow(clippy::needless_range_loop)]

use sslf_core::metrics::{confusion, from_class_stats, report, round_half_away};
use sslf_core::SeededRng;

/// Counts by brute force, no shared code with the library.
fn oracle_counts(labels: &[usize], preds: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k]; k];
    for t in 0..k {
        for p in 0..k {
            m[t][p] = labels.iter().zip(preds).filter(|&(&a, &b)| a == t && b == p).count() as u64;
        }
    }
    m
}

#[test]
fn random_pairs_match_counting_and_formula_oracles() {
    let mut rng = SeededRng::new(2024);
    for trial in 0..5 {
        let n = 1000;
        let labels: Vec<usize> = (0..n).map(|_| rng.below(10) as usize).collect();
        // skewed predictions so some classes are rarely predicted
        let preds: Vec<usize> = labels
            .iter()
            .map(|&l| if rng.uniform() < 0.6 { l } else { rng.below(10 - trial) as usize })
            .collect();
        let cm = confusion(&labels, &preds).unwrap();
        let oracle = oracle_counts(&labels, &preds, 10);
        for t in 0..10 {
            for p in 0..10 {
                assert_eq!(cm.get(t, p), oracle[t][p]);
            }
        }
        let r = report(&cm).unwrap();
        let mut recalls = Vec::new();
        for c in 0..10 {
            let tp = oracle[c][c] as f64;
            let support: u64 = oracle[c].iter().sum();
            let predicted: u64 = (0..10).map(|t| oracle[t][c]).sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if support == 0 { 0.0 } else { tp / support as f64 };
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            assert!((r.rows[c].precision - precision).abs() < 1e-12);
            assert!((r.rows[c].recall - recall).abs() < 1e-12);
            assert!((r.rows[c].f1 - f1).abs() < 1e-12);
            assert_eq!(r.rows[c].support, support);
            if support > 0 {
                recalls.push(recall);
            }
        }
        let acc = labels.iter().zip(&preds).filter(|(a, b)| a == b).count() as f64 / n as f64;
        assert!((r.accuracy - acc).abs() < 1e-12);
        let bal = recalls.iter().sum::<f64>() / recalls.len() as f64;
        assert!((r.balanced_accuracy - bal).abs() < 1e-12);
    }
}

/// Per-class (precision, recall, F1, support) of the reference fusion model.
const REFERENCE: [(&str, f64, f64, f64, u64); 10] = [
    ("Angioectasia", 0.865, 0.813, 0.838, 497),
    ("Bleeding", 0.840, 0.822, 0.831, 359),
    ("Erosion", 0.785, 0.764, 0.774, 1155),
    ("Erythema", 0.614, 0.535, 0.572, 297),
    ("Foreign Body", 0.911, 0.844, 0.876, 340),
    ("Lymphangiectasia", 0.888, 0.854, 0.871, 343),
    ("Normal", 0.978, 0.986, 0.982, 12287),
    ("Polyp", 0.692, 0.752, 0.721, 500),
    ("Ulcer", 0.989, 0.976, 0.982, 286),
    ("Worms", 0.944, 1.000, 0.971, 68),
];

#[test]
fn reference_report_arithmetic() {
    let stats: Vec<(f64, f64, u64)> = REFERENCE.iter().map(|r| (r.1, r.2, r.4)).collect();
    let r = from_class_stats(&stats).unwrap();
    for (row, p) in r.rows.iter().zip(REFERENCE) {
        assert_eq!(row.class, p.0);
        assert!((row.f1 - p.3).abs() <= 0.0015, "{} {}", row.class, row.f1);
    }
    let m = r.macro_avg;
    let w = r.weighted_avg;
    for (got, want) in [(m.precision, 0.851), (m.recall, 0.835), (m.f1, 0.842), (w.precision, 0.939), (w.recall, 0.940), (w.f1, 0.939)] {
        assert!((got - want).abs() <= 0.0015, "{got} vs {want}");
    }
    assert_eq!(r.total_support, 16132);
    assert_eq!(r.balanced_accuracy, m.recall);
    assert_eq!(round_half_away(r.balanced_accuracy, 3), "0.835");
    assert_eq!(round_half_away(r.accuracy, 3), "0.940");
}

#[test]
fn reference_report_text_rows() {
    let stats: Vec<(f64, f64, u64)> = REFERENCE.iter().map(|r| (r.1, r.2, r.4)).collect();
    let text = from_class_stats(&stats).unwrap().to_text();
    let lines: Vec<&str> = text.lines().collect();
    for (line, p) in lines[1..11].iter().zip(REFERENCE) {
        assert!(line.starts_with(p.0));
        let want = [p.4.to_string(), format!("{:.3}", p.3), format!("{:.3}", p.2), format!("{:.3}", p.1)];
        let got: Vec<&str> = line.split_whitespace().rev().take(4).collect();
        assert_eq!(got, want.iter().map(String::as_str).collect::<Vec<_>>(), "{line}");
    }
    assert!(text.contains("Balanced Accuracy"));
}
