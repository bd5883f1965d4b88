//! Randomized invariants for the tensor ops, the window machinery, the loss
//! terms, the metrics, and the cost table.

mod common;

use common::*;
use logoformer::*;
use proptest::prelude::*;
use rand::Rng;

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, m, p) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for k in 0..m {
            for j in 0..p {
                out[i * p + j] += a.at(&[i, k]) * b.at(&[k, j]);
            }
        }
    }
    out
}

fn compact_value(logits: &[f64], target: usize) -> f64 {
    let mut tape = Tape::new();
    let t = Tensor::new(vec![logits.len()], logits.to_vec()).unwrap();
    tape.compact_term(&t, target).unwrap().item()
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(n in 1usize..8, m in 1usize..8, p in 1usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, vec![n, m], -10.0, 10.0);
        let b = uniform(&mut r, vec![m, p], -10.0, 10.0);
        let mut tape = Tape::new();
        let c = tape.matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        prop_assert!(max_abs_diff(c.data(), &want) <= 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, vec![rows, cols], -30.0, 30.0);
        let mut tape = Tape::new();
        let s = tape.softmax(&x, 1).unwrap();
        for i in 0..rows {
            let row = s.row(i);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let s0 = tape.softmax(&x, 0).unwrap();
        for j in 0..cols {
            let col: f64 = (0..rows).map(|i| s0.at(&[i, j])).sum();
            prop_assert!((col - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(rows in 1usize..4, cols in 2usize..7, shift in -40.0..40.0f64, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, vec![rows, cols], -5.0, 5.0);
        let shifted = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v + shift).collect(),
        ).unwrap();
        let mut tape = Tape::new();
        let a = tape.softmax(&x, 1).unwrap();
        let b = tape.softmax(&shifted, 1).unwrap();
        prop_assert!(max_abs_diff(a.data(), b.data()) <= 1e-12);
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in 1usize..4, cols in 3usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, vec![rows, cols], -4.0, 4.0);
        // reject near-constant rows, where the eps floor would dominate
        let spread = (0..rows).all(|i| {
            let row = x.row(i);
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            hi - lo > 0.5
        });
        prop_assume!(spread);
        let gain = Tensor::filled(vec![cols], 1.0).unwrap();
        let bias = Tensor::zeros(vec![cols]).unwrap();
        let mut tape = Tape::new();
        let y = tape.layer_norm(&x, &gain, &bias, LN_EPS).unwrap();
        for i in 0..rows {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() <= 1e-9);
            prop_assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_affine_matches_plain(rows in 1usize..4, cols in 2usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, vec![rows, cols], -4.0, 4.0);
        let gain = uniform(&mut r, vec![cols], 0.5, 1.5);
        let bias = uniform(&mut r, vec![cols], -0.5, 0.5);
        let ones = Tensor::filled(vec![cols], 1.0).unwrap();
        let zeros = Tensor::zeros(vec![cols]).unwrap();
        let mut tape = Tape::new();
        let fused = tape.layer_norm(&x, &gain, &bias, LN_EPS).unwrap();
        let plain = tape.layer_norm(&x, &ones, &zeros, LN_EPS).unwrap();
        for i in 0..rows {
            for j in 0..cols {
                let want = plain.at(&[i, j]) * gain.at(&[j]) + bias.at(&[j]);
                prop_assert!((fused.at(&[i, j]) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn window_partition_then_merge_restores_the_grid(
        f_pick in 0usize..3, h_pick in 0usize..3, w_pick in 0usize..3,
        fw_pick in 0usize..3, hw_pick in 0usize..3, ww_pick in 0usize..3,
        d in 1usize..6, seed in any::<u64>(),
    ) {
        let extents = [1usize, 2, 4];
        let (f, h, w) = (extents[f_pick], extents[h_pick], extents[w_pick]);
        let divisors = |n: usize| (1..=n).filter(|k| n % k == 0).collect::<Vec<_>>();
        let fd = divisors(f); let hd = divisors(h); let wd = divisors(w);
        let spec = WindowSpec::new(
            fd[fw_pick % fd.len()],
            hd[hw_pick % hd.len()],
            wd[ww_pick % wd.len()],
        );
        let mut r = rng(seed);
        let grid = random_grid(&mut r, f, h, w, d);
        let blocks = partition(&grid, &spec).unwrap();
        prop_assert_eq!(blocks.len(), spec.count(f, h, w));
        for b in &blocks {
            prop_assert_eq!(b.shape(), &[spec.volume(), d]);
        }
        let back = merge(&blocks, f, h, w, &spec).unwrap();
        let grid_rows = &grid.tokens.data()[d..];
        prop_assert_eq!(back.data(), grid_rows);
    }

    #[test]
    fn compact_term_ignores_the_target_logit(
        c in 3usize..7, t_pick in 0usize..7, newt in -20.0..20.0f64, seed in any::<u64>(),
    ) {
        let target = t_pick % c;
        let mut r = rng(seed);
        let logits: Vec<f64> = (0..c).map(|_| r.gen_range(-4.0..4.0)).collect();
        let base = compact_value(&logits, target);
        let mut moved = logits.clone();
        moved[target] = newt;
        prop_assert_eq!(compact_value(&moved, target).to_bits(), base.to_bits());
    }

    #[test]
    fn compact_term_is_shift_invariant_on_non_targets(
        c in 3usize..7, t_pick in 0usize..7, shift in -5.0..5.0f64, seed in any::<u64>(),
    ) {
        let target = t_pick % c;
        let mut r = rng(seed);
        let logits: Vec<f64> = (0..c).map(|_| r.gen_range(-4.0..4.0)).collect();
        let mut shifted = logits.clone();
        for (i, v) in shifted.iter_mut().enumerate() {
            if i != target { *v += shift; }
        }
        let a = compact_value(&logits, target);
        let b = compact_value(&shifted, target);
        prop_assert!((a - b).abs() <= 1e-9, "shift changed the term: {a} vs {b}");
    }

    #[test]
    fn compact_term_is_permutation_invariant_and_nonnegative(
        c in 3usize..7, t_pick in 0usize..7, seed in any::<u64>(),
    ) {
        let target = t_pick % c;
        let mut r = rng(seed);
        let logits: Vec<f64> = (0..c).map(|_| r.gen_range(-4.0..4.0)).collect();
        let base = compact_value(&logits, target);
        prop_assert!(base >= 0.0);
        let mut rev = logits.clone();
        let mut rest: Vec<f64> = (0..c).filter(|&i| i != target).map(|i| logits[i]).collect();
        rest.reverse();
        let mut it = rest.into_iter();
        for (i, v) in rev.iter_mut().enumerate() {
            if i != target { *v = it.next().unwrap(); }
        }
        prop_assert!((compact_value(&rev, target) - base).abs() <= 1e-12);
    }

    #[test]
    fn compact_term_vanishes_exactly_when_non_targets_agree(
        c in 2usize..7, t_pick in 0usize..7, base in -5.0..5.0f64,
        spread in 0.1..3.0f64, seed in any::<u64>(),
    ) {
        let target = t_pick % c;
        let mut r = rng(seed);
        let t_logit = r.gen_range(-4.0..4.0);
        let mut equal = vec![base; c];
        equal[target] = t_logit;
        prop_assert!(compact_value(&equal, target).abs() <= 1e-12);
        if c >= 3 {
            let mut uneven = equal.clone();
            let bump = (0..c).find(|&i| i != target).unwrap();
            uneven[bump] = base + spread;
            prop_assert!(compact_value(&uneven, target) > 1e-8);
        }
    }

    #[test]
    fn cross_entropy_is_shift_invariant_and_positive(
        c in 2usize..7, t_pick in 0usize..7, shift in -30.0..30.0f64, seed in any::<u64>(),
    ) {
        let target = t_pick % c;
        let mut r = rng(seed);
        let logits: Vec<f64> = (0..c).map(|_| r.gen_range(-4.0..4.0)).collect();
        let value = |ls: &[f64]| {
            let mut tape = Tape::new();
            let t = Tensor::new(vec![ls.len()], ls.to_vec()).unwrap();
            tape.cross_entropy(&t, target).unwrap().item()
        };
        let a = value(&logits);
        prop_assert!(a > 0.0);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        prop_assert!((a - value(&shifted)).abs() <= 1e-9);
        // matches the direct formula
        let lse = {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        prop_assert!((a - (lse - logits[target])).abs() <= 1e-12);
    }

    #[test]
    fn recall_metrics_stay_in_bounds(n in 1usize..60, c in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let preds: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let m = evaluate(&preds, &labels, c).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.uar));
        prop_assert!((0.0..=1.0).contains(&m.war));
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        prop_assert!((m.war - correct as f64 / n as f64).abs() <= 1e-12);
        // WAR is the support-weighted mean of per-class recalls
        let mut weighted = 0.0;
        for class in 0..c {
            let support = labels.iter().filter(|&&l| l == class).count();
            weighted += support as f64 * m.per_class_recall[class];
        }
        prop_assert!((m.war - weighted / n as f64).abs() <= 1e-12);
        // UAR averages only the classes that appear
        let supported: Vec<usize> = (0..c)
            .filter(|&class| labels.iter().any(|&l| l == class))
            .collect();
        let mean: f64 = supported.iter().map(|&class| m.per_class_recall[class]).sum::<f64>()
            / supported.len() as f64;
        prop_assert!((m.uar - mean).abs() <= 1e-12);
        prop_assert_eq!(m.zero_support_classes.len(), c - supported.len());
        // confusion rows sum to class support
        for class in 0..c {
            let support = labels.iter().filter(|&&l| l == class).count();
            prop_assert_eq!(m.confusion[class].iter().sum::<u64>(), support as u64);
        }
    }

    #[test]
    fn balanced_support_equates_the_two_recall_means(
        c in 1usize..6, per in 1usize..6, seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let mut labels = Vec::new();
        for class in 0..c {
            labels.extend(std::iter::repeat(class).take(per));
        }
        let preds: Vec<usize> = (0..labels.len()).map(|_| r.gen_range(0..c)).collect();
        let m = evaluate(&preds, &labels, c).unwrap();
        prop_assert!((m.uar - m.war).abs() <= 1e-12);
    }

    #[test]
    fn cost_rows_round_trip_through_the_csv(
        f_pick in 0usize..4, s_pick in 0usize..3,
        fw_pick in 0usize..4, hw_pick in 0usize..3, ww_pick in 0usize..3,
    ) {
        let frames = [2usize, 4, 8, 16][f_pick];
        let side = [2usize, 4, 8][s_pick];
        let divisors = |n: usize| (1..=n).filter(|k| n % k == 0).collect::<Vec<_>>();
        let fd = divisors(frames); let sd = divisors(side);
        let spec = WindowSpec::new(
            fd[fw_pick % fd.len()],
            sd[hw_pick % sd.len()],
            sd[ww_pick % sd.len()],
        );
        let report = cost_report(frames, side, side, &spec).unwrap();
        let csv = cost_csv(&[(frames, side, side, spec.f, spec.h, spec.w)]);
        let mut lines = csv.lines();
        prop_assert_eq!(lines.next().unwrap(), COST_HEADER);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        let want = [
            frames as u64, side as u64, side as u64,
            spec.f as u64, spec.h as u64, spec.w as u64,
            report.cost_local, report.cost_global, report.cost_logo_total,
            report.cost_full, report.cost_spatial_only, report.cost_divided,
            report.cost_mixing,
        ];
        for (cell, value) in row.iter().zip(want.iter()) {
            prop_assert_eq!(cell.parse::<u64>().unwrap(), *value);
        }
        prop_assert_eq!(row[13], if report.ordering_ok() { "true" } else { "false" });
        // the closed forms themselves
        let n = (frames * side * side) as u64;
        let vol = spec.volume() as u64;
        prop_assert_eq!(report.cost_local, n * vol);
        prop_assert_eq!(report.cost_global, n * n / vol);
        prop_assert_eq!(report.cost_logo_total, report.cost_local + report.cost_global);
        prop_assert_eq!(report.cost_full, n * n);
    }

    #[test]
    fn select_rows_with_inverse_restores_the_matrix(rows in 2usize..7, cols in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, vec![rows, cols], -3.0, 3.0);
        let mut perm: Vec<usize> = (0..rows).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut r);
        let mut inverse = vec![0usize; rows];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let mut tape = Tape::new();
        let shuffled = tape.select_rows(&x, &perm).unwrap();
        let back = tape.select_rows(&shuffled, &inverse).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }
}

#[test]
fn fused_compact_term_tracks_the_literal_definition() {
    for seed in 0..50u64 {
        let mut r = rng(seed);
        let c = 2 + (seed as usize % 5);
        let target = seed as usize % c;
        let logits: Vec<f64> = (0..c).map(|_| r.gen_range(-4.0..4.0)).collect();
        let mut tape = Tape::new();
        let t = Tensor::new(vec![c], logits.clone()).unwrap();
        let fused = tape.compact_term(&t, target).unwrap().item();
        let literal = symmetric_uniform_kl(&logits, target);
        assert!(
            (fused - literal).abs() <= 1e-12,
            "seed {seed}: fused {fused} vs literal {literal}"
        );
    }
}
