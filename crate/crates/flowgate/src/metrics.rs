//! Flow-quality metrics and report assembly.
//!
//! End-point error (EPE) is the mean Euclidean flow error over valid
//! pixels; F1-all is the fraction of valid pixels that are outliers
//! (error > 3 px and > 5% of the ground-truth magnitude — the
//! denominator is ground truth, with a 1e-8 floor, so the metric stays
//! meaningful for degenerate predictions). The bottleneck statistic
//! finds, per sample, the earliest iteration whose EPE is already
//! within a tolerance of the sequence's best, and reports the
//! distribution over iterations. Metrics are unit-agnostic: callers
//! scale feature-grid flows to image pixels before evaluating.

use crate::error::{Error, Result};
use crate::synthdata::Difficulty;
use crate::tensor::{shape_str, Tensor};
use std::fmt::Write as _;

fn per_pixel_errors(f: &Tensor, f_gt: &Tensor, valid: &[bool]) -> Result<Vec<(f64, f64)>> {
    let s = f.shape();
    if s != f_gt.shape() {
        return Err(Error::shape("metrics", shape_str(s), shape_str(f_gt.shape())));
    }
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::shape("metrics", "[2, h, w] flow", shape_str(s)));
    }
    let px = s[1] * s[2];
    if valid.len() != px {
        return Err(Error::shape(
            "metrics",
            format!("valid mask [{px}]"),
            format!("[{}]", valid.len()),
        ));
    }
    let out: Vec<(f64, f64)> = (0..px)
        .filter(|&p| valid[p])
        .map(|p| {
            let dx = f.data()[p] - f_gt.data()[p];
            let dy = f.data()[px + p] - f_gt.data()[px + p];
            let gx = f_gt.data()[p];
            let gy = f_gt.data()[px + p];
            ((dx * dx + dy * dy).sqrt(), (gx * gx + gy * gy).sqrt())
        })
        .collect();
    if out.is_empty() {
        return Err(Error::contract("metrics: no valid pixels"));
    }
    Ok(out)
}

/// Mean end-point error over valid pixels.
pub fn epe(f: &Tensor, f_gt: &Tensor, valid: &[bool]) -> Result<f64> {
    let errs = per_pixel_errors(f, f_gt, valid)?;
    Ok(errs.iter().map(|(e, _)| e).sum::<f64>() / errs.len() as f64)
}

/// Outlier fraction: per-pixel error > 3 px and > 5% of the ground-truth
/// magnitude (floored at 1e-8).
pub fn f1_all(f: &Tensor, f_gt: &Tensor, valid: &[bool]) -> Result<f64> {
    let errs = per_pixel_errors(f, f_gt, valid)?;
    let outliers = errs
        .iter()
        .filter(|(e, mag)| *e > 3.0 && *e / mag.max(1e-8) > 0.05)
        .count();
    Ok(outliers as f64 / errs.len() as f64)
}

/// Earliest iteration (1-based) whose EPE is within `tol` of the
/// sequence's minimum.
pub fn bottleneck_step(epe_sequence: &[f64], tol: f64) -> Result<usize> {
    if epe_sequence.is_empty() {
        return Err(Error::contract("bottleneck_step: empty sequence"));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::contract(format!(
            "bottleneck_step: tolerance must be positive, got {tol}"
        )));
    }
    let best = epe_sequence.iter().cloned().fold(f64::INFINITY, f64::min);
    epe_sequence
        .iter()
        .position(|&e| (e - best).abs() < tol)
        .map(|i| i + 1)
        .ok_or_else(|| Error::contract("bottleneck_step: non-finite sequence"))
    // The minimum itself satisfies the bound, so `position` only fails
    // when the sequence contains NaN.
}

/// Percentage distribution of bottleneck steps over a sample set. All
/// sequences must share one length `T`; the result has `T` entries
/// summing to 100.
pub fn bottleneck_histogram(epe_sequences: &[Vec<f64>], tol: f64) -> Result<Vec<f64>> {
    let t = match epe_sequences.first() {
        Some(s) => s.len(),
        None => return Err(Error::contract("bottleneck_histogram: empty sample set")),
    };
    let mut counts = vec![0usize; t];
    for seq in epe_sequences {
        if seq.len() != t {
            return Err(Error::contract(format!(
                "bottleneck_histogram: sequence length {} != {t}",
                seq.len()
            )));
        }
        counts[bottleneck_step(seq, tol)? - 1] += 1;
    }
    let total = epe_sequences.len() as f64;
    Ok(counts.iter().map(|&c| 100.0 * c as f64 / total).collect())
}

/// One evaluated sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleEval {
    pub difficulty: Difficulty,
    /// Budget the sample was evaluated under.
    pub r: f64,
    pub epe: f64,
    pub f1_all: f64,
    pub updates_entered: usize,
    pub flops_total: u64,
}

/// One aggregated report row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub r: f64,
    pub group: String,
    pub n: usize,
    pub epe_mean: f64,
    pub f1_all: f64,
    pub updates_mean: f64,
    pub flops_mean: f64,
}

/// Groups evaluations by budget `r` (then "all"/"easy"/"hard") and
/// averages each group. Rows come out ordered by ascending `r`, then
/// group name.
pub fn aggregate_report(evals: &[SampleEval]) -> Result<Vec<ReportRow>> {
    if evals.is_empty() {
        return Err(Error::contract("aggregate_report: no evaluations"));
    }
    let mut r_values: Vec<f64> = evals.iter().map(|e| e.r).collect();
    r_values.sort_by(|a, b| a.partial_cmp(b).expect("finite r"));
    r_values.dedup();
    let mut rows = Vec::new();
    for &r in &r_values {
        let at_r: Vec<&SampleEval> = evals.iter().filter(|e| e.r == r).collect();
        for group in ["all", "easy", "hard"] {
            let members: Vec<&&SampleEval> = at_r
                .iter()
                .filter(|e| match group {
                    "easy" => e.difficulty == Difficulty::Easy,
                    "hard" => e.difficulty == Difficulty::Hard,
                    _ => true,
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            rows.push(ReportRow {
                r,
                group: group.to_string(),
                n: members.len(),
                epe_mean: members.iter().map(|e| e.epe).sum::<f64>() / n,
                f1_all: members.iter().map(|e| e.f1_all).sum::<f64>() / n,
                updates_mean: members.iter().map(|e| e.updates_entered as f64).sum::<f64>() / n,
                flops_mean: members.iter().map(|e| e.flops_total as f64).sum::<f64>() / n,
            });
        }
    }
    Ok(rows)
}

/// Serializes report rows with a schema-tagged comment line and one
/// column-header row. Floats use the shortest round-trip form, so output
/// bytes are reproducible.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("# schema: flowgate-report-v1\n");
    out.push_str("r,group,n,epe_mean,f1_all,updates_mean,flops_mean\n");
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.r, row.group, row.n, row.epe_mean, row.f1_all, row.updates_mean, row.flops_mean
        )
        .expect("string write");
    }
    out
}

/// Serializes a bottleneck histogram (`t` is 1-based).
pub fn histogram_csv(histogram: &[f64]) -> String {
    let mut out = String::from("# schema: flowgate-bottleneck-v1\n");
    out.push_str("t,percent\n");
    for (i, p) in histogram.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, p).expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flow(h: usize, w: usize, fx: f64, fy: f64) -> Tensor {
        let mut data = vec![fx; h * w];
        data.extend(vec![fy; h * w]);
        Tensor::from_vec(&[2, h, w], data).unwrap()
    }

    #[test]
    fn epe_matches_hand_values() {
        let valid = vec![true; 6];
        // 3-4-5 triangle everywhere.
        let f = flow(2, 3, 3.0, 4.0);
        let gt = flow(2, 3, 0.0, 0.0);
        assert_eq!(epe(&f, &gt, &valid).unwrap(), 5.0);
        assert_eq!(epe(&gt, &gt, &valid).unwrap(), 0.0);
    }

    #[test]
    fn epe_averages_over_valid_pixels_only() {
        // Two valid pixels with errors 5 and 0 -> 2.5; an invalid pixel
        // with a huge error must not contribute.
        let mut f = flow(1, 3, 0.0, 0.0);
        f.data_mut()[0] = 3.0;
        f.data_mut()[3] = 4.0; // pixel 0: error (3,4)
        f.data_mut()[2] = 1e9; // pixel 2: masked out
        let gt = flow(1, 3, 0.0, 0.0);
        let valid = vec![true, true, false];
        assert_eq!(epe(&f, &gt, &valid).unwrap(), 2.5);
        assert!(epe(&f, &gt, &[false, false, false]).is_err());
    }

    #[test]
    fn f1_all_applies_both_thresholds() {
        let valid = vec![true; 4];
        // Error 5 against magnitude 10: ratio 0.5 -> outlier everywhere.
        let gt = flow(2, 2, 10.0, 0.0);
        let f = flow(2, 2, 5.0, 0.0);
        assert_eq!(f1_all(&f, &gt, &valid).unwrap(), 1.0);
        // Error 4 against magnitude 100: ratio 0.04 -> no outliers.
        let gt = flow(2, 2, 100.0, 0.0);
        let f = flow(2, 2, 96.0, 0.0);
        assert_eq!(f1_all(&f, &gt, &valid).unwrap(), 0.0);
        // Error 2.9 fails the absolute threshold regardless of ratio.
        let gt = flow(2, 2, 0.0, 0.0);
        let f = flow(2, 2, 2.9, 0.0);
        assert_eq!(f1_all(&f, &gt, &valid).unwrap(), 0.0);
        // Zero ground truth with a large error: the floor keeps the
        // ratio finite and flags the pixel.
        let f = flow(2, 2, 4.0, 0.0);
        assert_eq!(f1_all(&f, &gt, &valid).unwrap(), 1.0);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let px = 24;
        let mk = |r: &mut ChaCha8Rng| {
            Tensor::from_vec(
                &[2, 4, 6],
                (0..2 * px).map(|_| r.gen_range(-6.0..6.0)).collect(),
            )
            .unwrap()
        };
        let f = mk(&mut rng);
        let gt = mk(&mut rng);
        let valid: Vec<bool> = (0..px).map(|_| rng.gen_bool(0.7)).collect();
        let base_epe = epe(&f, &gt, &valid).unwrap();
        let base_f1 = f1_all(&f, &gt, &valid).unwrap();
        let mut perm: Vec<usize> = (0..px).collect();
        perm.shuffle(&mut rng);
        let apply = |t: &Tensor| {
            let mut data = vec![0.0; 2 * px];
            for (new, &old) in perm.iter().enumerate() {
                data[new] = t.data()[old];
                data[px + new] = t.data()[px + old];
            }
            Tensor::from_vec(&[2, 4, 6], data).unwrap()
        };
        let valid_p: Vec<bool> = perm.iter().map(|&old| valid[old]).collect();
        assert!((epe(&apply(&f), &apply(&gt), &valid_p).unwrap() - base_epe).abs() < 1e-12);
        assert!((f1_all(&apply(&f), &apply(&gt), &valid_p).unwrap() - base_f1).abs() < 1e-12);
    }

    #[test]
    fn bottleneck_step_scans_for_the_earliest_near_best() {
        // Best is 2.0 at step 3; later refinements stay within 0.01.
        let seq = vec![5.0, 3.0, 2.0, 2.005, 2.001, 2.0005];
        assert_eq!(bottleneck_step(&seq, 0.01).unwrap(), 3);
        // Every step improves by more than the tolerance: bottleneck is
        // the final step.
        let falling = vec![5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(bottleneck_step(&falling, 0.01).unwrap(), 5);
        // A plateau that re-dips: the first arrival inside the band wins.
        let dip = vec![4.0, 1.004, 1.2, 1.0];
        assert_eq!(bottleneck_step(&dip, 0.01).unwrap(), 2);
    }

    #[test]
    fn histogram_sums_to_one_hundred_and_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let seqs: Vec<Vec<f64>> = (0..57)
            .map(|_| (0..8).map(|_| rng.gen_range(0.5..6.0)).collect())
            .collect();
        let hist = bottleneck_histogram(&seqs, 0.01).unwrap();
        assert_eq!(hist.len(), 8);
        assert!((hist.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        let shifted: Vec<Vec<f64>> = seqs
            .iter()
            .map(|s| s.iter().map(|e| e + 17.25).collect())
            .collect();
        assert_eq!(bottleneck_histogram(&shifted, 0.01).unwrap(), hist);
    }

    #[test]
    fn histogram_rejects_ragged_or_empty_input() {
        assert!(bottleneck_histogram(&[], 0.01).is_err());
        let ragged = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(bottleneck_histogram(&ragged, 0.01).is_err());
        assert!(bottleneck_step(&[1.0], 0.0).is_err());
    }

    fn eval(difficulty: Difficulty, r: f64, epe: f64) -> SampleEval {
        SampleEval {
            difficulty,
            r,
            epe,
            f1_all: 0.25,
            updates_entered: 4,
            flops_total: 1_000,
        }
    }

    #[test]
    fn report_groups_and_averages_per_budget() {
        let evals = vec![
            eval(Difficulty::Easy, 0.6, 1.0),
            eval(Difficulty::Hard, 0.6, 3.0),
            eval(Difficulty::Easy, 0.3, 2.0),
        ];
        let rows = aggregate_report(&evals).unwrap();
        let keys: Vec<(f64, &str)> = rows.iter().map(|r| (r.r, r.group.as_str())).collect();
        assert_eq!(
            keys,
            vec![(0.3, "all"), (0.3, "easy"), (0.6, "all"), (0.6, "easy"), (0.6, "hard")]
        );
        let all_06 = &rows[2];
        assert_eq!(all_06.n, 2);
        assert!((all_06.epe_mean - 2.0).abs() < 1e-10);
        assert!((all_06.updates_mean - 4.0).abs() < 1e-10);
        assert!((all_06.flops_mean - 1_000.0).abs() < 1e-10);
    }

    #[test]
    fn csv_output_is_deterministic_and_schema_tagged() {
        let rows = aggregate_report(&[eval(Difficulty::Easy, 0.5, 1.5)]).unwrap();
        let text = report_csv(&rows);
        assert_eq!(
            text,
            "# schema: flowgate-report-v1\n\
             r,group,n,epe_mean,f1_all,updates_mean,flops_mean\n\
             0.5,all,1,1.5,0.25,4,1000\n\
             0.5,easy,1,1.5,0.25,4,1000\n"
        );
        let hist = histogram_csv(&[25.0, 75.0]);
        assert_eq!(
            hist,
            "# schema: flowgate-bottleneck-v1\nt,percent\n1,25\n2,75\n"
        );
    }
}
