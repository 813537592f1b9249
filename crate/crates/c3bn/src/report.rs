//! CSV and text renderings of logs, proposals, and evaluation results.

use std::fmt::Write as _;

use c3bn_core::eval::{EvalReport, SwapTable};
use c3bn_core::infer::Proposal;
use c3bn_core::losses::LossReport;
use c3bn_core::train::TrainLog;

pub fn train_log_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch,term,value\n");
    for r in &log.epochs {
        for (term, v) in LossReport::TERMS.iter().zip(r.means.values()) {
            let _ = writeln!(s, "{},{term},{v:.9}", r.epoch);
        }
        if let Some(e) = r.eval {
            let _ = writeln!(s, "{},avg_map,{:.9}", r.epoch, e.avg_map);
            let _ = writeln!(s, "{},entropy,{:.9}", r.epoch, e.entropy);
        }
    }
    s
}

/// Sorted by video id, then score descending; remaining ties by class and
/// start time.
pub fn sorted_proposals(proposals: &[Proposal]) -> Vec<Proposal> {
    let mut v = proposals.to_vec();
    v.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(b.score.total_cmp(&a.score))
            .then(a.class_id.cmp(&b.class_id))
            .then(a.t_start.total_cmp(&b.t_start))
            .then(a.t_end.total_cmp(&b.t_end))
    });
    v
}

pub fn proposals_csv(proposals: &[Proposal]) -> String {
    let mut s = String::from("video_id,class_id,t_start,t_end,score\n");
    for p in sorted_proposals(proposals) {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6}",
            p.video_id, p.class_id, p.t_start, p.t_end, p.score
        );
    }
    s
}

fn thr(t: f64) -> String {
    format!("{t:.2}")
}

/// One row per class and threshold, then mAP per threshold, the average,
/// the optional entropy, and the seed.
pub fn eval_csv(r: &EvalReport, seed: u64) -> String {
    let mut s = String::from("row,class_id,tiou,value\n");
    for (c, aps) in r.per_class_ap.iter().enumerate() {
        for (t, ap) in r.thresholds.iter().zip(aps) {
            if let Some(ap) = ap {
                let _ = writeln!(s, "ap,{c},{},{ap:.6}", thr(*t));
            }
        }
    }
    for (t, m) in r.thresholds.iter().zip(&r.map) {
        let _ = writeln!(s, "map,,{},{m:.6}", thr(*t));
    }
    let _ = writeln!(s, "avg_map,,,{:.6}", r.avg_map);
    if let Some(h) = r.entropy {
        let _ = writeln!(s, "entropy,,,{h:.6}");
    }
    let _ = writeln!(s, "seed,,,{seed}");
    s
}

fn table_header(thresholds: &[f64], label_width: usize) -> String {
    let mut s = format!("{:<label_width$}", "tIoU");
    for t in thresholds {
        let _ = write!(s, " {:>6}", format!("{t}"));
    }
    s.push_str("    AVG");
    s
}

/// mAP values in percent, one column per threshold plus `AVG`.
pub fn eval_table(r: &EvalReport) -> String {
    let w = 8;
    let mut s = table_header(&r.thresholds, w);
    s.push('\n');
    let _ = write!(s, "{:<w$}", "mAP");
    for m in &r.map {
        let _ = write!(s, " {:>6.2}", 100.0 * m);
    }
    let _ = writeln!(s, " {:>6.2}", 100.0 * r.avg_map);
    if let Some(h) = r.entropy {
        let _ = writeln!(s, "{:<w$} {h:.4}", "H(d_t)");
    }
    s
}

pub fn ablation_csv(t: &SwapTable, seed: u64) -> String {
    let mut s = String::from("combination,tiou,map\n");
    for (label, r) in &t.cells {
        for (th, m) in r.thresholds.iter().zip(&r.map) {
            let _ = writeln!(s, "{label},{},{m:.6}", thr(*th));
        }
        let _ = writeln!(s, "{label},AVG,{:.6}", r.avg_map);
    }
    let _ = writeln!(s, "seed,,{seed}");
    s
}

pub fn ablation_table(t: &SwapTable) -> String {
    let w = 14;
    let Some((_, first)) = t.cells.first() else {
        return String::new();
    };
    let mut s = table_header(&first.thresholds, w);
    s.push('\n');
    for (label, r) in &t.cells {
        // labels contain multi-byte circled digits; pad by char count
        let pad = w.saturating_sub(label.chars().count());
        let _ = write!(s, "{label}{}", " ".repeat(pad));
        for m in &r.map {
            let _ = write!(s, " {:>6.2}", 100.0 * m);
        }
        let _ = writeln!(s, " {:>6.2}", 100.0 * r.avg_map);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use c3bn_core::losses::LossReport;
    use c3bn_core::train::{EpochRecord, EvalSnapshot};

    fn report() -> EvalReport {
        EvalReport {
            thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            per_class_ap: vec![vec![Some(1.0); 7], vec![None; 7]],
            map: vec![1.0, 1.0, 0.9, 0.8, 0.7, 0.6, 0.5],
            avg_map: 0.8,
            entropy: Some(0.07),
            n_proposals: 3,
            n_gt: 2,
        }
    }

    #[test]
    fn proposals_sorted_and_formatted() {
        let p = |v: &str, s: f64| Proposal {
            video_id: v.into(),
            class_id: 1,
            t_start: 0.5,
            t_end: 1.0 / 3.0,
            score: s,
        };
        let csv = proposals_csv(&[p("b", 0.9), p("a", 0.1), p("a", 0.7)]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "video_id,class_id,t_start,t_end,score");
        assert_eq!(lines[1], "a,1,0.500000,0.333333,0.700000");
        assert_eq!(lines[2], "a,1,0.500000,0.333333,0.100000");
        assert!(lines[3].starts_with("b,"));
    }

    #[test]
    fn eval_table_has_ladder_columns() {
        let t = eval_table(&report());
        let header: Vec<_> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, ["tIoU", "0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "AVG"]);
        let row: Vec<_> = t.lines().nth(1).unwrap().split_whitespace().collect();
        assert_eq!(row.len(), 9);
        assert_eq!(row[8], "80.00");
        assert!(t.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["H(d_t)", "0.0700"]));
        let csv = eval_csv(&report(), 3);
        assert_eq!(csv.lines().filter(|l| l.starts_with("ap,")).count(), 7);
        assert!(csv.contains("avg_map,,,0.800000"));
        assert!(csv.ends_with("seed,,,3\n"));
    }

    #[test]
    fn log_rows_per_term() {
        let log = TrainLog {
            epochs: vec![EpochRecord {
                epoch: 0,
                means: LossReport::default(),
                eval: Some(EvalSnapshot {
                    avg_map: 0.5,
                    entropy: 0.1,
                }),
            }],
            step_totals: vec![],
        };
        let csv = train_log_csv(&log);
        assert_eq!(csv.lines().count(), 1 + 6 + 2);
        assert!(csv.contains("0,avg_map,0.500000000"));
    }
}
