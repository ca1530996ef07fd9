//! Oracles shared by the stats tests and the acceptance harness.

use domainfuse::stats::evaluate;

pub fn names(c: usize) -> Vec<String> {
    (0..c).map(|k| format!("c{k}")).collect()
}

/// Counts every confusion cell directly and recomputes all metrics.
pub fn oracle_metrics(y: &[usize], p: &[usize], c: usize) -> Vec<f64> {
    let n = y.len() as f64;
    let mut out = Vec::new();
    let mut acc = 0.0;
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
    let mut per = Vec::new();
    for k in 0..c {
        let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
        for (&t, &q) in y.iter().zip(p) {
            match (t == k, q == k) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        acc += tp;
        let div = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        let prec = div(tp, tp + fp);
        let rec = div(tp, tp + fn_);
        let f1 = div(2.0 * prec * rec, prec + rec);
        let spec = div(tn, tn + fp);
        let support = tp + fn_;
        wp += prec * support / n;
        wr += rec * support / n;
        wf += f1 * support / n;
        mp += prec / c as f64;
        mr += rec / c as f64;
        mf += f1 / c as f64;
        per.extend([prec, rec, f1, spec, support]);
    }
    out.extend([acc / n, wp, wr, wf, mp, mr, mf]);
    out.extend(per);
    out
}

pub fn metrics_vector(y: &[usize], p: &[usize], c: usize) -> Vec<f64> {
    let (cm, m) = evaluate(y, p, &names(c)).unwrap();
    assert_eq!(cm.total(), y.len());
    let mut out = vec![
        m.accuracy,
        m.weighted_precision,
        m.weighted_recall,
        m.weighted_f1,
        m.macro_precision,
        m.macro_recall,
        m.macro_f1,
    ];
    for k in &m.per_class {
        out.extend([k.precision, k.recall, k.f1, k.specificity, k.support as f64]);
    }
    out
}

/// Every count vector over `cells` categories with total `n`.
pub fn compositions(n: usize, cells: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() == cells - 1 {
        prefix.push(n);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for k in 0..=n {
        prefix.push(k);
        compositions(n - k, cells, prefix, out);
        prefix.pop();
    }
}
