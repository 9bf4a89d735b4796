use forecite::evaluation::MetricReport;

/// 200 prediction/target pairs whose metrics round to a known table row.
fn fixture() -> (Vec<f64>, Vec<f64>) {
    let text = include_str!("fixtures/golden_report.csv");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("pred,truth"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (p, t) = l.split_once(',').unwrap();
            (p.parse::<f64>().unwrap(), t.parse::<f64>().unwrap())
        })
        .unzip()
}

#[test]
fn report_row_matches_golden_values() {
    let (pred, truth) = fixture();
    assert_eq!(pred.len(), 200);
    let report = MetricReport::compute(&pred, &truth).unwrap();
    assert_eq!(report.n, 200);
    assert_eq!(report.table_row(), "0.844 | 0.826 | 0.706 | 0.452 | 0.522");
}
