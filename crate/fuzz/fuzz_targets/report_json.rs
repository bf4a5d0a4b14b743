#![no_main]
use cap_cli::output::{from_csv, to_csv, to_markdown};
use cap_core::MetricsReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(report) = serde_json::from_slice::<MetricsReport>(data) {
        let _ = to_markdown(std::slice::from_ref(&report));
        if let Ok(csv) = to_csv(std::slice::from_ref(&report)) {
            // Non-finite floats have no CSV form that reads back; skip them.
            if [report.accuracy, report.coverage, report.avg_set_size, report.abstention_rate, report.auarc, report.ece]
                .iter()
                .chain(report.auroc.iter())
                .all(|v| v.is_finite())
            {
                assert_eq!(from_csv(&csv).expect("re-read of written table"), vec![report]);
            }
        }
    }
});
