#![no_main]
use cap_core::trainer::{read_trace_csv, write_trace_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_trace_csv(data) {
        let mut out = Vec::new();
        write_trace_csv(&rows, &mut out).expect("write of parsed rows");
        let _ = read_trace_csv(out.as_slice());
    }
});
