#![no_main]
use cap_core::RecordSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Accepted input must survive a write/read cycle unchanged.
    if let Ok(set) = RecordSet::from_jsonl_reader(data) {
        let text = set.to_jsonl_string();
        let back = RecordSet::from_jsonl_str(&text).expect("re-read of written records");
        assert_eq!(back, set);
    }
});
