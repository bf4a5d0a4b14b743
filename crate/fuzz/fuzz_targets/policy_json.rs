#![no_main]
use cap_core::trainer::PolicyDocument;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(doc) = PolicyDocument::from_json(text) {
        // A validated document always yields in-box greedy levels.
        let (alpha, beta) = doc.greedy_actions().expect("validated policy");
        assert!(doc.boxes.alpha.contains(alpha));
        assert!(beta <= alpha);
    }
});
