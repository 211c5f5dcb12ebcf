#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Malformed rows must surface as errors, never as panics.
    if let Ok(recordings) = cefl::data::ingest_csv_reader(data) {
        for rec in &recordings {
            assert!(!rec.signal.is_empty());
            assert!(rec.activity_class < cefl::data::NUM_CLASSES);
        }
    }
});
