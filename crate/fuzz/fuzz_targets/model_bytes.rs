#![no_main]

use cefl::model::ModelParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = ModelParams::from_bytes(data) {
        // A decoded buffer is canonical: encoding it gives the input back.
        assert_eq!(model.to_bytes(), data);
    }
});
