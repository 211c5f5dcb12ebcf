#![no_main]

use cefl::model::ModelParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(model) = ModelParams::from_json(text) {
        let again = ModelParams::from_json(&model.to_json()).expect("re-encoded model decodes");
        assert_eq!(model.to_bytes(), again.to_bytes());
    }
});
