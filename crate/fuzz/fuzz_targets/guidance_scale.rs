#![no_main]

use cvmd::pipeline::GuidanceScale;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(w) = text.parse::<GuidanceScale>() {
            let _ = w.label();
        }
    }
});
