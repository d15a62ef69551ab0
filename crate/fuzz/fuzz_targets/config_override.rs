//! Each input line is one `section.key=value` override on the default config.
#![no_main]

use cvmd::pipeline::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let overrides: Vec<String> = text.lines().map(String::from).collect();
        let _ = RunConfig::resolve(None, &overrides);
    }
});
