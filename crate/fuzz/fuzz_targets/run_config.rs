#![no_main]

use cvmd::pipeline::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::resolve(Some(text), &[]) {
            let again = RunConfig::resolve(Some(&cfg.to_json()), &[]).expect("written config reloads");
            assert_eq!(again.sha256(), cfg.sha256());
        }
    }
});
