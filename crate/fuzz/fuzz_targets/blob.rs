#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(arrays) = cvmd::blob::decode_all(data) {
        let mut out = Vec::new();
        for (shape, values) in &arrays {
            cvmd::blob::encode_array(shape, values, &mut out);
        }
        let again = cvmd::blob::decode_all(&out).expect("re-encoded blob decodes");
        assert_eq!(again.len(), arrays.len());
    }
});
