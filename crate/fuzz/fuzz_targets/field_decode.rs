#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frames) = meanfield::io::decode_fields(data) {
        let bytes = meanfield::io::encode_fields(&frames).unwrap();
        assert_eq!(bytes.as_slice(), data);
    }
});
