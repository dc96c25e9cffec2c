#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frames) = meanfield::io::decode_trajectory(data) {
        assert_eq!(
            frames.states.len(),
            (frames.steps + 1) * frames.count * frames.dim
        );
    }
});
