#![no_main]
use libfuzzer_sys::fuzz_target;
use semipair::nn::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        assert_eq!(ck.encode(), data);
    }
});
