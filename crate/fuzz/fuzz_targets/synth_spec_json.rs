#![no_main]
use libfuzzer_sys::fuzz_target;
use semipair::datamodel::SynthSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = serde_json::from_str::<SynthSpec>(s) {
        let _ = spec.validate();
    }
});
