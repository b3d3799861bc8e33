#![no_main]
use libfuzzer_sys::fuzz_target;
use semipair::datamodel::Manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(m) = Manifest::from_json(s) {
            // accepted manifests survive a serialize/parse round trip
            let text = serde_json::to_string(&m).unwrap();
            Manifest::from_json(&text).unwrap();
        }
    }
});
