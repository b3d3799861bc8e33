#![no_main]
use libfuzzer_sys::fuzz_target;
use semipair::datamodel::decode_mask_planes;

fuzz_target!(|data: &[u8]| {
    if data.len() < 3 {
        return;
    }
    let (r, h, w) = (data[0] as usize % 4, data[1] as usize % 17, data[2] as usize % 17);
    if let Ok(mask) = decode_mask_planes(&data[3..], r, h, w) {
        assert_eq!(mask.dim(), (r, h, w));
        assert!(mask.iter().all(|&v| v <= 1));
    }
});
