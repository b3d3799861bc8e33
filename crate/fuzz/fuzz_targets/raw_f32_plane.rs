#![no_main]
use libfuzzer_sys::fuzz_target;
use semipair::datamodel::decode_f32_plane;

fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let (h, w) = (data[0] as usize % 17, data[1] as usize % 17);
    let body = &data[2..];
    if let Ok(plane) = decode_f32_plane(body, h, w) {
        assert_eq!(plane.dim(), (h, w));
        assert_eq!(body.len(), 4 * h * w);
    }
});
