#![no_main]

use htcn::model::{decode_archive, encode_archive, load_checkpoint, save_checkpoint, Archive};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // decoding only accepts canonical bytes, so a re-encode must match
    if let Ok(a) = decode_archive::<f32>(data) {
        assert_eq!(encode_archive(&a), data);
    }
    if let Ok(a) = decode_archive::<f64>(data) {
        let a: Archive<f64> = a;
        assert_eq!(encode_archive(&a), data);
    }
    if let Ok(p) = load_checkpoint::<f64>(data) {
        assert_eq!(save_checkpoint(&p), data);
    }
    if let Ok(p) = load_checkpoint::<f32>(data) {
        assert_eq!(save_checkpoint(&p), data);
    }
});
