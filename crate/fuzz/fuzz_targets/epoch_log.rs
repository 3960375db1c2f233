#![no_main]

use htcn::trainer::{curves_csv, parse_epoch_log};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_epoch_log(text) {
        let csv = curves_csv(text).expect("a parsed log converts");
        assert_eq!(csv.lines().count(), records.len() + 1);
    }
});
