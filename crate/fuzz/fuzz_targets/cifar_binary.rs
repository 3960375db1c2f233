#![no_main]

use htcn::data::{encode_cifar_records, parse_cifar_records, CifarVariant};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    for variant in [CifarVariant::Cifar10, CifarVariant::Cifar100Coarse, CifarVariant::Cifar100Fine] {
        if let Ok(records) = parse_cifar_records(data, variant) {
            assert_eq!(encode_cifar_records(&records), data);
            for r in &records {
                assert!(r.label(variant) < variant.classes());
                let img = r.to_image();
                assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
});
