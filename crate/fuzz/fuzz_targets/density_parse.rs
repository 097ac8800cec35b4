#![no_main]

use libfuzzer_sys::fuzz_target;
use robusto::io::parse_density;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(field) = parse_density(text, "fuzz") {
        assert_eq!(field.values.len(), field.nx * field.ny);
        assert!(field.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let back = parse_density(&field.to_text(), "fuzz").expect("written field parses");
        assert_eq!(back, field);
    }
});
