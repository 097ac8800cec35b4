#![no_main]

use libfuzzer_sys::fuzz_target;
use robusto::config::parse_config_str;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Lines starting with '@' become overrides.
    let (overrides, body): (Vec<&str>, Vec<&str>) = text.lines().partition(|l| l.starts_with('@'));
    let overrides: Vec<String> = overrides.iter().map(|l| l[1..].to_string()).collect();
    if let Ok(cfg) = parse_config_str(&body.join("\n"), None, None, &overrides) {
        let again =
            parse_config_str(&cfg.to_toml(), None, None, &[]).expect("serialized config parses");
        assert_eq!(again.to_toml(), cfg.to_toml());
    }
});
