#![no_main]

use libfuzzer_sys::fuzz_target;
use skinseg::relabel::parse_journal;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_journal(text) {
        let rendered: String = entries.iter().map(|e| format!("{e}\n")).collect();
        assert_eq!(
            parse_journal(&rendered).expect("rendered journal parses").len(),
            entries.len()
        );
    }
});
