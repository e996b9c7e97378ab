#![no_main]

use graphcage::harness::data::{parse_jsonl, Example};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ex) = Example::parse_line(text) {
            let line = serde_json::to_string(&ex).unwrap();
            assert_eq!(Example::parse_line(&line).unwrap(), ex);
        }
        let _ = parse_jsonl(text);
    }
});
