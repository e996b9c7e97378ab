#![no_main]

use graphcage::trace::RoutingTrace;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(trace) = RoutingTrace::from_json(text) {
            let _ = trace.max_normalization_error();
            let _ = trace.ascii_heatmap();
            assert_eq!(RoutingTrace::from_json(&trace.to_json()).unwrap(), trace);
        }
    }
});
