#![no_main]

use graphcage::tensor::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode();
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), bytes);
    }
});
