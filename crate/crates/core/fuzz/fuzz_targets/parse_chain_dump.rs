#![no_main]

use enclave_consensus::dump::parse_chain_dump;
use enclave_consensus::harness::verify::recompute;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(dump) = parse_chain_dump(text) {
            let _ = recompute(&dump, dump.head_height() + 1, 0);
        }
    }
});
