#![no_main]

use enclave_consensus::harness::Scenario;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(scn) = Scenario::parse(text) {
            let _ = scn.faults();
        }
    }
});
