#![no_main]

use enclave_consensus::dump::{parse_committees, render_committees};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(specs) = parse_committees(text) {
            assert_eq!(parse_committees(&render_committees(&specs)).as_ref(), Ok(&specs));
        }
    }
});
