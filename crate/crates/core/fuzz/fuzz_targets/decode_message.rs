#![no_main]

use enclave_consensus::message::ProtocolMessage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(msg) = ProtocolMessage::decode_bytes(data) {
        // Canonical encoding: anything accepted re-encodes to the same bytes.
        assert_eq!(msg.encode_bytes(), data);
    }
});
