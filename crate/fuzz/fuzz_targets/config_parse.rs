//! The run-config parser must handle arbitrary byte input (including
//! invalid UTF-8) without panicking.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = flowgate::config::parse_config_bytes(data);
});
