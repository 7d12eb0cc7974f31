//! The dataset container parser must reject arbitrary input without
//! panicking, over-allocating, or reading out of bounds.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = flowgate::synthdata::Dataset::parse(data);
});
