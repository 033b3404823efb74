//! Run-configuration TOML is the first thing the binary parses, straight
//! from user-controlled files. Arbitrary text must come back as a clean
//! error, never a panic.

#![no_main]

use libfuzzer_sys::fuzz_target;
use nifgen::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = RunConfig::parse(text);
    }
});
