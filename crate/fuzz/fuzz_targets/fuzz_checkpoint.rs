//! Checkpoints are loaded from disk paths the user supplies, so the decode
//! path sees whatever bytes happen to live there. Truncated headers, lying
//! shape metadata, and absurd sizes must all surface as errors.

#![no_main]

use candle_core::Device;
use libfuzzer_sys::fuzz_target;
use nifgen::checkpoint::parse_checkpoint;

fuzz_target!(|data: &[u8]| {
    let _ = parse_checkpoint(data, &Device::Cpu);
});
