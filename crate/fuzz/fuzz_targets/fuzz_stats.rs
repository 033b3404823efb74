//! Latent statistics ride along next to checkpoints as a small JSON file
//! that gets edited by hand more often than any other artifact. The parser
//! must reject garbage, wrong versions, and non-finite numbers without
//! panicking.

#![no_main]

use libfuzzer_sys::fuzz_target;
use nifgen::flowmatch::LatentStats;

fuzz_target!(|data: &[u8]| {
    let _ = LatentStats::parse(data);
});
