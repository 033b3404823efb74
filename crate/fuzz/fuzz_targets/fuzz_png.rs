//! The reconstruct command decodes arbitrary image files. The decoder is a
//! third-party crate, but our wrapper adds resizing and tensor conversion;
//! fuzz the whole path from raw bytes to tensor.

#![no_main]

use candle_core::Device;
use libfuzzer_sys::fuzz_target;
use nifgen::image_io::decode_image_bytes;

fuzz_target!(|data: &[u8]| {
    let _ = decode_image_bytes(data, &Device::Cpu);
});
