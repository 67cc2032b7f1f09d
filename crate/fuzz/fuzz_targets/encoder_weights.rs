#![no_main]

use cdasr::vit::VitWeights;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = VitWeights::from_safetensors(data, None);
});
