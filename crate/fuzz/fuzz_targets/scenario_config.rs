#![no_main]

use libfuzzer_sys::fuzz_target;
use pathslice::config::Scenario;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Err(e) = Scenario::load(s) {
            let _ = e.key();
        }
    }
});
