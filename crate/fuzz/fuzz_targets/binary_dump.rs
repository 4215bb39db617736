#![no_main]
use libfuzzer_sys::fuzz_target;

use pathslice::dump::{decode, encode_covariant, encode_kernel, encode_symbol, Dump};

fuzz_target!(|data: &[u8]| {
    let Ok(d) = decode(data) else { return };
    // anything accepted must survive a second trip
    let bytes = match &d {
        Dump::Symbol(s) => encode_symbol(s),
        Dump::Kernel(k) => encode_kernel(k),
        Dump::Covariant { chart, grid, hbar, symbol } => encode_covariant(chart, *grid, *hbar, symbol),
    };
    decode(&bytes).expect("re-encoded dump decodes");
});
