#![no_main]

use libfuzzer_sys::fuzz_target;
use pathslice::expr::parse_expression;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(e) = parse_expression(text) else { return };
    let printed = e.to_string();
    let again = parse_expression(&printed).unwrap_or_else(|err| panic!("{printed:?} does not reparse: {err}"));
    assert_eq!(again, e, "{text:?} printed as {printed:?}");
    for v in ["q", "p", "t"] {
        let _ = e.derivative(v);
    }
});
