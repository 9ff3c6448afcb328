#![no_main]

use libfuzzer_sys::fuzz_target;
use udig_core::persistence::parse_trace_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(t) = parse_trace_csv(text) {
            assert_eq!(t.iterations.len(), t.psnr_db.len());
            assert_eq!(t.ssim.len(), t.data_loss.len());
        }
    }
});
