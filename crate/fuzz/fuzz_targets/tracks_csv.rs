//! Track CSV ingestion must reject malformed tables without panicking.
#![no_main]

use cvmd::scenario::{parse_tracks, ColumnMap};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_tracks(data, &ColumnMap::highd(), 25.0, 1);
});
