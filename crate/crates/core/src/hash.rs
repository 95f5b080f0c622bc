//! Content hashes for artifacts and their provenance chain.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::grid::{write_case, GridCase};

/// Keys holding wall-clock measurements; dropped before hashing.
pub const TIMING_KEYS: &[&str] = &["wall_time_s", "cpu_s"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Remove timing fields at every nesting level.
pub fn strip_timings(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.retain(|k, _| !TIMING_KEYS.contains(&k.as_str()));
            map.values_mut().for_each(strip_timings);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

/// Hash of the compact JSON form (keys sorted) with timings removed.
pub fn json_hash<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    strip_timings(&mut v);
    Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
}

/// Hash of the canonical case text plus the uncertain-bus designation.
pub fn case_hash(case: &GridCase) -> String {
    let mut text = write_case(case);
    let ids: Vec<String> = case.uncertain_buses.iter().map(|&b| case.buses[b].id.to_string()).collect();
    text.push_str(&format!("% uncertain {}\n", ids.join(" ")));
    sha256_hex(text.as_bytes())
}
