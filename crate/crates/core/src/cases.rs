//! Standard IEEE test systems shipped with the crate (MATPOWER format).

/// IEEE 9-bus, 3-generator system.
pub const CASE9: &str = include_str!("../cases/case9.m");

/// IEEE 39-bus New England system.
pub const CASE39: &str = include_str!("../cases/case39.m");

/// Look up a bundled case by name (`case9`, `case39`).
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "case9" => Some(CASE9),
        "case39" => Some(CASE39),
        _ => None,
    }
}
