//! Scenario fixtures shared by the benchmarks.

use dot_core::harness::Scenario;

const SOURCES: &[(&str, &str)] = &[
    ("optimistic_pay", include_str!("../../../scenarios/optimistic_pay.json")),
    ("optimistic_swap", include_str!("../../../scenarios/optimistic_swap.json")),
    ("swap_responder_crash", include_str!("../../../scenarios/swap_responder_crash.json")),
    ("dtc_optimistic_pay", include_str!("../../../scenarios/dtc_optimistic_pay.json")),
    ("dtc_optimistic_swap", include_str!("../../../scenarios/dtc_optimistic_swap.json")),
    ("pay_fan_in", include_str!("../../../scenarios/pay_fan_in.json")),
];

/// A bundled scenario by file stem.
pub fn bundled(name: &str) -> Scenario {
    let (_, src) = SOURCES.iter().find(|(n, _)| *n == name).unwrap_or_else(|| panic!("no bundled scenario {name}"));
    Scenario::from_json(src).expect("bundled scenarios validate")
}

pub fn names() -> impl Iterator<Item = &'static str> {
    SOURCES.iter().map(|(n, _)| *n)
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_fixture_parses() {
        for n in super::names() {
            super::bundled(n);
        }
    }
}
