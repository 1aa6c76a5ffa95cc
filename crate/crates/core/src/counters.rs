use serde::{Deserialize, Serialize};

/// Cost-accounting counters owned by one evaluation context.
///
/// Counters are never global: every run, probe pair or worker owns its own
/// instance and they are summed explicitly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub forwards: u64,
    pub backwards: u64,
    pub blends: u64,
    pub inner_products: u64,
}

impl Counters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn merge(&mut self, other: &Counters) {
        self.forwards += other.forwards;
        self.backwards += other.backwards;
        self.blends += other.blends;
        self.inner_products += other.inner_products;
    }

    /// Counter growth since `earlier`.
    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            forwards: self.forwards - earlier.forwards,
            backwards: self.backwards - earlier.backwards,
            blends: self.blends - earlier.blends,
            inner_products: self.inner_products - earlier.inner_products,
        }
    }
}
