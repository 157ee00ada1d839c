use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::gmm::Motion;
use crate::scene::GaussianMap;

/// Consecutive static frames needed before a dynamic object is reintroduced.
pub const DEFAULT_STATIC_STREAK: u32 = 3;

/// Life cycle of every object ID seen so far. An ID is in the dynamic set iff its
/// state is `Dynamic`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicObjectRegistry {
    state: BTreeMap<u32, Motion>,
    static_streak: BTreeMap<u32, u32>,
    required_streak: u32,
}

impl Default for DynamicObjectRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_STATIC_STREAK)
    }
}

impl DynamicObjectRegistry {
    pub fn new(required_streak: u32) -> Self {
        Self {
            state: BTreeMap::new(),
            static_streak: BTreeMap::new(),
            required_streak: required_streak.max(1),
        }
    }

    pub fn state(&self, id: u32) -> Option<Motion> {
        self.state.get(&id).copied()
    }

    pub fn static_streak(&self, id: u32) -> u32 {
        self.static_streak.get(&id).copied().unwrap_or(0)
    }

    pub fn is_dynamic(&self, id: u32) -> bool {
        self.state(id) == Some(Motion::Dynamic)
    }

    pub fn dynamic_set(&self) -> BTreeSet<u32> {
        self.state
            .iter()
            .filter(|(_, s)| **s == Motion::Dynamic)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn known_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.state.keys().copied()
    }

    /// Applies one frame of classifications. IDs absent from the map are left untouched.
    pub fn update(&mut self, classifications: &BTreeMap<u32, Motion>) {
        for (&id, &label) in classifications {
            match (label, self.state(id)) {
                (Motion::Dynamic, _) => {
                    self.state.insert(id, Motion::Dynamic);
                    self.static_streak.insert(id, 0);
                }
                (Motion::Static, Some(Motion::Dynamic)) => {
                    let streak = self.static_streak(id) + 1;
                    if streak >= self.required_streak {
                        self.state.insert(id, Motion::Static);
                        self.static_streak.insert(id, 0);
                    } else {
                        self.static_streak.insert(id, streak);
                    }
                }
                (Motion::Static, _) => {
                    self.state.insert(id, Motion::Static);
                }
            }
        }
    }
}

/// Indices of primitives whose object ID is currently dynamic.
pub fn prune_set(registry: &DynamicObjectRegistry, map: &GaussianMap) -> BTreeSet<usize> {
    let dynamic = registry.dynamic_set();
    if dynamic.is_empty() {
        return BTreeSet::new();
    }
    map.primitives()
        .iter()
        .enumerate()
        .filter(|(_, p)| dynamic.contains(&p.object_id))
        .map(|(i, _)| i)
        .collect()
}
