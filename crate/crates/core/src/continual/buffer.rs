use std::collections::BTreeMap;

use crate::diff::RngStream;

/// One stored sample. `label` is task-local; `class` is the key of its reservoir.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferItem {
    pub x: Vec<f64>,
    pub label: usize,
    pub task: usize,
    pub head: usize,
    /// Sample id in the source split.
    pub id: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Reservoir {
    items: Vec<BufferItem>,
    seen: u64,
}

/// Per-class reservoirs of at most `m` samples each (Algorithm R within every class).
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    m: usize,
    classes: BTreeMap<usize, Reservoir>,
    rng: RngStream,
}

impl ReplayBuffer {
    pub fn new(m: usize, rng: RngStream) -> Self {
        Self {
            m,
            classes: BTreeMap::new(),
            rng,
        }
    }

    pub fn capacity_per_class(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(|r| r.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of insertions offered to `class` so far.
    pub fn seen(&self, class: usize) -> u64 {
        self.classes.get(&class).map_or(0, |r| r.seen)
    }

    pub fn class_items(&self, class: usize) -> &[BufferItem] {
        self.classes.get(&class).map_or(&[], |r| &r.items)
    }

    /// All stored items in class order.
    pub fn items(&self) -> impl Iterator<Item = &BufferItem> {
        self.classes.values().flat_map(|r| r.items.iter())
    }

    /// Offers one sample to the reservoir of `class`.
    pub fn insert(&mut self, class: usize, item: BufferItem) {
        if self.m == 0 {
            return;
        }
        let r = self.classes.entry(class).or_insert(Reservoir {
            items: Vec::new(),
            seen: 0,
        });
        r.seen += 1;
        if r.items.len() < self.m {
            r.items.push(item);
        } else {
            let j = self.rng.below(r.seen as usize);
            if j < self.m {
                r.items[j] = item;
            }
        }
    }

    /// Inserts a batch in row order; `classes[i]` keys the reservoir of `items[i]`.
    pub fn update(&mut self, classes: &[usize], items: Vec<BufferItem>) {
        for (&c, it) in classes.iter().zip(items) {
            self.insert(c, it);
        }
    }

    /// Uniform draw with replacement of `n` items satisfying `keep`; empty if none qualify.
    pub fn sample(&self, n: usize, rng: &mut RngStream, keep: impl Fn(&BufferItem) -> bool) -> Vec<&BufferItem> {
        let pool: Vec<&BufferItem> = self.items().filter(|it| keep(it)).collect();
        if pool.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| pool[rng.below(pool.len())]).collect()
    }
}
