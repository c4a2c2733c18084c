use crate::error::{Error, Result};

/// Role of a view row within a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Clean1,
    Clean2,
    Adversarial,
}

/// Row layout of a three-view batch of `B` instances: rows `0..B` hold the
/// first clean view, `B..2B` the second clean view and `2B..3B` the
/// adversarial view. Positive and negative index sets depend only on `B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewLayout {
    instances: usize,
}

impl ViewLayout {
    pub fn new(instances: usize) -> Result<Self> {
        if instances == 0 {
            return Err(Error::config("a batch needs at least one instance"));
        }
        Ok(Self { instances })
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn rows(&self) -> usize {
        3 * self.instances
    }

    pub fn row(&self, instance: usize, kind: ViewKind) -> usize {
        let offset = match kind {
            ViewKind::Clean1 => 0,
            ViewKind::Clean2 => 1,
            ViewKind::Adversarial => 2,
        };
        offset * self.instances + instance
    }

    pub fn instance_of(&self, row: usize) -> usize {
        row % self.instances
    }

    pub fn kind_of(&self, row: usize) -> ViewKind {
        match row / self.instances {
            0 => ViewKind::Clean1,
            1 => ViewKind::Clean2,
            _ => ViewKind::Adversarial,
        }
    }

    /// Anchor rows: both clean views of every instance.
    pub fn anchors(&self) -> Vec<usize> {
        (0..2 * self.instances).collect()
    }

    /// The other clean view of an anchor's instance.
    pub fn clean_partner(&self, anchor: usize) -> usize {
        let i = self.instance_of(anchor);
        match self.kind_of(anchor) {
            ViewKind::Clean1 => self.row(i, ViewKind::Clean2),
            _ => self.row(i, ViewKind::Clean1),
        }
    }

    pub fn adversarial(&self, anchor: usize) -> usize {
        self.row(self.instance_of(anchor), ViewKind::Adversarial)
    }

    /// `P(i)` for an anchor: other clean view, then the adversarial view.
    pub fn positives(&self, anchor: usize) -> Vec<usize> {
        let i = self.instance_of(anchor);
        (0..self.rows())
            .filter(|&r| r != anchor && self.instance_of(r) == i)
            .collect()
    }

    /// `N(i)`: every view of every other instance, ascending.
    pub fn negatives(&self, anchor: usize) -> Vec<usize> {
        let i = self.instance_of(anchor);
        (0..self.rows())
            .filter(|&r| self.instance_of(r) != i)
            .collect()
    }

    /// Counts `(M, N)` for an anchor in this layout.
    pub fn counts(&self) -> (usize, usize) {
        (2, 3 * (self.instances - 1))
    }
}
