//! Fixed-capacity rehearsal buffer maintained by reservoir sampling.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::snapshot::Container;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BufferItem {
    pub features: Vec<f64>,
    pub label: usize,
    pub task: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    seen: u64,
    items: Vec<BufferItem>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        Self {
            capacity,
            seen: 0,
            items: Vec::with_capacity(capacity),
            rng,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of stream samples offered so far.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[BufferItem] {
        &self.items
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Offers one sample. Below capacity it is appended; afterwards an index
    /// is drawn from `0..=seen` and the slot is overwritten when it exists.
    /// Returns the slot written, if any.
    pub fn insert(&mut self, item: BufferItem) -> Option<usize> {
        let slot = if self.capacity == 0 {
            None
        } else if self.seen < self.capacity as u64 {
            self.items.push(item);
            Some(self.items.len() - 1)
        } else {
            let i = self.rng.random_range(0..=self.seen);
            if i < self.capacity as u64 {
                self.items[i as usize] = item;
                Some(i as usize)
            } else {
                None
            }
        };
        self.seen += 1;
        slot
    }

    /// Draws `min(k, len)` distinct stored items uniformly; returns their
    /// slots alongside copies.
    pub fn sample(&mut self, k: usize) -> Result<(Vec<usize>, Vec<BufferItem>)> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let k = k.min(self.items.len());
        let slots = index::sample(&mut self.rng, self.items.len(), k).into_vec();
        let items = slots.iter().map(|&i| self.items[i].clone()).collect();
        Ok((slots, items))
    }

    pub fn write_into(&self, container: &mut Container, prefix: &str) -> Result<()> {
        let dim = self.items.first().map_or(0, |it| it.features.len());
        container.put_u64s(
            format!("{prefix}.meta"),
            &[self.capacity as u64, self.seen, dim as u64],
        );
        if !self.items.is_empty() {
            let data: Vec<f64> = self.items.iter().flat_map(|it| it.features.iter().copied()).collect();
            container.put(format!("{prefix}.features"), Tensor::matrix(self.items.len(), dim, data)?);
        }
        let labels: Vec<u64> = self.items.iter().map(|it| it.label as u64).collect();
        container.put_u64s(format!("{prefix}.labels"), &labels);
        // Task ids are shifted by one so that 0 encodes "unknown".
        let tasks: Vec<u64> = self.items.iter().map(|it| it.task.map_or(0, |t| t as u64 + 1)).collect();
        container.put_u64s(format!("{prefix}.tasks"), &tasks);
        container.put_rng(&format!("{prefix}.rng"), &self.rng);
        Ok(())
    }

    pub fn read_from(container: &Container, prefix: &str) -> Result<Self> {
        let meta = container.get_u64s(&format!("{prefix}.meta"))?;
        let [capacity, seen, dim] = meta[..] else {
            return Err(Error::Snapshot(format!("{prefix}.meta must hold three values")));
        };
        let labels = container.get_u64s(&format!("{prefix}.labels"))?;
        let tasks = container.get_u64s(&format!("{prefix}.tasks"))?;
        if labels.len() != tasks.len() || labels.len() as u64 != capacity.min(seen) {
            return Err(Error::Snapshot(format!("{prefix}: inconsistent item counts")));
        }
        let mut items = Vec::with_capacity(labels.len());
        if !labels.is_empty() {
            let features = container.get(&format!("{prefix}.features"))?;
            if features.shape() != [labels.len(), dim as usize] {
                return Err(Error::Snapshot(format!("{prefix}.features has shape {:?}", features.shape())));
            }
            for (i, (&label, &task)) in labels.iter().zip(&tasks).enumerate() {
                items.push(BufferItem {
                    features: features.row(i).to_vec(),
                    label: label as usize,
                    task: task.checked_sub(1).map(|t| t as usize),
                });
            }
        }
        Ok(Self {
            capacity: capacity as usize,
            seen,
            items,
            rng: container.get_rng(&format!("{prefix}.rng"))?,
        })
    }
}

/// Checks that every stored label lies below `classes`.
pub fn check_labels(buffer: &ReplayBuffer, classes: usize) -> Result<()> {
    match buffer.items.iter().find(|it| it.label >= classes) {
        Some(it) => Err(contract(format!("buffered label {} out of range 0..{classes}", it.label))),
        None => Ok(()),
    }
}
