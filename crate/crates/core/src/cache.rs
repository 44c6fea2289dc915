//! Per-run storage of module outputs.

use crate::tensor::TokenTensor;

/// Cached module outputs for one run, indexed by `(layer, hook)` where
/// `hook` enumerates every gated sub-site of a layer in registry order.
///
/// A slot is filled whenever its site is computed and emptied only by a
/// mask event. `last_net` holds the most recent network output so a whole
/// step can be reused.
#[derive(Debug, Clone)]
pub struct ModuleCache {
    layers: usize,
    hooks_per_layer: usize,
    slots: Vec<Option<TokenTensor>>,
    last_net: Option<TokenTensor>,
    mask_pending: bool,
    empty_reads: u64,
}

impl ModuleCache {
    pub fn new(layers: usize, hooks_per_layer: usize) -> Self {
        Self {
            layers,
            hooks_per_layer,
            slots: vec![None; layers * hooks_per_layer],
            last_net: None,
            mask_pending: false,
            empty_reads: 0,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn hooks_per_layer(&self) -> usize {
        self.hooks_per_layer
    }

    #[inline]
    fn index(&self, layer: usize, hook: usize) -> usize {
        debug_assert!(layer < self.layers && hook < self.hooks_per_layer);
        layer * self.hooks_per_layer + hook
    }

    pub fn is_filled(&self, layer: usize, hook: usize) -> bool {
        self.slots[self.index(layer, hook)].is_some()
    }

    /// Reads a slot. Reading an empty slot is counted so callers can prove
    /// it never happens.
    pub fn get(&mut self, layer: usize, hook: usize) -> Option<&TokenTensor> {
        let i = self.index(layer, hook);
        if self.slots[i].is_none() {
            self.empty_reads += 1;
        }
        self.slots[i].as_ref()
    }

    pub fn peek(&self, layer: usize, hook: usize) -> Option<&TokenTensor> {
        self.slots[self.index(layer, hook)].as_ref()
    }

    pub fn store(&mut self, layer: usize, hook: usize, value: TokenTensor) {
        let i = self.index(layer, hook);
        self.slots[i] = Some(value);
    }

    /// Empties every layer-level slot. `last_net` is kept.
    pub fn clear_layers(&mut self) {
        for s in &mut self.slots {
            *s = None;
        }
    }

    pub fn last_net(&self) -> Option<&TokenTensor> {
        self.last_net.as_ref()
    }

    pub fn set_last_net(&mut self, z: TokenTensor) {
        self.last_net = Some(z);
    }

    pub fn mask_pending(&self) -> bool {
        self.mask_pending
    }

    pub fn set_mask_pending(&mut self, pending: bool) {
        self.mask_pending = pending;
    }

    /// Number of attempted reads of empty slots since construction.
    pub fn empty_reads(&self) -> u64 {
        self.empty_reads
    }

    pub fn filled_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}
