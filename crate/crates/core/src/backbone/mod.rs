//! Deterministic transformer backbones with per-module gating.
//!
//! Three kinds are provided:
//!
//! * [`ToyDit`]: a stack of pre-norm MHSA/FFN blocks (families `mhsa`, `ffn`).
//! * [`ToyDual`]: dual-stream blocks followed by single-stream blocks with the
//!   five families `dual_attn`, `dual_ff`, `dual_context_ff`, `single_attn`,
//!   `single_ff`. `dual_attn` governs two attention sub-sites (image and
//!   context) per layer.
//! * [`Scripted`]: module outputs follow a closed-form sequence whose change
//!   rates are known analytically. Outputs do not depend on the input.
//!
//! Every gated sub-site is called a *hook*. Hooks are numbered within a layer
//! in registry order, so a family with two hooks occupies two consecutive
//! cache slots.

mod layers;
mod scripted;
mod toy_dit;
mod toy_dual;

use serde::{Deserialize, Serialize};

use crate::cache::ModuleCache;
use crate::error::{Error, Result};
use crate::tensor::TokenTensor;

pub use scripted::{scripted_rates, RatioSchedule, Scripted, ScriptedProfile, SiteRatio, SCRIPTED_FAMILIES};
pub use toy_dit::ToyDit;
pub use toy_dual::{ToyDual, DUAL_FAMILIES};

/// Name of a module family, e.g. `mhsa` or `dual_attn`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FamilyId(pub String);

impl FamilyId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for FamilyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered module families of a backbone, their hook counts, and groups of
/// families that share one threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyRegistry {
    families: Vec<FamilyId>,
    hooks: Vec<usize>,
    tie_groups: Vec<Vec<FamilyId>>,
}

impl FamilyRegistry {
    pub fn new(
        families: Vec<(FamilyId, usize)>,
        tie_groups: Vec<Vec<FamilyId>>,
    ) -> Result<Self> {
        let (families, hooks): (Vec<_>, Vec<_>) = families.into_iter().unzip();
        if families.is_empty() {
            return Err(Error::InvalidConfig("registry has no families".into()));
        }
        for (i, f) in families.iter().enumerate() {
            if families[..i].contains(f) {
                return Err(Error::InvalidConfig(format!("duplicate family `{f}`")));
            }
        }
        if let Some(i) = hooks.iter().position(|&h| h == 0) {
            return Err(Error::InvalidConfig(format!(
                "family `{}` governs zero hooks",
                families[i]
            )));
        }
        let mut seen: Vec<&FamilyId> = Vec::new();
        for group in &tie_groups {
            for f in group {
                if !families.contains(f) {
                    return Err(Error::InvalidConfig(format!(
                        "tie group names unknown family `{f}`"
                    )));
                }
                if seen.contains(&f) {
                    return Err(Error::InvalidConfig(format!(
                        "family `{f}` appears in more than one tie group"
                    )));
                }
                seen.push(f);
            }
        }
        Ok(Self {
            families,
            hooks,
            tie_groups,
        })
    }

    pub fn families(&self) -> &[FamilyId] {
        &self.families
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    pub fn tie_groups(&self) -> &[Vec<FamilyId>] {
        &self.tie_groups
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.families.iter().position(|f| f.as_str() == name)
    }

    /// Number of hooks governed by family `f`.
    pub fn hooks(&self, f: usize) -> usize {
        self.hooks[f]
    }

    /// Index of the first hook of family `f` within a layer.
    pub fn hook_offset(&self, f: usize) -> usize {
        self.hooks[..f].iter().sum()
    }

    pub fn hooks_per_layer(&self) -> usize {
        self.hooks.iter().sum()
    }

    /// Families tied with `f` (including `f` itself).
    pub fn tied_with(&self, f: usize) -> Vec<usize> {
        let name = &self.families[f];
        self.tie_groups
            .iter()
            .find(|g| g.contains(name))
            .map(|g| g.iter().filter_map(|n| self.index_of(n.as_str())).collect())
            .unwrap_or_else(|| vec![f])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ToyDit,
    ToyDual,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub layers: usize,
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub cond_classes: usize,
    pub seed: u64,
    /// Extra threshold ties between families.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tie_groups: Vec<Vec<FamilyId>>,
    /// Rate profile of the scripted backbone; ignored by the toy kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ScriptedProfile>,
}

impl BackboneConfig {
    pub fn toy_dit(layers: usize, tokens: usize, channels: usize, heads: usize, seed: u64) -> Self {
        Self {
            kind: BackboneKind::ToyDit,
            layers,
            tokens,
            channels,
            heads,
            cond_classes: 10,
            seed,
            tie_groups: Vec::new(),
            profile: None,
        }
    }

    pub fn toy_dual(layers: usize, tokens: usize, channels: usize, heads: usize, seed: u64) -> Self {
        Self {
            kind: BackboneKind::ToyDual,
            ..Self::toy_dit(layers, tokens, channels, heads, seed)
        }
    }

    pub fn scripted(layers: usize, tokens: usize, channels: usize, profile: ScriptedProfile) -> Self {
        Self {
            kind: BackboneKind::Scripted,
            layers,
            tokens,
            channels,
            heads: 1,
            cond_classes: 1,
            seed: 0,
            tie_groups: Vec::new(),
            profile: Some(profile),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.tokens == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "layers, tokens and channels must be positive (got L={}, N={}, d={})",
                self.layers, self.tokens, self.channels
            )));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "heads ({}) must be positive and divide channels ({})",
                self.heads, self.channels
            )));
        }
        if self.cond_classes == 0 {
            return Err(Error::InvalidConfig("cond_classes must be positive".into()));
        }
        Ok(())
    }

    /// Stable identifier recorded in plan provenance.
    pub fn id(&self) -> String {
        let kind = match self.kind {
            BackboneKind::ToyDit => "toy_dit",
            BackboneKind::ToyDual => "toy_dual",
            BackboneKind::Scripted => "scripted",
        };
        format!(
            "{kind}:L{}:N{}:d{}:h{}:c{}:seed{}",
            self.layers, self.tokens, self.channels, self.heads, self.cond_classes, self.seed
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SiteAction {
    Compute,
    Reuse,
}

/// Per-step gating: one action per `(layer, family)`, plus a whole-step
/// skip flag that callers honour by not invoking the backbone at all.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateDirective {
    layers: usize,
    families: usize,
    actions: Vec<SiteAction>,
    pub step_skip: bool,
}

impl GateDirective {
    pub fn all_compute(layers: usize, families: usize) -> Self {
        Self {
            layers,
            families,
            actions: vec![SiteAction::Compute; layers * families],
            step_skip: false,
        }
    }

    pub fn all_reuse(layers: usize, families: usize) -> Self {
        Self {
            actions: vec![SiteAction::Reuse; layers * families],
            ..Self::all_compute(layers, families)
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn families(&self) -> usize {
        self.families
    }

    #[inline]
    pub fn action(&self, layer: usize, family: usize) -> SiteAction {
        self.actions[layer * self.families + family]
    }

    pub fn set(&mut self, layer: usize, family: usize, action: SiteAction) {
        self.actions[layer * self.families + family] = action;
    }

    pub fn reuse_count(&self) -> usize {
        self.actions.iter().filter(|a| **a == SiteAction::Reuse).count()
    }
}

/// One executed hook: which site, and whether it was computed or reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Touch {
    pub layer: usize,
    pub family: usize,
    pub hook: usize,
    pub action: SiteAction,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub z: TokenTensor,
    pub touched: Vec<Touch>,
}

/// Analytic multiply-add counts (2 FLOPs per MAC).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopTable {
    /// FLOPs of each hook, indexed `[family][hook]`.
    pub per_hook: Vec<Vec<u64>>,
    /// Ungated work of one computed step (embeddings, head, update).
    pub step_overhead: u64,
}

impl FlopTable {
    pub fn hook(&self, family: usize, hook: usize) -> u64 {
        self.per_hook[family][hook]
    }

    /// FLOPs of one `(layer, family)` site with all its hooks computed.
    pub fn site(&self, family: usize) -> u64 {
        self.per_hook[family].iter().sum()
    }

    /// FLOPs of one step with every hook computed.
    pub fn full_step(&self, layers: usize) -> u64 {
        let per_layer: u64 = (0..self.per_hook.len()).map(|f| self.site(f)).sum();
        self.step_overhead + per_layer * layers as u64
    }
}

/// A gated backbone. Immutable after construction.
pub trait Backbone: Send + Sync {
    fn config(&self) -> &BackboneConfig;

    fn registry(&self) -> &FamilyRegistry;

    fn flop_table(&self) -> &FlopTable;

    /// Shape of the latent `x` (and of the network output `z`).
    fn latent_shape(&self) -> (usize, usize) {
        (self.config().tokens, self.config().channels)
    }

    fn layers(&self) -> usize {
        self.config().layers
    }

    /// Runs one step, computing or reusing each hook according to `gate`.
    /// Computed hooks overwrite their cache slot.
    fn forward_step(
        &self,
        x: &TokenTensor,
        cond: usize,
        t: usize,
        gate: &GateDirective,
        cache: &mut ModuleCache,
    ) -> Result<StepOutput>;

    /// Plain forward pass with no gating or cache involvement.
    fn reference_forward(&self, x: &TokenTensor, cond: usize, t: usize) -> Result<TokenTensor>;

    /// All parameter tensors, in a fixed order.
    fn parameters(&self) -> Vec<&TokenTensor>;

    fn new_cache(&self) -> ModuleCache {
        ModuleCache::new(self.layers(), self.registry().hooks_per_layer())
    }
}

pub fn build_backbone(cfg: &BackboneConfig) -> Result<Box<dyn Backbone>> {
    cfg.validate()?;
    Ok(match cfg.kind {
        BackboneKind::ToyDit => Box::new(ToyDit::new(cfg.clone())?),
        BackboneKind::ToyDual => Box::new(ToyDual::new(cfg.clone())?),
        BackboneKind::Scripted => Box::new(Scripted::new(cfg.clone())?),
    })
}

pub(crate) fn check_input(
    backbone: &dyn Backbone,
    x: &TokenTensor,
    cond: usize,
    gate: Option<&GateDirective>,
    cache: Option<&ModuleCache>,
    t: usize,
) -> Result<()> {
    let (n, d) = backbone.latent_shape();
    if x.shape() != (n, d) {
        return Err(Error::ShapeMismatch {
            left_rows: x.rows(),
            left_cols: x.cols(),
            right_rows: n,
            right_cols: d,
        });
    }
    if cond >= backbone.config().cond_classes {
        return Err(Error::InvalidArgument(format!(
            "class index {cond} out of range (cond_classes = {})",
            backbone.config().cond_classes
        )));
    }
    if let Some(g) = gate {
        if g.step_skip {
            return Err(Error::StepSkipDirective(t));
        }
        if g.layers() != backbone.layers() || g.families() != backbone.registry().len() {
            return Err(Error::DimensionMismatch(format!(
                "gate is {}x{}, backbone has {} layers and {} families",
                g.layers(),
                g.families(),
                backbone.layers(),
                backbone.registry().len()
            )));
        }
    }
    if let Some(c) = cache {
        if c.layers() != backbone.layers()
            || c.hooks_per_layer() != backbone.registry().hooks_per_layer()
        {
            return Err(Error::DimensionMismatch(
                "cache layout does not match backbone".into(),
            ));
        }
    }
    Ok(())
}

/// Runs one gated hook: reuse the cached tensor or compute a fresh one and
/// store it. The hook output is added into `residual`.
pub(crate) fn gated_hook(
    residual: &mut TokenTensor,
    site: (usize, usize, usize),
    action: SiteAction,
    t: usize,
    registry: &FamilyRegistry,
    cache: &mut ModuleCache,
    touched: &mut Vec<Touch>,
    compute: impl FnOnce(&TokenTensor) -> TokenTensor,
) -> Result<()> {
    let (layer, family, hook) = site;
    let slot = registry.hook_offset(family) + hook;
    match action {
        SiteAction::Reuse => {
            let cached = cache.get(layer, slot).ok_or_else(|| Error::EmptyCacheSlot {
                step: t,
                layer,
                family: registry.families()[family].to_string(),
            })?;
            residual.add_assign(cached)?;
        }
        SiteAction::Compute => {
            let out = compute(residual);
            residual.add_assign(&out)?;
            cache.store(layer, slot, out);
        }
    }
    touched.push(Touch {
        layer,
        family,
        hook,
        action,
    });
    Ok(())
}
