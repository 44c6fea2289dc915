use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    init_matrix, layer_norm_flops, normed, project_row, step_embedding, Attention, FeedForward,
};
use super::{
    check_input, gated_hook, Backbone, BackboneConfig, FamilyId, FamilyRegistry, FlopTable,
    GateDirective, StepOutput,
};
use crate::cache::ModuleCache;
use crate::error::Result;
use crate::tensor::TokenTensor;

const MHSA: usize = 0;
const FFN: usize = 1;

#[derive(Debug, Clone)]
struct Block {
    attn: Attention,
    ffn: FeedForward,
}

/// Pre-norm MHSA + FFN stack with additive step and class conditioning.
#[derive(Debug, Clone)]
pub struct ToyDit {
    cfg: BackboneConfig,
    registry: FamilyRegistry,
    flops: FlopTable,
    w_in: TokenTensor,
    w_step: TokenTensor,
    class_emb: TokenTensor,
    blocks: Vec<Block>,
    w_out: TokenTensor,
}

impl ToyDit {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let registry = FamilyRegistry::new(
            vec![(FamilyId::new("mhsa"), 1), (FamilyId::new("ffn"), 1)],
            cfg.tie_groups.clone(),
        )?;
        let (n, d) = (cfg.tokens, cfg.channels);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7d17_0000_0000_0001);
        let w_in = init_matrix(&mut rng, d, d, d);
        let w_step = init_matrix(&mut rng, d, d, d);
        let class_emb = init_matrix(&mut rng, cfg.cond_classes, d, d);
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                attn: Attention::new(&mut rng, d, cfg.heads),
                ffn: FeedForward::new(&mut rng, d),
            })
            .collect();
        let w_out = init_matrix(&mut rng, d, d, d);
        let flops = FlopTable {
            per_hook: vec![
                vec![layer_norm_flops(n, d) + Attention::flops(n, n, d)],
                vec![layer_norm_flops(n, d) + FeedForward::flops(n, d)],
            ],
            step_overhead: 2 * (n * d * d) as u64
                + 2 * (d * d) as u64
                + layer_norm_flops(n, d)
                + 2 * (n * d * d) as u64
                + 2 * (n * d) as u64,
        };
        Ok(Self {
            cfg,
            registry,
            flops,
            w_in,
            w_step,
            class_emb,
            blocks,
            w_out,
        })
    }

    fn embed(&self, x: &TokenTensor, cond: usize, t: usize) -> TokenTensor {
        let mut h = x.matmul(&self.w_in);
        let mut c = project_row(&step_embedding(t, self.cfg.channels), &self.w_step);
        for (a, b) in c.iter_mut().zip(self.class_emb.row(cond)) {
            *a += b;
        }
        h.add_row_broadcast(&c);
        h
    }

    fn head(&self, h: &TokenTensor) -> TokenTensor {
        normed(h).matmul(&self.w_out)
    }

    fn attn_out(&self, l: usize, h: &TokenTensor) -> TokenTensor {
        let hn = normed(h);
        self.blocks[l].attn.forward(&hn, &hn)
    }

    fn ffn_out(&self, l: usize, h: &TokenTensor) -> TokenTensor {
        self.blocks[l].ffn.forward(&normed(h))
    }
}

impl Backbone for ToyDit {
    fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn registry(&self) -> &FamilyRegistry {
        &self.registry
    }

    fn flop_table(&self) -> &FlopTable {
        &self.flops
    }

    fn forward_step(
        &self,
        x: &TokenTensor,
        cond: usize,
        t: usize,
        gate: &GateDirective,
        cache: &mut ModuleCache,
    ) -> Result<StepOutput> {
        check_input(self, x, cond, Some(gate), Some(cache), t)?;
        let mut h = self.embed(x, cond, t);
        let mut touched = Vec::with_capacity(2 * self.cfg.layers);
        for l in 0..self.cfg.layers {
            gated_hook(&mut h, (l, MHSA, 0), gate.action(l, MHSA), t, &self.registry, cache, &mut touched, |h| {
                self.attn_out(l, h)
            })?;
            gated_hook(&mut h, (l, FFN, 0), gate.action(l, FFN), t, &self.registry, cache, &mut touched, |h| {
                self.ffn_out(l, h)
            })?;
        }
        Ok(StepOutput {
            z: self.head(&h),
            touched,
        })
    }

    fn reference_forward(&self, x: &TokenTensor, cond: usize, t: usize) -> Result<TokenTensor> {
        check_input(self, x, cond, None, None, t)?;
        let mut h = self.embed(x, cond, t);
        for l in 0..self.cfg.layers {
            let a = self.attn_out(l, &h);
            h.add_assign(&a)?;
            let f = self.ffn_out(l, &h);
            h.add_assign(&f)?;
        }
        Ok(self.head(&h))
    }

    fn parameters(&self) -> Vec<&TokenTensor> {
        let mut p = vec![&self.w_in, &self.w_step, &self.class_emb];
        for b in &self.blocks {
            p.extend(b.attn.params());
            p.extend(b.ffn.params());
        }
        p.push(&self.w_out);
        p
    }
}
