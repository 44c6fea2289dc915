use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    init_matrix, layer_norm_flops, normed, project_row, step_embedding, Attention, FeedForward,
};
use super::{
    check_input, gated_hook, Backbone, BackboneConfig, FamilyId, FamilyRegistry, FlopTable,
    GateDirective, SiteAction, StepOutput, Touch,
};
use crate::cache::ModuleCache;
use crate::error::Result;
use crate::tensor::TokenTensor;

const DUAL_ATTN: usize = 0;
const DUAL_FF: usize = 1;
const DUAL_CONTEXT_FF: usize = 2;
const SINGLE_ATTN: usize = 3;
const SINGLE_FF: usize = 4;

/// Hook indices inside `dual_attn`.
const IMAGE_HOOK: usize = 0;
const CONTEXT_HOOK: usize = 1;

pub const DUAL_FAMILIES: [&str; 5] = [
    "dual_attn",
    "dual_ff",
    "dual_context_ff",
    "single_attn",
    "single_ff",
];

#[derive(Debug, Clone)]
struct DualBlock {
    image_attn: Attention,
    context_attn: Attention,
    image_ff: FeedForward,
    context_ff: FeedForward,
}

#[derive(Debug, Clone)]
struct SingleBlock {
    attn: Attention,
    ff: FeedForward,
}

/// Image and context streams processed by `L` dual-stream blocks, then
/// concatenated and processed by `L` single-stream blocks. Layer index `l`
/// addresses dual block `l` for the `dual_*` families and single block `l`
/// for the `single_*` families.
///
/// The context stream has `max(1, N / 4)` tokens seeded from the class
/// embedding.
#[derive(Debug, Clone)]
pub struct ToyDual {
    cfg: BackboneConfig,
    registry: FamilyRegistry,
    flops: FlopTable,
    context_tokens: usize,
    w_in: TokenTensor,
    w_step: TokenTensor,
    class_emb: TokenTensor,
    context_pos: TokenTensor,
    dual: Vec<DualBlock>,
    single: Vec<SingleBlock>,
    w_out: TokenTensor,
}

impl ToyDual {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let registry = FamilyRegistry::new(
            DUAL_FAMILIES
                .iter()
                .enumerate()
                .map(|(i, name)| (FamilyId::new(*name), if i == DUAL_ATTN { 2 } else { 1 }))
                .collect(),
            cfg.tie_groups.clone(),
        )?;
        let (n, d, heads) = (cfg.tokens, cfg.channels, cfg.heads);
        let nc = (n / 4).max(1);
        let joint = n + nc;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0a1_0000_0000_0002);
        let w_in = init_matrix(&mut rng, d, d, d);
        let w_step = init_matrix(&mut rng, d, d, d);
        let class_emb = init_matrix(&mut rng, cfg.cond_classes, d, d);
        let context_pos = init_matrix(&mut rng, nc, d, d);
        let dual = (0..cfg.layers)
            .map(|_| DualBlock {
                image_attn: Attention::new(&mut rng, d, heads),
                context_attn: Attention::new(&mut rng, d, heads),
                image_ff: FeedForward::new(&mut rng, d),
                context_ff: FeedForward::new(&mut rng, d),
            })
            .collect();
        let single = (0..cfg.layers)
            .map(|_| SingleBlock {
                attn: Attention::new(&mut rng, d, heads),
                ff: FeedForward::new(&mut rng, d),
            })
            .collect();
        let w_out = init_matrix(&mut rng, d, d, d);
        let ln = layer_norm_flops;
        let flops = FlopTable {
            per_hook: vec![
                vec![
                    ln(n, d) + Attention::flops(n, joint, d),
                    ln(nc, d) + Attention::flops(nc, joint, d),
                ],
                vec![ln(n, d) + FeedForward::flops(n, d)],
                vec![ln(nc, d) + FeedForward::flops(nc, d)],
                vec![ln(joint, d) + Attention::flops(joint, joint, d)],
                vec![ln(joint, d) + FeedForward::flops(joint, d)],
            ],
            step_overhead: 2 * (n * d * d) as u64
                + 2 * (d * d) as u64
                + ln(n, d)
                + 2 * (n * d * d) as u64
                + 2 * (n * d) as u64,
        };
        Ok(Self {
            cfg,
            registry,
            flops,
            context_tokens: nc,
            w_in,
            w_step,
            class_emb,
            context_pos,
            dual,
            single,
            w_out,
        })
    }

    pub fn context_tokens(&self) -> usize {
        self.context_tokens
    }

    fn embed(&self, x: &TokenTensor, cond: usize, t: usize) -> (TokenTensor, TokenTensor) {
        let mut h = x.matmul(&self.w_in);
        let mut c = project_row(&step_embedding(t, self.cfg.channels), &self.w_step);
        for (a, b) in c.iter_mut().zip(self.class_emb.row(cond)) {
            *a += b;
        }
        h.add_row_broadcast(&c);
        let mut ctx = self.context_pos.clone();
        ctx.add_row_broadcast(&c);
        (h, ctx)
    }

    fn head(&self, s: &TokenTensor) -> TokenTensor {
        normed(&s.slice_rows(0, self.cfg.tokens)).matmul(&self.w_out)
    }

    fn run(
        &self,
        x: &TokenTensor,
        cond: usize,
        t: usize,
        gate: &GateDirective,
        cache: &mut ModuleCache,
        touched: &mut Vec<Touch>,
    ) -> Result<TokenTensor> {
        let reg = &self.registry;
        let (mut h, mut ctx) = self.embed(x, cond, t);
        for (l, blk) in self.dual.iter().enumerate() {
            let act = gate.action(l, DUAL_ATTN);
            // both attention hooks read the pre-update streams
            let normed_streams = match act {
                SiteAction::Compute => {
                    let hn = normed(&h);
                    let cn = normed(&ctx);
                    let joint = TokenTensor::vstack(&[&hn, &cn])?;
                    Some((hn, cn, joint))
                }
                SiteAction::Reuse => None,
            };
            gated_hook(&mut h, (l, DUAL_ATTN, IMAGE_HOOK), act, t, reg, cache, touched, |_| {
                let (hn, _, joint) = normed_streams.as_ref().expect("computed");
                blk.image_attn.forward(hn, joint)
            })?;
            gated_hook(&mut ctx, (l, DUAL_ATTN, CONTEXT_HOOK), act, t, reg, cache, touched, |_| {
                let (_, cn, joint) = normed_streams.as_ref().expect("computed");
                blk.context_attn.forward(cn, joint)
            })?;
            gated_hook(&mut h, (l, DUAL_FF, 0), gate.action(l, DUAL_FF), t, reg, cache, touched, |h| {
                blk.image_ff.forward(&normed(h))
            })?;
            gated_hook(
                &mut ctx,
                (l, DUAL_CONTEXT_FF, 0),
                gate.action(l, DUAL_CONTEXT_FF),
                t,
                reg,
                cache,
                touched,
                |c| blk.context_ff.forward(&normed(c)),
            )?;
        }
        let mut s = TokenTensor::vstack(&[&h, &ctx])?;
        for (l, blk) in self.single.iter().enumerate() {
            gated_hook(&mut s, (l, SINGLE_ATTN, 0), gate.action(l, SINGLE_ATTN), t, reg, cache, touched, |s| {
                let sn = normed(s);
                blk.attn.forward(&sn, &sn)
            })?;
            gated_hook(&mut s, (l, SINGLE_FF, 0), gate.action(l, SINGLE_FF), t, reg, cache, touched, |s| {
                blk.ff.forward(&normed(s))
            })?;
        }
        Ok(self.head(&s))
    }
}

impl Backbone for ToyDual {
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
        let mut touched = Vec::with_capacity(6 * self.cfg.layers);
        let z = self.run(x, cond, t, gate, cache, &mut touched)?;
        Ok(StepOutput { z, touched })
    }

    fn reference_forward(&self, x: &TokenTensor, cond: usize, t: usize) -> Result<TokenTensor> {
        check_input(self, x, cond, None, None, t)?;
        let (mut h, mut ctx) = self.embed(x, cond, t);
        for blk in &self.dual {
            let hn = normed(&h);
            let cn = normed(&ctx);
            let joint = TokenTensor::vstack(&[&hn, &cn])?;
            let a_img = blk.image_attn.forward(&hn, &joint);
            let a_ctx = blk.context_attn.forward(&cn, &joint);
            h.add_assign(&a_img)?;
            ctx.add_assign(&a_ctx)?;
            let f = blk.image_ff.forward(&normed(&h));
            h.add_assign(&f)?;
            let f = blk.context_ff.forward(&normed(&ctx));
            ctx.add_assign(&f)?;
        }
        let mut s = TokenTensor::vstack(&[&h, &ctx])?;
        for blk in &self.single {
            let sn = normed(&s);
            let a = blk.attn.forward(&sn, &sn);
            s.add_assign(&a)?;
            let f = blk.ff.forward(&normed(&s));
            s.add_assign(&f)?;
        }
        Ok(self.head(&s))
    }

    fn parameters(&self) -> Vec<&TokenTensor> {
        let mut p = vec![&self.w_in, &self.w_step, &self.class_emb, &self.context_pos];
        for b in &self.dual {
            p.extend(b.image_attn.params());
            p.extend(b.context_attn.params());
            p.extend(b.image_ff.params());
            p.extend(b.context_ff.params());
        }
        for b in &self.single {
            p.extend(b.attn.params());
            p.extend(b.ff.params());
        }
        p.push(&self.w_out);
        p
    }
}
