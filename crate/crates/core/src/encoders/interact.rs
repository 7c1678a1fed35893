use rand::Rng;

use super::VisualStreams;
use crate::error::Result;
use crate::numeric::{Tensor, Var};
use crate::params::{BoundParams, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InteractionConfig {
    pub enabled: bool,
    /// Visual tokens attend over the expressions.
    pub visual_query: bool,
    /// Expressions attend over the visual tokens.
    pub linguistic_query: bool,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self { enabled: true, visual_query: true, linguistic_query: true }
    }
}

/// Single-head cross-attention in both directions, each followed by a
/// feed-forward network and a post-norm residual:
/// `F' = LayerNorm(FFN(attn(F, other)) + F)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionBlock {
    pub c: usize,
    pub hidden: usize,
}

const SIDES: [&str; 2] = ["v", "z"];

impl InteractionBlock {
    pub fn new(c: usize) -> Self {
        Self { c, hidden: c }
    }

    /// Gaussian weights with std `gain/√fan_in`, except the FFN output layer
    /// which uses `out_gain`; `out_gain = 0` starts the block as `LN(F)`.
    pub fn init(&self, store: &mut ParamStore, gain: f64, out_gain: f64, rng: &mut impl Rng) {
        let (c, h) = (self.c, self.hidden);
        let std = gain / (c as f64).sqrt();
        for s in SIDES {
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert_gaussian(&format!("inter.{s}.{w}"), &[c, c], std, rng);
            }
            store.insert_gaussian(&format!("inter.{s}.ffn_w1"), &[c, h], std, rng);
            store.insert(format!("inter.{s}.ffn_b1"), Tensor::zeros(&[h]), false);
            store.insert_gaussian(&format!("inter.{s}.ffn_w2"), &[h, c], out_gain / (h as f64).sqrt(), rng);
            store.insert(format!("inter.{s}.ffn_b2"), Tensor::zeros(&[c]), false);
            store.insert(format!("inter.{s}.ln_g"), Tensor::ones(&[c]), false);
            store.insert(format!("inter.{s}.ln_b"), Tensor::zeros(&[c]), false);
        }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.c as f64).sqrt()
    }

    fn ffn_norm<'t>(&self, p: &BoundParams<'t>, s: &str, attended: Var<'t>, residual: Var<'t>) -> Result<Var<'t>> {
        let w = |n: &str| p.get(&format!("inter.{s}.{n}"));
        attended
            .matmul(w("ffn_w1"))?
            .add_row(w("ffn_b1"))?
            .gelu()
            .matmul(w("ffn_w2"))?
            .add_row(w("ffn_b2"))?
            .add(residual)?
            .layer_norm(w("ln_g"), w("ln_b"))
    }

    /// Rows of `x` attend over `keys`/`values` (already projected).
    fn attend<'t>(&self, q: Var<'t>, keys: Var<'t>, values: Var<'t>) -> Result<Var<'t>> {
        q.matmul_t(keys)?.scale(self.scale()).row_softmax()?.matmul(values)
    }

    fn visual_branch<'t>(&self, p: &BoundParams<'t>, x: Var<'t>, fz: Var<'t>) -> Result<Var<'t>> {
        let keys = fz.matmul(p.get("inter.v.wk"))?;
        let values = fz.matmul(p.get("inter.v.wv"))?;
        let q = x.matmul(p.get("inter.v.wq"))?;
        let a = self.attend(q, keys, values)?.matmul(p.get("inter.v.wo"))?;
        self.ffn_norm(p, "v", a, x)
    }
}

/// Bi-directional interaction on a single shared visual stream.
pub fn bidir_interact<'t>(
    block: &InteractionBlock,
    p: &BoundParams<'t>,
    fv: Var<'t>,
    fz: Var<'t>,
    cfg: InteractionConfig,
) -> Result<(Var<'t>, Var<'t>)> {
    let (streams, fz) = interact_streams(block, p, &VisualStreams::shared(fv), fz, cfg)?;
    Ok((streams.base, fz))
}

/// Interaction over (possibly per-expression) visual streams: expression
/// `k` attends over its own stream, and every visual row attends over all
/// expressions.
pub fn interact_streams<'t>(
    block: &InteractionBlock,
    p: &BoundParams<'t>,
    streams: &VisualStreams<'t>,
    fz: Var<'t>,
    cfg: InteractionConfig,
) -> Result<(VisualStreams<'t>, Var<'t>)> {
    if !cfg.enabled {
        return Ok((streams.clone(), fz));
    }
    let new_z = if cfg.linguistic_query {
        let q = fz.matmul(p.get("inter.z.wq"))?;
        let keys = streams.map_tokenwise(|x| x.matmul(p.get("inter.z.wk")))?;
        let values = streams.map_tokenwise(|x| x.matmul(p.get("inter.z.wv")))?;
        let attended = match &streams.overrides {
            None => block.attend(q, keys.base, values.base)?,
            Some(o) => {
                let rows = (0..o.len())
                    .map(|k| block.attend(q.slice_rows(k, k + 1)?, keys.stream(k)?, values.stream(k)?))
                    .collect::<Result<Vec<_>>>()?;
                Var::concat_rows(&rows)?
            }
        };
        let a = attended.matmul(p.get("inter.z.wo"))?;
        block.ffn_norm(p, "z", a, fz)?
    } else {
        fz
    };
    let new_v = if cfg.visual_query {
        streams.map_tokenwise(|x| block.visual_branch(p, x, fz))?
    } else {
        streams.clone()
    };
    Ok((new_v, new_z))
}
