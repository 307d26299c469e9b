use super::params::layer_key;
use super::{MaskStyle, ModelConfig};
use crate::error::{Error, Result};
use crate::gradcore::{Graph, ParameterSet, Tensor, Var, MASK_SENTINEL};

/// Handles into the graph for one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    /// Final query stream, `[B, n, d]`.
    pub q_final: Var,
    /// Post-softmax attention per layer, `[B·H, n, n]`.
    pub attention: Vec<Var>,
    /// Head-split keys and values read by each layer.
    pub layer_kv: Vec<(Var, Var)>,
}

fn affine(g: &mut Graph, ps: &ParameterSet, x: Var, name: &str, bias: bool) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.w"))?;
    let b = if bias {
        Some(g.param(ps, &format!("{name}.b"))?)
    } else {
        None
    };
    g.linear(x, w, b)
}

fn mlp2(g: &mut Graph, ps: &ParameterSet, x: Var, first: &str, second: &str) -> Result<Var> {
    let h = affine(g, ps, x, first, true)?;
    let h = g.elu(h)?;
    affine(g, ps, h, second, true)
}

/// Prior position encoding `f2(ELU(f1(pos)))` for `[n, 3]` coordinates.
pub fn embed_positions(g: &mut Graph, ps: &ParameterSet, pos: Var) -> Result<Var> {
    if g.shape(pos).len() != 2 || g.shape(pos)[1] != 3 {
        return Err(Error::Shape(format!("positions must be [n, 3], got {:?}", g.shape(pos))));
    }
    mlp2(g, ps, pos, "enc.pos.f1", "enc.pos.f2")
}

/// Source embedding `f4(ELU(f3(de)))`, applied row-wise to `[.., n, bands]`.
pub fn embed_source(g: &mut Graph, ps: &ParameterSet, de: Var) -> Result<Var> {
    mlp2(g, ps, de, "enc.src.f3", "enc.src.f4")
}

/// `Q¹ = P + L` and `KV = Q¹ + S`. `Q¹` has no batch axis; `KV` keeps the
/// batch axis of `s_emb`.
pub fn init_inputs(g: &mut Graph, p_emb: Var, l_emb: Var, s_emb: Var) -> Result<(Var, Var)> {
    let q1 = g.add(p_emb, l_emb)?;
    let kv = g.add(s_emb, q1)?;
    Ok((q1, kv))
}

fn diagonal_mask(n: usize, style: MaskStyle) -> Tensor {
    let mut t = match style {
        MaskStyle::NegInf => Tensor::zeros(&[n, n]),
        MaskStyle::ZeroLogit => Tensor::full(&[n, n], 1.0),
    };
    let fill = match style {
        MaskStyle::NegInf => MASK_SENTINEL,
        MaskStyle::ZeroLogit => 0.0,
    };
    for i in 0..n {
        t.data_mut()[i * n + i] = fill;
    }
    t
}

/// Multi-head attention of the query stream `q: [B, n, d]` over head-split
/// keys and values `[B·H, n, dh]`, followed by the output projection.
/// Returns `(H, A)` with `A` the post-softmax weights.
#[allow(clippy::too_many_arguments)]
pub fn masked_attention(
    g: &mut Graph,
    ps: &ParameterSet,
    cfg: &ModelConfig,
    layer: usize,
    q: Var,
    kh: Var,
    vh: Var,
    masked: bool,
) -> Result<(Var, Var)> {
    let n = g.shape(q)[1];
    if masked && n < 2 {
        return Err(Error::Precondition(
            "diagonal masking needs at least 2 channels".into(),
        ));
    }
    let qp = affine(g, ps, q, &layer_key(layer, "q"), true)?;
    let qh = g.split_heads(qp, cfg.n_heads)?;
    let logits = g.bmm(qh, kh, true)?;
    let logits = g.scale(logits, 1.0 / (cfg.head_dim() as f64).sqrt())?;
    let attn = if masked {
        match cfg.mask_style {
            MaskStyle::NegInf => g.masked_softmax(logits, Some(&diagonal_mask(n, MaskStyle::NegInf)))?,
            MaskStyle::ZeroLogit => {
                let zeroed = g.mul_const(logits, diagonal_mask(n, MaskStyle::ZeroLogit))?;
                g.masked_softmax(zeroed, None)?
            }
        }
    } else {
        g.masked_softmax(logits, None)?
    };
    let heads = g.bmm(attn, vh, false)?;
    let merged = g.merge_heads(heads, cfg.n_heads)?;
    let h = affine(g, ps, merged, &layer_key(layer, "o"), true)?;
    Ok((h, attn))
}

fn layer_norm(g: &mut Graph, ps: &ParameterSet, x: Var, name: &str) -> Result<Var> {
    let gamma = g.param(ps, &format!("{name}.g"))?;
    let beta = g.param(ps, &format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta)
}

/// One encoder layer: `X = LN(Q + H)`, then `LN(X + FFN(X))`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer(
    g: &mut Graph,
    ps: &ParameterSet,
    cfg: &ModelConfig,
    layer: usize,
    q: Var,
    kh: Var,
    vh: Var,
    masked: bool,
) -> Result<(Var, Var)> {
    let (h, attn) = masked_attention(g, ps, cfg, layer, q, kh, vh, masked)?;
    let x = g.add(q, h)?;
    let x = layer_norm(g, ps, x, &layer_key(layer, "ln1"))?;
    let f = affine(g, ps, x, &layer_key(layer, "ffn1"), true)?;
    let f = g.elu(f)?;
    let f = g.dropout(f, cfg.dropout)?;
    let f = affine(g, ps, f, &layer_key(layer, "ffn2"), true)?;
    let y = g.add(x, f)?;
    let y = layer_norm(g, ps, y, &layer_key(layer, "ln2"))?;
    Ok((y, attn))
}

/// Full encoder over a batch `de: [B, n, bands]` with channel positions
/// `pos: [n, 3]`.
///
/// Keys and values are computed once from `Q¹ + S` through one shared
/// projection and reused unchanged by every layer; only the query stream is
/// updated. With `masked` set, no channel attends to itself.
pub fn encode(
    g: &mut Graph,
    ps: &ParameterSet,
    cfg: &ModelConfig,
    de: Var,
    pos: &Tensor,
    masked: bool,
) -> Result<EncoderVars> {
    let s = g.shape(de).to_vec();
    if s.len() != 3 || s[1] != cfg.n_channels || s[2] != cfg.n_bands {
        return Err(Error::Shape(format!(
            "encoder input {s:?}, expected [B, {}, {}]",
            cfg.n_channels, cfg.n_bands
        )));
    }
    if pos.shape() != [cfg.n_channels, 3] {
        return Err(Error::Shape(format!("positions {:?} for {} channels", pos.shape(), cfg.n_channels)));
    }
    let batch = s[0];
    let pos = g.constant(pos.clone())?;
    let p_emb = embed_positions(g, ps, pos)?;
    let s_emb = embed_source(g, ps, de)?;
    let l_emb = g.param(ps, "enc.l_emb")?;
    let (q1, kv) = init_inputs(g, p_emb, l_emb, s_emb)?;

    let k = affine(g, ps, kv, "enc.kv.k", false)?;
    let v = affine(g, ps, kv, "enc.kv.v", true)?;
    let kh = g.split_heads(k, cfg.n_heads)?;
    let vh = g.split_heads(v, cfg.n_heads)?;

    let mut q = g.expand(q1, batch)?;
    let mut attention = Vec::with_capacity(cfg.n_layers);
    let mut layer_kv = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let (next, attn) = encoder_layer(g, ps, cfg, l, q, kh, vh, masked)?;
        attention.push(attn);
        layer_kv.push((kh, vh));
        q = next;
    }
    Ok(EncoderVars {
        q_final: q,
        attention,
        layer_kv,
    })
}

fn flatten(g: &mut Graph, q_final: Var) -> Result<Var> {
    let s = g.shape(q_final).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected [B, n, d], got {s:?}")));
    }
    g.reshape(q_final, &[s[0], s[1] * s[2]])
}

/// Projector head: flatten, then two (linear, batch norm, ELU, dropout)
/// blocks and a final linear layer. Output `[B, proj_dims[2]]`.
pub fn project(g: &mut Graph, ps: &ParameterSet, cfg: &ModelConfig, q_final: Var) -> Result<Var> {
    let mut x = flatten(g, q_final)?;
    for i in 1..=2 {
        x = affine(g, ps, x, &format!("proj.l{i}"), false)?;
        let key = format!("proj.bn{i}");
        let gamma = g.param(ps, &format!("{key}.g"))?;
        let beta = g.param(ps, &format!("{key}.b"))?;
        x = g.batch_norm(x, gamma, beta, ps, &key)?;
        x = g.elu(x)?;
        x = g.dropout(x, cfg.dropout)?;
    }
    affine(g, ps, x, "proj.l3", true)
}

/// Classifier head: flatten, hidden linear+ELU layers, then class logits.
pub fn classify(g: &mut Graph, ps: &ParameterSet, cfg: &ModelConfig, q_final: Var) -> Result<Var> {
    let mut x = flatten(g, q_final)?;
    for i in 1..=cfg.clf_hidden.len() {
        x = affine(g, ps, x, &format!("clf.l{i}"), true)?;
        x = g.elu(x)?;
    }
    affine(g, ps, x, &format!("clf.l{}", cfg.clf_hidden.len() + 1), true)
}
