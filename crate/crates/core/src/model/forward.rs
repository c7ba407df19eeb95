//! Forward-pass graph construction and the masked NLL loss.

use std::collections::HashMap;

use super::{build_prefix_mask, rope_tables, ModelError, Parameters, Sequence};
use crate::numerics::{real, Graph, Mode, NodeId, Scalar, Tensor};
use crate::tokenizer::TokenId;

/// A built (not yet evaluated) forward graph with handles to the logits and,
/// when requested, the training loss.
pub struct ForwardGraph<T: Scalar> {
    pub graph: Graph<T>,
    pub logits: NodeId,
    pub loss: Option<NodeId>,
}

/// Next-token training targets: position i predicts tokens[i+1]. The final
/// position has nothing to predict, so its mask bit is forced off.
pub fn shifted_targets(seq: &Sequence) -> (Vec<TokenId>, Vec<bool>) {
    let len = seq.len();
    let mut targets = vec![0; len];
    let mut mask = vec![false; len];
    for i in 0..len {
        if i + 1 < len {
            targets[i] = seq.tokens[i + 1];
            mask[i] = seq.loss_mask[i];
        }
    }
    (targets, mask)
}

/// Sum of token, type, and role embeddings, row per position. Positions
/// enter later through the rotary encoding inside attention.
pub fn embed<T: Scalar>(params: &Parameters<T>, seq: &Sequence) -> Result<Tensor<T>, ModelError> {
    let tables = [
        ("tokens", "token_embedding", &seq.tokens),
        ("types", "type_embedding", &seq.types),
        ("roles", "role_embedding", &seq.roles),
    ];
    let d = params.config.embed_dim;
    let mut out = Tensor::zeros(&[seq.len(), d]);
    for (array, table_name, ids) in tables {
        let table = params.get(table_name)?;
        for (index, &id) in ids.iter().enumerate() {
            if id as usize >= table.rows() {
                return Err(ModelError::IdOutOfRange {
                    array,
                    index,
                    id,
                    limit: table.rows(),
                });
            }
            let src = table.row(id as usize);
            for (dst, s) in out.row_mut(index).iter_mut().zip(src) {
                *dst += *s;
            }
        }
    }
    Ok(out)
}

/// Build the transformer forward graph for one sequence. With `with_loss`,
/// a masked cross-entropy node over the shifted targets is appended.
pub fn build_forward<T: Scalar>(
    params: &Parameters<T>,
    seq: &Sequence,
    mode: Mode,
    dropout_seed: u64,
    with_loss: bool,
) -> Result<ForwardGraph<T>, ModelError> {
    seq.validate(&params.config)?;
    let cfg = &params.config;
    let len = seq.len();
    let head_dim = cfg.head_dim();
    let dropout = cfg.dropout;

    let mut g: Graph<T> = Graph::new(mode).with_dropout_seed(dropout_seed);
    let mut ids: HashMap<&String, NodeId> = HashMap::new();
    for (name, tensor) in params.iter() {
        ids.insert(name, g.parameter(name, tensor.clone()));
    }
    let p = |name: &str| -> NodeId { *ids.get(&name.to_string()).expect("known tensor") };

    let as_usize = |v: &[u32]| v.iter().map(|&x| x as usize).collect::<Vec<_>>();
    let tok = g.embedding(p("token_embedding"), &as_usize(&seq.tokens))?;
    let typ = g.embedding(p("type_embedding"), &as_usize(&seq.types))?;
    let rol = g.embedding(p("role_embedding"), &as_usize(&seq.roles))?;
    let sum = g.add(tok, typ)?;
    let mut x = g.add(sum, rol)?;
    x = g.dropout(x, dropout)?;

    let additive = build_prefix_mask(seq.prefix_len, len)?.to_additive::<T>();
    let mask = g.constant(additive);
    let (cos_t, sin_t) = rope_tables::<T>(&seq.positions, head_dim, cfg.rope_base)?;
    let cos = g.constant(cos_t);
    let sin = g.constant(sin_t);
    let scale = 1.0 / (head_dim as f64).sqrt();

    let rotate = |g: &mut Graph<T>, v: NodeId| -> Result<NodeId, ModelError> {
        let straight = g.mul(v, cos)?;
        let turned = g.rotate_pairs(v)?;
        let turned = g.mul(turned, sin)?;
        Ok(g.add(straight, turned)?)
    };

    for layer in 0..cfg.layers {
        let name = |suffix: &str| format!("layer{layer}.{suffix}");

        let normed = g.layer_norm(x, p(&name("ln1.gain")), p(&name("ln1.bias")), 1e-5)?;
        let q = g.matmul(normed, p(&name("attn.wq")))?;
        let q = g.add(q, p(&name("attn.bq")))?;
        let k = g.matmul(normed, p(&name("attn.wk")))?;
        let k = g.add(k, p(&name("attn.bk")))?;
        let v = g.matmul(normed, p(&name("attn.wv")))?;
        let v = g.add(v, p(&name("attn.bv")))?;

        let mut head_outputs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let start = h * head_dim;
            let qh = g.slice_cols(q, start, head_dim)?;
            let kh = g.slice_cols(k, start, head_dim)?;
            let vh = g.slice_cols(v, start, head_dim)?;
            let qh = rotate(&mut g, qh)?;
            let kh = rotate(&mut g, kh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let scores = g.add(scores, mask)?;
            let probs = g.softmax(scores)?;
            let probs = g.dropout(probs, dropout)?;
            head_outputs.push(g.matmul(probs, vh)?);
        }
        let merged = g.concat_cols(&head_outputs)?;
        let projected = g.matmul(merged, p(&name("attn.wo")))?;
        let projected = g.add(projected, p(&name("attn.bo")))?;
        let projected = g.dropout(projected, dropout)?;
        x = g.add(x, projected)?;

        let normed2 = g.layer_norm(x, p(&name("ln2.gain")), p(&name("ln2.bias")), 1e-5)?;
        let hidden = g.matmul(normed2, p(&name("ffn.w1")))?;
        let hidden = g.add(hidden, p(&name("ffn.b1")))?;
        let hidden = g.gelu(hidden);
        let ff = g.matmul(hidden, p(&name("ffn.w2")))?;
        let ff = g.add(ff, p(&name("ffn.b2")))?;
        let ff = g.dropout(ff, dropout)?;
        x = g.add(x, ff)?;
    }

    let x = g.layer_norm(x, p("final_norm.gain"), p("final_norm.bias"), 1e-5)?;
    let logits = g.matmul(x, p("output_projection"))?;

    let loss = if with_loss {
        let (targets, mask_bits) = shifted_targets(seq);
        let target_ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        Some(g.cross_entropy(logits, &target_ids, &mask_bits)?)
    } else {
        None
    };

    Ok(ForwardGraph {
        graph: g,
        logits,
        loss,
    })
}

/// Run the model over one sequence, returning logits [len × vocab_size].
pub fn forward<T: Scalar>(params: &Parameters<T>, seq: &Sequence) -> Result<Tensor<T>, ModelError> {
    let mut fg = build_forward(params, seq, Mode::Eval, 0, false)?;
    let out = fg.graph.evaluate(&[], &[fg.logits])?;
    Ok(out.into_iter().next().expect("one output"))
}

/// Mean over masked positions of −log softmax(logits[i])[targets[i]].
/// Targets must already be shifted so position i carries the token it
/// predicts.
pub fn nll_loss<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[TokenId],
    loss_mask: &[bool],
) -> Result<T, ModelError> {
    if targets.len() != logits.rows() || loss_mask.len() != logits.rows() {
        return Err(ModelError::InvalidSequence(format!(
            "{} logit rows, {} targets, {} mask bits",
            logits.rows(),
            targets.len(),
            loss_mask.len()
        )));
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for i in 0..logits.rows() {
        if !loss_mask[i] {
            continue;
        }
        let row = logits.row(i);
        let target = targets[i] as usize;
        if target >= row.len() {
            return Err(ModelError::IdOutOfRange {
                array: "targets",
                index: i,
                id: targets[i],
                limit: row.len(),
            });
        }
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        total += max + sum.ln() - row[target];
        count += 1;
    }
    if count == 0 {
        return Err(ModelError::InvalidSequence(
            "no trainable targets (empty loss mask)".into(),
        ));
    }
    Ok(total / real::<T>(count as f64))
}
