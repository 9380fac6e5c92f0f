//! The transformer: configuration, parameters, instrumented forward pass,
//! training loss, and greedy decoding.

use serde::{Deserialize, Serialize};

use super::trace::{CaptureOptions, CapturePositions, HeadMask, TraceBundle};
use super::ModelError;
use crate::numcore::{NodeId, Rng, Scalar, Tape, Tensor};
use crate::tasks::{AnswerValue, SegmentMap, Token, Vocab};

/// Layer-norm epsilon used everywhere (blocks, final norm, logit lens).
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        d_ff: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Result<Self, ModelError> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {d_model} must be divisible by n_heads {n_heads}"
            )));
        }
        if n_layers == 0 || d_ff == 0 || vocab_size == 0 || max_seq_len == 0 {
            return Err(ModelError::BadConfig("all dimensions must be positive".into()));
        }
        Ok(ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads,
            d_ff,
            vocab_size,
            max_seq_len,
        })
    }

    /// Default desk-scale model: 4 layers, 4 heads, d_model 128, d_ff 512.
    pub fn desk_default(vocab_size: usize) -> Self {
        Self::new(4, 4, 128, 512, vocab_size, 64).expect("desk defaults are valid")
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    /// Output projection. No bias: the residual update is then exactly the
    /// sum of per-head contributions, which keeps the stream decomposition
    /// and head ablation semantics exact.
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub tok_embed: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
    /// Unembedding matrix, shape (V, d_model). Row t is token t's readout
    /// direction; the logit lens and logit attribution reuse these rows.
    pub unembed: Tensor<T>,
}

impl<T: Scalar> Params<T> {
    /// Visits every parameter tensor in a fixed canonical order.
    pub fn for_each(&self, mut f: impl FnMut(String, &Tensor<T>)) {
        f("tok_embed".into(), &self.tok_embed);
        f("pos_embed".into(), &self.pos_embed);
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layer{i}.ln1_gain"), &l.ln1_gain);
            f(format!("layer{i}.ln1_bias"), &l.ln1_bias);
            f(format!("layer{i}.wq"), &l.wq);
            f(format!("layer{i}.bq"), &l.bq);
            f(format!("layer{i}.wk"), &l.wk);
            f(format!("layer{i}.bk"), &l.bk);
            f(format!("layer{i}.wv"), &l.wv);
            f(format!("layer{i}.bv"), &l.bv);
            f(format!("layer{i}.wo"), &l.wo);
            f(format!("layer{i}.ln2_gain"), &l.ln2_gain);
            f(format!("layer{i}.ln2_bias"), &l.ln2_bias);
            f(format!("layer{i}.w1"), &l.w1);
            f(format!("layer{i}.b1"), &l.b1);
            f(format!("layer{i}.w2"), &l.w2);
            f(format!("layer{i}.b2"), &l.b2);
        }
        f("final_gain".into(), &self.final_gain);
        f("final_bias".into(), &self.final_bias);
        f("unembed".into(), &self.unembed);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        f("tok_embed", &mut self.tok_embed);
        f("pos_embed", &mut self.pos_embed);
        for l in self.layers.iter_mut() {
            f("ln1_gain", &mut l.ln1_gain);
            f("ln1_bias", &mut l.ln1_bias);
            f("wq", &mut l.wq);
            f("bq", &mut l.bq);
            f("wk", &mut l.wk);
            f("bk", &mut l.bk);
            f("wv", &mut l.wv);
            f("bv", &mut l.bv);
            f("wo", &mut l.wo);
            f("ln2_gain", &mut l.ln2_gain);
            f("ln2_bias", &mut l.ln2_bias);
            f("w1", &mut l.w1);
            f("b1", &mut l.b1);
            f("w2", &mut l.w2);
            f("b2", &mut l.b2);
        }
        f("final_gain", &mut self.final_gain);
        f("final_bias", &mut self.final_bias);
        f("unembed", &mut self.unembed);
    }

    pub fn n_tensors(&self) -> usize {
        3 + 15 * self.layers.len() + 2
    }

    pub fn flat(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(self.n_tensors());
        self.for_each(|name, t| out.push((name, t.clone())));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerModel<T = f32> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

struct BoundLayer {
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

struct Bound {
    all: Vec<NodeId>,
    tok_embed: NodeId,
    pos_embed: NodeId,
    layers: Vec<BoundLayer>,
    final_gain: NodeId,
    final_bias: NodeId,
    unembed: NodeId,
}

/// A completed forward pass: the tape (for gradients), the logits node, and
/// everything that was captured.
pub struct ForwardPass<T: Scalar> {
    pub tape: Tape<T>,
    pub logits: NodeId,
    pub trace: TraceBundle,
    pub(crate) param_nodes: Vec<NodeId>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn logits_tensor(&self) -> &Tensor<T> {
        self.tape.value(self.logits)
    }

    /// Next-token distribution read off one position, in f64.
    pub fn probabilities_at(&self, pos: usize) -> Vec<f64> {
        let row: Vec<f64> = self
            .logits_tensor()
            .row(pos)
            .iter()
            .map(|v| v.to_f64_val())
            .collect();
        softmax_f64(&row)
    }
}

/// Result of one training forward/backward.
pub struct TrainingStep<T: Scalar> {
    pub loss: f64,
    /// Gradients aligned with the canonical parameter order.
    pub grads: Vec<Tensor<T>>,
    /// d(loss)/d(logits); zero everywhere except the supervised rows.
    pub logit_grad: Tensor<T>,
}

impl<T: Scalar> TransformerModel<T> {
    /// Fresh model with N(0, 0.02) weights; residual-writing projections are
    /// scaled down by 1/sqrt(2 * n_layers).
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let d = config.d_model;
        let std = 0.02;
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::filled(vec![d], T::one()),
                ln1_bias: Tensor::zeros(vec![d]),
                wq: Tensor::randn(vec![d, d], std, rng),
                bq: Tensor::zeros(vec![d]),
                wk: Tensor::randn(vec![d, d], std, rng),
                bk: Tensor::zeros(vec![d]),
                wv: Tensor::randn(vec![d, d], std, rng),
                bv: Tensor::zeros(vec![d]),
                wo: Tensor::randn(vec![d, d], out_std, rng),
                ln2_gain: Tensor::filled(vec![d], T::one()),
                ln2_bias: Tensor::zeros(vec![d]),
                w1: Tensor::randn(vec![d, config.d_ff], std, rng),
                b1: Tensor::zeros(vec![config.d_ff]),
                w2: Tensor::randn(vec![config.d_ff, d], out_std, rng),
                b2: Tensor::zeros(vec![d]),
            })
            .collect();
        TransformerModel {
            config: config.clone(),
            params: Params {
                tok_embed: Tensor::randn(vec![config.vocab_size, d], std, rng),
                pos_embed: Tensor::randn(vec![config.max_seq_len, d], std, rng),
                layers,
                final_gain: Tensor::filled(vec![d], T::one()),
                final_bias: Tensor::zeros(vec![d]),
                unembed: Tensor::randn(vec![config.vocab_size, d], std, rng),
            },
        }
    }

    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        let cast_layer = |l: &LayerParams<T>| LayerParams {
            ln1_gain: l.ln1_gain.cast(),
            ln1_bias: l.ln1_bias.cast(),
            wq: l.wq.cast(),
            bq: l.bq.cast(),
            wk: l.wk.cast(),
            bk: l.bk.cast(),
            wv: l.wv.cast(),
            bv: l.bv.cast(),
            wo: l.wo.cast(),
            ln2_gain: l.ln2_gain.cast(),
            ln2_bias: l.ln2_bias.cast(),
            w1: l.w1.cast(),
            b1: l.b1.cast(),
            w2: l.w2.cast(),
            b2: l.b2.cast(),
        };
        TransformerModel {
            config: self.config.clone(),
            params: Params {
                tok_embed: self.params.tok_embed.cast(),
                pos_embed: self.params.pos_embed.cast(),
                layers: self.params.layers.iter().map(cast_layer).collect(),
                final_gain: self.params.final_gain.cast(),
                final_bias: self.params.final_bias.cast(),
                unembed: self.params.unembed.cast(),
            },
        }
    }

    fn bind(&self, tape: &mut Tape<T>) -> Result<Bound, ModelError> {
        let mut all = Vec::with_capacity(self.params.n_tensors());
        let mut push = |tape: &mut Tape<T>, t: &Tensor<T>| -> Result<NodeId, ModelError> {
            let id = tape.leaf(t.clone())?;
            all.push(id);
            Ok(id)
        };
        let tok_embed = push(tape, &self.params.tok_embed)?;
        let pos_embed = push(tape, &self.params.pos_embed)?;
        let mut layers = Vec::with_capacity(self.params.layers.len());
        for l in &self.params.layers {
            layers.push(BoundLayer {
                ln1_gain: push(tape, &l.ln1_gain)?,
                ln1_bias: push(tape, &l.ln1_bias)?,
                wq: push(tape, &l.wq)?,
                bq: push(tape, &l.bq)?,
                wk: push(tape, &l.wk)?,
                bk: push(tape, &l.bk)?,
                wv: push(tape, &l.wv)?,
                bv: push(tape, &l.bv)?,
                wo: push(tape, &l.wo)?,
                ln2_gain: push(tape, &l.ln2_gain)?,
                ln2_bias: push(tape, &l.ln2_bias)?,
                w1: push(tape, &l.w1)?,
                b1: push(tape, &l.b1)?,
                w2: push(tape, &l.w2)?,
                b2: push(tape, &l.b2)?,
            });
        }
        let final_gain = push(tape, &self.params.final_gain)?;
        let final_bias = push(tape, &self.params.final_bias)?;
        let unembed = push(tape, &self.params.unembed)?;
        Ok(Bound {
            all,
            tok_embed,
            pos_embed,
            layers,
            final_gain,
            final_bias,
            unembed,
        })
    }

    fn validate_input(&self, tokens: &[Token], mask: &HeadMask) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        for (layer, head) in mask.iter() {
            if layer >= self.config.n_layers || head >= self.config.n_heads {
                return Err(ModelError::HeadOutOfRange {
                    layer,
                    head,
                    n_layers: self.config.n_layers,
                    n_heads: self.config.n_heads,
                });
            }
        }
        Ok(())
    }

    /// Causal forward pass. Heads listed in `mask` have their residual
    /// contribution replaced by zeros. `segment` (when given) is stored in
    /// the trace and enables forerunner-only capture.
    pub fn forward(
        &self,
        tokens: &[Token],
        mask: &HeadMask,
        capture: &CaptureOptions,
        segment: Option<&SegmentMap>,
    ) -> Result<ForwardPass<T>, ModelError> {
        self.validate_input(tokens, mask)?;
        let cfg = &self.config;
        let seq = tokens.len();
        let keep: Option<usize> = match capture.positions {
            CapturePositions::All => None,
            CapturePositions::ForerunnerOnly => Some(
                segment
                    .ok_or(ModelError::NotCaptured("segment map required for forerunner capture"))?
                    .forerunner,
            ),
        };

        let mut trace = TraceBundle::new(
            seq,
            cfg.n_layers,
            cfg.n_heads,
            cfg.d_model,
            segment.cloned(),
        );
        trace.init_storage(capture);

        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;

        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok_e = tape.embedding_lookup(bound.tok_embed, &ids)?;
        let positions: Vec<usize> = (0..seq).collect();
        let pos_e = tape.embedding_lookup(bound.pos_embed, &positions)?;
        let mut x = tape.add(tok_e, pos_e)?;
        if capture.residuals {
            trace.push_residual(&tape.value(x).cast::<f64>(), keep);
        }

        let eps = T::of_f64(LN_EPS);
        let inv_sqrt_dh = T::of_f64(1.0 / (cfg.d_head as f64).sqrt());

        for (l, layer) in bound.layers.iter().enumerate() {
            let xn = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias, eps)?;
            let q = {
                let m = tape.matmul(xn, layer.wq)?;
                tape.add(m, layer.bq)?
            };
            let k = {
                let m = tape.matmul(xn, layer.wk)?;
                tape.add(m, layer.bk)?
            };
            let v = {
                let m = tape.matmul(xn, layer.wv)?;
                tape.add(m, layer.bv)?
            };

            let mut attn_capture: Vec<Option<Tensor<f64>>> = Vec::with_capacity(cfg.n_heads);
            let mut contrib_capture: Vec<(Tensor<f64>, Option<usize>)> = Vec::new();
            let mut head_outputs: Vec<NodeId> = Vec::with_capacity(cfg.n_heads);

            for h in 0..cfg.n_heads {
                if mask.contains(l, h) {
                    // ablated: contribution is exactly zero, pattern not computed
                    if capture.attention {
                        attn_capture.push(None);
                    }
                    if capture.head_contributions {
                        contrib_capture
                            .push((Tensor::zeros(vec![seq, cfg.d_model]), keep));
                    }
                    continue;
                }
                let off = h * cfg.d_head;
                let qh = tape.slice(q, 1, off, cfg.d_head)?;
                let kh = tape.slice(k, 1, off, cfg.d_head)?;
                let vh = tape.slice(v, 1, off, cfg.d_head)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.scale(scores, inv_sqrt_dh)?;
                let masked = tape.causal_mask_fill(scaled)?;
                let probs = tape.softmax_last_dim(masked)?;
                if capture.attention {
                    attn_capture.push(Some(tape.value(probs).cast::<f64>()));
                }
                let ctx = tape.matmul(probs, vh)?;
                let wo_h = tape.slice(layer.wo, 0, off, cfg.d_head)?;
                let o = tape.matmul(ctx, wo_h)?;
                if capture.head_contributions {
                    contrib_capture.push((tape.value(o).cast::<f64>(), keep));
                }
                head_outputs.push(o);
            }
            if capture.attention {
                trace.push_attention_layer(attn_capture);
            }
            if capture.head_contributions {
                trace.push_contribution_layer(contrib_capture);
            }

            for o in head_outputs {
                x = tape.add(x, o)?;
            }

            let xn2 = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias, eps)?;
            let h1 = {
                let m = tape.matmul(xn2, layer.w1)?;
                tape.add(m, layer.b1)?
            };
            let act = tape.gelu(h1)?;
            let mlp_out = {
                let m = tape.matmul(act, layer.w2)?;
                tape.add(m, layer.b2)?
            };
            if capture.mlp_contributions {
                trace.push_mlp_contribution(&tape.value(mlp_out).cast::<f64>(), keep);
            }
            x = tape.add(x, mlp_out)?;
            if capture.residuals {
                trace.push_residual(&tape.value(x).cast::<f64>(), keep);
            }
        }

        let xf = tape.layer_norm(x, bound.final_gain, bound.final_bias, eps)?;
        let wt = tape.transpose(bound.unembed)?;
        let logits = tape.matmul(xf, wt)?;

        Ok(ForwardPass {
            tape,
            logits,
            trace,
            param_nodes: bound.all,
        })
    }

    /// Forward pass, cross-entropy at the supervised positions, and
    /// backward. Loss is the mean over the (position, target) pairs.
    pub fn training_loss(
        &self,
        tokens: &[Token],
        targets: &[(usize, Token)],
        mask: &HeadMask,
    ) -> Result<TrainingStep<T>, ModelError> {
        let mut pass = self.forward(tokens, mask, &CaptureOptions::none(), None)?;
        let target_pairs: Vec<(usize, usize)> = targets
            .iter()
            .map(|&(pos, tok)| (pos, tok as usize))
            .collect();
        let loss = pass
            .tape
            .cross_entropy_with_logits(pass.logits, &target_pairs)?;
        pass.tape.backward(loss)?;
        let grads = pass
            .param_nodes
            .iter()
            .zip(self.params.flat())
            .map(|(&node, (_, t))| {
                pass.tape
                    .grad(node)
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect();
        let logit_grad = pass
            .tape
            .grad(pass.logits)
            .expect("logits participate in the loss");
        Ok(TrainingStep {
            loss: pass.tape.value(loss).scalar_value().to_f64_val(),
            grads,
            logit_grad,
        })
    }

    /// Greedy decoding: repeatedly appends the argmax token (ties break to
    /// the lowest id). Returns the generated tokens and the full next-token
    /// distribution at each step.
    pub fn decode_greedy(
        &self,
        prompt: &[Token],
        max_new: usize,
        mask: &HeadMask,
    ) -> Result<(Vec<Token>, Vec<Vec<f64>>), ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        let mut tokens = prompt.to_vec();
        let mut generated = Vec::with_capacity(max_new);
        let mut distributions = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            if tokens.len() >= self.config.max_seq_len {
                break;
            }
            let pass = self.forward(&tokens, mask, &CaptureOptions::none(), None)?;
            let dist = pass.probabilities_at(tokens.len() - 1);
            let next = argmax(&dist) as Token;
            distributions.push(dist);
            generated.push(next);
            tokens.push(next);
        }
        Ok((generated, distributions))
    }

    /// Single-token greedy answer for an encoded prompt: the argmax at the
    /// forerunner position plus its distribution.
    pub fn answer_token(
        &self,
        tokens: &[Token],
        mask: &HeadMask,
    ) -> Result<(Token, Vec<f64>), ModelError> {
        let pass = self.forward(tokens, mask, &CaptureOptions::none(), None)?;
        let dist = pass.probabilities_at(tokens.len() - 1);
        Ok((argmax(&dist) as Token, dist))
    }
}

/// First index attaining the maximum.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_f64(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Maps an emitted token back to an answer value, if it is one.
pub fn token_to_answer(vocab: &Vocab, token: Token) -> Option<AnswerValue> {
    let name = vocab.name(token);
    if let Ok(v) = name.parse::<i64>() {
        return Some(AnswerValue::Int(v));
    }
    crate::tasks::vocab::COLOR_WORDS
        .iter()
        .position(|&c| c == name)
        .map(AnswerValue::Color)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{encode, sample_episode, PromptMode, RuleFamily};

    fn tiny_config() -> ModelConfig {
        ModelConfig::new(2, 2, 16, 32, 24, 32).unwrap()
    }

    fn tiny_model(seed: u64) -> TransformerModel<f32> {
        TransformerModel::init(&tiny_config(), &mut Rng::new(seed))
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        assert!(ModelConfig::new(2, 3, 16, 32, 10, 16).is_err());
    }

    #[test]
    fn empty_mask_forward_is_bit_identical_to_unmasked() {
        let model = tiny_model(1);
        let tokens: Vec<Token> = vec![1, 2, 3, 4, 5];
        let a = model
            .forward(&tokens, &HeadMask::empty(), &CaptureOptions::none(), None)
            .unwrap();
        let b = model
            .forward(&tokens, &HeadMask::empty(), &CaptureOptions::none(), None)
            .unwrap();
        assert_eq!(a.logits_tensor(), b.logits_tensor());
    }

    #[test]
    fn masking_all_heads_equals_attention_free_forward() {
        // oracle: a straight-line forward that skips attention sublayers
        let model = tiny_model(2);
        let cfg = &model.config;
        let tokens: Vec<Token> = vec![3, 1, 4, 1, 5];
        let all_pairs: Vec<(usize, usize)> = (0..cfg.n_layers)
            .flat_map(|l| (0..cfg.n_heads).map(move |h| (l, h)))
            .collect();
        let mask = HeadMask::from_pairs(&all_pairs, cfg.n_layers, cfg.n_heads).unwrap();
        let masked = model
            .forward(&tokens, &mask, &CaptureOptions::none(), None)
            .unwrap();

        let mut tape = Tape::<f32>::new();
        let eps = LN_EPS as f32;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let te = tape.leaf(model.params.tok_embed.clone()).unwrap();
        let pe = tape.leaf(model.params.pos_embed.clone()).unwrap();
        let e = tape.embedding_lookup(te, &ids).unwrap();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = tape.embedding_lookup(pe, &positions).unwrap();
        let mut x = tape.add(e, p).unwrap();
        for l in &model.params.layers {
            // attention sublayer skipped entirely
            let g2 = tape.leaf(l.ln2_gain.clone()).unwrap();
            let b2n = tape.leaf(l.ln2_bias.clone()).unwrap();
            let xn = tape.layer_norm(x, g2, b2n, eps).unwrap();
            let w1 = tape.leaf(l.w1.clone()).unwrap();
            let b1 = tape.leaf(l.b1.clone()).unwrap();
            let h1 = {
                let m = tape.matmul(xn, w1).unwrap();
                tape.add(m, b1).unwrap()
            };
            let act = tape.gelu(h1).unwrap();
            let w2 = tape.leaf(l.w2.clone()).unwrap();
            let b2 = tape.leaf(l.b2.clone()).unwrap();
            let mo = {
                let m = tape.matmul(act, w2).unwrap();
                tape.add(m, b2).unwrap()
            };
            x = tape.add(x, mo).unwrap();
        }
        let fg = tape.leaf(model.params.final_gain.clone()).unwrap();
        let fb = tape.leaf(model.params.final_bias.clone()).unwrap();
        let xf = tape.layer_norm(x, fg, fb, eps).unwrap();
        let ue = tape.leaf(model.params.unembed.clone()).unwrap();
        let ut = tape.transpose(ue).unwrap();
        let logits = tape.matmul(xf, ut).unwrap();

        let got = masked.logits_tensor();
        let want = tape.value(logits);
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn final_residual_through_final_norm_equals_logits() {
        let model = tiny_model(3);
        let tokens: Vec<Token> = vec![7, 8, 9];
        let pass = model
            .forward(&tokens, &HeadMask::empty(), &CaptureOptions::full(), None)
            .unwrap();
        let model64 = model.cast::<f64>();
        let n_layers = model.config.n_layers;
        for pos in 0..tokens.len() {
            let h = pass.trace.residual(n_layers, pos).unwrap();
            let normed = layer_norm_f64(
                h,
                &model64.params.final_gain.to_f64_vec(),
                &model64.params.final_bias.to_f64_vec(),
            );
            let (v, d) = model64.params.unembed.dims2();
            for t in 0..v {
                let mut logit = 0.0;
                for j in 0..d {
                    logit += normed[j] * model64.params.unembed.at2(t, j);
                }
                let got = pass.logits_tensor().at2(pos, t) as f64;
                assert!((logit - got).abs() < 1e-4, "pos {pos} tok {t}: {logit} vs {got}");
            }
        }
    }

    fn layer_norm_f64(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.iter()
            .zip(gain.iter().zip(bias))
            .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
            .collect()
    }

    #[test]
    fn attention_rows_are_distributions_and_recomposition_holds() {
        let model = tiny_model(4);
        let mut rng = Rng::new(99);
        for _ in 0..5 {
            let inst =
                sample_episode(&RuleFamily::operator_induction(), 3, &mut rng, false).unwrap();
            let vocab = Vocab::standard();
            // tiny vocab model cannot encode real episodes; use raw tokens
            let _ = (inst, &vocab);
            let tokens: Vec<Token> = (0..10).map(|i| (i * 7 % 24) as Token).collect();
            let pass = model
                .forward(&tokens, &HeadMask::empty(), &CaptureOptions::full(), None)
                .unwrap();
            for l in 0..model.config.n_layers {
                for h in 0..model.config.n_heads {
                    let attn = pass.trace.attention(l, h).unwrap().unwrap();
                    for i in 0..tokens.len() {
                        let row = attn.row(i);
                        assert!(row.iter().all(|&p| p >= 0.0));
                        let total: f64 = row.iter().sum();
                        assert!((total - 1.0).abs() < 1e-5, "row sum {total}");
                        for (j, &p) in row.iter().enumerate() {
                            if j > i {
                                assert!(p < 1e-9, "causal leak at ({i},{j})");
                            }
                        }
                    }
                }
            }
            let err = pass.trace.recomposition_error().unwrap();
            assert!(err <= 1e-4, "recomposition error {err}");
        }
    }

    #[test]
    fn masked_head_contribution_is_exactly_zero() {
        let model = tiny_model(5);
        let tokens: Vec<Token> = vec![1, 2, 3, 4];
        let mask = HeadMask::from_pairs(&[(0, 1), (1, 0)], 2, 2).unwrap();
        let pass = model
            .forward(&tokens, &mask, &CaptureOptions::full(), None)
            .unwrap();
        for (l, h) in [(0usize, 1usize), (1, 0)] {
            for pos in 0..tokens.len() {
                let o = pass.trace.head_contribution(l, h, pos).unwrap();
                assert!(o.iter().all(|&v| v == 0.0));
            }
            assert!(pass.trace.attention(l, h).unwrap().is_none());
        }
        // unmasked heads still contribute and recomposition still holds
        let err = pass.trace.recomposition_error().unwrap();
        assert!(err <= 1e-4);
    }

    #[test]
    fn masking_superset_never_leaves_masked_head_nonzero() {
        let model = tiny_model(6);
        let tokens: Vec<Token> = vec![5, 6, 7];
        let mut rng = Rng::new(7);
        for _ in 0..10 {
            let n = rng.usize_below(5);
            let pairs: Vec<(usize, usize)> = (0..n)
                .map(|_| (rng.usize_below(2), rng.usize_below(2)))
                .collect();
            let mask = HeadMask::from_pairs(&pairs, 2, 2).unwrap();
            let pass = model
                .forward(&tokens, &mask, &CaptureOptions::full(), None)
                .unwrap();
            for (l, h) in mask.iter() {
                for pos in 0..tokens.len() {
                    assert!(pass
                        .trace
                        .head_contribution(l, h, pos)
                        .unwrap()
                        .iter()
                        .all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn one_layer_one_head_contribution_matches_straight_line_oracle() {
        // hand-checkable 1-layer 1-head model with small dimensions
        let config = ModelConfig::new(1, 1, 4, 8, 6, 8).unwrap();
        let mut rng = Rng::new(11);
        let model = TransformerModel::<f64>::init(&config, &mut rng);
        let tokens: Vec<Token> = vec![2, 5, 1];
        let pass = model
            .forward(&tokens, &HeadMask::empty(), &CaptureOptions::full(), None)
            .unwrap();

        // straight-line recomputation of o_{0,0} at the last position
        let p = &model.params;
        let l = &p.layers[0];
        let seq = tokens.len();
        let d = 4;
        // embeddings
        let mut x = vec![vec![0.0f64; d]; seq];
        for (i, &t) in tokens.iter().enumerate() {
            for j in 0..d {
                x[i][j] = p.tok_embed.at2(t as usize, j) + p.pos_embed.at2(i, j);
            }
        }
        // pre-attention norm
        let xn: Vec<Vec<f64>> = x
            .iter()
            .map(|row| {
                layer_norm_f64(row, &l.ln1_gain.to_f64_vec(), &l.ln1_bias.to_f64_vec())
            })
            .collect();
        let proj = |w: &Tensor<f64>, b: &Tensor<f64>, row: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|j| {
                    (0..d).map(|i| row[i] * w.at2(i, j)).sum::<f64>() + b.data()[j]
                })
                .collect()
        };
        let q: Vec<Vec<f64>> = xn.iter().map(|r| proj(&l.wq, &l.bq, r)).collect();
        let k: Vec<Vec<f64>> = xn.iter().map(|r| proj(&l.wk, &l.bk, r)).collect();
        let v: Vec<Vec<f64>> = xn.iter().map(|r| proj(&l.wv, &l.bv, r)).collect();
        let pos = seq - 1;
        let scale = 1.0 / (d as f64).sqrt();
        let scores: Vec<f64> = (0..seq)
            .map(|j| q[pos].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let probs = softmax_f64(&scores);
        let ctx: Vec<f64> = (0..d)
            .map(|j| (0..seq).map(|t| probs[t] * v[t][j]).sum())
            .collect();
        let o: Vec<f64> = (0..d)
            .map(|j| (0..d).map(|i| ctx[i] * l.wo.at2(i, j)).sum())
            .collect();

        let got = pass.trace.head_contribution(0, 0, pos).unwrap();
        for (a, b) in got.iter().zip(&o) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn decode_greedy_is_deterministic_and_distributions_normalize() {
        let model = tiny_model(8);
        let prompt: Vec<Token> = vec![3, 1, 2];
        let (a, da) = model.decode_greedy(&prompt, 5, &HeadMask::empty()).unwrap();
        let (b, _) = model.decode_greedy(&prompt, 5, &HeadMask::empty()).unwrap();
        assert_eq!(a, b);
        for dist in &da {
            let total: f64 = dist.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forced_unembedding_emits_the_forced_token() {
        let mut model = tiny_model(9);
        let d = model.config.d_model;
        let forced: Token = 5;
        // final norm output becomes the constant e_0 row, and only token 5's
        // readout row matches it
        for v in model.params.final_gain.data_mut() {
            *v = 0.0;
        }
        for (i, v) in model.params.final_bias.data_mut().iter_mut().enumerate() {
            *v = if i == 0 { 1.0 } else { 0.0 };
        }
        for v in model.params.unembed.data_mut() {
            *v = 0.0;
        }
        model.params.unembed.data_mut()[forced as usize * d] = 1.0;
        let (out, _) = model.decode_greedy(&[1, 2], 4, &HeadMask::empty()).unwrap();
        assert_eq!(out, vec![forced; 4]);
    }

    #[test]
    fn rejects_bad_tokens_and_long_sequences() {
        let model = tiny_model(10);
        assert!(matches!(
            model.forward(&[99], &HeadMask::empty(), &CaptureOptions::none(), None),
            Err(ModelError::TokenOutOfRange { .. })
        ));
        let long: Vec<Token> = vec![0; model.config.max_seq_len + 1];
        assert!(matches!(
            model.forward(&long, &HeadMask::empty(), &CaptureOptions::none(), None),
            Err(ModelError::SequenceTooLong { .. })
        ));
        assert!(matches!(
            model.forward(&[], &HeadMask::empty(), &CaptureOptions::none(), None),
            Err(ModelError::EmptyPrompt)
        ));
    }

    #[test]
    fn forerunner_only_capture_exposes_just_that_row() {
        let vocab = Vocab::standard();
        let config = ModelConfig::desk_default(vocab.size());
        let model = TransformerModel::<f32>::init(&config, &mut Rng::new(12));
        let mut rng = Rng::new(13);
        let inst = sample_episode(&RuleFamily::operator_induction(), 4, &mut rng, false).unwrap();
        let (tokens, map) = encode(&inst, PromptMode::AnswerPrompt, &vocab).unwrap();
        let pass = model
            .forward(
                &tokens,
                &HeadMask::empty(),
                &CaptureOptions::forerunner_residuals(),
                Some(&map),
            )
            .unwrap();
        assert!(pass.trace.residual(0, map.forerunner).is_ok());
        assert!(pass.trace.residual(0, 0).is_err());
    }

    #[test]
    fn loss_gradient_is_zero_outside_answer_slots() {
        let vocab = Vocab::standard();
        let config = ModelConfig::desk_default(vocab.size());
        let model = TransformerModel::<f32>::init(&config, &mut Rng::new(14));
        let mut rng = Rng::new(15);
        let inst = sample_episode(&RuleFamily::operator_induction(), 4, &mut rng, false).unwrap();
        let (tokens, targets) =
            crate::tasks::training_targets(&inst, PromptMode::AnswerPrompt, &vocab).unwrap();
        let step = model
            .training_loss(&tokens, &targets, &HeadMask::empty())
            .unwrap();
        let supervised: Vec<usize> = targets.iter().map(|&(p, _)| p).collect();
        for pos in 0..tokens.len() {
            let row = step.logit_grad.row(pos);
            if supervised.contains(&pos) {
                assert!(row.iter().any(|&v| v != 0.0), "supervised row {pos} is zero");
            } else {
                assert!(row.iter().all(|&v| v == 0.0), "unsupervised row {pos} nonzero");
            }
        }
    }

    #[test]
    fn token_to_answer_maps_residues_and_colors() {
        let vocab = Vocab::standard();
        assert_eq!(
            token_to_answer(&vocab, vocab.residue(7).unwrap()),
            Some(AnswerValue::Int(7))
        );
        assert_eq!(
            token_to_answer(&vocab, vocab.color(2)),
            Some(AnswerValue::Color(2))
        );
        assert_eq!(token_to_answer(&vocab, crate::tasks::vocab::EQUALS), None);
    }
}
