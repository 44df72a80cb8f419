use super::config::{ModelConfig, Variant};
use super::params::{Attention, Block, Classifier, Linear, ModelParams, Norm, QueryFormer};
use crate::error::{Error, Result};
use crate::numkernel::{Scalar, Tape, Tensor, Var};

/// Logits with one row per annotator, or a single row for `pre_mv_pool`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerAnnotatorLogits<T: Scalar> {
    pub logits: Tensor<T>,
}

impl<T: Scalar> PerAnnotatorLogits<T> {
    pub fn rows(&self) -> usize {
        self.logits.as_matrix().0
    }

    /// Argmax per row; ties resolve to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| argmax(self.logits.row(r))).collect()
    }
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Attention weights of one annotator-query block, one matrix per head.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockAttention {
    /// `[n_annotators × n_annotators]` per head; empty without self-attention.
    pub self_attn: Vec<Tensor<f64>>,
    /// `[n_annotators × n_keys]` per head.
    pub cross_attn: Vec<Tensor<f64>>,
}

/// How the key axis splits into frames in sequence mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLayout {
    pub n_frames: usize,
    pub keys_per_frame: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionRecord {
    pub blocks: Vec<BlockAttention>,
    pub frames: Option<FrameLayout>,
}

impl AttentionRecord {
    pub fn n_keys(&self) -> Option<usize> {
        self.blocks
            .first()
            .and_then(|b| b.cross_attn.first())
            .map(|t| t.last_dim())
    }

    /// Sums each frame's compressed-key columns: `[rows × n_frames]`.
    pub fn frame_mass(&self, cross: &Tensor<f64>) -> Result<Tensor<f64>> {
        let layout = self
            .frames
            .ok_or_else(|| Error::Contract("record has no frame layout".into()))?;
        let (rows, keys) = cross.as_matrix();
        if keys != layout.n_frames * layout.keys_per_frame {
            return Err(Error::dim(
                "frame_mass",
                format!("{keys} keys for {} frames of {}", layout.n_frames, layout.keys_per_frame),
            ));
        }
        let data = (0..rows)
            .flat_map(|r| {
                cross
                    .row(r)
                    .chunks_exact(layout.keys_per_frame)
                    .map(|c| c.iter().sum::<f64>())
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(&[rows, layout.n_frames], data)
    }

    /// Largest deviation of any captured attention row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.self_attn.iter().chain(&b.cross_attn))
            .flat_map(|t| {
                let (rows, _) = t.as_matrix();
                (0..rows).map(move |r| (t.row(r).iter().sum::<f64>() - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Handles for a forward pass built on a caller-owned tape.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub record: AttentionRecord,
}

struct Ctx<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    vars: &'a [Var],
    config: &'a ModelConfig,
}

impl<T: Scalar> Ctx<'_, T> {
    fn linear(&mut self, l: &Linear, x: Var) -> Result<Var> {
        let y = self.tape.matmul(x, self.vars[l.weight.0])?;
        match l.bias {
            Some(b) => self.tape.add_bias(y, self.vars[b.0]),
            None => Ok(y),
        }
    }

    fn norm(&mut self, n: &Norm, x: Var) -> Result<Var> {
        self.tape
            .layer_norm(x, self.vars[n.gamma.0], self.vars[n.beta.0], self.config.ln_eps)
    }

    fn attention(
        &mut self,
        a: &Attention,
        queries: Var,
        keys: Var,
        capture: Option<&mut Vec<Tensor<f64>>>,
    ) -> Result<Var> {
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let q = self.linear(&a.query, queries)?;
        let k = self.linear(&a.key, keys)?;
        let v = self.linear(&a.value, keys)?;
        let kt = self.tape.transpose(k)?;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_rows(kt, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let s = self.tape.matmul(qh, kh)?;
            let s = self.tape.scale(s, scale)?;
            let w = self.tape.softmax_lastdim(s)?;
            weights.push(w);
            outs.push(self.tape.matmul(w, vh)?);
        }
        if let Some(sink) = capture {
            sink.extend(weights.iter().map(|&w| self.tape.tensor(w).cast()));
        }
        let joined = if heads == 1 { outs[0] } else { self.tape.concat_cols(&outs)? };
        self.linear(&a.out, joined)
    }

    fn block(&mut self, b: &Block, x: Var, keys: Var, capture: Option<&mut BlockAttention>) -> Result<Var> {
        let (self_sink, cross_sink) = match capture {
            Some(rec) => (Some(&mut rec.self_attn), Some(&mut rec.cross_attn)),
            None => (None, None),
        };
        let mut x = x;
        if let Some((norm, attn)) = &b.self_attn {
            let n = self.norm(norm, x)?;
            let y = self.attention(attn, n, n, self_sink)?;
            x = self.tape.add(x, y)?;
        }
        let n = self.norm(&b.cross_norm, x)?;
        let y = self.attention(&b.cross_attn, n, keys, cross_sink)?;
        x = self.tape.add(x, y)?;
        let n = self.norm(&b.ff_norm, x)?;
        let hidden = self.linear(&b.ff_in, n)?;
        let hidden = self.tape.gelu(hidden)?;
        let y = self.linear(&b.ff_out, hidden)?;
        self.tape.add(x, y)
    }

    fn former(&mut self, f: &QueryFormer, keys: Var, mut record: Option<&mut AttentionRecord>) -> Result<Var> {
        let mut x = self.vars[f.queries.0];
        for b in &f.blocks {
            let rec = record.as_deref_mut().map(|r| {
                r.blocks.push(BlockAttention::default());
                r.blocks.last_mut().expect("just pushed")
            });
            x = self.block(b, x, keys, rec)?;
        }
        self.norm(&f.final_norm, x)
    }

    fn classify(&mut self, c: &Classifier, x: Var) -> Result<Var> {
        let h = self.linear(&c.hidden, x)?;
        let h = self.tape.gelu(h)?;
        self.linear(&c.out, h)
    }

    /// Applies classifier `k` to row `k` of `reps`, or the single shared
    /// classifier to all rows.
    fn heads(&mut self, classifiers: &[Classifier], reps: Var) -> Result<Var> {
        if classifiers.len() == 1 {
            return self.classify(&classifiers[0], reps);
        }
        let rows = classifiers
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let r = self.tape.slice_rows(reps, k, 1)?;
                self.classify(c, r)
            })
            .collect::<Result<Vec<_>>>()?;
        self.tape.concat_rows(&rows)
    }
}

fn check_features(config: &ModelConfig, shape: &[usize], op: &'static str) -> Result<()> {
    if shape.last() != Some(&config.feature_dim) {
        return Err(Error::dim(
            op,
            format!("features {shape:?} do not end in feature_dim {}", config.feature_dim),
        ));
    }
    Ok(())
}

/// Builds the forward graph for one sample on `tape`. `vars` are the handles
/// returned by [`ModelParams::register`]. `input` is `[n_patches ×
/// feature_dim]` in image mode and `[T × n_patches × feature_dim]` in
/// sequence mode.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    vars: &[Var],
    input: &Tensor<T>,
    capture: bool,
) -> Result<ForwardPass> {
    let config = &params.config;
    let layout = params.layout();
    let mut record = AttentionRecord::default();
    let sequence = config.is_sequence();
    match (sequence, input.rank()) {
        (false, 2) => check_features(config, input.shape(), "forward_image")?,
        (true, 3) => {
            check_features(config, input.shape(), "forward_sequence")?;
            if input.shape()[0] > config.max_frames {
                return Err(Error::Config(format!(
                    "{} frames exceed max_frames {}",
                    input.shape()[0],
                    config.max_frames
                )));
            }
        }
        (false, _) => {
            return Err(Error::dim(
                "forward_image",
                format!("expected [n_patches, feature_dim], got {:?}", input.shape()),
            ))
        }
        (true, _) => {
            return Err(Error::Config(format!(
                "sequence model expects [frames, n_patches, feature_dim], got {:?}",
                input.shape()
            )))
        }
    }
    let mut cx = Ctx { tape, vars, config };
    let flat = input.clone().reshape(&[input.len() / config.feature_dim, config.feature_dim])?;
    let x = cx.tape.constant(&flat)?;

    if config.variant == Variant::Base {
        let pooled = cx.tape.mean_rows(x)?;
        let reps = (0..config.n_annotators).map(|_| pooled).collect::<Vec<_>>();
        let reps = cx.tape.concat_rows(&reps)?;
        let logits = cx.heads(&layout.classifiers, reps)?;
        return Ok(ForwardPass { logits, record });
    }

    let keys = match &layout.compressor {
        Some(comp) => {
            let frames = input.shape()[0];
            let patches = input.shape()[1];
            let mut parts = Vec::with_capacity(frames);
            for t in 0..frames {
                let fx = cx.tape.slice_rows(x, t * patches, patches)?;
                let c = cx.former(&comp.former, fx, None)?;
                let pos = cx.tape.slice_rows(vars[comp.frame_position.0], t, 1)?;
                let pos = cx.tape.reshape(pos, &[config.hidden_dim])?;
                parts.push(cx.tape.add_bias(c, pos)?);
            }
            record.frames = Some(FrameLayout {
                n_frames: frames,
                keys_per_frame: config.n_compression_queries,
            });
            if frames == 1 {
                parts[0]
            } else {
                cx.tape.concat_rows(&parts)?
            }
        }
        None => x,
    };

    let former = layout.annotator_former.as_ref().expect("query-former variant");
    let reps = cx.former(former, keys, capture.then_some(&mut record))?;
    let fc = layout.output_fc.as_ref().expect("query-former variant");
    let reps = cx.linear(fc, reps)?;
    let reps = if config.variant == Variant::PreMvPool {
        cx.tape.mean_rows(reps)?
    } else {
        reps
    };
    let logits = cx.heads(&layout.classifiers, reps)?;
    Ok(ForwardPass { logits, record })
}

fn run<T: Scalar>(
    params: &ModelParams<T>,
    input: &Tensor<T>,
    capture: bool,
) -> Result<(PerAnnotatorLogits<T>, AttentionRecord)> {
    input.ensure_finite("forward")?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false)?;
    let pass = forward_on_tape(&mut tape, params, &vars, input, capture)?;
    Ok((
        PerAnnotatorLogits {
            logits: tape.tensor(pass.logits),
        },
        pass.record,
    ))
}

/// Inference on one image: `[n_patches × feature_dim]`.
pub fn forward_image<T: Scalar>(
    features: &Tensor<T>,
    params: &ModelParams<T>,
) -> Result<(PerAnnotatorLogits<T>, AttentionRecord)> {
    if params.config.is_sequence() {
        return Err(Error::Config("model was configured for frame sequences".into()));
    }
    run(params, features, true)
}

/// Inference on one clip: `[T × n_patches × feature_dim]`.
pub fn forward_sequence<T: Scalar>(
    frames: &Tensor<T>,
    params: &ModelParams<T>,
) -> Result<(PerAnnotatorLogits<T>, AttentionRecord)> {
    if !params.config.is_sequence() {
        return Err(Error::Config("model was configured for single images".into()));
    }
    run(params, frames, true)
}

/// Dispatches on the configured mode.
pub fn forward<T: Scalar>(
    input: &Tensor<T>,
    params: &ModelParams<T>,
) -> Result<(PerAnnotatorLogits<T>, AttentionRecord)> {
    run(params, input, true)
}

/// Predicted class per logits row, without capturing attention.
pub fn predict<T: Scalar>(input: &Tensor<T>, params: &ModelParams<T>) -> Result<Vec<usize>> {
    Ok(run(params, input, false)?.0.predictions())
}
