use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, FF_MULT};
use crate::error::{Error, Result};
use crate::numkernel::{Scalar, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Role of a parameter; decides weight-decay eligibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Index of a parameter inside [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pid(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Pid,
    pub bias: Option<Pid>,
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: Pid,
    pub beta: Pid,
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    /// Keys carry no bias: softmax is invariant to it.
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub self_attn: Option<(Norm, Attention)>,
    pub cross_norm: Norm,
    pub cross_attn: Attention,
    pub ff_norm: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// A stack of query blocks over a set of learnable query tokens.
#[derive(Debug, Clone)]
pub struct QueryFormer {
    pub queries: Pid,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct FrameCompressor {
    pub former: QueryFormer,
    pub frame_position: Pid,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub annotator_former: Option<QueryFormer>,
    pub output_fc: Option<Linear>,
    pub classifiers: Vec<Classifier>,
    pub compressor: Option<FrameCompressor>,
}

/// All learnable state of a model, in a fixed registration order.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder<'a, T: Scalar> {
    params: Vec<Param<T>>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, kind: ParamKind, shape: &[usize], init: Init) -> Pid {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match (init, self.rng.as_deref_mut()) {
            (Init::Normal, Some(rng)) => (0..n).map(|_| T::from_f64(truncated_normal(rng))).collect(),
            (Init::Ones, _) => vec![T::one(); n],
            _ => vec![T::zero(); n],
        };
        self.params.push(Param {
            name,
            kind,
            tensor: Tensor::new(shape, data).expect("positive extents"),
        });
        Pid(self.params.len() - 1)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let weight = self.add(format!("{name}.weight"), ParamKind::Weight, &[fan_in, fan_out], Init::Normal);
        let bias = bias.then(|| self.add(format!("{name}.bias"), ParamKind::Bias, &[fan_out], Init::Zeros));
        Linear { weight, bias }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), ParamKind::Norm, &[dim], Init::Ones),
            beta: self.add(format!("{name}.beta"), ParamKind::Norm, &[dim], Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, hidden: usize, kv: usize) -> Attention {
        Attention {
            query: self.linear(&format!("{name}.query"), hidden, hidden, true),
            key: self.linear(&format!("{name}.key"), kv, hidden, false),
            value: self.linear(&format!("{name}.value"), kv, hidden, true),
            out: self.linear(&format!("{name}.out"), hidden, hidden, true),
        }
    }

    fn former(&mut self, name: &str, n_queries: usize, kv: usize, blocks: usize, self_attn: bool, hidden: usize) -> QueryFormer {
        let queries = self.add(format!("{name}.queries"), ParamKind::Embedding, &[n_queries, hidden], Init::Normal);
        let blocks = (0..blocks)
            .map(|b| {
                let p = format!("{name}.blocks.{b}");
                let self_attn = self_attn.then(|| {
                    (
                        self.norm(&format!("{p}.self_norm"), hidden),
                        self.attention(&format!("{p}.self_attn"), hidden, hidden),
                    )
                });
                Block {
                    self_attn,
                    cross_norm: self.norm(&format!("{p}.cross_norm"), hidden),
                    cross_attn: self.attention(&format!("{p}.cross_attn"), hidden, kv),
                    ff_norm: self.norm(&format!("{p}.ff_norm"), hidden),
                    ff_in: self.linear(&format!("{p}.ff_in"), hidden, FF_MULT * hidden, true),
                    ff_out: self.linear(&format!("{p}.ff_out"), FF_MULT * hidden, hidden, true),
                }
            })
            .collect();
        QueryFormer {
            queries,
            blocks,
            final_norm: self.norm(&format!("{name}.final_norm"), hidden),
        }
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            return v;
        }
    }
}

fn build<T: Scalar>(config: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> (Vec<Param<T>>, Layout) {
    let mut b = Builder { params: Vec::new(), rng };
    let h = config.hidden_dim;
    let v = config.variant;
    let compressor = (v.has_query_former() && config.is_sequence()).then(|| FrameCompressor {
        former: b.former("compressor", config.n_compression_queries, config.feature_dim, 1, true, h),
        frame_position: b.add(
            "compressor.frame_position".into(),
            ParamKind::Embedding,
            &[config.max_frames, h],
            Init::Zeros,
        ),
    });
    let annotator_former = v.has_query_former().then(|| {
        b.former("annotator", config.n_annotators, config.key_dim(), config.n_blocks, v.has_self_attention(), h)
    });
    let output_fc = v.has_query_former().then(|| b.linear("output_fc", h, h, true));
    let classifiers = (0..config.n_classifiers())
        .map(|k| Classifier {
            hidden: b.linear(&format!("classifier.{k}.hidden"), config.classifier_in(), config.classifier_hidden, true),
            out: b.linear(&format!("classifier.{k}.out"), config.classifier_hidden, config.n_classes, true),
        })
        .collect();
    (
        b.params,
        Layout {
            annotator_former,
            output_fc,
            classifiers,
            compressor,
        },
    )
}

/// Initializes parameters: truncated normal weights and queries, zero biases,
/// unit layer-norm scales, zero frame-position embeddings. Deterministic in
/// `seed`.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (params, layout) = build(config, Some(&mut rng));
    Ok(ModelParams {
        config: config.clone(),
        params,
        layout,
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (mut params, layout) = build::<T>(config, None);
        if tensors.len() != params.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameter tensors, found {}",
                params.len(),
                tensors.len()
            )));
        }
        for (p, (name, t)) in params.iter_mut().zip(tensors) {
            if p.name != name {
                return Err(Error::Integrity(format!("expected parameter {}, found {name}", p.name)));
            }
            if p.tensor.shape() != t.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    p.tensor.shape(),
                    t.shape()
                )));
            }
            p.tensor = t;
        }
        Ok(Self {
            config: config.clone(),
            params,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn get(&self, pid: Pid) -> &Tensor<T> {
        &self.params[pid.0].tensor
    }

    pub fn get_mut(&mut self, pid: Pid) -> &mut Tensor<T> {
        &mut self.params[pid.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Places every parameter on `tape` as a differentiable leaf, or as a
    /// constant when `trainable` is false. Returned handles are indexed by
    /// [`Pid`].
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(&p.tensor)
                } else {
                    tape.constant(&p.tensor)
                }
            })
            .collect()
    }

    /// Copies leaf gradients from `tape` into each parameter's grad buffer.
    pub fn collect_grads(&mut self, tape: &Tape<T>, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            match tape.grad(v) {
                Some(g) => p.tensor.accumulate_grad(g)?,
                None => {
                    if p.tensor.grad.is_none() {
                        p.tensor.grad = Some(vec![T::zero(); p.tensor.len()]);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Flattens all parameter values into one vector in registration order.
    pub fn flatten(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }

    /// Reorders annotators: new annotator `i` takes the query row and the
    /// classifier of old annotator `perm[i]`.
    pub fn permute_annotators(&self, perm: &[usize]) -> Result<Self> {
        let n = self.config.n_annotators;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        let mut out = self.clone();
        if let Some(former) = &self.layout.annotator_former {
            let q = self.get(former.queries);
            let h = q.last_dim();
            let data: Vec<T> = perm.iter().flat_map(|&p| q.row(p).iter().copied()).collect();
            *out.get_mut(former.queries) = Tensor::new(&[n, h], data)?;
        }
        if self.layout.classifiers.len() == n {
            for (i, &p) in perm.iter().enumerate() {
                let (src, dst) = (&self.layout.classifiers[p], &self.layout.classifiers[i]);
                let pairs = [
                    (Some(src.hidden.weight), Some(dst.hidden.weight)),
                    (src.hidden.bias, dst.hidden.bias),
                    (Some(src.out.weight), Some(dst.out.weight)),
                    (src.out.bias, dst.out.bias),
                ];
                for (s, d) in pairs.into_iter().filter_map(|(s, d)| s.zip(d)) {
                    *out.get_mut(d) = self.get(s).clone();
                }
            }
        }
        Ok(out)
    }
}
