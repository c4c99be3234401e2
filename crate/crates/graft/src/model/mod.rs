//! Neural module trees and the deterministic toy transformer LM.
//!
//! A [`Module`] owns named children and named parameters and consumes exactly
//! one primary input tensor, producing exactly one primary output tensor.
//! That one-tensor contract is what lets hook points address module
//! boundaries without argument indexing.

mod init;

pub use init::ParamStream;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::hook::Port;
use crate::tensor::{IndexExpr, Tape, TensorValue, ValueId};

#[derive(Debug, Clone, PartialEq)]
pub enum ModuleKind {
    Linear,
    Embedding,
    LayerNorm { eps: f32 },
    Mlp,
    SelfAttention { n_heads: usize },
    Block,
    Lm { config: LMConfig },
    Custom,
}

impl ModuleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModuleKind::Linear => "linear",
            ModuleKind::Embedding => "embedding",
            ModuleKind::LayerNorm { .. } => "layer_norm",
            ModuleKind::Mlp => "mlp",
            ModuleKind::SelfAttention { .. } => "self_attention",
            ModuleKind::Block => "block",
            ModuleKind::Lm { .. } => "lm",
            ModuleKind::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Module {
    kind: ModuleKind,
    children: Vec<(String, Module)>,
    params: Vec<(String, TensorValue)>,
    forward_count: AtomicU64,
}

impl Module {
    pub fn new(
        kind: ModuleKind,
        children: Vec<(String, Module)>,
        params: Vec<(String, TensorValue)>,
    ) -> Self {
        Self {
            kind,
            children,
            params,
            forward_count: AtomicU64::new(0),
        }
    }

    /// Leaf with no behavior beyond identity; useful for custom structures.
    pub fn custom_leaf() -> Self {
        Self::new(ModuleKind::Custom, Vec::new(), Vec::new())
    }

    /// Container applying its children in order.
    pub fn custom_seq(children: Vec<(String, Module)>) -> Self {
        Self::new(ModuleKind::Custom, children, Vec::new())
    }

    pub fn kind(&self) -> &ModuleKind {
        &self.kind
    }

    pub fn children(&self) -> impl Iterator<Item = (&str, &Module)> {
        self.children.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn child(&self, name: &str) -> Option<&Module> {
        self.children
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &TensorValue)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param(&self, name: &str) -> Option<&TensorValue> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Times this module was run as the forward entry point.
    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::SeqCst)
    }

    /// Depth-first pre-order path enumeration; the root is "".
    pub fn named_paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        fn walk(m: &Module, path: &str, out: &mut Vec<String>) {
            out.push(path.to_string());
            for (name, child) in &m.children {
                let child_path = if path.is_empty() {
                    name.clone()
                } else {
                    format!("{path}.{name}")
                };
                walk(child, &child_path, out);
            }
        }
        walk(self, "", &mut out);
        out
    }

    /// Resolve a dotted path to a descendant; "" resolves to self.
    pub fn at_path(&self, path: &str) -> Result<&Module> {
        if path.is_empty() {
            return Ok(self);
        }
        let mut cur = self;
        let mut prefix = String::new();
        for seg in path.split('.') {
            match cur.child(seg) {
                Some(next) => {
                    if !prefix.is_empty() {
                        prefix.push('.');
                    }
                    prefix.push_str(seg);
                    cur = next;
                }
                None => {
                    return Err(Error::Path {
                        path: path.to_string(),
                        prefix,
                    })
                }
            }
        }
        Ok(cur)
    }

    pub fn lm_config(&self) -> Option<&LMConfig> {
        match &self.kind {
            ModuleKind::Lm { config } => Some(config),
            _ => None,
        }
    }

    /// Plain forward pass: tokens (batch, seq) and a {0,1} attention mask of
    /// the same shape produce logits (batch, seq, vocab).
    pub fn forward(&self, tokens: &TensorValue, mask: &TensorValue) -> Result<TensorValue> {
        let mut tape = Tape::new(false);
        let out = self.forward_with_sink(tokens, mask, &mut tape, &mut NoopSink)?;
        Ok(tape.value(out).clone())
    }

    /// Forward pass on an explicit tape, firing `sink` at every module
    /// boundary. The sink may substitute the tensor flowing through a
    /// boundary by returning a replacement id.
    pub fn forward_with_sink(
        &self,
        tokens: &TensorValue,
        mask: &TensorValue,
        tape: &mut Tape,
        sink: &mut dyn BoundarySink,
    ) -> Result<ValueId> {
        self.forward_count.fetch_add(1, Ordering::SeqCst);
        self.check_forward_inputs(tokens, mask)?;
        let additive_mask = match &self.kind {
            ModuleKind::Lm { config } => {
                Some(tape.leaf(build_additive_mask(mask, config.n_heads)))
            }
            _ => None,
        };
        let tokens_id = tape.leaf(tokens.clone());
        let mut ctx = ForwardCtx {
            tape,
            sink,
            additive_mask,
            call_counts: HashMap::new(),
        };
        run_module(self, "", tokens_id, &mut ctx)
    }

    fn check_forward_inputs(&self, tokens: &TensorValue, mask: &TensorValue) -> Result<()> {
        if tokens.rank() != 2 {
            return Err(Error::shape(format!(
                "tokens must have shape (batch, seq), got {:?}",
                tokens.shape()
            )));
        }
        if mask.shape() != tokens.shape() {
            return Err(Error::shape(format!(
                "attention mask shape {:?} does not match tokens {:?}",
                mask.shape(),
                tokens.shape()
            )));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::shape(
                "attention mask entries must be 0 or 1".to_string(),
            ));
        }
        if let ModuleKind::Lm { config } = &self.kind {
            let seq = tokens.shape()[1];
            if seq == 0 {
                return Err(Error::shape("empty sequence".to_string()));
            }
            if seq > config.max_seq_len {
                return Err(Error::shape(format!(
                    "sequence length {seq} exceeds max_seq_len {}",
                    config.max_seq_len
                )));
            }
            for &t in tokens.data() {
                if t < 0.0 || t.fract() != 0.0 || (t as usize) >= config.vocab_size {
                    return Err(Error::Vocab(format!(
                        "token id {t} out of range for vocab size {}",
                        config.vocab_size
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Observer/interceptor of module boundaries during a forward pass.
pub trait BoundarySink {
    fn boundary(
        &mut self,
        path: &str,
        port: Port,
        call: u32,
        value: ValueId,
        tape: &mut Tape,
    ) -> Result<Option<ValueId>>;
}

pub struct NoopSink;

impl BoundarySink for NoopSink {
    fn boundary(
        &mut self,
        _path: &str,
        _port: Port,
        _call: u32,
        _value: ValueId,
        _tape: &mut Tape,
    ) -> Result<Option<ValueId>> {
        Ok(None)
    }
}

struct ForwardCtx<'a> {
    tape: &'a mut Tape,
    sink: &'a mut dyn BoundarySink,
    additive_mask: Option<ValueId>,
    call_counts: HashMap<String, u32>,
}

impl ForwardCtx<'_> {
    fn next_call(&mut self, path: &str) -> u32 {
        let c = self.call_counts.entry(path.to_string()).or_insert(0);
        let cur = *c;
        *c += 1;
        cur
    }

    fn fire(&mut self, path: &str, port: Port, call: u32, value: ValueId) -> Result<ValueId> {
        match self.sink.boundary(path, port, call, value, self.tape)? {
            Some(replacement) => Ok(replacement),
            None => Ok(value),
        }
    }
}

fn child_path(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

fn run_module(m: &Module, path: &str, x: ValueId, ctx: &mut ForwardCtx) -> Result<ValueId> {
    let call = ctx.next_call(path);
    let x = ctx.fire(path, Port::Input, call, x)?;
    let y = compute(m, path, x, ctx)?;
    ctx.fire(path, Port::Output, call, y)
}

fn run_child(m: &Module, path: &str, name: &str, x: ValueId, ctx: &mut ForwardCtx) -> Result<ValueId> {
    let child = m
        .child(name)
        .ok_or_else(|| Error::graph(format!("module '{path}' has no child '{name}'")))?;
    run_module(child, &child_path(path, name), x, ctx)
}

fn param_leaf(m: &Module, path: &str, name: &str, ctx: &mut ForwardCtx) -> Result<ValueId> {
    let p = m
        .param(name)
        .ok_or_else(|| Error::graph(format!("module '{path}' has no parameter '{name}'")))?;
    Ok(ctx.tape.leaf(p.clone()))
}

fn compute(m: &Module, path: &str, x: ValueId, ctx: &mut ForwardCtx) -> Result<ValueId> {
    match &m.kind {
        ModuleKind::Linear => {
            let w = param_leaf(m, path, "weight", ctx)?;
            let mut y = ctx.tape.matmul(x, w)?;
            if m.param("bias").is_some() {
                let b = param_leaf(m, path, "bias", ctx)?;
                y = ctx.tape.add(y, b)?;
            }
            Ok(y)
        }
        ModuleKind::Embedding => {
            let table = param_leaf(m, path, "weight", ctx)?;
            let pos = param_leaf(m, path, "pos", ctx)?;
            let seq = ctx.tape.value(x).shape()[1] as i64;
            let e = ctx.tape.embedding(table, x)?;
            let pos_slice = ctx
                .tape
                .index_get(pos, &IndexExpr::new().range(0, seq))?;
            ctx.tape.add(e, pos_slice)
        }
        ModuleKind::LayerNorm { eps } => {
            let gain = param_leaf(m, path, "gain", ctx)?;
            let bias = param_leaf(m, path, "bias", ctx)?;
            ctx.tape.layer_norm(x, gain, bias, *eps)
        }
        ModuleKind::Mlp => {
            let fc_w = param_leaf(m, path, "fc_w", ctx)?;
            let fc_b = param_leaf(m, path, "fc_b", ctx)?;
            let proj_w = param_leaf(m, path, "proj_w", ctx)?;
            let proj_b = param_leaf(m, path, "proj_b", ctx)?;
            let h = ctx.tape.matmul(x, fc_w)?;
            let h = ctx.tape.add(h, fc_b)?;
            let h = ctx.tape.gelu(h);
            let y = ctx.tape.matmul(h, proj_w)?;
            ctx.tape.add(y, proj_b)
        }
        ModuleKind::SelfAttention { n_heads } => attention(m, path, x, *n_heads, ctx),
        ModuleKind::Block => {
            let normed = run_child(m, path, "ln1", x, ctx)?;
            let attn = run_child(m, path, "attn", normed, ctx)?;
            let mid = ctx.tape.add(x, attn)?;
            let normed2 = run_child(m, path, "ln2", mid, ctx)?;
            let mlp = run_child(m, path, "mlp", normed2, ctx)?;
            ctx.tape.add(mid, mlp)
        }
        ModuleKind::Lm { .. } => {
            let e = run_child(m, path, "embed", x, ctx)?;
            let h = run_child(m, path, "layers", e, ctx)?;
            let h = run_child(m, path, "ln_f", h, ctx)?;
            run_child(m, path, "lm_head", h, ctx)
        }
        ModuleKind::Custom => {
            let mut cur = x;
            let names: Vec<String> = m.children.iter().map(|(n, _)| n.clone()).collect();
            for name in names {
                cur = run_child(m, path, &name, cur, ctx)?;
            }
            Ok(cur)
        }
    }
}

fn attention(
    m: &Module,
    path: &str,
    x: ValueId,
    n_heads: usize,
    ctx: &mut ForwardCtx,
) -> Result<ValueId> {
    let shape = ctx.tape.value(x).shape().to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let hd = d / n_heads;
    let additive = ctx.additive_mask.ok_or_else(|| {
        Error::graph("self_attention requires a model-level attention mask".to_string())
    })?;

    let mut heads = |wn: &str, bn: &str, ctx: &mut ForwardCtx| -> Result<ValueId> {
        let w = param_leaf(m, path, wn, ctx)?;
        let bias = param_leaf(m, path, bn, ctx)?;
        let p = ctx.tape.matmul(x, w)?;
        let p = ctx.tape.add(p, bias)?;
        let p = ctx.tape.reshape(p, &[b, s, n_heads, hd])?;
        ctx.tape.transpose(p, &[0, 2, 1, 3])
    };

    let q = heads("wq", "bq", ctx)?;
    let k = heads("wk", "bk", ctx)?;
    let v = heads("wv", "bv", ctx)?;

    let kt = ctx.tape.transpose(k, &[0, 1, 3, 2])?;
    let scores = ctx.tape.bmm(q, kt)?;
    let scale = ctx.tape.leaf(TensorValue::scalar(1.0 / (hd as f32).sqrt()));
    let scores = ctx.tape.mul(scores, scale)?;
    let scores = ctx.tape.add(scores, additive)?;
    let attn = ctx.tape.softmax(scores, -1)?;
    let z = ctx.tape.bmm(attn, v)?;
    let z = ctx.tape.transpose(z, &[0, 2, 1, 3])?;
    let z = ctx.tape.reshape(z, &[b, s, d])?;
    let wo = param_leaf(m, path, "wo", ctx)?;
    let bo = param_leaf(m, path, "bo", ctx)?;
    let y = ctx.tape.matmul(z, wo)?;
    ctx.tape.add(y, bo)
}

/// Additive attention mask of shape (batch, heads, seq, seq): 0 where key j
/// is visible to query i, -1e9 otherwise. A key is visible when it is causal
/// (j <= i) and not padding; every query can at least see itself so softmax
/// rows are never empty.
fn build_additive_mask(mask: &TensorValue, n_heads: usize) -> TensorValue {
    let b = mask.shape()[0];
    let s = mask.shape()[1];
    let mut data = vec![0.0f32; b * n_heads * s * s];
    for bi in 0..b {
        for i in 0..s {
            for j in 0..s {
                let visible = (j <= i && mask.data()[bi * s + j] == 1.0) || j == i;
                if !visible {
                    for h in 0..n_heads {
                        data[((bi * n_heads + h) * s + i) * s + j] = -1e9;
                    }
                }
            }
        }
    }
    TensorValue::new(vec![b, n_heads, s, s], data).expect("mask shape")
}

/// Build the deterministic decoder-only toy transformer.
pub fn build_toy_lm(cfg: &LMConfig) -> Result<Module> {
    cfg.validate()?;
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let hidden = 4 * d;
    let seed = cfg.seed;

    let p = |path: &str, shape: &[usize]| -> TensorValue {
        let len = shape.iter().product();
        TensorValue::new(shape.to_vec(), ParamStream::new(seed, path).fill(len))
            .expect("parameter shape")
    };

    let ln = |path: &str| -> Module {
        Module::new(
            ModuleKind::LayerNorm { eps: 1e-5 },
            Vec::new(),
            vec![
                ("gain".into(), p(&format!("{path}.gain"), &[d])),
                ("bias".into(), p(&format!("{path}.bias"), &[d])),
            ],
        )
    };

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let base = format!("layers.{layer}");
        let attn = Module::new(
            ModuleKind::SelfAttention {
                n_heads: cfg.n_heads,
            },
            Vec::new(),
            vec![
                ("wq".into(), p(&format!("{base}.attn.wq"), &[d, d])),
                ("bq".into(), p(&format!("{base}.attn.bq"), &[d])),
                ("wk".into(), p(&format!("{base}.attn.wk"), &[d, d])),
                ("bk".into(), p(&format!("{base}.attn.bk"), &[d])),
                ("wv".into(), p(&format!("{base}.attn.wv"), &[d, d])),
                ("bv".into(), p(&format!("{base}.attn.bv"), &[d])),
                ("wo".into(), p(&format!("{base}.attn.wo"), &[d, d])),
                ("bo".into(), p(&format!("{base}.attn.bo"), &[d])),
            ],
        );
        let mlp = Module::new(
            ModuleKind::Mlp,
            Vec::new(),
            vec![
                ("fc_w".into(), p(&format!("{base}.mlp.fc_w"), &[d, hidden])),
                ("fc_b".into(), p(&format!("{base}.mlp.fc_b"), &[hidden])),
                (
                    "proj_w".into(),
                    p(&format!("{base}.mlp.proj_w"), &[hidden, d]),
                ),
                ("proj_b".into(), p(&format!("{base}.mlp.proj_b"), &[d])),
            ],
        );
        let block = Module::new(
            ModuleKind::Block,
            vec![
                ("ln1".into(), ln(&format!("{base}.ln1"))),
                ("attn".into(), attn),
                ("ln2".into(), ln(&format!("{base}.ln2"))),
                ("mlp".into(), mlp),
            ],
            Vec::new(),
        );
        blocks.push((layer.to_string(), block));
    }

    let embed = Module::new(
        ModuleKind::Embedding,
        Vec::new(),
        vec![
            ("weight".into(), p("embed.weight", &[v, d])),
            ("pos".into(), p("embed.pos", &[cfg.max_seq_len, d])),
        ],
    );
    let lm_head = Module::new(
        ModuleKind::Linear,
        Vec::new(),
        vec![("weight".into(), p("lm_head.weight", &[d, v]))],
    );

    Ok(Module::new(
        ModuleKind::Lm {
            config: cfg.clone(),
        },
        vec![
            ("embed".into(), embed),
            ("layers".into(), Module::custom_seq(blocks)),
            ("ln_f".into(), ln("ln_f")),
            ("lm_head".into(), lm_head),
        ],
        Vec::new(),
    ))
}

/// Token ids to a (1, len) tensor.
pub fn tokens_row(ids: &[u32]) -> TensorValue {
    TensorValue::new(vec![1, ids.len()], ids.iter().map(|&t| t as f32).collect())
        .expect("token row")
}

/// Right-pad token rows to a common length with pad id 0 and build the
/// matching {0,1} attention mask. Returns (tokens, mask).
pub fn pad_batch(rows: &[Vec<u32>], min_len: usize) -> Result<(TensorValue, TensorValue)> {
    if rows.is_empty() {
        return Err(Error::NoInvocation);
    }
    if rows.iter().any(|r| r.is_empty()) {
        return Err(Error::trace("empty prompt in invocation"));
    }
    let max_len = rows.iter().map(|r| r.len()).max().unwrap().max(min_len);
    let b = rows.len();
    let mut tokens = vec![0.0f32; b * max_len];
    let mut mask = vec![0.0f32; b * max_len];
    for (i, row) in rows.iter().enumerate() {
        for (j, &t) in row.iter().enumerate() {
            tokens[i * max_len + j] = t as f32;
            mask[i * max_len + j] = 1.0;
        }
    }
    Ok((
        TensorValue::new(vec![b, max_len], tokens)?,
        TensorValue::new(vec![b, max_len], mask)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LMConfig {
        LMConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
            seed: 42,
        }
    }

    #[test]
    fn toy_lm_has_expected_paths() {
        let m = build_toy_lm(&cfg()).unwrap();
        let paths = m.named_paths();
        assert!(paths.contains(&"layers.0.mlp".to_string()));
        assert!(paths.contains(&"layers.1.mlp".to_string()));
        assert!(paths.contains(&"ln_f".to_string()));
        assert_eq!(paths[0], "");
        let unique: std::collections::HashSet<_> = paths.iter().collect();
        assert_eq!(unique.len(), paths.len());
    }

    #[test]
    fn leaf_module_has_single_empty_path() {
        assert_eq!(Module::custom_leaf().named_paths(), vec![String::new()]);
    }

    #[test]
    fn builds_are_deterministic_per_seed() {
        let a = build_toy_lm(&cfg()).unwrap();
        let b = build_toy_lm(&cfg()).unwrap();
        let mut cfg2 = cfg();
        cfg2.seed = 43;
        let c = build_toy_lm(&cfg2).unwrap();

        let at = a.at_path("layers.0.mlp").unwrap().param("fc_w").unwrap();
        let bt = b.at_path("layers.0.mlp").unwrap().param("fc_w").unwrap();
        let ct = c.at_path("layers.0.mlp").unwrap().param("fc_w").unwrap();
        assert!(at.bit_eq(bt));
        assert!(!at.bit_eq(ct));
    }

    #[test]
    fn config_validation() {
        let mut bad = cfg();
        bad.n_heads = 3;
        assert!(matches!(
            build_toy_lm(&bad).unwrap_err(),
            Error::Config(_)
        ));
        let mut zero = cfg();
        zero.vocab_size = 0;
        assert!(build_toy_lm(&zero).is_err());
    }

    #[test]
    fn forward_shapes_and_counter() {
        let m = build_toy_lm(&cfg()).unwrap();
        let (tokens, mask) = pad_batch(&[vec![5]], 0).unwrap();
        assert_eq!(m.forward_count(), 0);
        let logits = m.forward(&tokens, &mask).unwrap();
        assert_eq!(logits.shape(), &[1, 1, 32]);
        assert_eq!(m.forward_count(), 1);
    }

    #[test]
    fn rejects_bad_tokens_and_shapes() {
        let m = build_toy_lm(&cfg()).unwrap();
        let (tokens, mask) = pad_batch(&[vec![99]], 0).unwrap();
        assert!(matches!(
            m.forward(&tokens, &mask).unwrap_err(),
            Error::Vocab(_)
        ));
        let (long, long_mask) = pad_batch(&[(0..17).collect::<Vec<u32>>()], 0).unwrap();
        assert!(m.forward(&long, &long_mask).is_err());
    }

    #[test]
    fn path_error_reports_nearest_prefix() {
        let m = build_toy_lm(&cfg()).unwrap();
        match m.at_path("layers.9").unwrap_err() {
            Error::Path { prefix, .. } => assert_eq!(prefix, "layers"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
