//! Scanning and validation without touching real data.
//!
//! [`scan`] propagates shape metadata through the model per module kind —
//! the model's forward counter is never touched. [`validate`] then
//! symbolically executes an intervention graph over those shapes using the
//! exact shape rules of the tensor ops, returning issues instead of
//! throwing.

use std::collections::HashMap;

use crate::error::{Error, Issue, IssueKind, Result};
use crate::graph::{Graph, OpKind};
use crate::hook::{HookPoint, Port};
use crate::model::{Module, ModuleKind};
use crate::tensor::shape;

/// Shape-and-dtype stand-in for a tensor; carries no data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeSpec {
    pub shape: Vec<usize>,
}

impl ShapeSpec {
    pub fn new(shape: Vec<usize>) -> Self {
        Self { shape }
    }

    pub fn dtype(&self) -> &'static str {
        "f32"
    }
}

impl std::fmt::Display for ShapeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "f32{:?}", self.shape)
    }
}

/// Per-hook input/output specs gathered by a scan.
#[derive(Debug, Clone, Default)]
pub struct ShapeTable {
    entries: HashMap<(String, u32, u32), (ShapeSpec, ShapeSpec)>,
}

impl ShapeTable {
    /// Spec of the tensor a hook binds to. Gradients share the output shape.
    pub fn hook_spec(&self, hook: &HookPoint) -> Option<&ShapeSpec> {
        let entry = self
            .entries
            .get(&(hook.path.clone(), hook.invoke_index, hook.call_index))?;
        Some(match hook.port {
            Port::Input => &entry.0,
            Port::Output | Port::GradOutput => &entry.1,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

struct ScanCtx {
    call_counts: HashMap<String, u32>,
    // (path, call) -> (merged input shape, merged output shape)
    merged: Vec<(String, u32, Vec<usize>, Vec<usize>)>,
}

impl ScanCtx {
    fn next_call(&mut self, path: &str) -> u32 {
        let c = self.call_counts.entry(path.to_string()).or_insert(0);
        let cur = *c;
        *c += 1;
        cur
    }
}

/// Propagate invocation shapes through the model symbolically. Invocations
/// are merged into one batch of `sum(batch)` rows padded to `max(seq)`; the
/// returned table carries per-invoke specs with the invoke's own row count.
pub fn scan(m: &Module, invocation_shapes: &[(usize, usize)]) -> Result<ShapeTable> {
    if invocation_shapes.is_empty() {
        return Err(Error::NoInvocation);
    }
    if invocation_shapes.iter().any(|&(b, s)| b == 0 || s == 0) {
        return Err(Error::shape("invocation shapes must be positive".into()));
    }
    let rows: usize = invocation_shapes.iter().map(|&(b, _)| b).sum();
    let seq: usize = invocation_shapes.iter().map(|&(_, s)| s).max().unwrap();

    let mut ctx = ScanCtx {
        call_counts: HashMap::new(),
        merged: Vec::new(),
    };
    scan_module(m, "", vec![rows, seq], &mut ctx)?;

    let mut table = ShapeTable::default();
    for (path, call, input, output) in ctx.merged {
        for (invoke, &(b, _)) in invocation_shapes.iter().enumerate() {
            let mut per_in = input.clone();
            let mut per_out = output.clone();
            if !per_in.is_empty() {
                per_in[0] = b;
            }
            if !per_out.is_empty() {
                per_out[0] = b;
            }
            table.entries.insert(
                (path.clone(), invoke as u32, call),
                (ShapeSpec::new(per_in), ShapeSpec::new(per_out)),
            );
        }
    }
    Ok(table)
}

fn scan_module(m: &Module, path: &str, input: Vec<usize>, ctx: &mut ScanCtx) -> Result<Vec<usize>> {
    let call = ctx.next_call(path);
    let output = scan_compute(m, path, &input, ctx)?;
    ctx.merged
        .push((path.to_string(), call, input, output.clone()));
    Ok(output)
}

fn scan_child(
    m: &Module,
    path: &str,
    name: &str,
    input: Vec<usize>,
    ctx: &mut ScanCtx,
) -> Result<Vec<usize>> {
    let child = m
        .child(name)
        .ok_or_else(|| Error::graph(format!("module '{path}' has no child '{name}'")))?;
    let child_path = if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    };
    scan_module(child, &child_path, input, ctx)
}

fn param_shape(m: &Module, name: &str, path: &str) -> Result<Vec<usize>> {
    m.param(name)
        .map(|p| p.shape().to_vec())
        .ok_or_else(|| Error::graph(format!("module '{path}' has no parameter '{name}'")))
}

fn scan_compute(m: &Module, path: &str, x: &[usize], ctx: &mut ScanCtx) -> Result<Vec<usize>> {
    match m.kind() {
        ModuleKind::Linear => {
            let w = param_shape(m, "weight", path)?;
            shape::matmul(x, &w)
        }
        ModuleKind::Embedding => {
            if x.len() != 2 {
                return Err(Error::shape(format!(
                    "embedding expects (batch, seq), got {x:?}"
                )));
            }
            let w = param_shape(m, "weight", path)?;
            let pos = param_shape(m, "pos", path)?;
            if x[1] > pos[0] {
                return Err(Error::shape(format!(
                    "sequence length {} exceeds positional table {}",
                    x[1], pos[0]
                )));
            }
            Ok(vec![x[0], x[1], w[1]])
        }
        ModuleKind::LayerNorm { .. } => {
            let gain = param_shape(m, "gain", path)?;
            let bias = param_shape(m, "bias", path)?;
            shape::layer_norm(x, &gain, &bias)
        }
        ModuleKind::Mlp => {
            let fc = param_shape(m, "fc_w", path)?;
            let proj = param_shape(m, "proj_w", path)?;
            let h = shape::matmul(x, &fc)?;
            shape::matmul(&h, &proj)
        }
        ModuleKind::SelfAttention { n_heads } => {
            if x.len() != 3 {
                return Err(Error::shape(format!(
                    "self_attention expects (batch, seq, d), got {x:?}"
                )));
            }
            if x[2] % n_heads != 0 {
                return Err(Error::shape(format!(
                    "hidden size {} not divisible by {} heads",
                    x[2], n_heads
                )));
            }
            Ok(x.to_vec())
        }
        ModuleKind::Block => {
            let n1 = scan_child(m, path, "ln1", x.to_vec(), ctx)?;
            let a = scan_child(m, path, "attn", n1, ctx)?;
            let mid = shape::broadcast(x, &a)?;
            let n2 = scan_child(m, path, "ln2", mid.clone(), ctx)?;
            let mlp = scan_child(m, path, "mlp", n2, ctx)?;
            shape::broadcast(&mid, &mlp)
        }
        ModuleKind::Lm { config } => {
            if x.len() != 2 {
                return Err(Error::shape(format!(
                    "model expects (batch, seq) token ids, got {x:?}"
                )));
            }
            if x[1] > config.max_seq_len {
                return Err(Error::shape(format!(
                    "sequence length {} exceeds max_seq_len {}",
                    x[1], config.max_seq_len
                )));
            }
            let e = scan_child(m, path, "embed", x.to_vec(), ctx)?;
            let h = scan_child(m, path, "layers", e, ctx)?;
            let h = scan_child(m, path, "ln_f", h, ctx)?;
            scan_child(m, path, "lm_head", h, ctx)
        }
        ModuleKind::Custom => {
            let mut cur = x.to_vec();
            let names: Vec<String> = m.children().map(|(n, _)| n.to_string()).collect();
            for name in names {
                cur = scan_child(m, path, &name, cur, ctx)?;
            }
            Ok(cur)
        }
    }
}

#[derive(Debug, Clone)]
enum NodeState {
    Shape(Vec<usize>),
    /// Shape unknowable without execution (session values); dependents are
    /// skipped without an issue so execution can raise the real error.
    Unknown,
    /// A reported failure; dependents are reported as skipped.
    Failed,
}

/// Symbolically execute every node over the scanned shapes. Returns an empty
/// list iff all ops are shape-consistent; never touches real data.
pub fn validate(g: &Graph, table: &ShapeTable) -> Vec<Issue> {
    let mut issues = Vec::new();
    let order = match g.topological_order() {
        Ok(order) => order,
        Err(Error::Cycle(node)) => {
            issues.push(Issue {
                kind: IssueKind::Cycle,
                node: node.clone(),
                op: g.node(&node).map(|n| n.op.as_str()).unwrap_or("?").into(),
                detail: "graph contains a dependency cycle".into(),
            });
            return issues;
        }
        Err(_) => unreachable!("topological_order only fails with Cycle"),
    };

    let mut states: HashMap<&str, NodeState> = HashMap::new();
    for name in &order {
        let node = g.node(name).expect("topo names exist");
        let issue_count = issues.len();

        // Dependency states gate evaluation.
        let mut dep_shapes: Vec<Vec<usize>> = Vec::with_capacity(node.deps.len());
        let mut gate = None;
        for dep in &node.deps {
            match states.get(dep.as_str()).expect("dep precedes node") {
                NodeState::Shape(s) => dep_shapes.push(s.clone()),
                NodeState::Unknown => gate = gate.or(Some(NodeState::Unknown)),
                NodeState::Failed => gate = Some(NodeState::Failed),
            }
        }
        if let Some(gate) = gate {
            if matches!(gate, NodeState::Failed) {
                issues.push(Issue {
                    kind: IssueKind::Skipped,
                    node: node.name.clone(),
                    op: node.op.as_str().into(),
                    detail: "skipped: an upstream node failed validation".into(),
                });
            }
            states.insert(node.name.as_str(), gate);
            continue;
        }

        let state = match node.op {
            OpKind::ModuleInput | OpKind::ModuleOutput | OpKind::ModuleGradOutput => {
                let hook = node.attrs.hook_point(node.op).expect("checked attrs");
                match table.hook_spec(&hook) {
                    Some(spec) => NodeState::Shape(spec.shape.clone()),
                    None => {
                        issues.push(Issue {
                            kind: IssueKind::UnknownHook,
                            node: node.name.clone(),
                            op: node.op.as_str().into(),
                            detail: format!("no scanned module event at {hook}"),
                        });
                        NodeState::Failed
                    }
                }
            }
            OpKind::SessionRef => NodeState::Unknown,
            OpKind::Constant => NodeState::Shape(
                node.attrs.value.as_ref().expect("checked attrs").shape().to_vec(),
            ),
            OpKind::BackwardMarker => {
                let loss = &dep_shapes[0];
                if loss.iter().product::<usize>() != 1 {
                    issues.push(Issue {
                        kind: IssueKind::ShapeMismatch,
                        node: node.name.clone(),
                        op: node.op.as_str().into(),
                        detail: format!("backward requires a scalar loss, got {loss:?}"),
                    });
                    NodeState::Failed
                } else {
                    NodeState::Shape(loss.clone())
                }
            }
            _ => match infer_pure(node.op, &node.attrs, &dep_shapes) {
                Ok(shape) => NodeState::Shape(shape),
                Err(e) => {
                    issues.push(Issue {
                        kind: issue_kind_for(&e),
                        node: node.name.clone(),
                        op: node.op.as_str().into(),
                        detail: e.to_string(),
                    });
                    NodeState::Failed
                }
            },
        };

        // Replacement directives must produce the hook's own tensor shape.
        if let (NodeState::Shape(result), Some(target)) = (&state, &node.attrs.target) {
            match table.hook_spec(target) {
                Some(spec) if &spec.shape != result => {
                    issues.push(Issue {
                        kind: IssueKind::ShapeMismatch,
                        node: node.name.clone(),
                        op: node.op.as_str().into(),
                        detail: format!(
                            "replacement for {target} must have shape {:?}, got {result:?}",
                            spec.shape
                        ),
                    });
                }
                Some(_) => {}
                None => {
                    issues.push(Issue {
                        kind: IssueKind::UnknownHook,
                        node: node.name.clone(),
                        op: node.op.as_str().into(),
                        detail: format!("no scanned module event at {target}"),
                    });
                }
            }
        }

        let state = if issues.len() > issue_count {
            NodeState::Failed
        } else {
            state
        };
        states.insert(node.name.as_str(), state);
    }
    issues
}

fn issue_kind_for(e: &Error) -> IssueKind {
    match e {
        Error::Axis(_) => IssueKind::BadAxis,
        Error::Index(_) => IssueKind::BadIndex,
        _ => IssueKind::ShapeMismatch,
    }
}

fn infer_pure(op: OpKind, attrs: &crate::graph::Attrs, deps: &[Vec<usize>]) -> Result<Vec<usize>> {
    match op {
        OpKind::GetItem => shape::index_get(&deps[0], attrs.index.as_ref().expect("checked")),
        OpKind::SetItem => {
            shape::index_set(&deps[0], attrs.index.as_ref().expect("checked"), &deps[1])
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            shape::broadcast(&deps[0], &deps[1])
        }
        OpKind::Matmul => shape::matmul(&deps[0], &deps[1]),
        OpKind::Softmax => {
            shape::softmax(&deps[0], attrs.axis.expect("checked"))?;
            Ok(deps[0].clone())
        }
        OpKind::Gelu | OpKind::Relu => Ok(deps[0].clone()),
        OpKind::Sum | OpKind::Mean | OpKind::Argmax => {
            let (_, out) = shape::reduce(&deps[0], attrs.axis.expect("checked"))?;
            Ok(out)
        }
        OpKind::Reshape => shape::reshape(&deps[0], attrs.shape.as_ref().expect("checked")),
        _ => unreachable!("sources handled by caller"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Attrs;
    use crate::model::{build_toy_lm, LMConfig};
    use crate::tensor::{IndexExpr, TensorValue};

    fn toy() -> Module {
        build_toy_lm(&LMConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
            seed: 42,
        })
        .unwrap()
    }

    #[test]
    fn scan_reports_architecture_shapes() {
        let m = toy();
        let table = scan(&m, &[(2, 5)]).unwrap();
        let mlp_out = table
            .hook_spec(&HookPoint::new("layers.0.mlp", Port::Output, 0, 0))
            .unwrap();
        assert_eq!(mlp_out.shape, vec![2, 5, 16]);
        let lm_out = table
            .hook_spec(&HookPoint::new("", Port::Output, 0, 0))
            .unwrap();
        assert_eq!(lm_out.shape, vec![2, 5, 32]);
        assert_eq!(m.forward_count(), 0);
    }

    #[test]
    fn scan_rejects_overlong_sequences() {
        let m = toy();
        assert!(scan(&m, &[(1, 17)]).is_err());
    }

    #[test]
    fn validate_accepts_broadcastable_setitem() {
        let m = toy();
        let table = scan(&m, &[(2, 5)]).unwrap();
        let mut g = Graph::new();
        let src = g
            .add_node(OpKind::ModuleInput, vec![], Attrs::hook("layers.1.mlp", 0, 0))
            .unwrap();
        let five = g
            .add_node(
                OpKind::Constant,
                vec![],
                Attrs::constant(TensorValue::scalar(5.0)),
            )
            .unwrap();
        let ix = IndexExpr::new().all().all().list([3, 5, 8]);
        let set = g
            .add_node(
                OpKind::SetItem,
                vec![src, five],
                Attrs::index_targeting(ix, HookPoint::new("layers.1.mlp", Port::Input, 0, 0)),
            )
            .unwrap();
        g.mark_saved(&set).unwrap();
        // per-invoke hook spec is (2,5,16) for a single (2,5) invocation
        assert!(validate(&g, &table).is_empty());
    }

    #[test]
    fn validate_flags_shape_mismatch_on_setitem() {
        let m = toy();
        let table = scan(&m, &[(2, 5)]).unwrap();
        let mut g = Graph::new();
        let src = g
            .add_node(OpKind::ModuleInput, vec![], Attrs::hook("layers.1.mlp", 0, 0))
            .unwrap();
        let bad = g
            .add_node(
                OpKind::Constant,
                vec![],
                Attrs::constant(TensorValue::zeros(&[7])),
            )
            .unwrap();
        let ix = IndexExpr::new().all().all().list([3, 5, 8]);
        let set = g
            .add_node(OpKind::SetItem, vec![src, bad], Attrs::index(ix))
            .unwrap();
        g.mark_saved(&set).unwrap();
        let issues = validate(&g, &table);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].kind, IssueKind::ShapeMismatch);
        assert_eq!(issues[0].node, set);
    }

    #[test]
    fn downstream_of_failure_is_skipped() {
        let m = toy();
        let table = scan(&m, &[(2, 5)]).unwrap();
        let mut g = Graph::new();
        let src = g
            .add_node(OpKind::ModuleOutput, vec![], Attrs::hook("layers.0.mlp", 0, 0))
            .unwrap();
        let w = g
            .add_node(
                OpKind::Constant,
                vec![],
                Attrs::constant(TensorValue::zeros(&[8, 4])),
            )
            .unwrap();
        let mm = g
            .add_node(OpKind::Matmul, vec![src, w], Attrs::none())
            .unwrap();
        let down = g.add_node(OpKind::Gelu, vec![mm.clone()], Attrs::none()).unwrap();
        g.mark_saved(&down).unwrap();
        let issues = validate(&g, &table);
        assert_eq!(issues.len(), 2);
        assert_eq!(issues[0].kind, IssueKind::ShapeMismatch);
        assert_eq!(issues[0].node, mm);
        assert_eq!(issues[1].kind, IssueKind::Skipped);
        assert_eq!(issues[1].node, down);
    }

    #[test]
    fn unknown_hook_is_reported() {
        let m = toy();
        let table = scan(&m, &[(1, 3)]).unwrap();
        let mut g = Graph::new();
        let h = g
            .add_node(OpKind::ModuleOutput, vec![], Attrs::hook("layers.7", 0, 0))
            .unwrap();
        g.mark_saved(&h).unwrap();
        let issues = validate(&g, &table);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].kind, IssueKind::UnknownHook);
    }
}
