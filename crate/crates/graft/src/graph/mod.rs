//! The intervention graph: named nodes over a closed op vocabulary.
//!
//! Nodes are appended with automatically generated unique names and refer to
//! dependencies by name. The vocabulary is closed by construction — nothing
//! outside [`OpKind`] can be represented, which is what makes graphs safe to
//! ship to a shared server.

mod execute;

pub use execute::{eval_node, execute_pure, execute_pure_with_stats, ExecStats, SourceKey};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::hook::{HookPoint, Port};
use crate::tensor::{IndexExpr, TensorValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    ModuleInput,
    ModuleOutput,
    ModuleGradOutput,
    SessionRef,
    Constant,
    GetItem,
    SetItem,
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Softmax,
    Gelu,
    Relu,
    Sum,
    Mean,
    Argmax,
    Reshape,
    BackwardMarker,
}

pub const ALL_OPS: [OpKind; 20] = [
    OpKind::ModuleInput,
    OpKind::ModuleOutput,
    OpKind::ModuleGradOutput,
    OpKind::SessionRef,
    OpKind::Constant,
    OpKind::GetItem,
    OpKind::SetItem,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Matmul,
    OpKind::Softmax,
    OpKind::Gelu,
    OpKind::Relu,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Argmax,
    OpKind::Reshape,
    OpKind::BackwardMarker,
];

impl OpKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OpKind::ModuleInput => "module_input",
            OpKind::ModuleOutput => "module_output",
            OpKind::ModuleGradOutput => "module_grad_output",
            OpKind::SessionRef => "session_ref",
            OpKind::Constant => "constant",
            OpKind::GetItem => "getitem",
            OpKind::SetItem => "setitem",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Matmul => "matmul",
            OpKind::Softmax => "softmax",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Argmax => "argmax",
            OpKind::Reshape => "reshape",
            OpKind::BackwardMarker => "backward_marker",
        }
    }

    pub fn parse(s: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|op| op.as_str() == s)
    }

    /// The hook port a module source op binds to.
    pub fn port(&self) -> Option<Port> {
        match self {
            OpKind::ModuleInput => Some(Port::Input),
            OpKind::ModuleOutput => Some(Port::Output),
            OpKind::ModuleGradOutput => Some(Port::GradOutput),
            _ => None,
        }
    }

    pub fn is_module_source(&self) -> bool {
        self.port().is_some()
    }

    /// Required dependency count, or a range for ops with optional deps.
    fn arity(&self) -> (usize, usize) {
        match self {
            OpKind::Constant | OpKind::SessionRef | OpKind::ModuleInput | OpKind::ModuleOutput => {
                (0, 0)
            }
            // grad sources may depend on the backward marker that produces them
            OpKind::ModuleGradOutput => (0, 1),
            OpKind::GetItem
            | OpKind::Softmax
            | OpKind::Gelu
            | OpKind::Relu
            | OpKind::Sum
            | OpKind::Mean
            | OpKind::Argmax
            | OpKind::Reshape
            | OpKind::BackwardMarker => (1, 1),
            OpKind::SetItem
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::Matmul => (2, 2),
        }
    }
}

/// Op-specific literals carried by a node. Exactly the fields relevant to an
/// op may be present; [`Attrs::check`] enforces the correspondence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Attrs {
    /// module_* ops: module path ("" is the model root).
    pub path: Option<String>,
    /// module_* ops: invoke sub-scope the hook binds to.
    pub invoke_index: Option<u32>,
    /// module_* ops: which call of the module within one forward.
    pub call_index: Option<u32>,
    /// session_ref: value name in the session store.
    pub name: Option<String>,
    /// constant: the literal tensor.
    pub value: Option<TensorValue>,
    /// getitem/setitem: the index expression.
    pub index: Option<IndexExpr>,
    /// setitem only: hook whose tensor this node's result replaces.
    pub target: Option<HookPoint>,
    /// softmax and reductions: the axis.
    pub axis: Option<i64>,
    /// reshape: the output shape.
    pub shape: Option<Vec<usize>>,
    /// any op: store the executed value into the session under this name.
    pub store_as: Option<String>,
}

impl Attrs {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn hook(path: impl Into<String>, invoke_index: u32, call_index: u32) -> Self {
        Attrs {
            path: Some(path.into()),
            invoke_index: Some(invoke_index),
            call_index: Some(call_index),
            ..Default::default()
        }
    }

    pub fn constant(value: TensorValue) -> Self {
        Attrs {
            value: Some(value),
            ..Default::default()
        }
    }

    pub fn index(index: IndexExpr) -> Self {
        Attrs {
            index: Some(index),
            ..Default::default()
        }
    }

    pub fn index_targeting(index: IndexExpr, target: HookPoint) -> Self {
        Attrs {
            index: Some(index),
            target: Some(target),
            ..Default::default()
        }
    }

    pub fn axis(axis: i64) -> Self {
        Attrs {
            axis: Some(axis),
            ..Default::default()
        }
    }

    pub fn reshape(shape: Vec<usize>) -> Self {
        Attrs {
            shape: Some(shape),
            ..Default::default()
        }
    }

    pub fn session_ref(name: impl Into<String>) -> Self {
        Attrs {
            name: Some(name.into()),
            ..Default::default()
        }
    }

    pub fn with_store_as(mut self, name: impl Into<String>) -> Self {
        self.store_as = Some(name.into());
        self
    }

    /// Check that exactly the fields applicable to `op` are present.
    pub fn check(&self, op: OpKind) -> Result<()> {
        let fail = |msg: &str| {
            Err(Error::graph(format!(
                "malformed attrs for {}: {msg}",
                op.as_str()
            )))
        };
        let hook_fields =
            self.path.is_some() && self.invoke_index.is_some() && self.call_index.is_some();
        let no_hook_fields =
            self.path.is_none() && self.invoke_index.is_none() && self.call_index.is_none();
        match op {
            OpKind::ModuleInput | OpKind::ModuleOutput | OpKind::ModuleGradOutput => {
                if !hook_fields {
                    return fail("path, invoke_index and call_index are required");
                }
            }
            _ => {
                if !no_hook_fields {
                    return fail("hook fields only apply to module_* ops");
                }
            }
        }
        if (op == OpKind::SessionRef) != self.name.is_some() {
            return fail("name is required exactly for session_ref");
        }
        if (op == OpKind::Constant) != self.value.is_some() {
            return fail("value is required exactly for constant");
        }
        let indexed = matches!(op, OpKind::GetItem | OpKind::SetItem);
        if indexed != self.index.is_some() {
            return fail("index is required exactly for getitem/setitem");
        }
        if self.target.is_some() && op != OpKind::SetItem {
            return fail("target only applies to setitem");
        }
        let axed = matches!(
            op,
            OpKind::Softmax | OpKind::Sum | OpKind::Mean | OpKind::Argmax
        );
        if axed != self.axis.is_some() {
            return fail("axis is required exactly for softmax/sum/mean/argmax");
        }
        if (op == OpKind::Reshape) != self.shape.is_some() {
            return fail("shape is required exactly for reshape");
        }
        Ok(())
    }

    /// The hook point a module source node binds to.
    pub fn hook_point(&self, op: OpKind) -> Option<HookPoint> {
        Some(HookPoint {
            path: self.path.clone()?,
            port: op.port()?,
            invoke_index: self.invoke_index?,
            call_index: self.call_index?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: OpKind,
    pub deps: Vec<String>,
    pub attrs: Attrs,
    pub saved: bool,
}

/// Node names are `<op>_<counter>` with a per-graph monotone counter.
pub fn is_valid_name(name: &str) -> bool {
    let Some(pos) = name.rfind('_') else {
        return false;
    };
    let (head, tail) = (&name[..pos], &name[pos + 1..]);
    !head.is_empty()
        && head.chars().all(|c| c.is_ascii_lowercase() || c == '_')
        && !tail.is_empty()
        && tail.chars().all(|c| c.is_ascii_digit())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    by_name: HashMap<String, usize>,
    save_list: Vec<String>,
    counter: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter()
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.by_name.get(name).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn save_list(&self) -> &[String] {
        &self.save_list
    }

    /// Append a node; returns its fresh generated name.
    pub fn add_node(&mut self, op: OpKind, deps: Vec<String>, attrs: Attrs) -> Result<String> {
        attrs.check(op)?;
        let (min, max) = op.arity();
        if deps.len() < min || deps.len() > max {
            return Err(Error::graph(format!(
                "{} expects {} dependencies, got {}",
                op.as_str(),
                if min == max {
                    min.to_string()
                } else {
                    format!("{min}..={max}")
                },
                deps.len()
            )));
        }
        for dep in &deps {
            if !self.by_name.contains_key(dep) {
                return Err(Error::graph(format!("unknown dependency '{dep}'")));
            }
        }
        let name = format!("{}_{}", op.as_str(), self.counter);
        self.counter += 1;
        self.by_name.insert(name.clone(), self.nodes.len());
        self.nodes.push(Node {
            name: name.clone(),
            op,
            deps,
            attrs,
            saved: false,
        });
        Ok(name)
    }

    /// Rebuild from decoded nodes. Deps may reference any node in the list
    /// (forward references allowed, so cycles are possible and left to
    /// [`Graph::topological_order`] to reject).
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        let mut by_name = HashMap::new();
        let mut save_list = Vec::new();
        let mut counter = 0u64;
        for (i, node) in nodes.iter().enumerate() {
            if !is_valid_name(&node.name) {
                return Err(Error::graph(format!("invalid node name '{}'", node.name)));
            }
            if by_name.insert(node.name.clone(), i).is_some() {
                return Err(Error::graph(format!("duplicate node name '{}'", node.name)));
            }
            node.attrs.check(node.op)?;
            let (min, max) = node.op.arity();
            if node.deps.len() < min || node.deps.len() > max {
                return Err(Error::graph(format!(
                    "node '{}' has {} dependencies, expected {}..={}",
                    node.name,
                    node.deps.len(),
                    min,
                    max
                )));
            }
            if let Some(tail) = node.name.rfind('_') {
                if let Ok(n) = node.name[tail + 1..].parse::<u64>() {
                    counter = counter.max(n + 1);
                }
            }
            if node.saved {
                save_list.push(node.name.clone());
            }
        }
        for node in &nodes {
            for dep in &node.deps {
                if !by_name.contains_key(dep) {
                    return Err(Error::graph(format!(
                        "node '{}' depends on unknown node '{dep}'",
                        node.name
                    )));
                }
            }
        }
        Ok(Self {
            nodes,
            by_name,
            save_list,
            counter,
        })
    }

    pub fn mark_saved(&mut self, name: &str) -> Result<()> {
        let idx = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::graph(format!("unknown node '{name}'")))?;
        if !self.nodes[idx].saved {
            self.nodes[idx].saved = true;
            self.save_list.push(name.to_string());
        }
        Ok(())
    }

    pub fn set_store_as(&mut self, name: &str, value_name: &str) -> Result<()> {
        let idx = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::graph(format!("unknown node '{name}'")))?;
        self.nodes[idx].attrs.store_as = Some(value_name.to_string());
        Ok(())
    }

    /// Deps precede dependents; ties broken by insertion order.
    pub fn topological_order(&self) -> Result<Vec<String>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for dep in &node.deps {
                let d = self.by_name[dep];
                indegree[i] += 1;
                dependents[d].push(i);
            }
        }
        let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..n)
            .filter(|&i| indegree[i] == 0)
            .map(std::cmp::Reverse)
            .collect();
        let mut order = Vec::with_capacity(n);
        let mut done = vec![false; n];
        while let Some(std::cmp::Reverse(i)) = ready.pop() {
            done[i] = true;
            order.push(self.nodes[i].name.clone());
            for &j in &dependents[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push(std::cmp::Reverse(j));
                }
            }
        }
        if order.len() != n {
            // Walk dep edges inside the unresolved set until a repeat proves
            // membership in a cycle.
            let mut cur = (0..n).find(|&i| !done[i]).unwrap();
            let mut seen = vec![false; n];
            loop {
                if seen[cur] {
                    return Err(Error::Cycle(self.nodes[cur].name.clone()));
                }
                seen[cur] = true;
                cur = self.nodes[cur]
                    .deps
                    .iter()
                    .map(|d| self.by_name[d])
                    .find(|&d| !done[d])
                    .expect("unresolved node must have an unresolved dep");
            }
        }
        Ok(order)
    }

    /// Liveness roots: saved nodes, setitem nodes that feed a module hook
    /// replacement, and nodes whose value is stored into a session.
    fn liveness_roots(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.saved || n.attrs.target.is_some() || n.attrs.store_as.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Remove nodes that are not backward-reachable from a liveness root,
    /// preserving relative order and names.
    pub fn eliminate_dead(&self) -> Graph {
        let mut live = vec![false; self.nodes.len()];
        let mut stack = self.liveness_roots();
        for &r in &stack {
            live[r] = true;
        }
        while let Some(i) = stack.pop() {
            for dep in &self.nodes[i].deps {
                let d = self.by_name[dep];
                if !live[d] {
                    live[d] = true;
                    stack.push(d);
                }
            }
        }
        let nodes: Vec<Node> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| live[*i])
            .map(|(_, n)| n.clone())
            .collect();
        let mut by_name = HashMap::new();
        let mut save_list = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            by_name.insert(node.name.clone(), i);
            if node.saved {
                save_list.push(node.name.clone());
            }
        }
        Graph {
            nodes,
            by_name,
            save_list,
            counter: self.counter,
        }
    }

    /// Fold pure ops whose dependencies are all constants into constant
    /// nodes. Targeted setitem nodes stay as-is (their effect is observed
    /// through the model), and fold failures leave the node for the
    /// validator to report.
    pub fn fold_constants(&self) -> Graph {
        let mut out = self.clone();
        for i in 0..out.nodes.len() {
            let node = &out.nodes[i];
            let foldable = matches!(
                node.op,
                OpKind::GetItem
                    | OpKind::SetItem
                    | OpKind::Add
                    | OpKind::Sub
                    | OpKind::Mul
                    | OpKind::Div
                    | OpKind::Matmul
                    | OpKind::Softmax
                    | OpKind::Gelu
                    | OpKind::Relu
                    | OpKind::Sum
                    | OpKind::Mean
                    | OpKind::Argmax
                    | OpKind::Reshape
            ) && node.attrs.target.is_none();
            if !foldable {
                continue;
            }
            let dep_values: Option<Vec<TensorValue>> = node
                .deps
                .iter()
                .map(|d| {
                    let dn = &out.nodes[out.by_name[d]];
                    if dn.op == OpKind::Constant {
                        dn.attrs.value.clone()
                    } else {
                        None
                    }
                })
                .collect();
            let Some(values) = dep_values else { continue };
            let mut tape = crate::tensor::Tape::new(false);
            let ids: Vec<_> = values.into_iter().map(|v| tape.leaf(v)).collect();
            let node = &out.nodes[i];
            match execute::eval_node(node, &ids, &mut tape) {
                Ok(id) => {
                    let value = tape.value(id).clone();
                    let store_as = out.nodes[i].attrs.store_as.clone();
                    out.nodes[i].op = OpKind::Constant;
                    out.nodes[i].deps = Vec::new();
                    out.nodes[i].attrs = Attrs {
                        value: Some(value),
                        store_as,
                        ..Default::default()
                    };
                }
                Err(_) => continue,
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_node_name_uses_counter_zero() {
        let mut g = Graph::new();
        let c = g
            .add_node(OpKind::Constant, vec![], Attrs::constant(TensorValue::scalar(1.0)))
            .unwrap();
        assert_eq!(c, "constant_0");
        let gi = g
            .add_node(OpKind::GetItem, vec![c], Attrs::index(IndexExpr::new()))
            .unwrap();
        assert_eq!(gi, "getitem_1");
    }

    #[test]
    fn unknown_dep_rejected() {
        let mut g = Graph::new();
        let err = g.add_node(OpKind::Gelu, vec!["nope".into()], Attrs::none());
        assert!(matches!(err, Err(Error::Graph(_))));
    }

    #[test]
    fn names_are_unique() {
        let mut g = Graph::new();
        let mut names = std::collections::HashSet::new();
        for _ in 0..100 {
            let n = g
                .add_node(
                    OpKind::Constant,
                    vec![],
                    Attrs::constant(TensorValue::scalar(0.0)),
                )
                .unwrap();
            assert!(is_valid_name(&n));
            assert!(names.insert(n));
        }
        assert_eq!(names.len(), 100);
    }

    #[test]
    fn mark_saved_is_idempotent() {
        let mut g = Graph::new();
        let c = g
            .add_node(OpKind::Constant, vec![], Attrs::constant(TensorValue::scalar(1.0)))
            .unwrap();
        g.mark_saved(&c).unwrap();
        g.mark_saved(&c).unwrap();
        assert_eq!(g.save_list(), &[c.clone()]);
        assert!(g.mark_saved("missing_0").is_err());
    }

    #[test]
    fn dead_nodes_are_pruned_and_saved_retained() {
        let mut g = Graph::new();
        let _a = g
            .add_node(OpKind::Constant, vec![], Attrs::constant(TensorValue::scalar(1.0)))
            .unwrap();
        let b = g
            .add_node(OpKind::Constant, vec![], Attrs::constant(TensorValue::scalar(2.0)))
            .unwrap();
        g.mark_saved(&b).unwrap();
        let pruned = g.eliminate_dead();
        assert_eq!(pruned.len(), 1);
        assert!(pruned.contains(&b));
    }

    #[test]
    fn chain_to_saved_is_unchanged() {
        let mut g = Graph::new();
        let a = g
            .add_node(OpKind::Constant, vec![], Attrs::constant(TensorValue::scalar(1.0)))
            .unwrap();
        let b = g.add_node(OpKind::Gelu, vec![a], Attrs::none()).unwrap();
        let c = g.add_node(OpKind::Relu, vec![b], Attrs::none()).unwrap();
        g.mark_saved(&c).unwrap();
        assert_eq!(g.eliminate_dead().len(), 3);
    }

    #[test]
    fn diamond_topological_order_breaks_ties_by_insertion() {
        let mut g = Graph::new();
        let a = g
            .add_node(OpKind::Constant, vec![], Attrs::constant(TensorValue::scalar(1.0)))
            .unwrap();
        let b = g.add_node(OpKind::Gelu, vec![a.clone()], Attrs::none()).unwrap();
        let c = g.add_node(OpKind::Relu, vec![a.clone()], Attrs::none()).unwrap();
        let d = g
            .add_node(OpKind::Add, vec![b.clone(), c.clone()], Attrs::none())
            .unwrap();
        assert_eq!(g.topological_order().unwrap(), vec![a, b, c, d]);
    }

    #[test]
    fn cycle_is_reported() {
        let nodes = vec![
            Node {
                name: "gelu_0".into(),
                op: OpKind::Gelu,
                deps: vec!["gelu_0".into()],
                attrs: Attrs::none(),
                saved: false,
            },
        ];
        let g = Graph::from_nodes(nodes).unwrap();
        assert!(matches!(g.topological_order(), Err(Error::Cycle(_))));
    }

    #[test]
    fn attrs_must_match_op() {
        let mut g = Graph::new();
        assert!(g
            .add_node(OpKind::Add, vec![], Attrs::axis(0))
            .is_err());
        assert!(g.add_node(OpKind::Softmax, vec![], Attrs::none()).is_err());
    }

    #[test]
    fn constant_folding_collapses_pure_subgraphs() {
        let mut g = Graph::new();
        let a = g
            .add_node(OpKind::Constant, vec![], Attrs::constant(TensorValue::scalar(2.0)))
            .unwrap();
        let b = g
            .add_node(OpKind::Constant, vec![], Attrs::constant(TensorValue::scalar(3.0)))
            .unwrap();
        let c = g.add_node(OpKind::Add, vec![a, b], Attrs::none()).unwrap();
        g.mark_saved(&c).unwrap();
        let folded = g.fold_constants();
        let node = folded.node(&c).unwrap();
        assert_eq!(node.op, OpKind::Constant);
        assert_eq!(node.attrs.value.as_ref().unwrap().item().unwrap(), 5.0);
    }
}
