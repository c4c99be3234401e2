//! Pure graph execution against pre-bound sources.
//!
//! Values are evaluated in topological order on a throwaway tape.
//! Non-saved intermediates are released as soon as their last dependent has
//! consumed them, tracked by reference counts.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::graph::{Graph, Node, OpKind};
use crate::hook::HookPoint;
use crate::tensor::{Tape, TensorValue, ValueId};

/// Binding key for graph source nodes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SourceKey {
    Hook(HookPoint),
    Session(String),
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ExecStats {
    /// Peak number of simultaneously live non-saved intermediate values.
    pub peak_live: usize,
    /// Values released before execution finished.
    pub released: usize,
}

/// Evaluate one node given its dependencies' value ids.
///
/// Module sources and session refs must be bound by the caller; reaching one
/// here is a missing-source failure. A backward marker passes its scalar
/// dependency through unchanged.
pub fn eval_node(node: &Node, deps: &[ValueId], tape: &mut Tape) -> Result<ValueId> {
    let attrs = &node.attrs;
    match node.op {
        OpKind::ModuleInput | OpKind::ModuleOutput | OpKind::ModuleGradOutput => {
            Err(Error::MissingSource {
                node: node.name.clone(),
                detail: format!(
                    "no binding for hook {}",
                    attrs.hook_point(node.op).expect("checked attrs")
                ),
            })
        }
        OpKind::SessionRef => Err(Error::MissingSource {
            node: node.name.clone(),
            detail: format!(
                "no binding for session value '{}'",
                attrs.name.as_deref().unwrap_or("")
            ),
        }),
        OpKind::Constant => Ok(tape.leaf(attrs.value.clone().expect("checked attrs"))),
        OpKind::GetItem => tape.index_get(deps[0], attrs.index.as_ref().expect("checked attrs")),
        OpKind::SetItem => {
            tape.index_set(deps[0], attrs.index.as_ref().expect("checked attrs"), deps[1])
        }
        OpKind::Add => tape.add(deps[0], deps[1]),
        OpKind::Sub => tape.sub(deps[0], deps[1]),
        OpKind::Mul => tape.mul(deps[0], deps[1]),
        OpKind::Div => tape.div(deps[0], deps[1]),
        OpKind::Matmul => tape.matmul(deps[0], deps[1]),
        OpKind::Softmax => tape.softmax(deps[0], attrs.axis.expect("checked attrs")),
        OpKind::Gelu => Ok(tape.gelu(deps[0])),
        OpKind::Relu => Ok(tape.relu(deps[0])),
        OpKind::Sum => tape.sum(deps[0], attrs.axis.expect("checked attrs")),
        OpKind::Mean => tape.mean(deps[0], attrs.axis.expect("checked attrs")),
        OpKind::Argmax => tape.argmax(deps[0], attrs.axis.expect("checked attrs")),
        OpKind::Reshape => tape.reshape(deps[0], attrs.shape.as_ref().expect("checked attrs")),
        OpKind::BackwardMarker => Ok(deps[0]),
    }
}

pub fn execute_pure(
    g: &Graph,
    sources: &HashMap<SourceKey, TensorValue>,
) -> Result<BTreeMap<String, TensorValue>> {
    execute_pure_with_stats(g, sources).map(|(saved, _)| saved)
}

pub fn execute_pure_with_stats(
    g: &Graph,
    sources: &HashMap<SourceKey, TensorValue>,
) -> Result<(BTreeMap<String, TensorValue>, ExecStats)> {
    let order = g.topological_order()?;
    let mut tape = Tape::new(false);
    let mut values: HashMap<&str, ValueId> = HashMap::new();
    let mut stats = ExecStats::default();

    // Remaining consumers per node name.
    let mut pending: HashMap<&str, usize> = HashMap::new();
    for node in g.nodes() {
        for dep in &node.deps {
            *pending.entry(dep.as_str()).or_insert(0) += 1;
        }
    }

    let mut live_intermediate = 0usize;
    for name in &order {
        let node = g.node(name).expect("topo order names");
        let id = match source_binding(node, sources)? {
            Some(value) => tape.leaf(value),
            None => {
                let deps: Vec<ValueId> = node
                    .deps
                    .iter()
                    .map(|d| values[d.as_str()])
                    .collect();
                eval_node(node, &deps, &mut tape).map_err(|e| e.at_node(&node.name))?
            }
        };
        values.insert(node.name.as_str(), id);
        let retained = node.saved || node.attrs.store_as.is_some();
        if !retained {
            live_intermediate += 1;
            stats.peak_live = stats.peak_live.max(live_intermediate);
        }
        // A value with no consumers (and no retention) can go immediately.
        release_if_done(
            node,
            &mut pending,
            g,
            &values,
            &mut tape,
            &mut live_intermediate,
            &mut stats,
        );
        for dep in node.deps.clone() {
            let dep_node = g.node(&dep).expect("dep exists");
            if let Some(c) = pending.get_mut(dep.as_str()) {
                *c -= 1;
            }
            release_if_done(
                dep_node,
                &mut pending,
                g,
                &values,
                &mut tape,
                &mut live_intermediate,
                &mut stats,
            );
        }
    }

    let mut saved = BTreeMap::new();
    for name in g.save_list() {
        let id = values[name.as_str()];
        saved.insert(name.clone(), tape.value(id).clone());
    }
    Ok((saved, stats))
}

fn release_if_done(
    node: &Node,
    pending: &mut HashMap<&str, usize>,
    _g: &Graph,
    values: &HashMap<&str, ValueId>,
    tape: &mut Tape,
    live_intermediate: &mut usize,
    stats: &mut ExecStats,
) {
    let retained = node.saved || node.attrs.store_as.is_some();
    if retained {
        return;
    }
    let remaining = pending.get(node.name.as_str()).copied().unwrap_or(0);
    if remaining == 0 {
        if let Some(&id) = values.get(node.name.as_str()) {
            // A backward marker aliases its dependency's id; never release
            // through an alias.
            if node.op != OpKind::BackwardMarker {
                tape.release(id);
            }
            *live_intermediate = live_intermediate.saturating_sub(1);
            stats.released += 1;
        }
    }
}

fn source_binding(
    node: &Node,
    sources: &HashMap<SourceKey, TensorValue>,
) -> Result<Option<TensorValue>> {
    let key = match node.op {
        OpKind::ModuleInput | OpKind::ModuleOutput | OpKind::ModuleGradOutput => {
            SourceKey::Hook(node.attrs.hook_point(node.op).expect("checked attrs"))
        }
        OpKind::SessionRef => {
            SourceKey::Session(node.attrs.name.clone().expect("checked attrs"))
        }
        _ => return Ok(None),
    };
    match sources.get(&key) {
        Some(v) => Ok(Some(v.clone())),
        None => Err(Error::MissingSource {
            node: node.name.clone(),
            detail: match key {
                SourceKey::Hook(h) => format!("no binding for hook {h}"),
                SourceKey::Session(s) => format!("no binding for session value '{s}'"),
            },
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Attrs;

    #[test]
    fn constant_saved_comes_back() {
        let mut g = Graph::new();
        let c = g
            .add_node(
                OpKind::Constant,
                vec![],
                Attrs::constant(TensorValue::scalar(5.0)),
            )
            .unwrap();
        g.mark_saved(&c).unwrap();
        let out = execute_pure(&g, &HashMap::new()).unwrap();
        assert_eq!(out[&c].item().unwrap(), 5.0);
    }

    #[test]
    fn add_of_constants() {
        let mut g = Graph::new();
        let a = g
            .add_node(
                OpKind::Constant,
                vec![],
                Attrs::constant(TensorValue::scalar(2.0)),
            )
            .unwrap();
        let b = g
            .add_node(
                OpKind::Constant,
                vec![],
                Attrs::constant(TensorValue::scalar(3.0)),
            )
            .unwrap();
        let s = g.add_node(OpKind::Add, vec![a, b], Attrs::none()).unwrap();
        g.mark_saved(&s).unwrap();
        let out = execute_pure(&g, &HashMap::new()).unwrap();
        assert_eq!(out[&s].item().unwrap(), 5.0);
    }

    #[test]
    fn missing_source_is_reported_with_node() {
        let mut g = Graph::new();
        let h = g
            .add_node(OpKind::ModuleOutput, vec![], Attrs::hook("layers.0", 0, 0))
            .unwrap();
        g.mark_saved(&h).unwrap();
        match execute_pure(&g, &HashMap::new()).unwrap_err() {
            Error::MissingSource { node, .. } => assert_eq!(node, h),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn intermediates_are_released_eagerly() {
        let mut g = Graph::new();
        let a = g
            .add_node(
                OpKind::Constant,
                vec![],
                Attrs::constant(TensorValue::scalar(1.0)),
            )
            .unwrap();
        let b = g.add_node(OpKind::Gelu, vec![a.clone()], Attrs::none()).unwrap();
        let c = g.add_node(OpKind::Gelu, vec![b], Attrs::none()).unwrap();
        g.mark_saved(&c).unwrap();
        let (_, stats) = execute_pure_with_stats(&g, &HashMap::new()).unwrap();
        // chain keeps at most the producer and its single consumer alive
        assert!(stats.peak_live <= 2, "peak {}", stats.peak_live);
        assert_eq!(stats.released, 2);
    }
}
