//! Tracing scopes: record proxy operations into an intervention graph and
//! execute it interleaved with the model when the scope ends.
//!
//! One trace may be open per thread. Inside it, hook accesses and proxy
//! operations append graph nodes; nothing runs until the scope exits.

mod interleave;
mod session;

pub use interleave::{interleave_execute, MemberRun};
pub use session::{Session, SessionBacking};

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Attrs, Graph, OpKind};
use crate::hook::{HookPoint, Port};
use crate::model::Module;
use crate::tensor::{IndexExpr, TensorValue};
use crate::validate;

/// Server-side execution hook: implemented by the fabric client so that
/// `remote` traces stay transparent to the tracer.
pub trait RemoteExecutor: Send + Sync {
    fn execute_trace(
        &self,
        graph: &Graph,
        invocations: &[Vec<u32>],
        session_id: Option<&str>,
    ) -> Result<BTreeMap<String, TensorValue>>;

    fn open_session(&self) -> Result<String>;

    fn close_session(&self, session_id: &str) -> Result<()>;
}

#[derive(Clone, Default)]
pub struct TraceOptions {
    pub remote: Option<Arc<dyn RemoteExecutor>>,
    pub session: Option<Session>,
    /// Skip the shape scan (and with it validation).
    pub skip_scan: bool,
    /// Skip graph validation while still scanning.
    pub skip_validate: bool,
}

impl TraceOptions {
    pub fn remote(executor: Arc<dyn RemoteExecutor>) -> Self {
        TraceOptions {
            remote: Some(executor),
            ..Default::default()
        }
    }

    pub fn in_session(session: &Session) -> Self {
        TraceOptions {
            session: Some(session.clone()),
            ..Default::default()
        }
    }

    pub fn with_session(mut self, session: &Session) -> Self {
        self.session = Some(session.clone());
        self
    }

    pub fn without_validation(mut self) -> Self {
        self.skip_validate = true;
        self
    }
}

static TRACE_IDS: AtomicU64 = AtomicU64::new(1);

struct TraceState {
    id: u64,
    graph: Graph,
    invocations: Vec<Vec<u32>>,
    current_invoke: u32,
    in_invoke: bool,
    hook_nodes: HashMap<HookPoint, String>,
    /// Last write per hook: the chain head new writes rebase onto.
    hook_effective: HashMap<HookPoint, String>,
    backward_marker: Option<String>,
    session: Option<Session>,
}

struct ActiveTrace {
    state: Rc<RefCell<TraceState>>,
    root: Arc<Module>,
}

thread_local! {
    static ACTIVE: RefCell<Option<ActiveTrace>> = const { RefCell::new(None) };
}

fn with_active<R>(f: impl FnOnce(&ActiveTrace) -> Result<R>) -> Result<R> {
    ACTIVE.with(|slot| {
        let borrow = slot.borrow();
        match borrow.as_ref() {
            Some(active) => f(active),
            None => Err(Error::trace("no tracing scope is active on this thread")),
        }
    })
}

fn with_active_for<R>(root: &Arc<Module>, f: impl FnOnce(&ActiveTrace) -> Result<R>) -> Result<R> {
    with_active(|active| {
        if !Arc::ptr_eq(&active.root, root) {
            return Err(Error::trace(
                "hook belongs to a different model than the active trace",
            ));
        }
        f(active)
    })
}

/// Handle for a node under construction. Operations append nodes to the
/// active trace's graph; no value exists until the trace executes.
#[derive(Debug, Clone)]
pub struct Proxy {
    trace_id: u64,
    node: String,
}

impl Proxy {
    fn new(trace_id: u64, node: String) -> Self {
        Self { trace_id, node }
    }

    pub fn node_name(&self) -> &str {
        &self.node
    }

    fn in_state<R>(&self, f: impl FnOnce(&mut TraceState) -> Result<R>) -> Result<R> {
        with_active(|active| {
            let mut st = active.state.borrow_mut();
            if st.id != self.trace_id {
                return Err(Error::trace("proxy belongs to a different trace"));
            }
            f(&mut st)
        })
    }

    fn bin(&self, op: OpKind, rhs: Operand) -> Result<Proxy> {
        self.in_state(|st| {
            let rhs = rhs.lower(st)?;
            let name = st
                .graph
                .add_node(op, vec![self.node.clone(), rhs], Attrs::none())?;
            Ok(Proxy::new(st.id, name))
        })
    }

    fn un(&self, op: OpKind, attrs: Attrs) -> Result<Proxy> {
        self.in_state(|st| {
            let name = st.graph.add_node(op, vec![self.node.clone()], attrs)?;
            Ok(Proxy::new(st.id, name))
        })
    }

    pub fn add(&self, rhs: impl Into<Operand>) -> Result<Proxy> {
        self.bin(OpKind::Add, rhs.into())
    }

    pub fn sub(&self, rhs: impl Into<Operand>) -> Result<Proxy> {
        self.bin(OpKind::Sub, rhs.into())
    }

    pub fn mul(&self, rhs: impl Into<Operand>) -> Result<Proxy> {
        self.bin(OpKind::Mul, rhs.into())
    }

    pub fn div(&self, rhs: impl Into<Operand>) -> Result<Proxy> {
        self.bin(OpKind::Div, rhs.into())
    }

    pub fn matmul(&self, rhs: &Proxy) -> Result<Proxy> {
        self.bin(OpKind::Matmul, Operand::Proxy(rhs.clone()))
    }

    pub fn softmax(&self, axis: i64) -> Result<Proxy> {
        self.un(OpKind::Softmax, Attrs::axis(axis))
    }

    pub fn gelu(&self) -> Result<Proxy> {
        self.un(OpKind::Gelu, Attrs::none())
    }

    pub fn relu(&self) -> Result<Proxy> {
        self.un(OpKind::Relu, Attrs::none())
    }

    pub fn sum(&self, axis: i64) -> Result<Proxy> {
        self.un(OpKind::Sum, Attrs::axis(axis))
    }

    pub fn mean(&self, axis: i64) -> Result<Proxy> {
        self.un(OpKind::Mean, Attrs::axis(axis))
    }

    pub fn argmax(&self, axis: i64) -> Result<Proxy> {
        self.un(OpKind::Argmax, Attrs::axis(axis))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Proxy> {
        self.un(OpKind::Reshape, Attrs::reshape(shape.to_vec()))
    }

    /// Select a region as a fresh tensor.
    pub fn get(&self, index: IndexExpr) -> Result<Proxy> {
        self.un(OpKind::GetItem, Attrs::index(index))
    }

    /// Functional overwrite: a copy of this tensor with the region replaced.
    pub fn set(&self, index: IndexExpr, value: impl Into<Operand>) -> Result<Proxy> {
        let value = value.into();
        self.in_state(|st| {
            let v = value.lower(st)?;
            let name = st.graph.add_node(
                OpKind::SetItem,
                vec![self.node.clone(), v],
                Attrs::index(index),
            )?;
            Ok(Proxy::new(st.id, name))
        })
    }

    /// Mark this value to be kept and returned after execution.
    pub fn save(&self) -> Result<Saved> {
        self.in_state(|st| {
            st.graph.mark_saved(&self.node)?;
            Ok(Saved {
                name: self.node.clone(),
            })
        })
    }

    /// Reduce a known-rank tensor to a scalar by repeated mean over axis 0.
    pub fn mean_axes(&self, rank: usize) -> Result<Proxy> {
        let mut cur = self.clone();
        for _ in 0..rank {
            cur = cur.mean(0)?;
        }
        Ok(cur)
    }

    /// Reduce a known-rank tensor to a scalar by repeated sum over axis 0.
    pub fn sum_axes(&self, rank: usize) -> Result<Proxy> {
        let mut cur = self.clone();
        for _ in 0..rank {
            cur = cur.sum(0)?;
        }
        Ok(cur)
    }
}

/// Saved-value handle returned by [`Proxy::save`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Saved {
    name: String,
}

impl Saved {
    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Right-hand sides for proxy arithmetic: another proxy, a literal tensor,
/// or a scalar. Literals lower to constant nodes.
#[derive(Debug, Clone)]
pub enum Operand {
    Proxy(Proxy),
    Value(TensorValue),
    Scalar(f32),
}

impl Operand {
    fn lower(&self, st: &mut TraceState) -> Result<String> {
        match self {
            Operand::Proxy(p) => {
                if p.trace_id != st.id {
                    return Err(Error::trace("proxy belongs to a different trace"));
                }
                Ok(p.node.clone())
            }
            Operand::Value(v) => st
                .graph
                .add_node(OpKind::Constant, vec![], Attrs::constant(v.clone())),
            Operand::Scalar(x) => st.graph.add_node(
                OpKind::Constant,
                vec![],
                Attrs::constant(TensorValue::scalar(*x)),
            ),
        }
    }
}

impl From<&Proxy> for Operand {
    fn from(p: &Proxy) -> Self {
        Operand::Proxy(p.clone())
    }
}

impl From<Proxy> for Operand {
    fn from(p: Proxy) -> Self {
        Operand::Proxy(p)
    }
}

impl From<TensorValue> for Operand {
    fn from(v: TensorValue) -> Self {
        Operand::Value(v)
    }
}

impl From<f32> for Operand {
    fn from(x: f32) -> Self {
        Operand::Scalar(x)
    }
}

/// Handle passed to the trace body for invoke scopes, constants and
/// backward requests.
pub struct Tracer {
    state: Rc<RefCell<TraceState>>,
}

impl Tracer {
    /// Open an invoke sub-scope binding hooks to one prompt. All invokes of
    /// a trace are combined into a single batched forward pass.
    pub fn invoke<R>(&self, prompt: &[u32], body: impl FnOnce(&Tracer) -> Result<R>) -> Result<R> {
        {
            let mut st = self.state.borrow_mut();
            if st.in_invoke {
                return Err(Error::trace("invoke scopes cannot nest"));
            }
            if prompt.is_empty() {
                return Err(Error::trace("invoke prompt must not be empty"));
            }
            st.invocations.push(prompt.to_vec());
            st.current_invoke = (st.invocations.len() - 1) as u32;
            st.in_invoke = true;
        }
        let result = body(self);
        self.state.borrow_mut().in_invoke = false;
        result
    }

    /// Number of invocations registered so far.
    pub fn invocation_count(&self) -> usize {
        self.state.borrow().invocations.len()
    }

    pub fn constant(&self, value: TensorValue) -> Result<Proxy> {
        let mut st = self.state.borrow_mut();
        let name = st
            .graph
            .add_node(OpKind::Constant, vec![], Attrs::constant(value))?;
        Ok(Proxy::new(st.id, name))
    }

    pub fn scalar(&self, x: f32) -> Result<Proxy> {
        self.constant(TensorValue::scalar(x))
    }

    /// Request one backward pass from a scalar loss at the end of the
    /// forward. A trace may request at most one.
    pub fn backward(&self, loss: &Proxy) -> Result<()> {
        let mut st = self.state.borrow_mut();
        if loss.trace_id != st.id {
            return Err(Error::trace("proxy belongs to a different trace"));
        }
        if st.backward_marker.is_some() {
            return Err(Error::trace(
                "a trace may request exactly one backward pass; use sessions for more",
            ));
        }
        let marker =
            st.graph
                .add_node(OpKind::BackwardMarker, vec![loss.node.clone()], Attrs::none())?;
        st.backward_marker = Some(marker);
        Ok(())
    }

    /// Snapshot of the graph built so far (inspection/debugging).
    pub fn graph_snapshot(&self) -> Graph {
        self.state.borrow().graph.clone()
    }
}

/// Result of a completed trace: the saved values plus the body's return.
#[derive(Debug)]
pub struct TraceOutput<R> {
    pub saved: BTreeMap<String, TensorValue>,
    pub returned: R,
}

impl<R> TraceOutput<R> {
    pub fn get(&self, handle: &Saved) -> &TensorValue {
        &self.saved[handle.name()]
    }
}

pub(crate) fn hook(root: &Arc<Module>, path: &str, port: Port, call: u32) -> Result<Proxy> {
    with_active_for(root, |active| {
        let mut st = active.state.borrow_mut();
        let invoke = st.current_invoke;
        let hp = HookPoint::new(path, port, invoke, call);
        if let Some(existing) = st.hook_nodes.get(&hp) {
            return Ok(Proxy::new(st.id, existing.clone()));
        }
        let op = match port {
            Port::Input => OpKind::ModuleInput,
            Port::Output => OpKind::ModuleOutput,
            Port::GradOutput => OpKind::ModuleGradOutput,
        };
        let name = st
            .graph
            .add_node(op, vec![], Attrs::hook(path, invoke, call))?;
        st.hook_nodes.insert(hp, name.clone());
        Ok(Proxy::new(st.id, name))
    })
}

pub(crate) fn hook_write(
    root: &Arc<Module>,
    path: &str,
    port: Port,
    call: u32,
    index: IndexExpr,
    value: Operand,
) -> Result<Proxy> {
    if port == Port::GradOutput {
        return Err(Error::trace("gradients cannot be written"));
    }
    // Reading the hook first gives the chain a base and pins the source node.
    let base = hook(root, path, port, call)?;
    with_active_for(root, |active| {
        let mut st = active.state.borrow_mut();
        let invoke = st.current_invoke;
        let hp = HookPoint::new(path, port, invoke, call);
        let base_name = st
            .hook_effective
            .get(&hp)
            .cloned()
            .unwrap_or_else(|| base.node.clone());
        let v = value.lower(&mut st)?;
        let name = st.graph.add_node(
            OpKind::SetItem,
            vec![base_name, v],
            Attrs::index_targeting(index, hp.clone()),
        )?;
        st.hook_effective.insert(hp, name.clone());
        Ok(Proxy::new(st.id, name))
    })
}

pub(crate) fn session_ref_node(session: &Session, name: &str) -> Result<Proxy> {
    with_active(|active| {
        let mut st = active.state.borrow_mut();
        match &st.session {
            Some(s) if s.same_as(session) => {}
            Some(_) => {
                return Err(Error::trace(
                    "session value referenced from a trace bound to a different session",
                ))
            }
            None => {
                return Err(Error::trace(
                    "session values require the trace to be opened with a session",
                ))
            }
        }
        let node = st
            .graph
            .add_node(OpKind::SessionRef, vec![], Attrs::session_ref(name))?;
        Ok(Proxy::new(st.id, node))
    })
}

pub(crate) fn session_store_node(session: &Session, name: &str, proxy: &Proxy) -> Result<()> {
    with_active(|active| {
        let mut st = active.state.borrow_mut();
        if st.id != proxy.trace_id {
            return Err(Error::trace("proxy belongs to a different trace"));
        }
        match &st.session {
            Some(s) if s.same_as(session) => {}
            Some(_) => {
                return Err(Error::trace(
                    "session store from a trace bound to a different session",
                ))
            }
            None => {
                return Err(Error::trace(
                    "session values require the trace to be opened with a session",
                ))
            }
        }
        if let Some(node) = st.graph.node(&proxy.node) {
            if let Some(existing) = &node.attrs.store_as {
                return Err(Error::trace(format!(
                    "node already stored as '{existing}'; store a copy instead"
                )));
            }
        }
        st.graph.set_store_as(&proxy.node, name)
    })
}

struct ActiveGuard;

impl Drop for ActiveGuard {
    fn drop(&mut self) {
        ACTIVE.with(|slot| slot.borrow_mut().take());
    }
}

/// Run a trace body against a wrapped model and execute the recorded graph
/// when the body completes.
pub fn run_trace<R>(
    root: &Arc<Module>,
    prompt: Option<&[u32]>,
    options: TraceOptions,
    body: impl FnOnce(&Tracer) -> Result<R>,
) -> Result<TraceOutput<R>> {
    let state = ACTIVE.with(|slot| {
        let mut slot = slot.borrow_mut();
        if slot.is_some() {
            return Err(Error::trace(
                "a tracing scope is already open on this thread",
            ));
        }
        let mut invocations = Vec::new();
        if let Some(p) = prompt {
            if p.is_empty() {
                return Err(Error::trace("trace prompt must not be empty"));
            }
            invocations.push(p.to_vec());
        }
        let state = Rc::new(RefCell::new(TraceState {
            id: TRACE_IDS.fetch_add(1, Ordering::Relaxed),
            graph: Graph::new(),
            invocations,
            current_invoke: 0,
            in_invoke: false,
            hook_nodes: HashMap::new(),
            hook_effective: HashMap::new(),
            backward_marker: None,
            session: options.session.clone(),
        }));
        *slot = Some(ActiveTrace {
            state: Rc::clone(&state),
            root: Arc::clone(root),
        });
        Ok(state)
    })?;
    let _guard = ActiveGuard;

    let tracer = Tracer {
        state: Rc::clone(&state),
    };
    let returned = body(&tracer)?;
    drop(tracer);
    drop(_guard); // close the scope before execution; nested traces may now error cleanly

    let state = match Rc::try_unwrap(state) {
        Ok(cell) => cell.into_inner(),
        Err(_) => return Err(Error::trace("trace state leaked outside its scope")),
    };
    finish_trace(root, state, options, returned)
}

fn finish_trace<R>(
    root: &Arc<Module>,
    state: TraceState,
    options: TraceOptions,
    returned: R,
) -> Result<TraceOutput<R>> {
    if state.invocations.is_empty() {
        return Err(Error::NoInvocation);
    }
    let has_grad_hooks = state
        .graph
        .nodes()
        .any(|n| n.op == OpKind::ModuleGradOutput);
    if has_grad_hooks && state.backward_marker.is_none() {
        return Err(Error::trace(
            "grad_output hooks require a backward request in the same trace",
        ));
    }

    if !options.skip_scan {
        let shapes: Vec<(usize, usize)> = state
            .invocations
            .iter()
            .map(|p| (1usize, p.len()))
            .collect();
        let table = validate::scan(root, &shapes)?;
        if !options.skip_validate {
            let issues = validate::validate(&state.graph, &table);
            if !issues.is_empty() {
                return Err(Error::Validation { issues });
            }
        }
    }

    let exec_graph = state.graph.fold_constants().eliminate_dead();

    // Route remotely when the trace or its session is remote.
    let remote = match (&options.remote, &options.session) {
        (Some(executor), Some(session)) => match session.remote_parts() {
            Some((session_exec, id)) => {
                if !Arc::ptr_eq(executor, &session_exec) {
                    return Err(Error::trace(
                        "trace endpoint differs from its session's endpoint",
                    ));
                }
                Some((Arc::clone(executor), Some(id)))
            }
            None => {
                return Err(Error::trace(
                    "a local session cannot be used with remote execution",
                ))
            }
        },
        (Some(executor), None) => Some((Arc::clone(executor), None)),
        (None, Some(session)) => session
            .remote_parts()
            .map(|(exec, id)| (exec, Some(id))),
        (None, None) => None,
    };

    let saved = match remote {
        Some((executor, session_id)) => {
            executor.execute_trace(&exec_graph, &state.invocations, session_id.as_deref())?
        }
        None => {
            let member = MemberRun {
                graph: &exec_graph,
                invocations: &state.invocations,
                session: options
                    .session
                    .as_ref()
                    .map(|s| s as &dyn SessionBacking),
            };
            let mut results = interleave_execute(root, &[member])?;
            results.pop().expect("one member")
        }
    };

    Ok(TraceOutput { saved, returned })
}
