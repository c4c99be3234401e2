//! Sessions: value stores that survive across traces.
//!
//! A local session keeps its store in-process. A remote session keeps it on
//! the server; stored values are never downloaded unless explicitly saved.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::TensorValue;
use crate::trace::{self, Proxy, RemoteExecutor};

/// Resolution surface the interleaver uses for session_ref and store_as.
pub trait SessionBacking {
    fn get_value(&self, name: &str) -> Result<TensorValue>;
    fn put_value(&self, name: &str, value: TensorValue) -> Result<()>;
}

enum Owner {
    Local {
        store: RefCell<HashMap<String, TensorValue>>,
    },
    Remote {
        executor: Arc<dyn RemoteExecutor>,
        id: String,
    },
}

struct SessionInner {
    owner: Owner,
    closed: Cell<bool>,
}

/// Cross-trace value store handle. Clones share the same store.
#[derive(Clone)]
pub struct Session {
    inner: Rc<SessionInner>,
}

impl Session {
    pub fn local() -> Session {
        Session {
            inner: Rc::new(SessionInner {
                owner: Owner::Local {
                    store: RefCell::new(HashMap::new()),
                },
                closed: Cell::new(false),
            }),
        }
    }

    /// Open a server-side session through a remote executor.
    pub fn remote(executor: Arc<dyn RemoteExecutor>) -> Result<Session> {
        let id = executor.open_session()?;
        Ok(Session {
            inner: Rc::new(SessionInner {
                owner: Owner::Remote { executor, id },
                closed: Cell::new(false),
            }),
        })
    }

    pub fn is_remote(&self) -> bool {
        matches!(self.inner.owner, Owner::Remote { .. })
    }

    pub fn id(&self) -> Option<&str> {
        match &self.inner.owner {
            Owner::Remote { id, .. } => Some(id),
            Owner::Local { .. } => None,
        }
    }

    pub(crate) fn remote_parts(&self) -> Option<(Arc<dyn RemoteExecutor>, String)> {
        match &self.inner.owner {
            Owner::Remote { executor, id } => Some((Arc::clone(executor), id.clone())),
            Owner::Local { .. } => None,
        }
    }

    pub(crate) fn same_as(&self, other: &Session) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn check_open(&self) -> Result<()> {
        if self.inner.closed.get() {
            Err(Error::SessionClosed)
        } else {
            Ok(())
        }
    }

    /// Create a source node resolving to a stored value at execution time.
    pub fn reference(&self, name: &str) -> Result<Proxy> {
        self.check_open()?;
        trace::session_ref_node(self, name)
    }

    /// Store the executed value of `proxy` under `name` once its trace runs.
    pub fn store(&self, name: &str, proxy: &Proxy) -> Result<()> {
        self.check_open()?;
        trace::session_store_node(self, name, proxy)
    }

    /// Read a stored value. Local sessions only: remote stores live
    /// server-side and are not downloaded.
    pub fn value(&self, name: &str) -> Result<TensorValue> {
        self.check_open()?;
        match &self.inner.owner {
            Owner::Local { store } => store
                .borrow()
                .get(name)
                .cloned()
                .ok_or_else(|| Error::UnknownSessionValue(name.to_string())),
            Owner::Remote { .. } => Err(Error::trace(
                "remote session values are not downloaded; save() them in a trace",
            )),
        }
    }

    /// Close the session and free its store.
    pub fn close(&self) -> Result<()> {
        if self.inner.closed.replace(true) {
            return Ok(());
        }
        match &self.inner.owner {
            Owner::Local { store } => {
                store.borrow_mut().clear();
                Ok(())
            }
            Owner::Remote { executor, id } => executor.close_session(id),
        }
    }
}

impl SessionBacking for Session {
    fn get_value(&self, name: &str) -> Result<TensorValue> {
        self.check_open()?;
        match &self.inner.owner {
            Owner::Local { store } => store
                .borrow()
                .get(name)
                .cloned()
                .ok_or_else(|| Error::UnknownSessionValue(name.to_string())),
            Owner::Remote { .. } => Err(Error::trace(
                "remote session resolves values server-side",
            )),
        }
    }

    fn put_value(&self, name: &str, value: TensorValue) -> Result<()> {
        self.check_open()?;
        match &self.inner.owner {
            Owner::Local { store } => {
                store.borrow_mut().insert(name.to_string(), value);
                Ok(())
            }
            Owner::Remote { .. } => Err(Error::trace(
                "remote session stores values server-side",
            )),
        }
    }
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("remote", &self.is_remote())
            .field("closed", &self.inner.closed.get())
            .finish()
    }
}
