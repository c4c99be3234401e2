//! Envoys: recursive wrappers over a module tree exposing hook points.
//!
//! Wrapping is non-destructive and the envoy tree is isomorphic to the
//! module tree (same paths, same order). Inside an active trace, accessing a
//! hook creates (or reuses) a source node in the intervention graph and
//! hands back its proxy.

use std::ops::Index;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hook::Port;
use crate::model::Module;
use crate::tensor::IndexExpr;
use crate::trace::{self, Operand, Proxy};

#[derive(Clone)]
pub struct Envoy {
    root: Arc<Module>,
    path: String,
    children: Vec<(String, Envoy)>,
}

impl Envoy {
    /// Wrap a module tree. The envoy owns the module from here on; the tree
    /// stays shareable and read-only.
    pub fn wrap(module: Module) -> Envoy {
        let root = Arc::new(module);
        Envoy::build(Arc::clone(&root), &root, String::new())
    }

    pub fn wrap_shared(root: Arc<Module>) -> Envoy {
        Envoy::build(Arc::clone(&root), &root, String::new())
    }

    fn build(root: Arc<Module>, module: &Module, path: String) -> Envoy {
        let children = module
            .children()
            .map(|(name, child)| {
                let child_path = if path.is_empty() {
                    name.to_string()
                } else {
                    format!("{path}.{name}")
                };
                (
                    name.to_string(),
                    Envoy::build(Arc::clone(&root), child, child_path),
                )
            })
            .collect();
        Envoy {
            root,
            path,
            children,
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    /// The wrapped model root.
    pub fn module(&self) -> &Arc<Module> {
        &self.root
    }

    /// The module this envoy wraps.
    pub fn wrapped(&self) -> &Module {
        self.root.at_path(&self.path).expect("isomorphic tree")
    }

    pub fn children(&self) -> impl Iterator<Item = (&str, &Envoy)> {
        self.children.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn child(&self, name: &str) -> Option<&Envoy> {
        self.children
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
    }

    /// Paths of this subtree in depth-first pre-order.
    pub fn paths(&self) -> Vec<String> {
        let mut out = vec![self.path.clone()];
        for (_, child) in &self.children {
            out.extend(child.paths());
        }
        out
    }

    /// Resolve a dotted path relative to this envoy; "" resolves to self.
    pub fn resolve(&self, path: &str) -> Result<&Envoy> {
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

    /// Proxy for this module's output in the current invoke scope.
    pub fn output(&self) -> Result<Proxy> {
        self.hook(Port::Output, 0)
    }

    /// Proxy for this module's primary input in the current invoke scope.
    pub fn input(&self) -> Result<Proxy> {
        self.hook(Port::Input, 0)
    }

    /// Proxy for the gradient at this module's output; requires a backward
    /// request in the same trace.
    pub fn grad_output(&self) -> Result<Proxy> {
        self.hook(Port::GradOutput, 0)
    }

    /// Hook a specific call of this module (for modules run more than once
    /// per forward).
    pub fn hook(&self, port: Port, call_index: u32) -> Result<Proxy> {
        trace::hook(&self.root, &self.path, port, call_index)
    }

    /// Overwrite a region of this module's output before downstream
    /// computation; returns the proxy of the resulting tensor.
    pub fn set_output(&self, index: IndexExpr, value: impl Into<Operand>) -> Result<Proxy> {
        trace::hook_write(&self.root, &self.path, Port::Output, 0, index, value.into())
    }

    /// Overwrite a region of this module's input before the module runs.
    pub fn set_input(&self, index: IndexExpr, value: impl Into<Operand>) -> Result<Proxy> {
        trace::hook_write(&self.root, &self.path, Port::Input, 0, index, value.into())
    }

    /// Replace this module's output wholesale.
    pub fn replace_output(&self, value: impl Into<Operand>) -> Result<Proxy> {
        self.set_output(IndexExpr::new(), value)
    }

    /// Replace this module's input wholesale.
    pub fn replace_input(&self, value: impl Into<Operand>) -> Result<Proxy> {
        self.set_input(IndexExpr::new(), value)
    }
}

impl std::fmt::Debug for Envoy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Envoy")
            .field("path", &self.path)
            .field("children", &self.children.len())
            .finish()
    }
}

/// Panicking sugar for test-style navigation: `envoy["layers"][0]["mlp"]`.
impl Index<&str> for Envoy {
    type Output = Envoy;

    fn index(&self, name: &str) -> &Envoy {
        self.child(name)
            .unwrap_or_else(|| panic!("no child '{name}' under '{}'", self.path))
    }
}

impl Index<usize> for Envoy {
    type Output = Envoy;

    fn index(&self, i: usize) -> &Envoy {
        self.child(&i.to_string())
            .unwrap_or_else(|| panic!("no child '{i}' under '{}'", self.path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_toy_lm, LMConfig, Module};

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
    fn wrap_preserves_paths_exactly() {
        let m = toy();
        let expected = m.named_paths();
        let envoy = Envoy::wrap(m);
        assert_eq!(envoy.paths(), expected);
        assert_eq!(envoy["layers"][0]["mlp"].path(), "layers.0.mlp");
    }

    #[test]
    fn wrapping_a_leaf_yields_no_children() {
        let envoy = Envoy::wrap(Module::custom_leaf());
        assert_eq!(envoy.children().count(), 0);
        assert_eq!(envoy.paths(), vec![String::new()]);
    }

    #[test]
    fn resolve_returns_descendants_and_prefix_errors() {
        let envoy = Envoy::wrap(toy());
        let block = envoy.resolve("layers.1").unwrap();
        assert_eq!(block.children().count(), 4);
        assert!(envoy.resolve("").unwrap().path().is_empty());
        match envoy.resolve("layers.9").unwrap_err() {
            Error::Path { prefix, .. } => assert_eq!(prefix, "layers"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hook_outside_trace_is_a_trace_error() {
        let envoy = Envoy::wrap(toy());
        assert!(matches!(
            envoy["ln_f"].output().unwrap_err(),
            Error::Trace(_)
        ));
    }
}
