//! Hook coordinates: where in a traced execution a tensor event happens.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Port {
    Input,
    Output,
    GradOutput,
}

impl Port {
    pub fn as_str(&self) -> &'static str {
        match self {
            Port::Input => "input",
            Port::Output => "output",
            Port::GradOutput => "grad_output",
        }
    }

    pub fn parse(s: &str) -> Option<Port> {
        match s {
            "input" => Some(Port::Input),
            "output" => Some(Port::Output),
            "grad_output" => Some(Port::GradOutput),
            _ => None,
        }
    }
}

impl fmt::Display for Port {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// (module path, port, invoke, call) uniquely identifies one tensor event in
/// a traced execution. `invoke_index` selects the prompt sub-scope, and
/// `call_index` disambiguates modules invoked more than once per forward.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HookPoint {
    pub path: String,
    pub port: Port,
    pub invoke_index: u32,
    pub call_index: u32,
}

impl HookPoint {
    pub fn new(path: impl Into<String>, port: Port, invoke_index: u32, call_index: u32) -> Self {
        Self {
            path: path.into(),
            port,
            invoke_index,
            call_index,
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{}[invoke {}, call {}]",
            if self.path.is_empty() { "<model>" } else { &self.path },
            self.port,
            self.invoke_index,
            self.call_index
        )
    }
}
