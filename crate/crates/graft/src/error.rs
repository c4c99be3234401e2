//! Error types shared across the engine.

use thiserror::Error;

/// Validation issue produced by [`crate::validate::validate`].
///
/// Issues are data, not errors: validation returns the full list so a user
/// can fix several problems in one pass. [`Error::Validation`] carries the
/// rendered list when a trace refuses to execute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub kind: IssueKind,
    pub node: String,
    pub op: String,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssueKind {
    ShapeMismatch,
    BadIndex,
    BadAxis,
    UnknownHook,
    MalformedAttrs,
    Cycle,
    Skipped,
}

impl IssueKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            IssueKind::ShapeMismatch => "shape-mismatch",
            IssueKind::BadIndex => "bad-index",
            IssueKind::BadAxis => "bad-axis",
            IssueKind::UnknownHook => "unknown-hook",
            IssueKind::MalformedAttrs => "malformed-attrs",
            IssueKind::Cycle => "cycle",
            IssueKind::Skipped => "skipped",
        }
    }
}

impl std::fmt::Display for Issue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: node={} op={} {}",
            self.kind.as_str(),
            self.node,
            self.op,
            self.detail
        )
    }
}

/// Render an issue list in the stable one-issue-per-line format used by the
/// CLI and by server error payloads.
pub fn render_issues(issues: &[Issue]) -> String {
    let mut out = String::new();
    for issue in issues {
        out.push_str(&issue.to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("axis error: {0}")]
    Axis(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("cycle detected involving node '{0}'")]
    Cycle(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("vocab error: {0}")]
    Vocab(String),

    #[error("path error: no module at '{path}' (nearest valid prefix: '{prefix}')")]
    Path { path: String, prefix: String },

    #[error("trace error: {0}")]
    Trace(String),

    #[error("trace has no invocations")]
    NoInvocation,

    #[error("missing source for node '{node}': {detail}")]
    MissingSource { node: String, detail: String },

    #[error("validation failed:\n{}", render_issues(.issues))]
    Validation { issues: Vec<Issue> },

    #[error("unknown session value '{0}'")]
    UnknownSessionValue(String),

    #[error("session is closed")]
    SessionClosed,

    #[error("error at node '{node}': {source}")]
    AtNode {
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error("remote error ({kind}): {message}")]
    Remote {
        kind: String,
        message: String,
        node: Option<String>,
    },
}

impl Error {
    /// Attach the graph node a failure occurred at. Nested annotations keep
    /// only the innermost node name.
    pub fn at_node(self, node: impl Into<String>) -> Error {
        match self {
            Error::AtNode { .. } => self,
            other => Error::AtNode {
                node: node.into(),
                source: Box::new(other),
            },
        }
    }

    pub fn shape(msg: impl Into<String>) -> Error {
        Error::Shape(msg.into())
    }

    pub fn axis(msg: impl Into<String>) -> Error {
        Error::Axis(msg.into())
    }

    pub fn index(msg: impl Into<String>) -> Error {
        Error::Index(msg.into())
    }

    pub fn graph(msg: impl Into<String>) -> Error {
        Error::Graph(msg.into())
    }

    pub fn trace(msg: impl Into<String>) -> Error {
        Error::Trace(msg.into())
    }

    /// True when the error is a shape/index/axis class failure, the class the
    /// validator promises to catch ahead of execution.
    pub fn is_shape_class(&self) -> bool {
        match self {
            Error::Shape(_) | Error::Axis(_) | Error::Index(_) => true,
            Error::AtNode { source, .. } => source.is_shape_class(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
