//! Process-level errors with exit codes and a one-line JSON rendering.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Config,
    Data,
    Numerical,
}

#[derive(Clone, Debug, Serialize)]
pub struct CliError {
    pub kind: Kind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub message: String,
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        let path = path.into();
        Self { kind: Kind::Config, path: (!path.is_empty()).then_some(path), message: message.into() }
    }

    /// Any error raised while reading or using input data.
    pub fn data(e: maw::Error) -> Self {
        match e {
            maw::Error::Numerical(_) | maw::Error::NotPsd(_) => Self::from(e),
            other => Self { kind: Kind::Data, path: None, message: other.to_string() },
        }
    }

    /// A data error naming the file it came from.
    pub fn data_at(path: &std::path::Path, e: maw::Error) -> Self {
        let mut err = Self::data(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    }

    pub fn code(&self) -> i32 {
        match self.kind {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numerical => 4,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(&serde_json::json!({ "error": self })).expect("error serializes")
    }
}

impl From<maw::Error> for CliError {
    fn from(e: maw::Error) -> Self {
        use maw::Error as E;
        let kind = match &e {
            E::Config { path, msg } => return Self::config(path.clone(), msg.clone()),
            E::Domain(_) | E::OutOfRegime(_) => Kind::Config,
            E::Numerical(_) | E::NotPsd(_) => Kind::Numerical,
            E::Shape(_) | E::UndefinedMetric(_) | E::Parse { .. } | E::Format(_) | E::Io(_) | E::Json(_) => Kind::Data,
        };
        Self { kind, path: None, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { kind: Kind::Data, path: None, message: e.to_string() }
    }
}
