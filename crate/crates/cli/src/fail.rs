//! Exit-code contract: 0 success, 1 usage or data error, 2 environment
//! error (unreachable target, unwritable path).

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Data,
    Env,
}

#[derive(Debug)]
pub struct Fail {
    pub kind: Kind,
    pub err: anyhow::Error,
}

impl Fail {
    pub fn code(&self) -> u8 {
        match self.kind {
            Kind::Data => 1,
            Kind::Env => 2,
        }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.err)
    }
}

pub type Res<T> = Result<T, Fail>;

/// Tags an error with its exit class.
pub trait Classify<T> {
    fn data(self) -> Res<T>;
    fn env(self) -> Res<T>;
    fn data_ctx(self, what: &str) -> Res<T>;
    fn env_ctx(self, what: &str) -> Res<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn data(self) -> Res<T> {
        self.map_err(|e| Fail {
            kind: Kind::Data,
            err: e.into(),
        })
    }
    fn env(self) -> Res<T> {
        self.map_err(|e| Fail {
            kind: Kind::Env,
            err: e.into(),
        })
    }
    fn data_ctx(self, what: &str) -> Res<T> {
        self.map_err(|e| Fail {
            kind: Kind::Data,
            err: e.into().context(what.to_string()),
        })
    }
    fn env_ctx(self, what: &str) -> Res<T> {
        self.map_err(|e| Fail {
            kind: Kind::Env,
            err: e.into().context(what.to_string()),
        })
    }
}

pub fn data(msg: impl fmt::Display) -> Fail {
    Fail {
        kind: Kind::Data,
        err: anyhow::anyhow!("{msg}"),
    }
}

pub fn env(msg: impl fmt::Display) -> Fail {
    Fail {
        kind: Kind::Env,
        err: anyhow::anyhow!("{msg}"),
    }
}
