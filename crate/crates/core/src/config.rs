//! Block-structured configuration files.
//!
//! ```text
//! template_controller def1 {
//!     interval 60000
//! }
//!
//! controller c1 {
//!     default def1
//!     input {
//!         sensor "<topdown 3, filter cm/s../socket>temp-p" {
//!             hotThreshold  73000
//!             critThreshold 93000
//!         }
//!     }
//! }
//! ```
//!
//! Every entry is `key [value] [{ entries }]`. Values are bare words,
//! integers, decimals or double-quoted strings. `//` and `;` start comments.
//! A block may name a template with `default <name>`; the template (a
//! top-level block whose kind is `template_<kind>`) supplies any keys the
//! block does not set itself.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {col}: {msg}")]
pub struct ConfigError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

impl ConfigError {
    pub fn at(node: &Node, msg: impl Into<String>) -> Self {
        ConfigError {
            line: node.line,
            col: node.col,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Word(String),
    Str(String),
    Int(i64),
    Float(f64),
}

impl Value {
    pub fn as_text(&self) -> String {
        match self {
            Value::Word(s) | Value::Str(s) => s.clone(),
            Value::Int(i) => i.to_string(),
            Value::Float(f) => f.to_string(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Str(s) => write!(f, "{s:?}"),
            other => f.write_str(&other.as_text()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub key: String,
    pub value: Option<Value>,
    /// `Some` for blocks, even empty ones.
    pub children: Option<Vec<Node>>,
    pub line: usize,
    pub col: usize,
}

impl Node {
    pub fn is_block(&self) -> bool {
        self.children.is_some()
    }

    pub fn children(&self) -> &[Node] {
        self.children.as_deref().unwrap_or(&[])
    }

    pub fn name(&self) -> Option<String> {
        self.value.as_ref().map(Value::as_text)
    }

    pub fn get(&self, key: &str) -> Option<&Node> {
        self.children().iter().find(|n| n.key == key)
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Node> + 'a {
        self.children().iter().filter(move |n| n.key == key)
    }

    /// Rejects any child key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for c in self.children() {
            if !allowed.contains(&c.key.as_str()) {
                return Err(ConfigError::at(
                    c,
                    format!("unknown key {:?} in {} block", c.key, self.key),
                ));
            }
        }
        Ok(())
    }

    fn scalar(&self, key: &str) -> Result<Option<&Value>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(n) if n.is_block() => Err(ConfigError::at(n, format!("{key} must be a value"))),
            Some(n) => match &n.value {
                Some(v) => Ok(Some(v)),
                None => Err(ConfigError::at(n, format!("{key} needs a value"))),
            },
        }
    }

    pub fn int(&self, key: &str) -> Result<Option<i64>, ConfigError> {
        match self.scalar(key)? {
            None => Ok(None),
            Some(Value::Int(i)) => Ok(Some(*i)),
            Some(_) => Err(ConfigError::at(
                self.get(key).unwrap(),
                format!("{key} must be an integer"),
            )),
        }
    }

    pub fn float(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.scalar(key)? {
            None => Ok(None),
            Some(Value::Int(i)) => Ok(Some(*i as f64)),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(_) => Err(ConfigError::at(
                self.get(key).unwrap(),
                format!("{key} must be a number"),
            )),
        }
    }

    pub fn text(&self, key: &str) -> Result<Option<String>, ConfigError> {
        Ok(self.scalar(key)?.map(Value::as_text))
    }

    pub fn boolean(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.scalar(key)? {
            None => Ok(None),
            Some(v) => match v.as_text().as_str() {
                "true" | "on" | "yes" | "1" => Ok(Some(true)),
                "false" | "off" | "no" | "0" => Ok(Some(false)),
                _ => Err(ConfigError::at(
                    self.get(key).unwrap(),
                    format!("{key} must be true or false"),
                )),
            },
        }
    }

    pub fn req_int(&self, key: &str) -> Result<i64, ConfigError> {
        self.int(key)?
            .ok_or_else(|| ConfigError::at(self, format!("{} block needs {key}", self.key)))
    }

    pub fn req_float(&self, key: &str) -> Result<f64, ConfigError> {
        self.float(key)?
            .ok_or_else(|| ConfigError::at(self, format!("{} block needs {key}", self.key)))
    }

    pub fn req_text(&self, key: &str) -> Result<String, ConfigError> {
        self.text(key)?
            .ok_or_else(|| ConfigError::at(self, format!("{} block needs {key}", self.key)))
    }
}

/// A parsed file: top-level entries with templates applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub nodes: Vec<Node>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile, ConfigError> {
        let toks = lex(text)?;
        let mut p = Parser { toks, pos: 0 };
        let nodes = p.entries(true)?;
        let (templates, nodes): (Vec<Node>, Vec<Node>) = nodes
            .into_iter()
            .partition(|n| n.key.starts_with("template_"));
        let nodes = nodes
            .into_iter()
            .map(|n| apply_defaults(n, &templates))
            .collect::<Result<_, _>>()?;
        Ok(ConfigFile { nodes })
    }

    pub fn blocks<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Node> + 'a {
        self.nodes.iter().filter(move |n| n.key == kind)
    }
}

fn apply_defaults(mut node: Node, templates: &[Node]) -> Result<Node, ConfigError> {
    if let Some(children) = node.children.take() {
        let mut kids = Vec::with_capacity(children.len());
        let mut default = None;
        for c in children {
            if c.key == "default" && !c.is_block() {
                default = Some(c);
            } else {
                kids.push(apply_defaults(c, templates)?);
            }
        }
        if let Some(d) = default {
            let name = d
                .name()
                .ok_or_else(|| ConfigError::at(&d, "default needs a template name"))?;
            let wanted = format!("template_{}", node.key);
            let tpl = templates
                .iter()
                .find(|t| t.key == wanted && t.name().as_deref() == Some(name.as_str()))
                .ok_or_else(|| ConfigError::at(&d, format!("no {wanted} block named {name:?}")))?;
            for tc in tpl.children() {
                if !kids.iter().any(|k| k.key == tc.key) {
                    kids.push(apply_defaults(tc.clone(), templates)?);
                }
            }
        }
        node.children = Some(kids);
    }
    Ok(node)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Str(String),
    Open,
    Close,
    Newline,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, ConfigError> {
    let mut out = Vec::new();
    for (li, line) in text.lines().enumerate() {
        let lineno = li + 1;
        let chars: Vec<(usize, char)> = line.char_indices().collect();
        let mut i = 0;
        while i < chars.len() {
            let (col, c) = chars[i];
            let col = col + 1;
            match c {
                c if c.is_whitespace() => i += 1,
                ';' => break,
                '/' if chars.get(i + 1).map(|x| x.1) == Some('/') => break,
                '{' => {
                    out.push(Spanned {
                        tok: Tok::Open,
                        line: lineno,
                        col,
                    });
                    i += 1;
                }
                '}' => {
                    out.push(Spanned {
                        tok: Tok::Close,
                        line: lineno,
                        col,
                    });
                    i += 1;
                }
                '"' => {
                    let mut s = String::new();
                    i += 1;
                    let mut closed = false;
                    while i < chars.len() {
                        match chars[i].1 {
                            '"' => {
                                closed = true;
                                i += 1;
                                break;
                            }
                            '\\' if i + 1 < chars.len() => {
                                s.push(chars[i + 1].1);
                                i += 2;
                            }
                            ch => {
                                s.push(ch);
                                i += 1;
                            }
                        }
                    }
                    if !closed {
                        return Err(ConfigError {
                            line: lineno,
                            col,
                            msg: "unterminated string".into(),
                        });
                    }
                    out.push(Spanned {
                        tok: Tok::Str(s),
                        line: lineno,
                        col,
                    });
                }
                _ => {
                    let start = i;
                    while i < chars.len()
                        && !chars[i].1.is_whitespace()
                        && !matches!(chars[i].1, '{' | '}' | '"' | ';')
                    {
                        i += 1;
                    }
                    let word: String = chars[start..i].iter().map(|x| x.1).collect();
                    out.push(Spanned {
                        tok: Tok::Word(word),
                        line: lineno,
                        col,
                    });
                }
            }
        }
        out.push(Spanned {
            tok: Tok::Newline,
            line: lineno,
            col: line.len() + 1,
        });
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

fn to_value(tok: &Tok) -> Option<Value> {
    match tok {
        Tok::Str(s) => Some(Value::Str(s.clone())),
        Tok::Word(w) => Some(if let Ok(i) = w.parse::<i64>() {
            Value::Int(i)
        } else if let Ok(f) = w.parse::<f64>() {
            Value::Float(f)
        } else {
            Value::Word(w.clone())
        }),
        _ => None,
    }
}

impl Parser {
    fn peek(&self) -> Option<&Spanned> {
        self.toks.get(self.pos)
    }

    fn skip_newlines(&mut self) {
        while matches!(
            self.peek(),
            Some(Spanned {
                tok: Tok::Newline,
                ..
            })
        ) {
            self.pos += 1;
        }
    }

    fn entries(&mut self, top: bool) -> Result<Vec<Node>, ConfigError> {
        let mut out = Vec::new();
        loop {
            self.skip_newlines();
            let Some(sp) = self.peek().cloned() else {
                if top {
                    return Ok(out);
                }
                let (line, col) = self.toks.last().map_or((1, 1), |s| (s.line, s.col));
                return Err(ConfigError {
                    line,
                    col,
                    msg: "missing '}'".into(),
                });
            };
            match sp.tok {
                Tok::Close if !top => {
                    self.pos += 1;
                    return Ok(out);
                }
                Tok::Close => {
                    return Err(ConfigError {
                        line: sp.line,
                        col: sp.col,
                        msg: "unexpected '}'".into(),
                    })
                }
                Tok::Open => {
                    return Err(ConfigError {
                        line: sp.line,
                        col: sp.col,
                        msg: "block without a key".into(),
                    })
                }
                Tok::Str(_) => {
                    return Err(ConfigError {
                        line: sp.line,
                        col: sp.col,
                        msg: "expected a key, found a string".into(),
                    })
                }
                Tok::Word(key) => {
                    self.pos += 1;
                    out.push(self.entry(key, sp.line, sp.col)?);
                }
                Tok::Newline => unreachable!(),
            }
        }
    }

    fn entry(&mut self, key: String, line: usize, col: usize) -> Result<Node, ConfigError> {
        let mut value = None;
        if let Some(v) = self.peek().and_then(|s| to_value(&s.tok)) {
            value = Some(v);
            self.pos += 1;
        }
        let children = match self.peek().map(|s| &s.tok) {
            Some(Tok::Open) => {
                self.pos += 1;
                Some(self.entries(false)?)
            }
            Some(Tok::Newline) | Some(Tok::Close) | None => None,
            Some(_) => {
                let s = self.peek().unwrap();
                return Err(ConfigError {
                    line: s.line,
                    col: s.col,
                    msg: format!("unexpected token after {key:?}"),
                });
            }
        };
        Ok(Node {
            key,
            value,
            children,
            line,
            col,
        })
    }
}
