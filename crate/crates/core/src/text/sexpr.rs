//! S-expression reader with source positions.

use super::ParseError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

#[derive(Clone, Debug)]
pub enum SExpr {
    List(Vec<SExpr>, Pos),
    Atom(String, Pos),
    Str(String, Pos),
}

impl SExpr {
    pub fn pos(&self) -> Pos {
        match self {
            SExpr::List(_, p) | SExpr::Atom(_, p) | SExpr::Str(_, p) => *p,
        }
    }

    pub fn atom(&self) -> Option<&str> {
        match self {
            SExpr::Atom(a, _) => Some(a),
            _ => None,
        }
    }

    /// Keyword of a list such as `(func ...)`.
    pub fn head(&self) -> Option<&str> {
        match self {
            SExpr::List(items, _) => items.first().and_then(SExpr::atom),
            _ => None,
        }
    }
}

/// Output of [`read`]: the top-level expressions and any marker comments
/// (`;;! ...`) seen before the first expression.
pub struct Document {
    pub exprs: Vec<SExpr>,
    pub markers: Vec<(String, Pos)>,
}

pub const MARKER_PREFIX: &str = ";;!";

pub fn read(src: &str) -> Result<Document, ParseError> {
    let mut reader = Reader {
        chars: src.chars().collect(),
        idx: 0,
        line: 1,
        col: 1,
        markers: Vec::new(),
    };
    let mut exprs = Vec::new();
    loop {
        reader.skip_trivia(exprs.is_empty())?;
        if reader.peek().is_none() {
            break;
        }
        exprs.push(reader.expr()?);
    }
    Ok(Document {
        exprs,
        markers: reader.markers,
    })
}

struct Reader {
    chars: Vec<char>,
    idx: usize,
    line: usize,
    col: usize,
    markers: Vec<(String, Pos)>,
}

impl Reader {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.idx).copied()
    }

    fn pos(&self) -> Pos {
        Pos {
            line: self.line,
            col: self.col,
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.idx += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_trivia(&mut self, collect_markers: bool) -> Result<(), ParseError> {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.bump();
            } else if c == ';' && self.chars.get(self.idx + 1) == Some(&';') {
                let pos = self.pos();
                let mut text = String::new();
                while let Some(c) = self.peek() {
                    if c == '\n' {
                        break;
                    }
                    text.push(c);
                    self.bump();
                }
                if collect_markers && text.starts_with(MARKER_PREFIX) {
                    self.markers
                        .push((text[MARKER_PREFIX.len()..].trim().to_string(), pos));
                }
            } else {
                break;
            }
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<SExpr, ParseError> {
        let pos = self.pos();
        match self.peek() {
            Some('(') => {
                self.bump();
                let mut items = Vec::new();
                loop {
                    self.skip_trivia(false)?;
                    match self.peek() {
                        Some(')') => {
                            self.bump();
                            return Ok(SExpr::List(items, pos));
                        }
                        None => return Err(ParseError::at(pos, "unclosed '('")),
                        _ => items.push(self.expr()?),
                    }
                }
            }
            Some(')') => Err(ParseError::at(pos, "unexpected ')'")),
            Some('"') => {
                self.bump();
                let mut s = String::new();
                loop {
                    match self.bump() {
                        Some('"') => return Ok(SExpr::Str(s, pos)),
                        Some('\\') => match self.bump() {
                            Some('n') => s.push('\n'),
                            Some('t') => s.push('\t'),
                            Some('\\') => s.push('\\'),
                            Some('"') => s.push('"'),
                            _ => return Err(ParseError::at(pos, "bad escape in string")),
                        },
                        Some('\n') | None => {
                            return Err(ParseError::at(pos, "unterminated string"))
                        }
                        Some(c) => s.push(c),
                    }
                }
            }
            Some(_) => {
                let mut s = String::new();
                while let Some(c) = self.peek() {
                    if c.is_whitespace() || c == '(' || c == ')' || c == '"' {
                        break;
                    }
                    if c == ';' && self.chars.get(self.idx + 1) == Some(&';') {
                        break;
                    }
                    s.push(c);
                    self.bump();
                }
                Ok(SExpr::Atom(s, pos))
            }
            None => Err(ParseError::at(pos, "unexpected end of input")),
        }
    }
}
