//! A small SPARQL tokenizer: enough structure for URI extraction and
//! templating, no grammar validation.

use super::SparqlError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// Bare word: keywords, function names, `a`, `true`/`false`.
    Word,
    /// `?x` or `$x`, text includes the sigil.
    Variable,
    /// `prefix:local`
    PrefixedName,
    /// `<...>`
    Iri,
    /// `<ENT_0>`, `<REL_3>`, `<CLS_1>`, `<LIT:string>`
    Placeholder,
    /// String literal with any `@lang` or `^^datatype` suffix.
    String,
    Number,
    Punct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub kind: TokenKind,
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

impl Token<'_> {
    pub fn is_punct(&self, p: &str) -> bool {
        self.kind == TokenKind::Punct && self.text == p
    }

    pub fn is_word(&self, w: &str) -> bool {
        self.kind == TokenKind::Word && self.text.eq_ignore_ascii_case(w)
    }

    pub fn is_term(&self) -> bool {
        match self.kind {
            TokenKind::Variable
            | TokenKind::PrefixedName
            | TokenKind::Iri
            | TokenKind::Placeholder
            | TokenKind::String
            | TokenKind::Number => true,
            TokenKind::Word => {
                self.text == "a"
                    || self.text.eq_ignore_ascii_case("true")
                    || self.text.eq_ignore_ascii_case("false")
            }
            TokenKind::Punct => false,
        }
    }
}

fn is_name_start(c: char) -> bool {
    c.is_alphabetic() || c == '_'
}

fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '-'
}

pub fn is_placeholder(inner: &str) -> bool {
    let indexed = |tag: &str| {
        inner
            .strip_prefix(tag)
            .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
    };
    indexed("ENT_") || indexed("REL_") || indexed("CLS_") || inner.starts_with("LIT:")
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek_at(&self, offset: usize) -> Option<char> {
        self.src[self.pos..].chars().nth(offset)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn eat_while(&mut self, pred: impl Fn(char) -> bool) {
        while self.peek().is_some_and(&pred) {
            self.bump();
        }
    }

    fn token(&self, kind: TokenKind, start: usize) -> Token<'a> {
        Token {
            kind,
            text: &self.src[start..self.pos],
            start,
            end: self.pos,
        }
    }

    /// Local part of a prefixed name; may not end with '.'.
    fn eat_local_name(&mut self) {
        loop {
            match self.peek() {
                Some(c) if is_name_char(c) || c == ':' || c == '%' => {
                    self.bump();
                }
                Some('.') if self.peek_at(1).is_some_and(is_name_char) => {
                    self.bump();
                }
                _ => break,
            }
        }
    }

    fn try_iri(&mut self) -> Option<usize> {
        let rest = &self.src[self.pos + 1..];
        for (i, c) in rest.char_indices() {
            match c {
                '>' => return Some(self.pos + 1 + i + 1),
                c if c.is_whitespace() || matches!(c, '<' | '"' | '{' | '}' | '|' | '^' | '`' | '\\') => {
                    return None
                }
                _ => {}
            }
        }
        None
    }

    fn string(&mut self, start: usize, quote: char) -> Result<(), SparqlError> {
        let triple = self.peek_at(1) == Some(quote) && self.peek_at(2) == Some(quote);
        let q = if triple { 3 } else { 1 };
        for _ in 0..q {
            self.bump();
        }
        loop {
            match self.bump() {
                None => return Err(SparqlError::at(start, "unterminated string literal")),
                Some('\\') => {
                    self.bump();
                }
                Some(c) if c == quote => {
                    if !triple {
                        break;
                    }
                    if self.peek() == Some(quote) && self.peek_at(1) == Some(quote) {
                        self.bump();
                        self.bump();
                        break;
                    }
                }
                Some('\n') if !triple => {
                    return Err(SparqlError::at(start, "unterminated string literal"))
                }
                Some(_) => {}
            }
        }
        // language tag or datatype
        if self.peek() == Some('@') {
            self.bump();
            self.eat_while(|c| c.is_ascii_alphanumeric() || c == '-');
        } else if self.peek() == Some('^') && self.peek_at(1) == Some('^') {
            self.bump();
            self.bump();
            if self.peek() == Some('<') {
                let end = self
                    .try_iri()
                    .ok_or_else(|| SparqlError::at(self.pos, "malformed datatype IRI"))?;
                self.pos = end;
            } else {
                self.eat_while(is_name_char);
                if self.peek() == Some(':') {
                    self.bump();
                    self.eat_local_name();
                }
            }
        }
        Ok(())
    }

    fn number(&mut self) {
        self.eat_while(|c| c.is_ascii_digit());
        if self.peek() == Some('.') && self.peek_at(1).is_some_and(|c| c.is_ascii_digit()) {
            self.bump();
            self.eat_while(|c| c.is_ascii_digit());
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            let sign = matches!(self.peek_at(1), Some('+' | '-'));
            let digit_at = if sign { 2 } else { 1 };
            if self.peek_at(digit_at).is_some_and(|c| c.is_ascii_digit()) {
                for _ in 0..=digit_at {
                    self.bump();
                }
                self.eat_while(|c| c.is_ascii_digit());
            }
        }
    }

    fn next_token(&mut self) -> Result<Option<Token<'a>>, SparqlError> {
        loop {
            self.eat_while(char::is_whitespace);
            if self.peek() == Some('#') {
                self.eat_while(|c| c != '\n');
                continue;
            }
            break;
        }
        let start = self.pos;
        let Some(c) = self.peek() else {
            return Ok(None);
        };
        let kind = match c {
            '"' | '\'' => {
                self.string(start, c)?;
                TokenKind::String
            }
            '?' | '$' if self.peek_at(1).is_some_and(is_name_char) => {
                self.bump();
                self.eat_while(is_name_char);
                TokenKind::Variable
            }
            '<' => match self.try_iri() {
                Some(end) => {
                    self.pos = end;
                    if is_placeholder(&self.src[start + 1..end - 1]) {
                        TokenKind::Placeholder
                    } else {
                        TokenKind::Iri
                    }
                }
                None => {
                    self.bump();
                    if self.peek() == Some('=') {
                        self.bump();
                    }
                    TokenKind::Punct
                }
            },
            c if c.is_ascii_digit() => {
                self.number();
                TokenKind::Number
            }
            '.' if self.peek_at(1).is_some_and(|n| n.is_ascii_digit()) => {
                self.number();
                TokenKind::Number
            }
            c if is_name_start(c) || c == ':' => {
                self.eat_while(is_name_char);
                if self.peek() == Some(':') {
                    self.bump();
                    self.eat_local_name();
                    TokenKind::PrefixedName
                } else {
                    TokenKind::Word
                }
            }
            '&' | '|' if self.peek_at(1) == Some(c) => {
                self.bump();
                self.bump();
                TokenKind::Punct
            }
            '!' | '>' if self.peek_at(1) == Some('=') => {
                self.bump();
                self.bump();
                TokenKind::Punct
            }
            '{' | '}' | '(' | ')' | '[' | ']' | '.' | ',' | ';' | '*' | '/' | '|' | '^' | '+'
            | '-' | '!' | '=' | '>' | '?' => {
                self.bump();
                TokenKind::Punct
            }
            other => {
                return Err(SparqlError::at(
                    start,
                    &format!("unexpected character `{other}`"),
                ))
            }
        };
        Ok(Some(self.token(kind, start)))
    }
}

/// Tokenizes `src`, also checking that braces, parentheses and brackets
/// balance.
pub fn tokenize(src: &str) -> Result<Vec<Token<'_>>, SparqlError> {
    let mut lexer = Lexer { src, pos: 0 };
    let mut tokens = Vec::new();
    let mut stack: Vec<(char, usize)> = Vec::new();
    while let Some(tok) = lexer.next_token()? {
        if tok.kind == TokenKind::Punct {
            match tok.text {
                "{" => stack.push(('}', tok.start)),
                "(" => stack.push((')', tok.start)),
                "[" => stack.push((']', tok.start)),
                "}" | ")" | "]" => {
                    let want = tok.text.chars().next().unwrap();
                    match stack.pop() {
                        Some((c, _)) if c == want => {}
                        _ => {
                            return Err(SparqlError::at(
                                tok.start,
                                &format!("unbalanced `{}`", tok.text),
                            ))
                        }
                    }
                }
                _ => {}
            }
        }
        tokens.push(tok);
    }
    if let Some((closer, offset)) = stack.pop() {
        return Err(SparqlError::at(
            offset,
            &format!("missing closing `{closer}`"),
        ));
    }
    Ok(tokens)
}
