//! Canonical form of Python programs for duplicate detection.
//!
//! Comments and blank lines are dropped, whitespace inside a line collapses
//! to single spaces, indentation becomes a nesting level, and local names
//! are renamed `v0, v1, ...` by first appearance. Keywords, builtins,
//! harness helpers, attribute names and keyword-argument names are kept, as
//! are all literals.

pub trait CodeNormalizer: Send + Sync {
    fn normalize(&self, code: &str) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PythonNormalizer;

impl CodeNormalizer for PythonNormalizer {
    fn normalize(&self, code: &str) -> String {
        normalize_python(code)
    }
}

const KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue", "def", "del",
    "elif", "else", "except", "finally", "for", "from", "global", "if", "import", "in", "is", "lambda", "nonlocal",
    "not", "or", "pass", "raise", "return", "try", "while", "with", "yield", "match", "case",
];

const BUILTINS: &[&str] = &[
    "abs",
    "all",
    "any",
    "bool",
    "bytes",
    "callable",
    "chr",
    "dict",
    "dir",
    "divmod",
    "enumerate",
    "filter",
    "float",
    "format",
    "frozenset",
    "getattr",
    "hasattr",
    "hash",
    "int",
    "isinstance",
    "issubclass",
    "iter",
    "len",
    "list",
    "map",
    "max",
    "min",
    "next",
    "object",
    "open",
    "ord",
    "pow",
    "print",
    "range",
    "repr",
    "reversed",
    "round",
    "set",
    "setattr",
    "slice",
    "sorted",
    "str",
    "sum",
    "super",
    "tuple",
    "type",
    "zip",
    "Exception",
    "ValueError",
    "KeyError",
    "IndexError",
    "TypeError",
    "RuntimeError",
    "ZeroDivisionError",
    "AttributeError",
    "StopIteration",
];

const HARNESS: &[&str] = &["emit_answer", "emit_trace", "load_instance", "call_tool"];

const OPERATORS: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "...", "->", ":=", "==", "!=", "<=", ">=", "**", "//", "<<", ">>", "+=", "-=", "*=",
    "/=", "%=", "&=", "|=", "^=", "@=",
];

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Name(String),
    Other(String),
}

struct Line {
    indent: usize,
    toks: Vec<(Tok, usize)>,
}

fn is_reserved(name: &str) -> bool {
    KEYWORDS.contains(&name) || BUILTINS.contains(&name) || HARNESS.contains(&name)
}

fn indent_width(s: &[char]) -> usize {
    let mut w = 0;
    for c in s {
        match c {
            ' ' => w += 1,
            '\t' => w = (w / 8 + 1) * 8,
            _ => break,
        }
    }
    w
}

fn scan_string(chars: &[char], start: usize) -> usize {
    let mut i = start;
    while i < chars.len() && chars[i].is_ascii_alphabetic() {
        i += 1;
    }
    let quote = chars[i];
    let triple = i + 2 < chars.len() && chars[i + 1] == quote && chars[i + 2] == quote;
    i += if triple { 3 } else { 1 };
    while i < chars.len() {
        let c = chars[i];
        if c == '\\' {
            i += 2;
            continue;
        }
        if triple {
            if c == quote && i + 2 < chars.len() && chars[i + 1] == quote && chars[i + 2] == quote {
                return i + 3;
            }
        } else if c == quote || c == '\n' {
            return i + 1;
        }
        i += 1;
    }
    chars.len()
}

/// `r"..."`, `b'...'`, `rb"..."` and friends.
fn prefixed_string(chars: &[char], i: usize) -> bool {
    let mut j = i;
    while j < chars.len() && j - i < 2 && matches!(chars[j].to_ascii_lowercase(), 'r' | 'b' | 'u' | 'f') {
        j += 1;
    }
    j > i && j < chars.len() && (chars[j] == '\'' || chars[j] == '"')
}

fn tokenize(code: &str) -> Vec<Line> {
    let chars: Vec<char> = code.chars().collect();
    let mut lines = Vec::new();
    let mut current: Option<Line> = None;
    let mut depth = 0usize;
    let mut i = 0;
    let mut at_line_start = true;
    while i < chars.len() {
        if at_line_start && depth == 0 {
            let end = chars[i..].iter().position(|&c| c == '\n').map_or(chars.len(), |p| i + p);
            let indent = indent_width(&chars[i..end]);
            let first = chars[i..end].iter().position(|c| !c.is_whitespace());
            match first {
                None => {
                    i = end + 1;
                    continue;
                }
                Some(off) if chars[i + off] == '#' => {
                    i = end + 1;
                    continue;
                }
                Some(off) => {
                    if let Some(line) = current.take() {
                        lines.push(line);
                    }
                    current = Some(Line { indent, toks: Vec::new() });
                    i += off;
                    at_line_start = false;
                }
            }
        }
        let c = chars[i];
        if c == '\n' {
            at_line_start = true;
            i += 1;
            continue;
        }
        if c == '\\' && chars.get(i + 1) == Some(&'\n') {
            i += 2;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let line = current.get_or_insert_with(|| Line { indent: 0, toks: Vec::new() });
        if c == '\'' || c == '"' || prefixed_string(&chars, i) {
            let end = scan_string(&chars, i);
            line.toks.push((Tok::Other(chars[i..end].iter().collect()), depth));
            i = end;
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            line.toks.push((Tok::Name(chars[start..i].iter().collect()), depth));
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() {
                let d = chars[i];
                let exp_sign = (d == '+' || d == '-')
                    && matches!(chars[i - 1], 'e' | 'E')
                    && !chars[start..i].iter().any(|c| matches!(c, 'x' | 'X'));
                if d.is_ascii_alphanumeric() || d == '.' || d == '_' || exp_sign {
                    i += 1;
                } else {
                    break;
                }
            }
            line.toks.push((Tok::Other(chars[start..i].iter().collect()), depth));
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
        let op =
            OPERATORS.iter().find(|op| rest.starts_with(**op)).map(|s| s.to_string()).unwrap_or_else(|| c.to_string());
        match c {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth = depth.saturating_sub(1),
            _ => {}
        }
        i += op.chars().count();
        line.toks.push((Tok::Other(op), depth));
    }
    if let Some(line) = current {
        lines.push(line);
    }
    lines
}

pub fn normalize_python(code: &str) -> String {
    let lines = tokenize(code);
    let mut names: Vec<String> = Vec::new();
    let mut stack: Vec<usize> = vec![0];
    let mut out = Vec::with_capacity(lines.len());
    for line in &lines {
        while line.indent < *stack.last().expect("non-empty") && stack.len() > 1 {
            stack.pop();
        }
        if line.indent > *stack.last().expect("non-empty") {
            stack.push(line.indent);
        }
        let level = stack.len() - 1;
        let mut parts = Vec::with_capacity(line.toks.len());
        for (k, (tok, depth)) in line.toks.iter().enumerate() {
            let text = match tok {
                Tok::Other(s) => s.clone(),
                Tok::Name(name) => {
                    let after_dot = k > 0 && line.toks[k - 1].0 == Tok::Other(".".into());
                    let kwarg = *depth > 0 && line.toks.get(k + 1).is_some_and(|(t, _)| *t == Tok::Other("=".into()));
                    if is_reserved(name) || after_dot || kwarg {
                        name.clone()
                    } else {
                        let idx = names.iter().position(|n| n == name).unwrap_or_else(|| {
                            names.push(name.clone());
                            names.len() - 1
                        });
                        format!("v{idx}")
                    }
                }
            };
            parts.push(text);
        }
        out.push(format!("{}{}", "  ".repeat(level), parts.join(" ")));
    }
    out.join("\n")
}
