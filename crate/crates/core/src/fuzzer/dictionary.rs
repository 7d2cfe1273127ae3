//! Dictionary files: one token per line as lowercase hex, `#` starts a
//! comment line, blank lines are skipped.

use std::fmt::Write as _;
use std::path::Path;

use super::{FuzzError, Token, TokenOrigin};

pub fn parse_dictionary(text: &str, origin: TokenOrigin) -> Result<Vec<Token>, FuzzError> {
    let mut tokens: Vec<Token> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bytes = decode_hex(line).ok_or_else(|| FuzzError::Dictionary {
            line: lineno + 1,
            reason: format!("invalid hex {line:?}"),
        })?;
        let token = Token::new(bytes, origin).map_err(|reason| FuzzError::Dictionary {
            line: lineno + 1,
            reason,
        })?;
        if !tokens.iter().any(|t| t.bytes() == token.bytes()) {
            tokens.push(token);
        }
    }
    Ok(tokens)
}

pub fn format_dictionary(tokens: &[Token]) -> String {
    let mut out = String::new();
    for t in tokens {
        for b in t.bytes() {
            let _ = write!(out, "{b:02x}");
        }
        out.push('\n');
    }
    out
}

pub fn read_dictionary(path: &Path, origin: TokenOrigin) -> Result<Vec<Token>, FuzzError> {
    let text = std::fs::read_to_string(path)?;
    parse_dictionary(&text, origin)
}

pub fn write_dictionary(path: &Path, tokens: &[Token]) -> Result<(), FuzzError> {
    std::fs::write(path, format_dictionary(tokens))?;
    Ok(())
}

fn decode_hex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}
