//! Tokenization shared by the embedder, the reranker and the mock backend.
//!
//! Text is lowercased and split on every non-alphanumeric character.
//! `{name}` placeholders are recognised before splitting and reported as
//! slots rather than words.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Token {
    Word(String),
    Slot(String),
}

pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c == '{' {
            if let Some(len) = placeholder_len(&text[i..]) {
                flush(&mut word, &mut out);
                out.push(Token::Slot(String::from(&text[i + 1..i + len - 1])));
                // skip the rest of the placeholder
                while let Some(&(j, _)) = chars.peek() {
                    if j >= i + len {
                        break;
                    }
                    chars.next();
                }
                continue;
            }
        }
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut out);
        }
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<Token>) {
    if !word.is_empty() {
        out.push(Token::Word(core::mem::take(word)));
    }
}

/// Byte length of a `{ident}` placeholder at the start of `s`, braces included.
fn placeholder_len(s: &str) -> Option<usize> {
    let rest = s.strip_prefix('{')?;
    let end = rest.find('}')?;
    let name = &rest[..end];
    if !name.is_empty() && name.chars().all(|c| c.is_alphanumeric() || c == '_') {
        Some(end + 2)
    } else {
        None
    }
}

/// Words of `text`, placeholders dropped, in order of appearance.
pub fn words(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter_map(|t| match t {
            Token::Word(w) => Some(w),
            Token::Slot(_) => None,
        })
        .collect()
}

/// Placeholder names of `text`, in order of appearance (duplicates kept).
pub fn placeholders(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter_map(|t| match t {
            Token::Slot(s) => Some(s),
            Token::Word(_) => None,
        })
        .collect()
}

pub fn word_set(text: &str) -> BTreeSet<String> {
    words(text).into_iter().collect()
}

pub fn is_numeric(word: &str) -> bool {
    !word.is_empty() && word.bytes().all(|b| b.is_ascii_digit())
}
