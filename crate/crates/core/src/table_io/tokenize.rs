//! Lowercasing word/punctuation tokenizer.

pub const PAD_TOKEN: &str = "[pad]";
pub const UNK_TOKEN: &str = "[unk]";

/// Splits `text` into lowercase tokens: maximal alphanumeric runs, and every
/// other non-space character on its own. Whitespace-delimited chunks that
/// spell a reserved token (`[pad]`, `[unk]`, any case) are kept whole so
/// detokenized text round-trips.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        if lower == PAD_TOKEN || lower == UNK_TOKEN {
            out.push(lower);
            continue;
        }
        let mut word = String::new();
        for ch in lower.chars() {
            if ch.is_alphanumeric() {
                word.push(ch);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

/// First `max` tokens of `text`, re-joined with single spaces.
pub fn truncate_text(text: &str, max: usize) -> String {
    let toks = tokenize(text);
    detokenize(&toks[..toks.len().min(max)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_on_punctuation_and_lowercases() {
        assert_eq!(tokenize("New York, NY"), ["new", "york", ",", "ny"]);
        assert_eq!(tokenize("2021-03-04"), ["2021", "-", "03", "-", "04"]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
        assert_eq!(tokenize("a [UNK] b"), ["a", "[unk]", "b"]);
    }

    #[test]
    fn truncation_keeps_leading_tokens() {
        assert_eq!(truncate_text("a b c d", 2), "a b");
        assert_eq!(truncate_text("x-y", 64), "x - y");
    }

    proptest! {
        #[test]
        fn detokenize_round_trips(text in "[a-zA-Z0-9 ,.\\-]{0,40}") {
            let toks = tokenize(&text);
            prop_assert_eq!(tokenize(&detokenize(&toks)), toks);
        }
    }
}
