/// Lowercases, splits on whitespace and peels leading/trailing ASCII
/// punctuation off each word as single-character tokens.
///
/// An empty result means the line carries no tokens and should be skipped.
pub fn tokenize(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in raw.split_whitespace() {
        let word = word.to_lowercase();
        let start = word
            .char_indices()
            .find(|(_, c)| !c.is_ascii_punctuation())
            .map_or(word.len(), |(i, _)| i);
        out.extend(word[..start].chars().map(String::from));
        if start == word.len() {
            continue;
        }
        let end = word
            .char_indices()
            .rev()
            .find(|(_, c)| !c.is_ascii_punctuation())
            .map(|(i, c)| i + c.len_utf8())
            .expect("non-punctuation char exists");
        out.push(word[start..end].to_string());
        out.extend(word[end..].chars().map(String::from));
    }
    out
}

/// Decodes bytes as UTF-8, dropping invalid sequences. Returns the text and
/// whether anything was dropped.
pub fn decode_lossy(bytes: &[u8]) -> (String, bool) {
    let mut text = String::with_capacity(bytes.len());
    let mut dropped = false;
    for chunk in bytes.utf8_chunks() {
        text.push_str(chunk.valid());
        dropped |= !chunk.invalid().is_empty();
    }
    (text, dropped)
}
