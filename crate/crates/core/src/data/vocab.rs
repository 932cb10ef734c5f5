use std::collections::HashMap;

/// Character vocabulary with deterministic ids: characters are numbered by
/// first appearance, and id 0 is reserved for unknown characters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    /// Build from a corpus of texts, in iteration order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut v = Self::default();
        for text in texts {
            v.extend(text);
        }
        v
    }

    /// Add any unseen characters of `text`, preserving first-appearance order.
    pub fn extend(&mut self, text: &str) {
        for ch in text.chars() {
            if !self.index.contains_key(&ch) {
                let id = self.chars.len() + 1;
                self.index.insert(ch, id);
                self.chars.push(ch);
            }
        }
    }

    /// Total id count, including the reserved unknown id.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn id_of(&self, ch: char) -> usize {
        self.index.get(&ch).copied().unwrap_or(0)
    }

    /// Character ids of `text`; unseen characters map to 0.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id_of(c)).collect()
    }

    /// The known characters in id order (id = position + 1).
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Rebuild from a stored character list.
    pub fn from_chars(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + 1))
            .collect();
        Self { chars, index }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_follow_first_appearance() {
        let v = Vocabulary::build(["ab", "ba"]);
        assert_eq!(v.size(), 3);
        assert_eq!(v.id_of('a'), 1);
        assert_eq!(v.id_of('b'), 2);
    }

    #[test]
    fn empty_corpus_has_only_unknown() {
        let v = Vocabulary::build([]);
        assert_eq!(v.size(), 1);
    }

    #[test]
    fn unseen_characters_map_to_zero() {
        let v = Vocabulary::build(["abc"]);
        assert_eq!(v.encode("axc"), vec![1, 0, 3]);
    }

    #[test]
    fn round_trips_through_char_list() {
        let v = Vocabulary::build(["hello world"]);
        let rebuilt = Vocabulary::from_chars(v.chars().to_vec());
        assert_eq!(v, rebuilt);
    }
}
