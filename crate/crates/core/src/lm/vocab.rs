//! Byte-level BPE tokenizer with a small learned merge table.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const FIRST_BYTE: usize = 4;
const FIRST_MERGE: usize = FIRST_BYTE + 256;

/// Token/id bijection: four reserved ids, the 256 bytes, then merged pieces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    merges: Vec<(usize, usize)>,
    pieces: Vec<Vec<u8>>,
    ranks: HashMap<(usize, usize), usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    merges: Vec<(usize, usize)>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Self::from_merges(f.merges)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { merges: v.merges }
    }
}

/// Splits text into pre-token chunks: an optional leading space followed by
/// a run of letters, a run of digits, or a single other symbol; leftover
/// whitespace forms its own chunk.
fn chunks(text: &str) -> Vec<&str> {
    #[derive(PartialEq, Clone, Copy)]
    enum Class {
        Alpha,
        Digit,
        Other,
        Space,
    }
    let class = |c: char| {
        if c.is_alphabetic() || c == '\'' {
            Class::Alpha
        } else if c.is_ascii_digit() {
            Class::Digit
        } else if c.is_whitespace() {
            Class::Space
        } else {
            Class::Other
        }
    };
    let mut out = Vec::new();
    let idx: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < idx.len() {
        let start = idx[i].0;
        let mut j = i;
        // a single leading space glues onto a following word
        if idx[j].1 == ' ' && j + 1 < idx.len() && class(idx[j + 1].1) != Class::Space {
            j += 1;
        }
        let c = class(idx[j].1);
        j += 1;
        if c != Class::Other {
            while j < idx.len() && class(idx[j].1) == c {
                if c == Class::Space
                    && j + 1 < idx.len()
                    && idx[j].1 == ' '
                    && class(idx[j + 1].1) != Class::Space
                {
                    break;
                }
                j += 1;
            }
        }
        let end = if j < idx.len() { idx[j].0 } else { text.len() };
        out.push(&text[start..end]);
        i = j;
    }
    out
}

impl Vocabulary {
    /// Vocabulary with no merges: reserved ids plus raw bytes.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new())
    }

    pub fn from_merges(merges: Vec<(usize, usize)>) -> Self {
        let mut pieces: Vec<Vec<u8>> = vec![
            b"<pad>".to_vec(),
            b"<s>".to_vec(),
            b"</s>".to_vec(),
            b"<unk>".to_vec(),
        ];
        pieces.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let mut p = pieces[a].clone();
            p.extend_from_slice(&pieces[b]);
            pieces.push(p);
            ranks.insert((a, b), rank);
        }
        Self {
            merges,
            pieces,
            ranks,
        }
    }

    /// Learns merges from `texts` until the vocabulary reaches `target_size`
    /// or no pair occurs twice. Ties break toward the smallest pair ids.
    pub fn train<S: AsRef<str>>(texts: &[S], target_size: usize) -> Self {
        let mut words: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for t in texts {
            for c in chunks(t.as_ref()) {
                let sym: Vec<usize> = c.bytes().map(|b| FIRST_BYTE + b as usize).collect();
                *words.entry(sym).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<usize>, usize)> = words.into_iter().collect();
        let mut merges = Vec::new();
        while FIRST_MERGE + merges.len() < target_size {
            let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
            for (w, n) in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0], p[1])).or_default() += n;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&(_, n)| n >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
            let Some((pair, _)) = best else { break };
            let new_id = FIRST_MERGE + merges.len();
            merges.push(pair);
            for (w, _) in &mut words {
                *w = merge_pair(w, pair, new_id);
            }
        }
        Self::from_merges(merges)
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for c in chunks(text) {
            let mut sym: Vec<usize> = c.bytes().map(|b| FIRST_BYTE + b as usize).collect();
            loop {
                let best = sym
                    .windows(2)
                    .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                    .min();
                let Some((rank, pair)) = best else { break };
                sym = merge_pair(&sym, pair, FIRST_MERGE + rank);
            }
            out.extend(sym);
        }
        out
    }

    /// Decodes ids back to text; reserved ids are dropped and invalid UTF-8
    /// is replaced.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if id >= FIRST_BYTE && id < self.pieces.len() {
                bytes.extend_from_slice(&self.pieces[id]);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Raw bytes of one id, reserved names included.
    pub fn piece(&self, id: usize) -> Option<&[u8]> {
        self.pieces.get(id).map(|p| p.as_slice())
    }

    /// Id of the single token spelling `text`, if one exists.
    pub fn token_id(&self, text: &str) -> Option<usize> {
        let ids = self.encode(text);
        (ids.len() == 1).then(|| ids[0])
    }
}

fn merge_pair(sym: &[usize], pair: (usize, usize), new_id: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(sym.len());
    let mut i = 0;
    while i < sym.len() {
        if i + 1 < sym.len() && (sym[i], sym[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(sym[i]);
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking_keeps_leading_space() {
        assert_eq!(chunks("Who wrote it?"), vec!["Who", " wrote", " it", "?"]);
        assert_eq!(chunks("a  b\nc"), vec!["a", " ", " b", "\n", "c"]);
        assert_eq!(chunks("born 1956."), vec!["born", " 1956", "."]);
    }

    #[test]
    fn roundtrip_any_text() {
        let v = Vocabulary::train(&["the cat sat on the mat", "the cat ate"], 300);
        for s in ["the cat", "zebra crossing ünïcode!", "", "  spaced  out  "] {
            assert_eq!(v.decode(&v.encode(s)), s);
        }
    }

    #[test]
    fn learns_frequent_words() {
        let texts = vec!["the author was born in Paris"; 10];
        let v = Vocabulary::train(&texts, 400);
        assert!(v.size() > FIRST_MERGE);
        assert!(v.token_id(" author").is_some());
        assert!(v.encode("the author was born in Paris").len() <= 6);
    }

    #[test]
    fn ids_are_dense_and_reserved_distinct() {
        let v = Vocabulary::train(&["abc abc abc"], 280);
        let specials = [PAD, BOS, EOS, UNK];
        for (i, a) in specials.iter().enumerate() {
            for b in &specials[i + 1..] {
                assert_ne!(a, b);
            }
        }
        for id in 0..v.size() {
            assert!(v.piece(id).is_some());
        }
        assert!(v.piece(v.size()).is_none());
    }

    #[test]
    fn training_is_deterministic_and_serializes() {
        let texts = ["one two three two one", "three three two"];
        let a = Vocabulary::train(&texts, 290);
        let b = Vocabulary::train(&texts, 290);
        assert_eq!(a, b);
        let json = serde_json::to_string(&a).unwrap();
        let c: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(a, c);
    }
}
