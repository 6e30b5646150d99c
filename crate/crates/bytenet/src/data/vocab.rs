//! Character vocabulary with reserved padding and end-of-sequence ids.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved id for padding. Never produced by encoding text.
pub const PAD_ID: u32 = 0;
/// Reserved id for end of sequence. Also fed as the first decoder input
/// (start marker), so no separate begin-of-sequence id exists.
pub const EOS_ID: u32 = 1;

const RESERVED: u32 = 2;

/// Bidirectional character <-> id map. Ids `0` and `1` are reserved for PAD
/// and EOS; characters get ids from `2` upward in codepoint order, so a
/// vocabulary built from the same character set is always identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    ids: BTreeMap<char, u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    format: u32,
    chars: Vec<char>,
}

impl Vocabulary {
    /// Builds from the set of characters in `text`, sorted by codepoint.
    pub fn from_text(text: &str) -> Self {
        let mut chars: Vec<char> = {
            let mut set: Vec<char> = text.chars().collect();
            set.sort_unstable();
            set.dedup();
            set
        };
        chars.shrink_to_fit();
        let ids = chars.iter().enumerate().map(|(i, &c)| (c, i as u32 + RESERVED)).collect();
        Vocabulary { chars, ids }
    }

    /// Builds from corpus files; byte content must be valid UTF-8.
    pub fn from_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut all = String::new();
        for p in paths {
            all.push_str(&read_utf8(p.as_ref())?);
        }
        Ok(Self::from_text(&all))
    }

    /// Total id count including the two reserved ids.
    pub fn size(&self) -> usize {
        self.chars.len() + RESERVED as usize
    }

    pub fn id_of(&self, c: char) -> Result<u32> {
        self.ids
            .get(&c)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("character {:?} not in vocabulary", c)))
    }

    pub fn char_of(&self, id: u32) -> Result<char> {
        if id < RESERVED {
            return Err(Error::Vocab(format!("id {} is reserved (PAD/EOS)", id)));
        }
        self.chars
            .get((id - RESERVED) as usize)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("id {} out of range for vocabulary of {}", id, self.size())))
    }

    pub fn contains(&self, c: char) -> bool {
        self.ids.contains_key(&c)
    }

    /// Characters in id order (id 2 first).
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars().map(|c| self.id_of(c)).collect()
    }

    /// Decodes ids back to text. PAD and EOS are rejected: callers strip
    /// framing before decoding.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        ids.iter().map(|&id| self.char_of(id)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile { format: 1, chars: self.chars.clone() };
        let json = serde_json::to_string_pretty(&file).expect("vocab serialization cannot fail");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile =
            serde_json::from_str(&raw).map_err(|e| Error::parse(path, e.to_string()))?;
        if file.format != 1 {
            return Err(Error::parse(path, format!("unsupported vocabulary format {}", file.format)));
        }
        let mut sorted = file.chars.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != file.chars {
            return Err(Error::parse(path, "vocabulary characters must be sorted and unique"));
        }
        let ids =
            file.chars.iter().enumerate().map(|(i, &c)| (c, i as u32 + RESERVED)).collect();
        Ok(Vocabulary { chars: file.chars, ids })
    }
}

/// Reads a file as UTF-8, reporting the byte offset of the first invalid
/// sequence on failure.
pub fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::CorpusEncoding {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })
}
