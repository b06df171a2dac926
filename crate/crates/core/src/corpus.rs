//! Corpus ingestion: whitespace tokenization, vocabulary construction,
//! id encoding, and contiguous lane batching for truncated BPTT.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";
pub const THINKING_TOKEN: &str = "<T>";

pub const UNK_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const THINKING_ID: u32 = 2;

/// FNV-1a 64-bit hash; used to fingerprint vocabulary files so that
/// checkpoints and encoded streams can be checked for compatibility.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1_0000_0000_01b3);
    }
    h
}

/// Bijection between token strings and dense 0-based ids. Ids 0..=2 are
/// reserved for `<unk>`, `<eos>` and `<T>` in that order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let mut v = Vocabulary { token_to_id: HashMap::new(), id_to_token: Vec::new() };
        for t in [UNK_TOKEN, EOS_TOKEN, THINKING_TOKEN] {
            v.push_token(t.to_string());
        }
        v
    }

    fn push_token(&mut self, token: String) {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Canonical file form: one token per line, line number = id.
    fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// Hash of the canonical file bytes.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_file_string().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_utf8(path)?;
        let mut v = Vocabulary { token_to_id: HashMap::new(), id_to_token: Vec::new() };
        for line in text.lines() {
            let token = line.trim_end_matches('\r');
            if v.token_to_id.contains_key(token) {
                return Err(Error::Config(format!(
                    "vocabulary file {} contains duplicate token {token:?}",
                    path.display()
                )));
            }
            v.push_token(token.to_string());
        }
        let specials_ok = v.len() >= 3
            && v.id_to_token[0] == UNK_TOKEN
            && v.id_to_token[1] == EOS_TOKEN
            && v.id_to_token[2] == THINKING_TOKEN;
        if !specials_ok {
            return Err(Error::Config(format!(
                "vocabulary file {} must reserve lines 0-2 for {UNK_TOKEN}, {EOS_TOKEN}, {THINKING_TOKEN}",
                path.display()
            )));
        }
        Ok(v)
    }
}

/// Whitespace tokens of one corpus split, with `<eos>` markers already
/// appended per line.
#[derive(Debug, Clone)]
pub struct RawCorpus {
    pub tokens: Vec<String>,
    pub source_name: String,
}

/// Encoded corpus split: a flat id sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub source_name: String,
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    String::from_utf8(bytes).map_err(|_| Error::Decode { path: path.to_path_buf() })
}

/// Read a text file, one sentence per line. Tokens are whitespace fields;
/// every line contributes its tokens followed by one `<eos>` marker.
pub fn load_corpus(path: &Path, split_name: &str) -> Result<RawCorpus> {
    let text = read_utf8(path)?;
    let mut tokens = Vec::new();
    for line in text.lines() {
        for tok in line.split_whitespace() {
            tokens.push(tok.to_string());
        }
        tokens.push(EOS_TOKEN.to_string());
    }
    Ok(RawCorpus { tokens, source_name: split_name.to_string() })
}

/// Rank tokens by descending frequency (ties broken lexicographically) and
/// assign ids 3.. after the reserved specials. Tokens under `min_count` or
/// past `max_size` (total vocabulary size, specials included) are left out
/// and will encode as `<unk>`.
pub fn build_vocabulary(
    tokens: &[String],
    max_size: Option<usize>,
    min_count: usize,
) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    if let Some(m) = max_size {
        if m < 3 {
            return Err(Error::Config("max_size must be at least 3 (the reserved specials)".into()));
        }
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    // Specials always hold their reserved slots, even when the source text
    // mentions them literally.
    counts.remove(UNK_TOKEN);
    counts.remove(EOS_TOKEN);
    counts.remove(THINKING_TOKEN);

    let mut ranked: Vec<(&str, usize)> =
        counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if let Some(m) = max_size {
        ranked.truncate(m - 3);
    }

    let mut vocab = Vocabulary::with_specials();
    for (tok, _) in ranked {
        vocab.push_token(tok.to_string());
    }
    Ok(vocab)
}

/// Map tokens to ids; out-of-vocabulary tokens become `<unk>`.
pub fn encode(raw: &RawCorpus, vocab: &Vocabulary) -> TokenStream {
    let ids = raw.tokens.iter().map(|t| vocab.id_of(t).unwrap_or(UNK_ID)).collect();
    TokenStream { ids, source_name: raw.source_name.clone() }
}

/// Inverse of [`encode`] up to the `<unk>` collapse.
pub fn decode(stream: &TokenStream, vocab: &Vocabulary) -> Vec<String> {
    stream
        .ids
        .iter()
        .map(|&id| vocab.token_of(id).unwrap_or(UNK_TOKEN).to_string())
        .collect()
}

pub const STREAM_MAGIC: &[u8; 4] = b"TTID";
pub const STREAM_VERSION: u32 = 1;

/// Write an encoded stream as little-endian binary: magic "TTID", format
/// version, the hash of the vocabulary it was encoded with, an id count,
/// then the ids as u32.
pub fn save_stream(stream: &TokenStream, vocab_hash: u64, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + stream.ids.len() * 4);
    buf.extend_from_slice(STREAM_MAGIC);
    buf.extend_from_slice(&STREAM_VERSION.to_le_bytes());
    buf.extend_from_slice(&vocab_hash.to_le_bytes());
    buf.extend_from_slice(&(stream.ids.len() as u64).to_le_bytes());
    for id in &stream.ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    fs::write(path, buf).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Read a stream written by [`save_stream`]. The split name is taken from
/// the file stem. Returns the stream and the vocabulary hash it carries.
pub fn load_stream(path: &Path) -> Result<(TokenStream, u64)> {
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    if bytes.len() < 24 || &bytes[0..4] != STREAM_MAGIC {
        return Err(Error::StreamMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != STREAM_VERSION {
        return Err(Error::Config(format!(
            "unsupported stream format version {version} in {}",
            path.display()
        )));
    }
    let vocab_hash = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if bytes.len() != 24 + count * 4 {
        return Err(Error::Config(format!(
            "stream file {} is truncated or has trailing bytes",
            path.display()
        )));
    }
    let ids = bytes[24..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let source_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "stream".to_string());
    Ok((TokenStream { ids, source_name }, vocab_hash))
}

/// A stream split into `lanes` contiguous rows of equal length, iterated in
/// windows of at most `window_len` columns for truncated BPTT.
#[derive(Debug, Clone)]
pub struct BatchedCorpus {
    lanes: usize,
    window_len: usize,
    t_trunc: usize,
    /// lane-major grid: `data[lane * t_trunc + t]`
    data: Vec<u32>,
}

/// Ids for one window, stored column-major so each time step is a
/// contiguous run of `lanes` ids.
#[derive(Debug, Clone)]
pub struct IdGrid {
    pub lanes: usize,
    pub steps: usize,
    pub ids: Vec<u32>,
}

impl IdGrid {
    #[inline]
    pub fn step(&self, t: usize) -> &[u32] {
        &self.ids[t * self.lanes..(t + 1) * self.lanes]
    }

    /// Restrict to lanes [start, start + count): lanes are independent
    /// streams, so blocks can be processed separately.
    pub fn lane_block(&self, start: usize, count: usize) -> IdGrid {
        let mut ids = Vec::with_capacity(count * self.steps);
        for t in 0..self.steps {
            ids.extend_from_slice(&self.step(t)[start..start + count]);
        }
        IdGrid { lanes: count, steps: self.steps, ids }
    }
}

impl BatchedCorpus {
    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn t_trunc(&self) -> usize {
        self.t_trunc
    }

    pub fn num_windows(&self) -> usize {
        (self.t_trunc - 1).div_ceil(self.window_len)
    }

    #[inline]
    fn at(&self, lane: usize, t: usize) -> u32 {
        self.data[lane * self.t_trunc + t]
    }

    /// Input/target grids for window `w`. Inputs span columns
    /// [t, t+width) and targets [t+1, t+width+1).
    pub fn window(&self, w: usize) -> (IdGrid, IdGrid) {
        let start = w * self.window_len;
        let width = self.window_len.min(self.t_trunc - 1 - start);
        let mut inputs = Vec::with_capacity(width * self.lanes);
        let mut targets = Vec::with_capacity(width * self.lanes);
        for t in start..start + width {
            for lane in 0..self.lanes {
                inputs.push(self.at(lane, t));
            }
            for lane in 0..self.lanes {
                targets.push(self.at(lane, t + 1));
            }
        }
        (
            IdGrid { lanes: self.lanes, steps: width, ids: inputs },
            IdGrid { lanes: self.lanes, steps: width, ids: targets },
        )
    }

    pub fn windows(&self) -> impl Iterator<Item = (IdGrid, IdGrid)> + '_ {
        (0..self.num_windows()).map(|w| self.window(w))
    }
}

/// Split `stream` into `lanes` contiguous rows of length ⌊|stream|/lanes⌋;
/// trailing remainder ids are dropped.
pub fn make_batches(stream: &TokenStream, lanes: usize, window_len: usize) -> Result<BatchedCorpus> {
    if lanes == 0 || window_len == 0 {
        return Err(Error::Config("lanes and window_len must be positive".into()));
    }
    let min = lanes * 2;
    if stream.ids.len() < min {
        return Err(Error::Config(format!(
            "stream {} has {} ids but batching with {} lanes requires at least {}",
            stream.source_name,
            stream.ids.len(),
            lanes,
            min
        )));
    }
    let t_trunc = stream.ids.len() / lanes;
    let data = stream.ids[..lanes * t_trunc].to_vec();
    Ok(BatchedCorpus { lanes, window_len, t_trunc, data })
}
