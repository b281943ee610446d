use super::{SentenceRecord, Vocab, PAD};

/// Position id used at padded slots.
pub const PAD_POSITION: u32 = 0;

/// Signed distance of token `i` to the entity span `[begin, end]`; zero
/// inside the span.
pub fn relative_position(i: usize, begin: usize, end: usize) -> i64 {
    let (i, b, e) = (i as i64, begin as i64, end as i64);
    if i < b {
        i - b
    } else if i <= e {
        0
    } else {
        i - e
    }
}

/// Maps a relative distance to its row of a position table with
/// `2 * clip + 2` rows (row 0 is PAD).
pub(crate) fn position_id(distance: i64, clip: usize) -> u32 {
    let c = clip as i64;
    (distance.clamp(-c, c) + c + 1) as u32
}

/// A tokenized sentence as table indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub word_ids: Vec<u32>,
    pub pos1_ids: Vec<u32>,
    pub pos2_ids: Vec<u32>,
    /// Number of real tokens; the rest is padding.
    pub true_len: usize,
    pub head_span: (usize, usize),
    pub tail_span: (usize, usize),
}

impl EncodedSentence {
    /// Padded length.
    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }

    /// `true` at real-token slots.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| i < self.true_len).collect()
    }

    /// Copy padded (or trimmed) to `len` slots; `len` must be at least `true_len`.
    pub fn padded_to(&self, len: usize) -> EncodedSentence {
        assert!(len >= self.true_len, "cannot pad below the true length");
        let fit = |ids: &[u32], fill: u32| -> Vec<u32> {
            let mut v: Vec<u32> = ids[..self.true_len].to_vec();
            v.resize(len, fill);
            v
        };
        EncodedSentence {
            word_ids: fit(&self.word_ids, PAD as u32),
            pos1_ids: fit(&self.pos1_ids, PAD_POSITION),
            pos2_ids: fit(&self.pos2_ids, PAD_POSITION),
            true_len: self.true_len,
            head_span: self.head_span,
            tail_span: self.tail_span,
        }
    }

    pub fn trimmed(&self) -> EncodedSentence {
        self.padded_to(self.true_len)
    }
}

/// Indexes a record's tokens and position features, truncating at the tail
/// and padding to `max_len`. Returns `None` when an entity span does not
/// survive truncation.
pub fn encode_sentence(record: &SentenceRecord, vocab: &Vocab, max_len: usize, clip: usize) -> Option<EncodedSentence> {
    let (h, t) = (record.head_span, record.tail_span);
    if h.1 >= max_len || t.1 >= max_len {
        return None;
    }
    let true_len = record.tokens.len().min(max_len);
    if true_len == 0 {
        return None;
    }
    let mut enc = EncodedSentence {
        word_ids: Vec::with_capacity(max_len),
        pos1_ids: Vec::with_capacity(max_len),
        pos2_ids: Vec::with_capacity(max_len),
        true_len,
        head_span: h,
        tail_span: t,
    };
    for (i, tok) in record.tokens[..true_len].iter().enumerate() {
        enc.word_ids.push(vocab.id(tok) as u32);
        enc.pos1_ids.push(position_id(relative_position(i, h.0, h.1), clip));
        enc.pos2_ids.push(position_id(relative_position(i, t.0, t.1), clip));
    }
    Some(enc.padded_to(max_len))
}
