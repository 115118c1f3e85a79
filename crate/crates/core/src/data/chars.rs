use std::path::Path;

use crate::error::{Error, Result};

/// Text as byte ids over a compact vocabulary of the bytes it contains.
#[derive(Clone, Debug, PartialEq)]
pub struct CharCorpus {
    vocab: Vec<u8>,
    ids: Vec<usize>,
}

impl CharCorpus {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::contract("empty corpus"));
        }
        let mut seen = [false; 256];
        for &b in bytes {
            seen[b as usize] = true;
        }
        let vocab: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        let mut index = [0usize; 256];
        for (i, &b) in vocab.iter().enumerate() {
            index[b as usize] = i;
        }
        Ok(CharCorpus {
            ids: bytes.iter().map(|&b| index[b as usize]).collect(),
            vocab,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn vocab(&self) -> &[u8] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Splits off the last `fraction` of the text; both parts keep the
    /// full vocabulary.
    pub fn split_tail(&self, fraction: f64) -> Result<(CharCorpus, CharCorpus)> {
        if !(0.0 < fraction && fraction < 1.0) {
            return Err(Error::config("data.valid_fraction", "must lie strictly between 0 and 1"));
        }
        let cut = self.ids.len() - (self.ids.len() as f64 * fraction).round() as usize;
        let part = |ids: &[usize]| CharCorpus {
            vocab: self.vocab.clone(),
            ids: ids.to_vec(),
        };
        Ok((part(&self.ids[..cut]), part(&self.ids[cut..])))
    }

    /// Cuts the text into `batch_size` contiguous streams of `bptt`-step windows.
    pub fn streams(&self, batch_size: usize, bptt: usize) -> Result<CharStreams> {
        CharStreams::new(self, batch_size, bptt)
    }
}

/// One window of `T` steps over `B` parallel streams. `inputs[t][b]` is
/// the byte id at step `t` of stream `b`, `targets[t][b]` the next one.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl SeqBatch {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

/// A corpus laid out as `batch_size` contiguous streams, read in
/// consecutive windows so recurrent state can carry from one window to
/// the next.
#[derive(Clone, Debug, PartialEq)]
pub struct CharStreams {
    vocab: Vec<u8>,
    bptt: usize,
    streams: Vec<Vec<usize>>,
}

impl CharStreams {
    pub fn new(corpus: &CharCorpus, batch_size: usize, bptt: usize) -> Result<Self> {
        if batch_size == 0 || bptt == 0 {
            return Err(Error::config("data", "batch size and bptt length must be positive"));
        }
        if corpus.len() < batch_size * (bptt + 1) {
            return Err(Error::dim(
                "char corpus",
                format!(
                    "{} bytes cannot fill {batch_size} streams of {} bytes",
                    corpus.len(),
                    bptt + 1
                ),
            ));
        }
        let span = (corpus.len() - 1) / batch_size;
        let usable = span / bptt * bptt;
        let streams = (0..batch_size)
            .map(|b| corpus.ids[b * span..b * span + usable + 1].to_vec())
            .collect();
        Ok(CharStreams {
            vocab: corpus.vocab.clone(),
            bptt,
            streams,
        })
    }

    pub fn vocab(&self) -> &[u8] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn bptt(&self) -> usize {
        self.bptt
    }

    pub fn batch_size(&self) -> usize {
        self.streams.len()
    }

    pub fn windows(&self) -> usize {
        (self.streams[0].len() - 1) / self.bptt
    }

    /// Number of predicted characters over one pass.
    pub fn predictions(&self) -> usize {
        self.windows() * self.bptt * self.batch_size()
    }

    pub fn window(&self, k: usize) -> SeqBatch {
        let start = k * self.bptt;
        let mut inputs = Vec::with_capacity(self.bptt);
        let mut targets = Vec::with_capacity(self.bptt);
        for t in start..start + self.bptt {
            inputs.push(self.streams.iter().map(|s| s[t]).collect());
            targets.push(self.streams.iter().map(|s| s[t + 1]).collect());
        }
        SeqBatch { inputs, targets }
    }

    pub fn iter(&self) -> impl Iterator<Item = SeqBatch> + '_ {
        (0..self.windows()).map(|k| self.window(k))
    }
}

/// Reads a text file and lays it out for truncated backpropagation.
pub fn load_char_corpus(path: &Path, bptt_len: usize, batch_size: usize) -> Result<CharStreams> {
    CharCorpus::load(path)?.streams(batch_size, bptt_len)
}
