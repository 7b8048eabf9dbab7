//! One shared token id space partitioned into text / image-codebook /
//! state-bin / action-bin / special segments, plus the per-dimension uniform
//! binning used for continuous states and actions and the lossless grid
//! tokenizer (one token per cell, raster order).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{self, Grid};
use crate::error::{Error, Result};

/// Prompt template prepended to every policy-format sample.
pub const VLA_PROMPT: &str = "what action should the robot take to";
/// Fixed text prefix shared by every world-model-format sample.
pub const WM_PREFIX_TEXT: &str =
    "generate the next frame based on the current image and the action .";

pub fn vla_prompt(instruction: &str) -> String {
    format!("{VLA_PROMPT} {instruction} ?")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Text,
    Image,
    State,
    Action,
    Special,
}

impl std::fmt::Display for Segment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Segment::Text => "text",
            Segment::Image => "image",
            Segment::State => "state",
            Segment::Action => "action",
            Segment::Special => "special",
        };
        f.write_str(s)
    }
}

/// Uniform per-dimension binning over `[low, high]`; values outside the range
/// clamp to the edge bins, reconstruction returns bin centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub n_bins: usize,
}

impl BinSpec {
    pub fn new(low: Vec<f64>, high: Vec<f64>, n_bins: usize) -> Result<Self> {
        if low.len() != high.len() {
            return Err(Error::Config("bin spec dims mismatch".into()));
        }
        if n_bins < 2 {
            return Err(Error::Config(format!("n_bins {n_bins} < 2")));
        }
        for (l, h) in low.iter().zip(&high) {
            if !(l < h) {
                return Err(Error::Config(format!("bin range [{l}, {h}] is empty")));
            }
        }
        Ok(Self { low, high, n_bins })
    }

    pub fn dims(&self) -> usize {
        self.low.len()
    }

    pub fn width(&self, dim: usize) -> f64 {
        (self.high[dim] - self.low[dim]) / self.n_bins as f64
    }

    /// `clamp(floor((v - low) / width), 0, n_bins - 1)`.
    pub fn tokenize_scalar(&self, v: f64, dim: usize) -> Result<usize> {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue(v));
        }
        let raw = ((v - self.low[dim]) / self.width(dim)).floor();
        Ok((raw.max(0.0) as usize).min(self.n_bins - 1))
    }

    /// Bin center: `low + (bin + 0.5) * width`.
    pub fn detokenize_bin(&self, bin: usize, dim: usize) -> Result<f64> {
        if bin >= self.n_bins {
            return Err(Error::BinOutOfRange {
                bin,
                n_bins: self.n_bins,
            });
        }
        Ok(self.low[dim] + (bin as f64 + 0.5) * self.width(dim))
    }
}

/// Word-level vocabulary over the toy task grammar plus an unknown token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextVocab {
    words: Vec<String>,
}

impl TextVocab {
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut words: Vec<String> = words.into_iter().collect();
        words.sort();
        words.dedup();
        Self { words }
    }

    /// All words appearing in the prompt templates and task grammar.
    pub fn toy_grammar() -> Self {
        let mut all = String::new();
        all.push_str(VLA_PROMPT);
        all.push(' ');
        all.push_str(WM_PREFIX_TEXT);
        for color in env::COLOR_NAMES {
            all.push(' ');
            all.push_str(&format!("place the {color} block in the circle ?"));
        }
        Self::from_words(all.split_whitespace().map(|w| w.to_lowercase()))
    }

    /// Known words plus the trailing unknown slot.
    pub fn size(&self) -> usize {
        self.words.len() + 1
    }

    pub fn unknown_id(&self) -> usize {
        self.words.len()
    }

    pub fn local_id(&self, word: &str) -> usize {
        self.words
            .binary_search_by(|w| w.as_str().cmp(word))
            .unwrap_or(self.unknown_id())
    }

    pub fn word(&self, local: usize) -> &str {
        self.words.get(local).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.to_lowercase()
            .split_whitespace()
            .map(|w| self.local_id(w))
            .collect()
    }
}

/// Special tokens, in segment order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialToken {
    Bos = 0,
    Pad = 1,
    FrameBegin = 2,
    FrameEnd = 3,
    StateBegin = 4,
    StateEnd = 5,
    ActionBegin = 6,
    ActionEnd = 7,
}

pub const N_SPECIAL: usize = 8;

/// Partition of one contiguous id space into the five segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub text_size: usize,
    pub image_size: usize,
    pub state_dims: usize,
    pub state_bins: usize,
    pub action_dims: usize,
    pub action_bins: usize,
}

impl VocabLayout {
    pub fn text_offset(&self) -> u32 {
        0
    }

    pub fn image_offset(&self) -> u32 {
        self.text_size as u32
    }

    pub fn state_offset(&self) -> u32 {
        self.image_offset() + self.image_size as u32
    }

    pub fn action_offset(&self) -> u32 {
        self.state_offset() + (self.state_dims * self.state_bins) as u32
    }

    pub fn special_offset(&self) -> u32 {
        self.action_offset() + (self.action_dims * self.action_bins) as u32
    }

    pub fn total_size(&self) -> usize {
        self.special_offset() as usize + N_SPECIAL
    }

    /// Total and single-valued over `[0, total_size)`.
    pub fn classify(&self, token: u32) -> Result<Segment> {
        if token < self.image_offset() {
            Ok(Segment::Text)
        } else if token < self.state_offset() {
            Ok(Segment::Image)
        } else if token < self.action_offset() {
            Ok(Segment::State)
        } else if token < self.special_offset() {
            Ok(Segment::Action)
        } else if (token as usize) < self.total_size() {
            Ok(Segment::Special)
        } else {
            Err(Error::TokenOutOfVocab(token, self.total_size()))
        }
    }

    pub fn special(&self, t: SpecialToken) -> u32 {
        self.special_offset() + t as u32
    }

    pub fn text_token(&self, local: usize) -> u32 {
        debug_assert!(local < self.text_size);
        local as u32
    }

    pub fn image_token(&self, category: u8) -> u32 {
        assert!((category as usize) < self.image_size, "cell category {category} outside codebook");
        self.image_offset() + category as u32
    }

    pub fn image_category(&self, token: u32) -> Result<u8> {
        if self.classify(token)? != Segment::Image {
            return Err(Error::TokenOutsideSegment {
                token,
                segment: "image",
            });
        }
        Ok((token - self.image_offset()) as u8)
    }

    pub fn state_token(&self, dim: usize, bin: usize) -> u32 {
        debug_assert!(dim < self.state_dims && bin < self.state_bins);
        self.state_offset() + (dim * self.state_bins + bin) as u32
    }

    pub fn action_token(&self, dim: usize, bin: usize) -> u32 {
        debug_assert!(dim < self.action_dims && bin < self.action_bins);
        self.action_offset() + (dim * self.action_bins + bin) as u32
    }

    /// (dim, bin) of an action-segment token.
    pub fn action_dim_bin(&self, token: u32) -> Result<(usize, usize)> {
        if self.classify(token)? != Segment::Action {
            return Err(Error::TokenOutsideSegment {
                token,
                segment: "action",
            });
        }
        let local = (token - self.action_offset()) as usize;
        Ok((local / self.action_bins, local % self.action_bins))
    }

    pub fn state_dim_bin(&self, token: u32) -> Result<(usize, usize)> {
        if self.classify(token)? != Segment::State {
            return Err(Error::TokenOutsideSegment {
                token,
                segment: "state",
            });
        }
        let local = (token - self.state_offset()) as usize;
        Ok((local / self.state_bins, local % self.state_bins))
    }

    /// Legal id range for the `dim`-th action token, used by constrained
    /// decoding.
    pub fn action_dim_range(&self, dim: usize) -> std::ops::Range<u32> {
        let start = self.action_offset() + (dim * self.action_bins) as u32;
        start..start + self.action_bins as u32
    }

    pub fn image_range(&self) -> std::ops::Range<u32> {
        self.image_offset()..self.image_offset() + self.image_size as u32
    }
}

/// Everything needed to move between raw episode data and token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizers {
    pub layout: VocabLayout,
    pub text: TextVocab,
    pub action_bins: BinSpec,
    pub state_bins: BinSpec,
}

impl Tokenizers {
    pub fn new(text: TextVocab, image_size: usize, action_bins: BinSpec, state_bins: BinSpec) -> Self {
        let layout = VocabLayout {
            text_size: text.size(),
            image_size,
            state_dims: state_bins.dims(),
            state_bins: state_bins.n_bins,
            action_dims: action_bins.dims(),
            action_bins: action_bins.n_bins,
        };
        Self {
            layout,
            text,
            action_bins,
            state_bins,
        }
    }

    /// Fingerprint of the full vocabulary configuration, embedded in dataset
    /// and checkpoint headers.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("serializable tokenizers"));
        crate::env::hex_string(&h.finalize()[..8])
    }

    /// Lowercased whitespace split; unknown words are absorbed by the
    /// unknown token.
    pub fn tokenize_text(&self, text: &str) -> Vec<u32> {
        self.text
            .encode(text)
            .into_iter()
            .map(|local| self.layout.text_token(local))
            .collect()
    }

    /// One token per cell in raster order; exact inverse of
    /// [`Tokenizers::detokenize_frame`].
    pub fn tokenize_frame(&self, grid: &Grid) -> Vec<u32> {
        grid.cells
            .iter()
            .map(|&c| self.layout.image_token(c))
            .collect()
    }

    pub fn detokenize_frame(&self, tokens: &[u32], rows: usize, cols: usize) -> Result<Grid> {
        if tokens.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "frame tokens {} for {rows}x{cols} grid",
                tokens.len()
            )));
        }
        let cells = tokens
            .iter()
            .map(|&t| self.layout.image_category(t))
            .collect::<Result<Vec<u8>>>()?;
        Ok(Grid::new(rows, cols, cells))
    }

    pub fn tokenize_action(&self, a: &[f64; 3]) -> Result<Vec<u32>> {
        (0..self.action_bins.dims())
            .map(|d| {
                let bin = self.action_bins.tokenize_scalar(a[d], d)?;
                Ok(self.layout.action_token(d, bin))
            })
            .collect()
    }

    /// Bin-center reconstruction of an action token triple.
    pub fn detokenize_action(&self, tokens: &[u32]) -> Result<[f64; 3]> {
        let mut out = [0.0; 3];
        if tokens.len() != self.action_bins.dims() {
            return Err(Error::ShapeMismatch(format!(
                "action tokens {} for {} dims",
                tokens.len(),
                self.action_bins.dims()
            )));
        }
        for (i, &t) in tokens.iter().enumerate() {
            let (dim, bin) = self.layout.action_dim_bin(t)?;
            if dim != i {
                return Err(Error::TokenOutsideSegment {
                    token: t,
                    segment: "action",
                });
            }
            out[i] = self.action_bins.detokenize_bin(bin, dim)?;
        }
        Ok(out)
    }

    pub fn tokenize_state(&self, s: &[f64; 3]) -> Result<Vec<u32>> {
        (0..self.state_bins.dims())
            .map(|d| {
                let bin = self.state_bins.tokenize_scalar(s[d], d)?;
                Ok(self.layout.state_token(d, bin))
            })
            .collect()
    }
}
