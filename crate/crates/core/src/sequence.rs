//! Tokenized training samples in the two data formats.
//!
//! Policy-format (`vla`) samples: `[BOS] {text} {state} {frame pair}xM
//! {action block}xK`, with the discrete loss mask on the 3K action tokens and
//! the raw continuous actions carried alongside untokenized.
//!
//! World-model-format (`world_model`) samples: `[BOS] {fixed prefix}
//! {frame pair} ({action block} {frame pair})xN`, with the loss mask on the
//! predicted frame cells.
//!
//! Every modality block is wrapped in explicit begin/end delimiters so a
//! [`SampleLayout`] is recoverable from the tokens alone.

use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::env::{Observation, ProprioState};
use crate::error::{Error, Result};
use crate::tokenizer::{vla_prompt, SpecialToken, Tokenizers, WM_PREFIX_TEXT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Text,
    State,
    ImageFront,
    ImageWrist,
    Action,
    Special,
}

/// One typed span of a sample. `step` is the action index `k` within the
/// chunk for action blocks and their delimiters, the history index for policy
/// frames, and the pair index for world-model frames (0 = input pair).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
    pub step: Option<usize>,
}

impl SegmentSpan {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Vla,
    WorldModel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLayout {
    pub kind: SampleKind,
    pub spans: Vec<SegmentSpan>,
    pub total_len: usize,
}

impl SampleLayout {
    /// Action-block membership of a position: action tokens and the
    /// delimiters that wrap them share their block's index.
    pub fn action_block_of(&self, pos: usize) -> Option<usize> {
        for span in &self.spans {
            if pos >= span.start && pos < span.end() {
                return match span.kind {
                    SegmentKind::Action => span.step,
                    SegmentKind::Special => span.step,
                    _ => None,
                };
            }
        }
        None
    }

    /// Start of the first action block (or the total length when there is
    /// none): everything the continuous head may attend to lies before this.
    pub fn prefix_end(&self) -> usize {
        self.spans
            .iter()
            .filter(|s| {
                s.kind == SegmentKind::Action
                    || (s.kind == SegmentKind::Special && s.step.is_some())
            })
            .map(|s| s.start)
            .min()
            .unwrap_or(self.total_len)
    }

    /// Spans must tile `[0, total_len)` with no gaps or overlaps.
    pub fn check_tiling(&self) -> Result<()> {
        let mut pos = 0;
        for span in &self.spans {
            if span.start != pos || span.len == 0 {
                return Err(Error::MalformedTokens {
                    position: span.start,
                    reason: format!("span does not tile (expected start {pos})"),
                });
            }
            pos = span.end();
        }
        if pos != self.total_len {
            return Err(Error::MalformedTokens {
                position: pos,
                reason: format!("spans cover {pos} of {} positions", self.total_len),
            });
        }
        Ok(())
    }

    pub fn n_action_blocks(&self) -> usize {
        self.spans
            .iter()
            .filter(|s| s.kind == SegmentKind::Action)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    /// M: historical frame pairs per policy sample.
    pub m_history: usize,
    /// K: action chunk size.
    pub k_chunk: usize,
    /// N: world-model prediction rounds.
    pub n_rounds: usize,
    pub use_wrist: bool,
    pub use_state: bool,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            m_history: 2,
            k_chunk: 5,
            n_rounds: 1,
            use_wrist: true,
            use_state: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub tokens: Vec<u32>,
    pub layout: SampleLayout,
    /// True at positions whose token is a prediction target.
    pub loss_mask: Vec<bool>,
    /// Raw (untokenized) K x 3 action targets; policy samples only.
    pub action_targets: Option<Vec<[f64; 3]>>,
    /// `next_targets[i] = tokens[i + 1]`.
    pub next_targets: Vec<u32>,
}

/// Incrementally assembles tokens and spans, keeping the two in lockstep.
pub struct Assembler<'a> {
    toks: &'a Tokenizers,
    pub tokens: Vec<u32>,
    pub spans: Vec<SegmentSpan>,
    pub loss_mask: Vec<bool>,
}

impl<'a> Assembler<'a> {
    pub fn new(toks: &'a Tokenizers) -> Self {
        Self {
            toks,
            tokens: Vec::new(),
            spans: Vec::new(),
            loss_mask: Vec::new(),
        }
    }

    fn push_special(&mut self, t: SpecialToken, step: Option<usize>) {
        let start = self.tokens.len();
        self.tokens.push(self.toks.layout.special(t));
        self.loss_mask.push(false);
        self.spans.push(SegmentSpan {
            kind: SegmentKind::Special,
            start,
            len: 1,
            step,
        });
    }

    fn push_block(&mut self, kind: SegmentKind, tokens: Vec<u32>, step: Option<usize>, loss: bool) {
        let start = self.tokens.len();
        let len = tokens.len();
        self.tokens.extend(tokens);
        self.loss_mask.extend(std::iter::repeat(loss).take(len));
        self.spans.push(SegmentSpan { kind, start, len, step });
    }

    pub fn bos(&mut self) {
        self.push_special(SpecialToken::Bos, None);
    }

    pub fn text(&mut self, text: &str) {
        let ids = self.toks.tokenize_text(text);
        self.push_block(SegmentKind::Text, ids, None, false);
    }

    pub fn state(&mut self, proprio: &ProprioState) -> Result<()> {
        let ids = self.toks.tokenize_state(&proprio.as_array())?;
        self.push_special(SpecialToken::StateBegin, None);
        self.push_block(SegmentKind::State, ids, None, false);
        self.push_special(SpecialToken::StateEnd, None);
        Ok(())
    }

    pub fn frame_pair(&mut self, obs: &Observation, step: usize, use_wrist: bool, loss: bool) {
        self.push_special(SpecialToken::FrameBegin, None);
        let front = self.toks.tokenize_frame(&obs.front);
        self.push_block(SegmentKind::ImageFront, front, Some(step), loss);
        self.push_special(SpecialToken::FrameEnd, None);
        if use_wrist {
            self.push_special(SpecialToken::FrameBegin, None);
            let wrist = self.toks.tokenize_frame(&obs.wrist);
            self.push_block(SegmentKind::ImageWrist, wrist, Some(step), loss);
            self.push_special(SpecialToken::FrameEnd, None);
        }
    }

    pub fn action_block(&mut self, action: &[f64; 3], step: usize, loss: bool) -> Result<()> {
        let ids = self.toks.tokenize_action(action)?;
        self.push_special(SpecialToken::ActionBegin, Some(step));
        self.push_block(SegmentKind::Action, ids, Some(step), loss);
        self.push_special(SpecialToken::ActionEnd, Some(step));
        Ok(())
    }

    pub fn finish(self, kind: SampleKind) -> (Vec<u32>, SampleLayout, Vec<bool>) {
        let total_len = self.tokens.len();
        (
            self.tokens,
            SampleLayout {
                kind,
                spans: self.spans,
                total_len,
            },
            self.loss_mask,
        )
    }
}

/// Frame history for time `t`: observations at `t-M+1..=t`, clamped at the
/// episode start (the earliest frame repeats).
fn history_indices(t: usize, m: usize) -> Vec<usize> {
    (0..m)
        .map(|h| t.saturating_sub(m - 1 - h))
        .collect()
}

/// Policy-format sample starting at step `t`: the chunk covers actions
/// `t..t+K`.
pub fn build_vla_sample(
    toks: &Tokenizers,
    episode: &Episode,
    t: usize,
    cfg: &LayoutConfig,
) -> Result<TrainingSample> {
    assert!(cfg.m_history >= 1 && cfg.k_chunk >= 1);
    if t + cfg.k_chunk > episode.len() {
        return Err(Error::TimeOutOfRange {
            t,
            len: episode.len(),
            reason: "t + K exceeds episode length",
        });
    }
    let mut a = Assembler::new(toks);
    a.bos();
    a.text(&vla_prompt(&episode.task.instruction));
    if cfg.use_state {
        a.state(&episode.steps[t].proprio)?;
    }
    for (h, src) in history_indices(t, cfg.m_history).into_iter().enumerate() {
        a.frame_pair(&episode.steps[src].obs, h, cfg.use_wrist, false);
    }
    let mut targets = Vec::with_capacity(cfg.k_chunk);
    for k in 0..cfg.k_chunk {
        let action = episode.steps[t + k].action;
        a.action_block(&action.as_array(), k, true)?;
        targets.push(action.as_array());
    }
    let (tokens, layout, loss_mask) = a.finish(SampleKind::Vla);
    let next_targets = tokens[1..].to_vec();
    Ok(TrainingSample {
        tokens,
        layout,
        loss_mask,
        action_targets: Some(targets),
        next_targets,
    })
}

/// World-model-format sample: input pair at `t`, then N rounds of
/// (action, predicted pair). Round `i`'s input frames are the previous
/// round's predicted frames, so the chained token layout carries loss on
/// every pair after the first.
pub fn build_wm_sample(
    toks: &Tokenizers,
    episode: &Episode,
    t: usize,
    cfg: &LayoutConfig,
) -> Result<TrainingSample> {
    assert!(cfg.n_rounds >= 1);
    if t + cfg.n_rounds > episode.len().saturating_sub(1) {
        return Err(Error::TimeOutOfRange {
            t,
            len: episode.len(),
            reason: "t + N exceeds episode length - 1",
        });
    }
    let mut a = Assembler::new(toks);
    a.bos();
    a.text(WM_PREFIX_TEXT);
    a.frame_pair(&episode.steps[t].obs, 0, cfg.use_wrist, false);
    for i in 0..cfg.n_rounds {
        a.action_block(&episode.steps[t + i].action.as_array(), i, false)?;
        a.frame_pair(&episode.steps[t + i + 1].obs, i + 1, cfg.use_wrist, true);
    }
    let (tokens, layout, loss_mask) = a.finish(SampleKind::WorldModel);
    let next_targets = tokens[1..].to_vec();
    Ok(TrainingSample {
        tokens,
        layout,
        loss_mask,
        action_targets: None,
        next_targets,
    })
}

/// Policy prefix for decoding: everything up to (and excluding) the first
/// action block. `frames` must hold exactly M observations, oldest first.
pub fn build_vla_prefix(
    toks: &Tokenizers,
    instruction: &str,
    proprio: &ProprioState,
    frames: &[&Observation],
    cfg: &LayoutConfig,
) -> Result<(Vec<u32>, Vec<SegmentSpan>)> {
    assert_eq!(frames.len(), cfg.m_history, "prefix needs M frames");
    let mut a = Assembler::new(toks);
    a.bos();
    a.text(&vla_prompt(instruction));
    if cfg.use_state {
        a.state(proprio)?;
    }
    for (h, obs) in frames.iter().enumerate() {
        a.frame_pair(obs, h, cfg.use_wrist, false);
    }
    Ok((a.tokens, a.spans))
}

/// World-model prefix for rollout: fixed text plus the input frame pair.
pub fn build_wm_prefix(
    toks: &Tokenizers,
    obs: &Observation,
    cfg: &LayoutConfig,
) -> Result<(Vec<u32>, Vec<SegmentSpan>)> {
    let mut a = Assembler::new(toks);
    a.bos();
    a.text(WM_PREFIX_TEXT);
    a.frame_pair(obs, 0, cfg.use_wrist, false);
    Ok((a.tokens, a.spans))
}

/// Spans of one planned action block appended at `pos`.
pub fn plan_action_block(spans: &mut Vec<SegmentSpan>, pos: &mut usize, k: usize, dims: usize) {
    spans.push(SegmentSpan { kind: SegmentKind::Special, start: *pos, len: 1, step: Some(k) });
    spans.push(SegmentSpan { kind: SegmentKind::Action, start: *pos + 1, len: dims, step: Some(k) });
    spans.push(SegmentSpan { kind: SegmentKind::Special, start: *pos + 1 + dims, len: 1, step: Some(k) });
    *pos += dims + 2;
}

/// Spans of one planned frame pair appended at `pos`.
pub fn plan_frame_pair(
    spans: &mut Vec<SegmentSpan>,
    pos: &mut usize,
    pair: usize,
    front_cells: usize,
    wrist_cells: Option<usize>,
) {
    spans.push(SegmentSpan { kind: SegmentKind::Special, start: *pos, len: 1, step: None });
    spans.push(SegmentSpan { kind: SegmentKind::ImageFront, start: *pos + 1, len: front_cells, step: Some(pair) });
    spans.push(SegmentSpan { kind: SegmentKind::Special, start: *pos + 1 + front_cells, len: 1, step: None });
    *pos += front_cells + 2;
    if let Some(w) = wrist_cells {
        spans.push(SegmentSpan { kind: SegmentKind::Special, start: *pos, len: 1, step: None });
        spans.push(SegmentSpan { kind: SegmentKind::ImageWrist, start: *pos + 1, len: w, step: Some(pair) });
        spans.push(SegmentSpan { kind: SegmentKind::Special, start: *pos + 1 + w, len: 1, step: None });
        *pos += w + 2;
    }
}

/// Full policy layout: prefix spans plus K planned action blocks.
pub fn plan_vla_layout(
    prefix_spans: &[SegmentSpan],
    prefix_len: usize,
    k_chunk: usize,
    dims: usize,
) -> SampleLayout {
    let mut spans = prefix_spans.to_vec();
    let mut pos = prefix_len;
    for k in 0..k_chunk {
        plan_action_block(&mut spans, &mut pos, k, dims);
    }
    SampleLayout {
        kind: SampleKind::Vla,
        spans,
        total_len: pos,
    }
}

/// Recovers the layout of a built sample from its tokens and the layout
/// configuration; the exact inverse of the builders. Malformed delimiter
/// structure yields an error naming the offending position.
pub fn layout_of(tokens: &[u32], toks: &Tokenizers, cfg: &LayoutConfig) -> Result<SampleLayout> {
    use crate::tokenizer::Segment;
    let l = &toks.layout;
    let mut scanner = Scanner { tokens, toks, pos: 0, spans: Vec::new() };

    scanner.expect_special(SpecialToken::Bos, None, "expected BOS")?;
    let text_start = scanner.pos;
    while scanner.pos < tokens.len()
        && l.classify(tokens[scanner.pos])? == Segment::Text
    {
        scanner.pos += 1;
    }
    if scanner.pos == text_start {
        return Err(Error::MalformedTokens {
            position: text_start,
            reason: "empty text block".into(),
        });
    }
    scanner.spans.push(SegmentSpan {
        kind: SegmentKind::Text,
        start: text_start,
        len: scanner.pos - text_start,
        step: None,
    });
    let wm_first = toks.tokenize_text(WM_PREFIX_TEXT)[0];
    let kind = if tokens[text_start] == wm_first {
        SampleKind::WorldModel
    } else {
        SampleKind::Vla
    };

    match kind {
        SampleKind::Vla => {
            if cfg.use_state {
                scanner.read_state_block()?;
            }
            for h in 0..cfg.m_history {
                scanner.read_frame_pair(h, cfg.use_wrist)?;
            }
            let mut k = 0;
            while scanner.pos < tokens.len() {
                scanner.read_action_block(k)?;
                k += 1;
            }
            if k == 0 {
                return Err(Error::MalformedTokens {
                    position: scanner.pos,
                    reason: "no action blocks".into(),
                });
            }
        }
        SampleKind::WorldModel => {
            scanner.read_frame_pair(0, cfg.use_wrist)?;
            let mut i = 0;
            while scanner.pos < tokens.len() {
                scanner.read_action_block(i)?;
                scanner.read_frame_pair(i + 1, cfg.use_wrist)?;
                i += 1;
            }
        }
    }
    let layout = SampleLayout {
        kind,
        spans: scanner.spans,
        total_len: tokens.len(),
    };
    layout.check_tiling()?;
    Ok(layout)
}

struct Scanner<'a> {
    tokens: &'a [u32],
    toks: &'a Tokenizers,
    pos: usize,
    spans: Vec<SegmentSpan>,
}

impl Scanner<'_> {
    fn expect_special(
        &mut self,
        t: SpecialToken,
        step: Option<usize>,
        reason: &str,
    ) -> Result<()> {
        let want = self.toks.layout.special(t);
        if self.tokens.get(self.pos) != Some(&want) {
            return Err(Error::MalformedTokens {
                position: self.pos,
                reason: reason.into(),
            });
        }
        self.spans.push(SegmentSpan {
            kind: SegmentKind::Special,
            start: self.pos,
            len: 1,
            step,
        });
        self.pos += 1;
        Ok(())
    }

    fn read_typed_run(
        &mut self,
        kind: SegmentKind,
        segment: crate::tokenizer::Segment,
        len: usize,
        step: Option<usize>,
    ) -> Result<()> {
        let start = self.pos;
        for _ in 0..len {
            let tok = *self.tokens.get(self.pos).ok_or(Error::MalformedTokens {
                position: self.pos,
                reason: "unexpected end of tokens".into(),
            })?;
            if self.toks.layout.classify(tok)? != segment {
                return Err(Error::MalformedTokens {
                    position: self.pos,
                    reason: format!("expected {segment} token"),
                });
            }
            self.pos += 1;
        }
        self.spans.push(SegmentSpan { kind, start, len, step });
        Ok(())
    }

    fn read_state_block(&mut self) -> Result<()> {
        self.expect_special(SpecialToken::StateBegin, None, "expected state begin")?;
        let dims = self.toks.layout.state_dims;
        self.read_typed_run(SegmentKind::State, crate::tokenizer::Segment::State, dims, None)?;
        self.expect_special(SpecialToken::StateEnd, None, "expected state end")
    }

    /// Frame cell counts are not fixed by the scanner; an image run extends
    /// until its end delimiter.
    fn read_frame(&mut self, kind: SegmentKind, step: usize) -> Result<()> {
        self.expect_special(SpecialToken::FrameBegin, None, "expected frame begin")?;
        let start = self.pos;
        while self.pos < self.tokens.len()
            && self.toks.layout.classify(self.tokens[self.pos])?
                == crate::tokenizer::Segment::Image
        {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::MalformedTokens {
                position: start,
                reason: "empty frame".into(),
            });
        }
        self.spans.push(SegmentSpan {
            kind,
            start,
            len: self.pos - start,
            step: Some(step),
        });
        self.expect_special(SpecialToken::FrameEnd, None, "expected frame end")
    }

    fn read_frame_pair(&mut self, step: usize, use_wrist: bool) -> Result<()> {
        self.read_frame(SegmentKind::ImageFront, step)?;
        if use_wrist {
            self.read_frame(SegmentKind::ImageWrist, step)?;
        }
        Ok(())
    }

    fn read_action_block(&mut self, k: usize) -> Result<()> {
        self.expect_special(SpecialToken::ActionBegin, Some(k), "expected action begin")?;
        let start = self.pos;
        let dims = self.toks.layout.action_dims;
        for d in 0..dims {
            let tok = *self.tokens.get(self.pos).ok_or(Error::MalformedTokens {
                position: self.pos,
                reason: "unexpected end of tokens".into(),
            })?;
            let (dim, _) = self.toks.layout.action_dim_bin(tok).map_err(|_| {
                Error::MalformedTokens {
                    position: self.pos,
                    reason: "expected action token".into(),
                }
            })?;
            if dim != d {
                return Err(Error::MalformedTokens {
                    position: self.pos,
                    reason: format!("action dim {dim} out of order (expected {d})"),
                });
            }
            self.pos += 1;
        }
        self.spans.push(SegmentSpan {
            kind: SegmentKind::Action,
            start,
            len: dims,
            step: Some(k),
        });
        self.expect_special(SpecialToken::ActionEnd, Some(k), "expected action end")
    }
}
