//! The three attention regimes, built from a [`SampleLayout`]:
//!
//! - `Causal`: plain lower-triangular.
//! - `ActionIsolated`: lower-triangular, except that positions inside action
//!   block k cannot attend anything inside action blocks 0..k (delimiters
//!   included). Each action block sees the text/state/image prefix and its
//!   own earlier tokens only.
//! - `WorldModel`: lower-triangular over the chained world-model sequence.
//!
//! [`oracle_mask`] re-derives the same matrices by evaluating the per-pair
//! rule independently for every (query, key); the differential test between
//! the two is the correctness argument for the optimized builder.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{SampleKind, SampleLayout, SegmentKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Causal,
    ActionIsolated,
    WorldModel,
}

impl MaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            MaskKind::Causal => "causal",
            MaskKind::ActionIsolated => "action_isolated",
            MaskKind::WorldModel => "world_model",
        }
    }
}

impl std::str::FromStr for MaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(Self::Causal),
            "action_isolated" | "action-isolated" => Ok(Self::ActionIsolated),
            "world_model" | "world-model" => Ok(Self::WorldModel),
            other => Err(Error::Config(format!("unknown mask kind {other}"))),
        }
    }
}

/// Square attend/block matrix; `true` means the query row may attend the key
/// column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    n: usize,
    data: Vec<bool>,
}

impl MaskMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.data[q * self.n + k]
    }

    /// Inverted copy for the engine's masked-fill (`true` = blocked), shared
    /// across layers and heads of one forward pass.
    pub fn blocked_arc(&self) -> Arc<Vec<bool>> {
        Arc::new(self.data.iter().map(|&b| !b).collect())
    }

    /// Top-left n'×n' submatrix, used while a decode is still growing the
    /// sequence toward the planned layout.
    pub fn prefix(&self, n: usize) -> MaskMatrix {
        assert!(n <= self.n);
        let mut data = Vec::with_capacity(n * n);
        for q in 0..n {
            data.extend_from_slice(&self.data[q * self.n..q * self.n + n]);
        }
        MaskMatrix { n, data }
    }
}

fn check_compat(layout: &SampleLayout, kind: MaskKind) -> Result<()> {
    let ok = match kind {
        MaskKind::Causal | MaskKind::ActionIsolated => layout.kind == SampleKind::Vla,
        MaskKind::WorldModel => layout.kind == SampleKind::WorldModel,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::MaskLayoutMismatch {
            kind: kind.name(),
            layout: match layout.kind {
                SampleKind::Vla => "vla",
                SampleKind::WorldModel => "world_model",
            },
        })
    }
}

pub fn build_mask(layout: &SampleLayout, kind: MaskKind) -> Result<MaskMatrix> {
    check_compat(layout, kind)?;
    let n = layout.total_len;
    let mut data = vec![false; n * n];
    // Position -> action-block table straight from the spans.
    let mut block = vec![None; n];
    if kind == MaskKind::ActionIsolated {
        for span in &layout.spans {
            let member = matches!(span.kind, SegmentKind::Action | SegmentKind::Special)
                && span.step.is_some();
            if member {
                for p in span.start..span.end() {
                    block[p] = span.step;
                }
            }
        }
    }
    for q in 0..n {
        let row = &mut data[q * n..(q + 1) * n];
        match (kind, block[q]) {
            (MaskKind::ActionIsolated, Some(bq)) => {
                for (k, slot) in row.iter_mut().enumerate().take(q + 1) {
                    *slot = match block[k] {
                        Some(bk) => bk >= bq,
                        None => true,
                    };
                }
            }
            _ => {
                for slot in row.iter_mut().take(q + 1) {
                    *slot = true;
                }
            }
        }
    }
    Ok(MaskMatrix { n, data })
}

/// Independent re-derivation: every (query, key) pair is classified on its
/// own by walking the spans, with no shared lookup tables.
pub fn oracle_mask(layout: &SampleLayout, kind: MaskKind) -> Result<MaskMatrix> {
    check_compat(layout, kind)?;
    let n = layout.total_len;
    let mut data = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            data[q * n + k] = oracle_pair_allowed(layout, kind, q, k);
        }
    }
    Ok(MaskMatrix { n, data })
}

fn oracle_pair_allowed(layout: &SampleLayout, kind: MaskKind, q: usize, k: usize) -> bool {
    if k > q {
        return false; // never attend strictly future positions
    }
    match kind {
        MaskKind::Causal | MaskKind::WorldModel => true,
        MaskKind::ActionIsolated => {
            match (layout.action_block_of(q), layout.action_block_of(k)) {
                // A query inside block bq is prohibited from every position
                // of blocks before bq; prefix and own-block access survive.
                (Some(bq), Some(bk)) => bk >= bq,
                _ => true,
            }
        }
    }
}

/// Text rendering for inspection: rows are queries, `x` = attend, `.` =
/// blocked.
pub fn render_mask(mask: &MaskMatrix) -> String {
    let mut out = String::with_capacity((mask.n + 1) * mask.n);
    for q in 0..mask.n {
        for k in 0..mask.n {
            out.push(if mask.allowed(q, k) { 'x' } else { '.' });
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::SegmentSpan;

    /// Hand-built layout: [text x2, state x1, image x4, A1 x3, A2 x3]
    /// plus delimiter-free spans to keep the arithmetic of the example easy.
    fn toy_layout(k_blocks: usize) -> SampleLayout {
        let mut spans = vec![
            SegmentSpan { kind: SegmentKind::Text, start: 0, len: 2, step: None },
            SegmentSpan { kind: SegmentKind::State, start: 2, len: 1, step: None },
            SegmentSpan { kind: SegmentKind::ImageFront, start: 3, len: 4, step: Some(0) },
        ];
        let mut pos = 7;
        for k in 0..k_blocks {
            spans.push(SegmentSpan { kind: SegmentKind::Action, start: pos, len: 3, step: Some(k) });
            pos += 3;
        }
        SampleLayout { kind: SampleKind::Vla, spans, total_len: pos }
    }

    #[test]
    fn isolation_blocks_prior_action_blocks() {
        let layout = toy_layout(2);
        let m = build_mask(&layout, MaskKind::ActionIsolated).unwrap();
        // First token of A2 sits at position 10; A1 occupies 7..10.
        for k in 0..=6 {
            assert!(m.allowed(10, k), "prefix position {k} must be visible");
        }
        for k in 7..10 {
            assert!(!m.allowed(10, k), "A1 position {k} must be blocked");
        }
        assert!(m.allowed(10, 10), "diagonal");
        // Same layout under causal: everything behind is visible.
        let c = build_mask(&layout, MaskKind::Causal).unwrap();
        for k in 0..=10 {
            assert!(c.allowed(10, k));
        }
    }

    #[test]
    fn k1_isolated_equals_causal() {
        let layout = toy_layout(1);
        let a = build_mask(&layout, MaskKind::ActionIsolated).unwrap();
        let c = build_mask(&layout, MaskKind::Causal).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn isolated_is_subset_of_causal_and_triangular() {
        let layout = toy_layout(3);
        let a = build_mask(&layout, MaskKind::ActionIsolated).unwrap();
        let c = build_mask(&layout, MaskKind::Causal).unwrap();
        let mut strictly_smaller = false;
        for q in 0..layout.total_len {
            assert!(a.allowed(q, q), "diagonal true");
            for k in 0..layout.total_len {
                if k > q {
                    assert!(!a.allowed(q, k));
                    assert!(!c.allowed(q, k));
                }
                if a.allowed(q, k) {
                    assert!(c.allowed(q, k), "isolated must be subset of causal");
                } else if c.allowed(q, k) {
                    strictly_smaller = true;
                }
            }
        }
        assert!(strictly_smaller, "K >= 2 must be strictly stricter");
    }

    #[test]
    fn kind_layout_mismatch_is_an_error() {
        let layout = toy_layout(1);
        assert!(matches!(
            build_mask(&layout, MaskKind::WorldModel),
            Err(Error::MaskLayoutMismatch { .. })
        ));
        let wm = SampleLayout { kind: SampleKind::WorldModel, ..toy_layout(1) };
        assert!(matches!(
            build_mask(&wm, MaskKind::Causal),
            Err(Error::MaskLayoutMismatch { .. })
        ));
    }

    #[test]
    fn single_token_and_actionless_layouts() {
        let single = SampleLayout {
            kind: SampleKind::Vla,
            spans: vec![SegmentSpan { kind: SegmentKind::Special, start: 0, len: 1, step: None }],
            total_len: 1,
        };
        let m = build_mask(&single, MaskKind::ActionIsolated).unwrap();
        assert!(m.allowed(0, 0));
        assert_eq!(m, oracle_mask(&single, MaskKind::ActionIsolated).unwrap());

        // Empty action region: isolated equals plain triangular.
        let no_actions = SampleLayout {
            kind: SampleKind::Vla,
            spans: vec![SegmentSpan { kind: SegmentKind::Text, start: 0, len: 5, step: None }],
            total_len: 5,
        };
        let a = build_mask(&no_actions, MaskKind::ActionIsolated).unwrap();
        let c = build_mask(&no_actions, MaskKind::Causal).unwrap();
        assert_eq!(a, c);
        assert_eq!(a, oracle_mask(&no_actions, MaskKind::Causal).unwrap());
    }

    #[test]
    fn same_offset_rows_share_their_prefix_view() {
        // A query at the same offset of a different action block sees the
        // identical non-action prefix.
        let layout = toy_layout(3);
        let m = build_mask(&layout, MaskKind::ActionIsolated).unwrap();
        let prefix_len = 7;
        for offset in 0..3 {
            let rows: Vec<Vec<bool>> = (0..3)
                .map(|b| {
                    (0..prefix_len)
                        .map(|k| m.allowed(7 + b * 3 + offset, k))
                        .collect()
                })
                .collect();
            assert_eq!(rows[0], rows[1]);
            assert_eq!(rows[1], rows[2]);
        }
    }

    #[test]
    fn differential_against_oracle_on_built_layouts() {
        use crate::data::{collect, FamilyMix};
        use crate::env::EnvConfig;
        use crate::sequence::{build_vla_sample, build_wm_sample, LayoutConfig};
        let d = collect(&EnvConfig::default(), 2, 3, &FamilyMix::default(), 16).unwrap();
        let mut checked = 0;
        for m in [1, 2] {
            for k in [1, 2, 4] {
                for (wrist, state) in [(true, true), (false, true), (true, false)] {
                    let cfg = LayoutConfig {
                        m_history: m,
                        k_chunk: k,
                        n_rounds: 1,
                        use_wrist: wrist,
                        use_state: state,
                    };
                    let ep = &d.episodes[0];
                    if ep.len() < k + 1 {
                        continue;
                    }
                    let v = build_vla_sample(&d.tokenizers, ep, 0, &cfg).unwrap();
                    for kind in [MaskKind::Causal, MaskKind::ActionIsolated] {
                        assert_eq!(
                            build_mask(&v.layout, kind).unwrap(),
                            oracle_mask(&v.layout, kind).unwrap()
                        );
                        checked += 1;
                    }
                    let w = build_wm_sample(&d.tokenizers, ep, 0, &cfg).unwrap();
                    assert_eq!(
                        build_mask(&w.layout, MaskKind::WorldModel).unwrap(),
                        oracle_mask(&w.layout, MaskKind::WorldModel).unwrap()
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked >= 30);
    }
}
