//! Segmentation of an utterance into center blocks with hard-copied right
//! contexts, and the per-segment key sets used by the parallel forward.
//!
//! The parallel forward keeps two frame regions: the `T` center frames in
//! their original order, and a hard-copy region holding, for each segment,
//! copies of the look-ahead frames that follow it. Right-context queries
//! therefore get their own per-layer state, and a segment never sees what a
//! later segment's centers became in a lower layer.

use std::ops::Range;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::BoolMask;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub index: usize,
    /// Center frames, as indices into the original sequence.
    pub center: Range<usize>,
    /// Rows of the hard-copy region holding this segment's right context.
    pub right: Range<usize>,
    /// Original frame indices the right-context rows were copied from.
    pub right_source: Range<usize>,
}

impl Segment {
    pub fn center_len(&self) -> usize {
        self.center.len()
    }

    pub fn right_len(&self) -> usize {
        self.right.len()
    }

    /// Last original frame any output of this segment may depend on.
    pub fn horizon(&self) -> usize {
        if self.right_source.is_empty() {
            self.center.end - 1
        } else {
            self.right_source.end - 1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLayout {
    pub total_frames: usize,
    pub center_frames: usize,
    pub right_frames: usize,
    pub segments: Vec<Segment>,
    pub hardcopy_total: usize,
}

impl SegmentLayout {
    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// For every hard-copy row, the original frame it copies.
    pub fn hardcopy_sources(&self) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|s| s.right_source.clone())
            .collect()
    }

    /// Segment owning original frame `t` as a center frame.
    pub fn segment_of(&self, t: usize) -> usize {
        t / self.center_frames
    }
}

/// Splits `total_frames` into `ceil(T / C)` segments. Segment `i` gets
/// `min(R, T - (i+1)·C)` look-ahead frames (0 when nothing follows).
pub fn segment_utterance(total_frames: usize, cfg: &ModelConfig) -> Result<SegmentLayout> {
    segment_frames(total_frames, cfg.center_frames, cfg.right_frames)
}

pub fn segment_frames(total: usize, center: usize, right: usize) -> Result<SegmentLayout> {
    if total == 0 {
        return Err(Error::EmptyInput("utterance has no frames".into()));
    }
    if center == 0 {
        return Err(Error::InvalidConfig(vec![
            "center_frames must be at least 1".into(),
        ]));
    }
    let n = total.div_ceil(center);
    let mut segments = Vec::with_capacity(n);
    let mut hc = 0;
    for i in 0..n {
        let start = i * center;
        let end = (start + center).min(total);
        let rc_len = right.min(total.saturating_sub(end));
        segments.push(Segment {
            index: i,
            center: start..end,
            right: hc..hc + rc_len,
            right_source: end..end + rc_len,
        });
        hc += rc_len;
    }
    Ok(SegmentLayout {
        total_frames: total,
        center_frames: center,
        right_frames: right,
        segments,
        hardcopy_total: hc,
    })
}

/// Keys visible to one segment. Memory slots index the lower layer's
/// per-segment memory vectors; `left` and `center` index original center
/// frames; `right` indexes hard-copy rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentKeys {
    pub memory: Range<usize>,
    pub left: Range<usize>,
    pub center: Range<usize>,
    pub right: Range<usize>,
    /// Whether the segment has a summary query (memory enabled).
    pub summary: bool,
}

impl SegmentKeys {
    pub fn key_count(&self) -> usize {
        self.memory.len() + self.left.len() + self.center.len() + self.right.len()
    }

    pub fn query_count(&self) -> usize {
        self.center.len() + self.right.len() + usize::from(self.summary)
    }

    /// Local mask with queries `[centers, right copies, summary?]` and keys
    /// `[memory, left, centers, right copies]`. Everything is allowed except
    /// summary-to-memory.
    pub fn local_mask(&self) -> BoolMask {
        let frame_queries = self.center.len() + self.right.len();
        let n_mem = self.memory.len();
        BoolMask::from_fn(self.query_count(), self.key_count(), |q, k| {
            q < frame_queries || k >= n_mem
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMaskSet {
    pub segments: Vec<SegmentKeys>,
    pub total_frames: usize,
    pub hardcopy_total: usize,
}

/// Query row of the global mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryPos {
    Center(usize),
    RightCopy(usize),
    Summary(usize),
}

/// Key column of the global mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyPos {
    Memory(usize),
    Center(usize),
    RightCopy(usize),
}

impl AttentionMaskSet {
    fn n_segments(&self) -> usize {
        self.segments.len()
    }

    fn has_memory(&self) -> bool {
        self.segments.iter().any(|s| s.summary)
    }

    /// Row order `[centers 0..T, right copies 0..H, summaries 0..I]`.
    pub fn query_positions(&self) -> Vec<QueryPos> {
        let mut out: Vec<QueryPos> = (0..self.total_frames).map(QueryPos::Center).collect();
        out.extend((0..self.hardcopy_total).map(QueryPos::RightCopy));
        if self.has_memory() {
            out.extend((0..self.n_segments()).map(QueryPos::Summary));
        }
        out
    }

    /// Column order `[memory slots 0..I, centers 0..T, right copies 0..H]`.
    pub fn key_positions(&self) -> Vec<KeyPos> {
        let mut out = Vec::new();
        if self.has_memory() {
            out.extend((0..self.n_segments()).map(KeyPos::Memory));
        }
        out.extend((0..self.total_frames).map(KeyPos::Center));
        out.extend((0..self.hardcopy_total).map(KeyPos::RightCopy));
        out
    }

    fn segment_of_query(&self, q: QueryPos) -> usize {
        let find = |pred: &dyn Fn(&SegmentKeys) -> bool| {
            self.segments
                .iter()
                .position(pred)
                .expect("query belongs to a segment")
        };
        match q {
            QueryPos::Center(t) => find(&|s| s.center.contains(&t)),
            QueryPos::RightCopy(h) => find(&|s| s.right.contains(&h)),
            QueryPos::Summary(i) => i,
        }
    }

    pub fn allows(&self, q: QueryPos, k: KeyPos) -> bool {
        let seg = &self.segments[self.segment_of_query(q)];
        match k {
            KeyPos::Memory(j) => !matches!(q, QueryPos::Summary(_)) && seg.memory.contains(&j),
            KeyPos::Center(t) => seg.left.contains(&t) || seg.center.contains(&t),
            KeyPos::RightCopy(h) => seg.right.contains(&h),
        }
    }

    /// The whole training-mode mask as one dense matrix over
    /// [`query_positions`](Self::query_positions) x [`key_positions`](Self::key_positions).
    pub fn dense(&self) -> BoolMask {
        let qs = self.query_positions();
        let ks = self.key_positions();
        BoolMask::from_fn(qs.len(), ks.len(), |r, c| self.allows(qs[r], ks[c]))
    }
}

pub fn build_masks(layout: &SegmentLayout, cfg: &ModelConfig) -> AttentionMaskSet {
    let m = cfg.memory_size;
    let l = cfg.left_frames;
    let segments = layout
        .segments
        .iter()
        .map(|s| {
            let i = s.index;
            let start = s.center.start;
            SegmentKeys {
                memory: if m > 0 { i.saturating_sub(m)..i } else { 0..0 },
                left: start - l.min(start)..start,
                center: s.center.clone(),
                right: s.right.clone(),
                summary: m > 0,
            }
        })
        .collect();
    AttentionMaskSet {
        segments,
        total_frames: layout.total_frames,
        hardcopy_total: layout.hardcopy_total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(c: usize, r: usize, l: usize, m: usize) -> ModelConfig {
        ModelConfig {
            center_frames: c,
            right_frames: r,
            left_frames: l,
            memory_size: m,
            ..ModelConfig::default()
        }
    }

    fn rc_lens(layout: &SegmentLayout) -> Vec<usize> {
        layout.segments.iter().map(Segment::right_len).collect()
    }

    #[test]
    fn figure_layout_chunk_four_right_one() {
        let layout = segment_utterance(16, &cfg(4, 1, 0, 0)).unwrap();
        assert_eq!(layout.n_segments(), 4);
        assert_eq!(rc_lens(&layout), vec![1, 1, 1, 0]);
        assert_eq!(layout.hardcopy_total, 3);
        assert_eq!(layout.hardcopy_sources(), vec![4, 8, 12]);
    }

    #[test]
    fn short_single_segment() {
        let layout = segment_utterance(3, &cfg(4, 1, 0, 0)).unwrap();
        assert_eq!(layout.n_segments(), 1);
        assert_eq!(layout.segments[0].center, 0..3);
        assert_eq!(rc_lens(&layout), vec![0]);
    }

    #[test]
    fn ragged_tail() {
        let layout = segment_utterance(10, &cfg(4, 2, 0, 0)).unwrap();
        let lens: Vec<usize> = layout.segments.iter().map(Segment::center_len).collect();
        assert_eq!(lens, vec![4, 4, 2]);
        assert_eq!(rc_lens(&layout), vec![2, 2, 0]);
        assert_eq!(layout.hardcopy_sources(), vec![4, 5, 8, 9]);
    }

    #[test]
    fn right_context_longer_than_center() {
        let layout = segment_utterance(5, &cfg(1, 3, 0, 0)).unwrap();
        assert_eq!(rc_lens(&layout), vec![3, 3, 2, 1, 0]);
        assert_eq!(layout.segments[1].right_source, 2..5);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            segment_utterance(0, &cfg(4, 1, 0, 0)),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn first_segment_has_no_history() {
        let c = cfg(4, 1, 8, 4);
        let masks = build_masks(&segment_utterance(16, &c).unwrap(), &c);
        assert!(masks.segments[0].memory.is_empty());
        assert!(masks.segments[0].left.is_empty());
    }

    #[test]
    fn memory_window_is_ring() {
        let c = cfg(2, 1, 2, 4);
        let masks = build_masks(&segment_utterance(20, &c).unwrap(), &c);
        assert_eq!(masks.segments[6].memory, 2..6);
        assert_eq!(masks.segments[2].memory, 0..2);
    }

    #[test]
    fn no_memory_keys_without_memory() {
        let c = cfg(2, 1, 2, 0);
        let masks = build_masks(&segment_utterance(20, &c).unwrap(), &c);
        assert!(masks
            .segments
            .iter()
            .all(|s| s.memory.is_empty() && !s.summary));
        assert!(masks
            .key_positions()
            .iter()
            .all(|k| !matches!(k, KeyPos::Memory(_))));
    }

    #[test]
    fn figure_query_at_frame_two() {
        let c = cfg(4, 1, 0, 0);
        let masks = build_masks(&segment_utterance(16, &c).unwrap(), &c);
        let q = QueryPos::Center(2);
        let centers: Vec<usize> = (0..16)
            .filter(|&t| masks.allows(q, KeyPos::Center(t)))
            .collect();
        assert_eq!(centers, vec![0, 1, 2, 3]);
        let copies: Vec<usize> = (0..3)
            .filter(|&h| masks.allows(q, KeyPos::RightCopy(h)))
            .collect();
        // Hard-copy row 0 is the copy of frame 4.
        assert_eq!(copies, vec![0]);
        assert_eq!(masks.dense().allowed_in_row(2).count(), 5);
    }

    #[test]
    fn left_context_spans_segments() {
        let c = cfg(2, 1, 5, 0);
        let masks = build_masks(&segment_utterance(12, &c).unwrap(), &c);
        assert_eq!(masks.segments[1].left, 0..2);
        assert_eq!(masks.segments[4].left, 3..8);
    }

    #[test]
    fn summary_rows_never_see_memory() {
        let c = cfg(2, 1, 3, 2);
        let masks = build_masks(&segment_utterance(11, &c).unwrap(), &c);
        let dense = masks.dense();
        let qs = masks.query_positions();
        let ks = masks.key_positions();
        for (r, q) in qs.iter().enumerate() {
            if let QueryPos::Summary(_) = q {
                for (col, k) in ks.iter().enumerate() {
                    if let KeyPos::Memory(_) = k {
                        assert!(!dense.get(r, col));
                    }
                }
            }
        }
        for s in &masks.segments {
            let local = s.local_mask();
            let last = local.rows() - 1;
            assert!((0..s.memory.len()).all(|k| !local.get(last, k)));
        }
    }

    /// Latest original frame each position depends on after `layers` layers,
    /// propagated through the dense mask.
    fn propagate_horizon(
        layout: &SegmentLayout,
        masks: &AttentionMaskSet,
        layers: usize,
    ) -> Vec<usize> {
        let qs = masks.query_positions();
        let ks = masks.key_positions();
        let dense = masks.dense();
        let sources = layout.hardcopy_sources();
        let mut center: Vec<usize> = (0..layout.total_frames).collect();
        let mut copy: Vec<usize> = sources.clone();
        // Layer 0 memory: mean of the segment's raw centers.
        let mut memory: Vec<usize> = layout.segments.iter().map(|s| s.center.end - 1).collect();
        for _ in 0..layers {
            let key_dep = |k: KeyPos| match k {
                KeyPos::Memory(j) => memory[j],
                KeyPos::Center(t) => center[t],
                KeyPos::RightCopy(h) => copy[h],
            };
            let mut next_center = center.clone();
            let mut next_copy = copy.clone();
            let mut next_memory = memory.clone();
            for (r, &q) in qs.iter().enumerate() {
                let mut dep = match q {
                    QueryPos::Center(t) => center[t],
                    QueryPos::RightCopy(h) => copy[h],
                    QueryPos::Summary(i) => layout.segments[i]
                        .center
                        .clone()
                        .map(|t| center[t])
                        .max()
                        .unwrap(),
                };
                for (c, &k) in ks.iter().enumerate() {
                    if dense.get(r, c) {
                        dep = dep.max(key_dep(k));
                    }
                }
                match q {
                    QueryPos::Center(t) => next_center[t] = dep,
                    QueryPos::RightCopy(h) => next_copy[h] = dep,
                    QueryPos::Summary(i) => next_memory[i] = dep,
                }
            }
            center = next_center;
            copy = next_copy;
            memory = next_memory;
        }
        center
    }

    #[test]
    fn masks_without_hard_copies_would_leak() {
        // Letting centers attend to the next segment's first frames directly
        // (no hard copies) lets the horizon run a whole chunk further per layer.
        let (c, r, layers) = (4usize, 1usize, 3usize);
        let t_total = 16;
        let mut dep: Vec<usize> = (0..t_total).collect();
        for _ in 0..layers {
            dep = (0..t_total)
                .map(|t| {
                    let end = ((t / c + 1) * c + r).min(t_total);
                    (0..end).map(|u| dep[u]).max().unwrap()
                })
                .collect();
        }
        assert_eq!(dep[2], 12);
    }

    proptest! {
        #[test]
        fn layout_invariants(t in 1usize..80, c in 1usize..9, r in 0usize..5) {
            let layout = segment_frames(t, c, r).unwrap();
            prop_assert_eq!(layout.n_segments(), t.div_ceil(c));
            let mut next = 0;
            for (i, s) in layout.segments.iter().enumerate() {
                prop_assert_eq!(s.center.start, next);
                prop_assert!(s.center_len() <= c && s.center_len() >= 1);
                if i + 1 < layout.n_segments() {
                    prop_assert_eq!(s.center_len(), c);
                }
                next = s.center.end;
                let want = r.min(t.saturating_sub((i + 1) * c));
                prop_assert_eq!(s.right_len(), want);
                prop_assert_eq!(s.right_source.start, s.center.end);
            }
            prop_assert_eq!(next, t);
            prop_assert_eq!(layout.hardcopy_total, layout.hardcopy_sources().len());
        }

        #[test]
        fn horizon_holds_through_layers(
            t in 1usize..40, c in 1usize..6, r in 0usize..4, l in 0usize..10, m in 0usize..4, layers in 1usize..5
        ) {
            let cf = cfg(c, r, l, m);
            let layout = segment_utterance(t, &cf).unwrap();
            let masks = build_masks(&layout, &cf);
            let dep = propagate_horizon(&layout, &masks, layers);
            for s in &layout.segments {
                for f in s.center.clone() {
                    prop_assert!(dep[f] <= s.horizon(), "frame {} depends on {}", f, dep[f]);
                }
            }
        }

        #[test]
        fn left_keys_are_centers_only(t in 1usize..40, c in 1usize..6, r in 0usize..4, l in 0usize..10) {
            let cf = cfg(c, r, l, 2);
            let layout = segment_utterance(t, &cf).unwrap();
            let masks = build_masks(&layout, &cf);
            for (i, s) in masks.segments.iter().enumerate() {
                prop_assert_eq!(s.left.len(), l.min(i * c));
                prop_assert_eq!(s.left.end, s.center.start);
                // No key of segment i reaches a later segment's centers.
                prop_assert!(s.center.end <= layout.segments[i].center.end);
                for j in i + 1..masks.segments.len() {
                    for h in masks.segments[j].right.clone() {
                        prop_assert!(!masks.allows(QueryPos::Summary(i), KeyPos::RightCopy(h)));
                    }
                }
            }
            prop_assert_eq!(&masks, &build_masks(&layout, &cf));
        }
    }
}
