//! Anchor-indexed positive/negative MIL bags.
//!
//! Every pair joins one continuous clip of the batch with one dictionary
//! video. An anchor fixes one side and collects a positive bag (at least one
//! pair is expected to match) and a negative bag (no pair may match).
//!
//! Anchor families, with `F_i` the foreground clip of item `i`, `G_i` its
//! background clips, `v_i` its annotated word, `T_i` its subtitle tokens
//! (including `v_i`) and `D_u` the batch dictionary videos of word `u`:
//!
//! * seg-fore `i`: `F_i x D_{v_i}` vs `F_i x D_u` for `u != v_i`.
//! * dict-fore `i`: `D_{v_i} x F_i` vs `D_{v_i} x F_j` for `v_j != v_i`, and
//!   (subtitles in use) `D_{v_i} x G_j` for `j != i` with `v_i` not in `T_j`.
//! * seg-back `(i, w)`, `w` a background word: `G_i x D_w` vs `G_i x D_u` for
//!   `u` not in `T_i`, plus `D_{v_i}` when the foreground word is negative for
//!   background clips. Other subtitle words are discarded.
//! * dict-back `(i, w)`: `D_w x G_i` vs `D_w x F_j` for `v_j != w` and
//!   `D_w x G_j` for `j != i` with `w` not in `T_j`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::corpus::{Vocabulary, WordId};
use crate::sampler::{LossMode, Minibatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClipRole {
    Fg,
    Bg(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClipRef {
    pub item: usize,
    pub role: ClipRole,
}

/// A dictionary video, identified by word and variant index. The same video
/// contributed by several items is one video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DictRef {
    pub word: WordId,
    pub variant: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairRef {
    pub clip: ClipRef,
    pub dict: DictRef,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnchorKind {
    SegFore,
    DictFore,
    SegBack,
    DictBack,
}

impl AnchorKind {
    pub fn name(self) -> &'static str {
        match self {
            AnchorKind::SegFore => "seg-fore",
            AnchorKind::DictFore => "dict-fore",
            AnchorKind::SegBack => "seg-back",
            AnchorKind::DictBack => "dict-back",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Anchor {
    pub item: usize,
    pub kind: AnchorKind,
    /// Foreground word for fore anchors, background word for back anchors,
    /// `None` for a lumped seg-back anchor.
    pub word: Option<WordId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchoredBags {
    pub anchor: Anchor,
    pub positives: BTreeSet<PairRef>,
    pub negatives: BTreeSet<PairRef>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SynonymPolicy {
    /// Any pair of non-identical words may be negative.
    #[default]
    KeepAll,
    /// Pairs whose words are listed synonyms are removed.
    Discard,
}

impl std::str::FromStr for SynonymPolicy {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "keep-all" => Ok(SynonymPolicy::KeepAll),
            "discard" => Ok(SynonymPolicy::Discard),
            _ => Err(crate::Error::InvalidConfig(format!("unknown synonym policy `{s}`"))),
        }
    }
}

impl std::fmt::Display for SynonymPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynonymPolicy::KeepAll => "keep-all",
            SynonymPolicy::Discard => "discard",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SegBackMode {
    /// One seg-back anchor per background word.
    #[default]
    PerWord,
    /// One seg-back anchor per item whose positives are all subtitle words.
    Lumped,
}

impl std::str::FromStr for SegBackMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "per-word" => Ok(SegBackMode::PerWord),
            "lumped" => Ok(SegBackMode::Lumped),
            _ => Err(crate::Error::InvalidConfig(format!("unknown seg-back mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for SegBackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SegBackMode::PerWord => "per-word",
            SegBackMode::Lumped => "lumped",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagOptions {
    pub synonym_policy: SynonymPolicy,
    pub fg_negative_for_background: bool,
    pub seg_back: SegBackMode,
    pub synonyms: Vec<BTreeSet<WordId>>,
}

impl Default for BagOptions {
    fn default() -> Self {
        Self {
            synonym_policy: SynonymPolicy::KeepAll,
            fg_negative_for_background: true,
            seg_back: SegBackMode::PerWord,
            synonyms: Vec::new(),
        }
    }
}

impl BagOptions {
    fn discards(&self, a: WordId, b: WordId) -> bool {
        self.synonym_policy == SynonymPolicy::Discard
            && a != b
            && self.synonyms.iter().any(|g| g.contains(&a) && g.contains(&b))
    }

    fn discards_any(&self, words: &BTreeSet<WordId>, u: WordId) -> bool {
        words.iter().any(|&t| self.discards(t, u))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BagSet {
    pub anchors: Vec<AnchoredBags>,
    /// Items whose foreground word has no dictionary video.
    pub skipped_items: usize,
}

impl BagSet {
    /// Anchors in sorted order, for set comparisons.
    pub fn canonical(mut self) -> Self {
        self.anchors.sort_by_key(|a| a.anchor);
        self
    }

    pub fn num_pairs(&self) -> usize {
        self.anchors.iter().map(|a| a.positives.len() + a.negatives.len()).sum()
    }
}

struct BatchView<'a> {
    batch: &'a Minibatch,
    by_word: BTreeMap<WordId, Vec<DictRef>>,
}

impl<'a> BatchView<'a> {
    fn new(batch: &'a Minibatch) -> Self {
        let mut by_word: BTreeMap<WordId, Vec<DictRef>> = BTreeMap::new();
        for (word, variant) in batch.dictionary_videos() {
            by_word.entry(word).or_default().push(DictRef { word, variant });
        }
        Self { batch, by_word }
    }

    fn fg(item: usize) -> ClipRef {
        ClipRef {
            item,
            role: ClipRole::Fg,
        }
    }

    fn bg(&self, item: usize) -> impl Iterator<Item = ClipRef> + '_ {
        (0..self.batch.items[item].bg_windows.len()).map(move |k| ClipRef {
            item,
            role: ClipRole::Bg(k as u8),
        })
    }

    fn videos(&self, word: WordId) -> &[DictRef] {
        self.by_word.get(&word).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn cross(clips: impl IntoIterator<Item = ClipRef>, dicts: &[DictRef]) -> Vec<PairRef> {
    let clips: Vec<ClipRef> = clips.into_iter().collect();
    let mut out = Vec::with_capacity(clips.len() * dicts.len());
    for &clip in &clips {
        out.extend(dicts.iter().map(|&dict| PairRef { clip, dict }));
    }
    out
}

fn push(out: &mut Vec<AnchoredBags>, anchor: Anchor, pos: Vec<PairRef>, neg: Vec<PairRef>) {
    if pos.is_empty() || neg.is_empty() {
        return;
    }
    out.push(AnchoredBags {
        anchor,
        positives: pos.into_iter().collect(),
        negatives: neg.into_iter().collect(),
    });
}

fn fore_anchors(view: &BatchView, opts: &BagOptions, with_subtitles: bool, out: &mut BagSet) {
    let items = &view.batch.items;
    for (i, item) in items.iter().enumerate() {
        let v = item.fg_word;
        let own = view.videos(v);
        if item.fg_dict.is_empty() || own.is_empty() {
            out.skipped_items += 1;
            continue;
        }
        let pos = cross([BatchView::fg(i)], own);

        let other_words: Vec<DictRef> = view
            .by_word
            .iter()
            .filter(|(&u, _)| u != v && !opts.discards(v, u))
            .flat_map(|(_, d)| d.iter().copied())
            .collect();
        let seg_neg = cross([BatchView::fg(i)], &other_words);
        push(
            &mut out.anchors,
            Anchor {
                item: i,
                kind: AnchorKind::SegFore,
                word: Some(v),
            },
            pos.clone(),
            seg_neg,
        );

        let mut neg_clips: Vec<ClipRef> = items
            .iter()
            .enumerate()
            .filter(|(_, o)| o.fg_word != v && !opts.discards(o.fg_word, v))
            .map(|(j, _)| BatchView::fg(j))
            .collect();
        if with_subtitles {
            for (j, o) in items.iter().enumerate() {
                if j != i && !o.subtitle_tokens.contains(&v) && !opts.discards_any(&o.subtitle_tokens, v) {
                    neg_clips.extend(view.bg(j));
                }
            }
        }
        push(
            &mut out.anchors,
            Anchor {
                item: i,
                kind: AnchorKind::DictFore,
                word: Some(v),
            },
            pos,
            cross(neg_clips, own),
        );
    }
}

fn back_anchors(view: &BatchView, opts: &BagOptions, out: &mut BagSet) {
    let items = &view.batch.items;
    for (i, item) in items.iter().enumerate() {
        if item.bg_windows.is_empty() {
            continue;
        }
        let tokens = &item.subtitle_tokens;
        // Dictionary words that cannot occur in this item's background clips.
        let mut excluded: Vec<DictRef> = view
            .by_word
            .iter()
            .filter(|(u, _)| !tokens.contains(u) && !opts.discards_any(tokens, **u))
            .flat_map(|(_, d)| d.iter().copied())
            .collect();
        let fg_videos = view.videos(item.fg_word);
        if opts.fg_negative_for_background {
            excluded.extend_from_slice(fg_videos);
        }
        let seg_neg = cross(view.bg(i), &excluded);

        match opts.seg_back {
            SegBackMode::PerWord => {
                for &w in item.bg_dict.keys() {
                    push(
                        &mut out.anchors,
                        Anchor {
                            item: i,
                            kind: AnchorKind::SegBack,
                            word: Some(w),
                        },
                        cross(view.bg(i), view.videos(w)),
                        seg_neg.clone(),
                    );
                }
            }
            SegBackMode::Lumped => {
                let mut candidates: Vec<DictRef> = item
                    .bg_dict
                    .keys()
                    .flat_map(|&w| view.videos(w).iter().copied())
                    .collect();
                if !opts.fg_negative_for_background {
                    candidates.extend_from_slice(fg_videos);
                }
                if !item.bg_dict.is_empty() {
                    push(
                        &mut out.anchors,
                        Anchor {
                            item: i,
                            kind: AnchorKind::SegBack,
                            word: None,
                        },
                        cross(view.bg(i), &candidates),
                        seg_neg.clone(),
                    );
                }
            }
        }

        for &w in item.bg_dict.keys() {
            let own = view.videos(w);
            let mut neg_clips: Vec<ClipRef> = items
                .iter()
                .enumerate()
                .filter(|(_, o)| o.fg_word != w && !opts.discards(o.fg_word, w))
                .map(|(j, _)| BatchView::fg(j))
                .collect();
            for (j, o) in items.iter().enumerate() {
                if j != i && !o.subtitle_tokens.contains(&w) && !opts.discards_any(&o.subtitle_tokens, w) {
                    neg_clips.extend(view.bg(j));
                }
            }
            push(
                &mut out.anchors,
                Anchor {
                    item: i,
                    kind: AnchorKind::DictBack,
                    word: Some(w),
                },
                cross(view.bg(i), own),
                cross(neg_clips, own),
            );
        }
    }
}

pub fn build_watch_lookup_bags(batch: &Minibatch, opts: &BagOptions) -> BagSet {
    let view = BatchView::new(batch);
    let mut out = BagSet::default();
    fore_anchors(&view, opts, false, &mut out);
    out
}

pub fn build_watch_read_lookup_bags(batch: &Minibatch, opts: &BagOptions) -> BagSet {
    let view = BatchView::new(batch);
    let mut out = BagSet::default();
    fore_anchors(&view, opts, true, &mut out);
    back_anchors(&view, opts, &mut out);
    out
}

/// Bags for a training mode; the single-instance and classification
/// baselines start from the Watch-Lookup bags.
pub fn build_bags(batch: &Minibatch, mode: LossMode, opts: &BagOptions) -> BagSet {
    match mode {
        LossMode::WatchReadLookup => build_watch_read_lookup_bags(batch, opts),
        _ => build_watch_lookup_bags(batch, opts),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PairClass {
    Positive,
    Negative,
    Ignored,
}

/// Literal enumeration of every (clip, dictionary video) pair against the
/// membership rules of each anchor; no grouping or indexing shortcuts.
/// Intended for batches of at most a handful of items.
pub fn oracle_bags(batch: &Minibatch, mode: LossMode, opts: &BagOptions) -> BagSet {
    let items = &batch.items;
    let subtitles = mode == LossMode::WatchReadLookup;

    let mut clips = Vec::new();
    for (j, item) in items.iter().enumerate() {
        clips.push(ClipRef { item: j, role: ClipRole::Fg });
        for k in 0..item.bg_windows.len() {
            clips.push(ClipRef { item: j, role: ClipRole::Bg(k as u8) });
        }
    }
    let mut videos = Vec::new();
    for item in items {
        for &variant in &item.fg_dict {
            videos.push(DictRef { word: item.fg_word, variant });
        }
        for (&word, vs) in &item.bg_dict {
            for &variant in vs {
                videos.push(DictRef { word, variant });
            }
        }
    }
    videos.sort();
    videos.dedup();

    let mut anchors = Vec::new();
    let mut skipped = 0;
    for (i, item) in items.iter().enumerate() {
        if item.fg_dict.is_empty() {
            skipped += 1;
        } else {
            anchors.push(Anchor { item: i, kind: AnchorKind::SegFore, word: Some(item.fg_word) });
            anchors.push(Anchor { item: i, kind: AnchorKind::DictFore, word: Some(item.fg_word) });
        }
        if subtitles && !item.bg_windows.is_empty() {
            match opts.seg_back {
                SegBackMode::PerWord => {
                    for &w in item.bg_dict.keys() {
                        anchors.push(Anchor { item: i, kind: AnchorKind::SegBack, word: Some(w) });
                    }
                }
                SegBackMode::Lumped => {
                    if !item.bg_dict.is_empty() {
                        anchors.push(Anchor { item: i, kind: AnchorKind::SegBack, word: None });
                    }
                }
            }
            for &w in item.bg_dict.keys() {
                anchors.push(Anchor { item: i, kind: AnchorKind::DictBack, word: Some(w) });
            }
        }
    }

    let classify = |a: &Anchor, clip: &ClipRef, d: &DictRef| -> PairClass {
        let anchor_item = &items[a.item];
        let other = &items[clip.item];
        let same_item = clip.item == a.item;
        let is_fg = clip.role == ClipRole::Fg;
        let v = anchor_item.fg_word;
        match a.kind {
            AnchorKind::SegFore => {
                if !(same_item && is_fg) {
                    PairClass::Ignored
                } else if d.word == v {
                    PairClass::Positive
                } else if opts.discards(v, d.word) {
                    PairClass::Ignored
                } else {
                    PairClass::Negative
                }
            }
            AnchorKind::DictFore => {
                if d.word != v {
                    PairClass::Ignored
                } else if same_item && is_fg {
                    PairClass::Positive
                } else if is_fg {
                    if other.fg_word != v && !opts.discards(other.fg_word, v) {
                        PairClass::Negative
                    } else {
                        PairClass::Ignored
                    }
                } else if subtitles
                    && !same_item
                    && !other.subtitle_tokens.contains(&v)
                    && !opts.discards_any(&other.subtitle_tokens, v)
                {
                    PairClass::Negative
                } else {
                    PairClass::Ignored
                }
            }
            AnchorKind::SegBack => {
                if !same_item || is_fg {
                    return PairClass::Ignored;
                }
                let u = d.word;
                let positive_word = match a.word {
                    Some(w) => u == w,
                    None => {
                        anchor_item.bg_dict.contains_key(&u)
                            || (u == v && !opts.fg_negative_for_background)
                    }
                };
                if positive_word {
                    PairClass::Positive
                } else if u == v {
                    if opts.fg_negative_for_background {
                        PairClass::Negative
                    } else {
                        PairClass::Ignored
                    }
                } else if anchor_item.subtitle_tokens.contains(&u)
                    || opts.discards_any(&anchor_item.subtitle_tokens, u)
                {
                    PairClass::Ignored
                } else {
                    PairClass::Negative
                }
            }
            AnchorKind::DictBack => {
                let w = a.word.expect("dict-back anchors carry a word");
                if d.word != w {
                    PairClass::Ignored
                } else if same_item && !is_fg {
                    PairClass::Positive
                } else if is_fg {
                    if other.fg_word != w && !opts.discards(other.fg_word, w) {
                        PairClass::Negative
                    } else {
                        PairClass::Ignored
                    }
                } else if !other.subtitle_tokens.contains(&w)
                    && !opts.discards_any(&other.subtitle_tokens, w)
                {
                    PairClass::Negative
                } else {
                    PairClass::Ignored
                }
            }
        }
    };

    let mut out = BagSet {
        anchors: Vec::new(),
        skipped_items: skipped,
    };
    for a in anchors {
        let mut positives = BTreeSet::new();
        let mut negatives = BTreeSet::new();
        for clip in &clips {
            for d in &videos {
                match classify(&a, clip, d) {
                    PairClass::Positive => {
                        positives.insert(PairRef { clip: *clip, dict: *d });
                    }
                    PairClass::Negative => {
                        negatives.insert(PairRef { clip: *clip, dict: *d });
                    }
                    PairClass::Ignored => {}
                }
            }
        }
        if !positives.is_empty() && !negatives.is_empty() {
            out.anchors.push(AnchoredBags {
                anchor: a,
                positives,
                negatives,
            });
        }
    }
    out
}

/// The label evidence available for a pair: the dictionary word provably
/// differs from what the clip shows. A foreground clip shows its annotated
/// word; a background clip shows neither its item's annotated word (which is
/// localized elsewhere) nor any word missing from the subtitle.
pub fn provably_mismatched(batch: &Minibatch, pair: &PairRef) -> bool {
    let item = &batch.items[pair.clip.item];
    let u = pair.dict.word;
    let absent = u != item.fg_word && !item.subtitle_tokens.contains(&u);
    match pair.clip.role {
        ClipRole::Fg => u != item.fg_word,
        ClipRole::Bg(_) => absent || u == item.fg_word,
    }
}

fn fmt_pair(out: &mut String, p: &PairRef, vocab: Option<&Vocabulary>) {
    let role = match p.clip.role {
        ClipRole::Fg => "fg".to_string(),
        ClipRole::Bg(k) => format!("bg{k}"),
    };
    let word = match vocab {
        Some(v) => v.word(p.dict.word).to_string(),
        None => p.dict.word.0.to_string(),
    };
    let _ = write!(out, " {}:{}~{}/{}", p.clip.item, role, word, p.dict.variant);
}

/// One line per anchor, anchors and pairs in a stable sort order.
pub fn dump_bags(bags: &BagSet, vocab: Option<&Vocabulary>) -> String {
    let mut anchors: Vec<&AnchoredBags> = bags.anchors.iter().collect();
    anchors.sort_by_key(|a| a.anchor);
    let mut out = String::new();
    for a in anchors {
        let word = match (a.anchor.word, vocab) {
            (Some(w), Some(v)) => v.word(w).to_string(),
            (Some(w), None) => w.0.to_string(),
            (None, _) => "*".to_string(),
        };
        let _ = write!(out, "{} item={} word={} |P|", a.anchor.kind.name(), a.anchor.item, word);
        for p in &a.positives {
            fmt_pair(&mut out, p, vocab);
        }
        out.push_str(" |N|");
        for p in &a.negatives {
            fmt_pair(&mut out, p, vocab);
        }
        out.push('\n');
    }
    out
}
