//! Interleaved text/image token sequences and their index sets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("sequence has no segments")]
    Empty,
    #[error("segment {0} has zero length")]
    ZeroLength(usize),
    #[error("final segment must be text")]
    TrailingImage,
    #[error("invalid segment spec `{0}` (expected e.g. `T:8,I:92,T:4`)")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    Text,
    Image,
}

/// A segment as requested by a caller: kind and token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub kind: SegmentKind,
    pub length: usize,
}

impl SegmentSpec {
    pub fn text(length: usize) -> Self {
        Self {
            kind: SegmentKind::Text,
            length,
        }
    }

    pub fn image(length: usize) -> Self {
        Self {
            kind: SegmentKind::Image,
            length,
        }
    }
}

/// Parses the compact `T:8,I:92,T:4` notation.
pub fn parse_segments(s: &str) -> Result<Vec<SegmentSpec>, LayoutError> {
    s.split(',')
        .map(|part| {
            let bad = || LayoutError::Parse(part.trim().to_string());
            let (kind, len) = part.trim().split_once(':').ok_or_else(bad)?;
            let kind = match kind.trim() {
                "T" | "t" => SegmentKind::Text,
                "I" | "i" => SegmentKind::Image,
                _ => return Err(bad()),
            };
            let length = len.trim().parse().map_err(|_| bad())?;
            Ok(SegmentSpec { kind, length })
        })
        .collect()
}

pub fn format_segments(specs: &[SegmentSpec]) -> String {
    specs
        .iter()
        .map(|s| match s.kind {
            SegmentKind::Text => format!("T:{}", s.length),
            SegmentKind::Image => format!("I:{}", s.length),
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// A placed segment. `ordinal` is 1-based among segments of the same kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub length: usize,
    pub ordinal: usize,
    pub start: usize,
}

impl Segment {
    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.length
    }
}

/// Positions of every text segment and every image within the flat sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    total_len: usize,
    text_indices: Vec<Vec<usize>>,
    image_indices: Vec<Vec<usize>>,
}

impl Layout {
    pub fn new(specs: &[SegmentSpec]) -> Result<Self, LayoutError> {
        let last = specs.last().ok_or(LayoutError::Empty)?;
        if let Some(i) = specs.iter().position(|s| s.length == 0) {
            return Err(LayoutError::ZeroLength(i));
        }
        if last.kind != SegmentKind::Text {
            return Err(LayoutError::TrailingImage);
        }
        let mut segments = Vec::with_capacity(specs.len());
        let mut text_indices = Vec::new();
        let mut image_indices = Vec::new();
        let mut start = 0;
        for spec in specs {
            let bucket = match spec.kind {
                SegmentKind::Text => &mut text_indices,
                SegmentKind::Image => &mut image_indices,
            };
            bucket.push((start..start + spec.length).collect());
            segments.push(Segment {
                kind: spec.kind,
                length: spec.length,
                ordinal: bucket.len(),
                start,
            });
            start += spec.length;
        }
        Ok(Self {
            segments,
            total_len: start,
            text_indices,
            image_indices,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn specs(&self) -> Vec<SegmentSpec> {
        self.segments
            .iter()
            .map(|s| SegmentSpec {
                kind: s.kind,
                length: s.length,
            })
            .collect()
    }

    /// Total token count `S`.
    pub fn len(&self) -> usize {
        self.total_len
    }

    pub fn is_empty(&self) -> bool {
        self.total_len == 0
    }

    /// Index of the final prompt token (the query row every pruning rule reads).
    pub fn last_index(&self) -> usize {
        self.total_len - 1
    }

    pub fn text_indices(&self) -> &[Vec<usize>] {
        &self.text_indices
    }

    pub fn image_indices(&self) -> &[Vec<usize>] {
        &self.image_indices
    }

    pub fn text_union(&self) -> Vec<usize> {
        self.text_indices.iter().flatten().copied().collect()
    }

    pub fn vision_index_union(&self) -> Vec<usize> {
        self.image_indices.iter().flatten().copied().collect()
    }

    pub fn num_vision_tokens(&self) -> usize {
        self.image_indices.iter().map(Vec::len).sum()
    }

    pub fn num_text_tokens(&self) -> usize {
        self.total_len - self.num_vision_tokens()
    }

    pub fn is_vision(&self, pos: usize) -> bool {
        self.segments
            .iter()
            .any(|s| s.kind == SegmentKind::Image && s.indices().contains(&pos))
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_segments(&self.specs()))
    }
}

impl FromStr for Layout {
    type Err = LayoutError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Layout::new(&parse_segments(s)?)
    }
}

/// A layout plus synthetic token ids, one per position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultimodalSequence {
    pub layout: Layout,
    pub token_ids: Vec<u32>,
}

impl MultimodalSequence {
    /// Builds the sequence; token ids are drawn uniformly from `[0, vocab_size)`.
    pub fn build(specs: &[SegmentSpec], seed: u64, vocab_size: usize) -> Result<Self, LayoutError> {
        let layout = Layout::new(specs)?;
        let mut rng = SeededRng::derived(seed, 0x5e9);
        let token_ids = (0..layout.len())
            .map(|_| rng.below(vocab_size.max(1) as u64) as u32)
            .collect();
        Ok(Self { layout, token_ids })
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_layout() {
        let l = Layout::new(&[
            SegmentSpec::text(2),
            SegmentSpec::image(3),
            SegmentSpec::text(1),
        ])
        .unwrap();
        assert_eq!(l.len(), 6);
        assert_eq!(l.text_union(), vec![0, 1, 5]);
        assert_eq!(l.text_indices(), &[vec![0, 1], vec![5]]);
        assert_eq!(l.vision_index_union(), vec![2, 3, 4]);
        assert_eq!(l.segments()[2].ordinal, 2);
        assert!(l.is_vision(3) && !l.is_vision(5));
    }

    #[test]
    fn text_only() {
        let l = Layout::new(&[SegmentSpec::text(1)]).unwrap();
        assert_eq!(l.len(), 1);
        assert!(l.vision_index_union().is_empty());
        assert!(l.image_indices().is_empty());
    }

    #[test]
    fn two_images_count() {
        let l: Layout = "T:4,I:10,I:10,T:2".parse().unwrap();
        // Count by hand over the flat sequence.
        let counted = (0..l.len()).filter(|&p| (4..24).contains(&p)).count();
        assert_eq!(l.vision_index_union().len(), counted);
        assert_eq!(counted, 20);
        assert_eq!(l.image_indices()[1], (14..24).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_layouts() {
        assert_eq!(Layout::new(&[]), Err(LayoutError::Empty));
        assert_eq!(
            Layout::new(&[SegmentSpec::text(1), SegmentSpec::image(2)]),
            Err(LayoutError::TrailingImage)
        );
        assert_eq!(
            Layout::new(&[SegmentSpec::image(0), SegmentSpec::text(1)]),
            Err(LayoutError::ZeroLength(0))
        );
        assert!(matches!(
            "T:x".parse::<Layout>(),
            Err(LayoutError::Parse(_))
        ));
        assert!(matches!(
            "Q:3".parse::<Layout>(),
            Err(LayoutError::Parse(_))
        ));
        assert!(matches!("".parse::<Layout>(), Err(LayoutError::Parse(_))));
    }

    #[test]
    fn display_round_trip() {
        let l: Layout = "T:8,I:92,T:4".parse().unwrap();
        assert_eq!(l.to_string(), "T:8,I:92,T:4");
    }

    #[test]
    fn token_ids_seeded() {
        let specs = [SegmentSpec::image(5), SegmentSpec::text(5)];
        let a = MultimodalSequence::build(&specs, 11, 50).unwrap();
        let b = MultimodalSequence::build(&specs, 11, 50).unwrap();
        let c = MultimodalSequence::build(&specs, 12, 50).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.token_ids, c.token_ids);
        assert!(a.token_ids.iter().all(|&t| t < 50));
    }

    fn specs_strategy() -> impl Strategy<Value = Vec<SegmentSpec>> {
        (
            prop::collection::vec((any::<bool>(), 1usize..20), 0..8),
            1usize..20,
        )
            .prop_map(|(body, tail)| {
                let mut v: Vec<SegmentSpec> = body
                    .into_iter()
                    .map(|(img, n)| {
                        if img {
                            SegmentSpec::image(n)
                        } else {
                            SegmentSpec::text(n)
                        }
                    })
                    .collect();
                v.push(SegmentSpec::text(tail));
                v
            })
    }

    proptest! {
        #[test]
        fn index_sets_partition(specs in specs_strategy()) {
            let l = Layout::new(&specs).unwrap();
            let mut seen = vec![0u8; l.len()];
            for set in l.text_indices().iter().chain(l.image_indices()) {
                prop_assert!(set.windows(2).all(|w| w[1] == w[0] + 1));
                for &i in set {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert_eq!(l.len(), specs.iter().map(|s| s.length).sum::<usize>());
            let vision: usize = specs
                .iter()
                .filter(|s| s.kind == SegmentKind::Image)
                .map(|s| s.length)
                .sum();
            prop_assert_eq!(l.vision_index_union().len(), vision);
        }
    }
}
