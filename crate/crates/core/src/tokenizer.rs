//! The box <-> token codec: per-attribute vocabularies, uniform
//! quantization, object ordering, scene sequence assembly, and the
//! position -> legal-token-kind schedule.
//!
//! Token ID space: `PAD = 0`, `START = 1`, `END = 2`, categories at
//! `[3, 3 + C)`, then one contiguous segment per numeric attribute in the
//! canonical order x, y, z, l, w, h, yaw, vx, vy. Every ID in
//! `[0, vocab_size)` belongs to exactly one segment.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{range_to_ego, yaw_normalize, Box3D};

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;

/// Tokens per encoded object: one category slot plus nine numeric slots.
pub const TOKENS_PER_BOX: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NumericAttr {
    X,
    Y,
    Z,
    L,
    W,
    H,
    Yaw,
    Vx,
    Vy,
}

impl NumericAttr {
    pub const ALL: [NumericAttr; 9] = [
        NumericAttr::X,
        NumericAttr::Y,
        NumericAttr::Z,
        NumericAttr::L,
        NumericAttr::W,
        NumericAttr::H,
        NumericAttr::Yaw,
        NumericAttr::Vx,
        NumericAttr::Vy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NumericAttr::X => "x",
            NumericAttr::Y => "y",
            NumericAttr::Z => "z",
            NumericAttr::L => "l",
            NumericAttr::W => "w",
            NumericAttr::H => "h",
            NumericAttr::Yaw => "yaw",
            NumericAttr::Vx => "vx",
            NumericAttr::Vy => "vy",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|a| *a == self).unwrap()
    }
}

/// Uniform binning of one numeric attribute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttrSpec {
    pub min: f64,
    pub width: f64,
    pub bins: usize,
}

impl AttrSpec {
    pub fn max(&self) -> f64 {
        self.min + self.width * self.bins as f64
    }
}

/// What a token slot within an object may hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Category,
    Numeric(NumericAttr),
}

impl SlotKind {
    pub fn name(self) -> &'static str {
        match self {
            SlotKind::Category => "category",
            SlotKind::Numeric(a) => a.name(),
        }
    }
}

/// Position of the class token within each 10-token object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenOrder {
    #[default]
    ClassFirst,
    ClassMiddle,
    ClassLast,
}

impl TokenOrder {
    /// Slot kinds for the ten within-object positions.
    pub fn slots(self) -> [SlotKind; TOKENS_PER_BOX] {
        use NumericAttr::*;
        use SlotKind::{Category, Numeric};
        match self {
            TokenOrder::ClassFirst => [
                Category,
                Numeric(X),
                Numeric(Y),
                Numeric(Z),
                Numeric(L),
                Numeric(W),
                Numeric(H),
                Numeric(Yaw),
                Numeric(Vx),
                Numeric(Vy),
            ],
            // Class after the box location.
            TokenOrder::ClassMiddle => [
                Numeric(X),
                Numeric(Y),
                Numeric(Z),
                Category,
                Numeric(L),
                Numeric(W),
                Numeric(H),
                Numeric(Yaw),
                Numeric(Vx),
                Numeric(Vy),
            ],
            TokenOrder::ClassLast => [
                Numeric(X),
                Numeric(Y),
                Numeric(Z),
                Numeric(L),
                Numeric(W),
                Numeric(H),
                Numeric(Yaw),
                Numeric(Vx),
                Numeric(Vy),
                Category,
            ],
        }
    }
}

/// Token classification of a single ID.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Start,
    End,
    Category(usize),
    Numeric(NumericAttr, usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("non-finite value {value} for attribute {attr}")]
    NonFinite { attr: &'static str, value: f64 },
    #[error("token {token} is not in a numeric segment")]
    NotNumeric { token: u32 },
    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    OutOfVocab { token: u32, vocab_size: u32 },
    #[error("category {category} out of range (layout has {categories} categories)")]
    CategoryOutOfRange { category: usize, categories: usize },
    #[error("sequence does not begin with START")]
    MissingStart,
    #[error("sequence does not end with END")]
    MissingEnd,
    #[error("interior length {len} is not a multiple of {TOKENS_PER_BOX}")]
    BadBodyLength { len: usize },
    #[error("token {token} at interior position {position} is not a {expected} token")]
    WrongSegment {
        position: usize,
        token: u32,
        expected: &'static str,
    },
    #[error("point counts are required for point-count ordering")]
    MissingPointCounts,
}

/// The per-attribute token-ID partition defining the whole codec.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabLayout {
    pub categories: usize,
    pub attrs: [AttrSpec; 9],
    pub token_order: TokenOrder,
    seg_starts: [u32; 9],
    vocab_size: u32,
}

impl VocabLayout {
    pub fn new(categories: usize, attrs: [AttrSpec; 9], token_order: TokenOrder) -> Self {
        assert!(categories > 0, "need at least one category");
        for a in &attrs {
            assert!(a.bins > 0 && a.width > 0.0 && a.min.is_finite());
        }
        let mut seg_starts = [0u32; 9];
        let mut next = 3 + categories as u32;
        for (i, a) in attrs.iter().enumerate() {
            seg_starts[i] = next;
            next += a.bins as u32;
        }
        VocabLayout {
            categories,
            attrs,
            token_order,
            seg_starts,
            vocab_size: next,
        }
    }

    /// The published binning: 0.05 m center/size bins, full-circle yaw
    /// tiling over 125 bins, 0.1 m/s velocity bins.
    pub fn standard(categories: usize) -> Self {
        let attrs = [
            AttrSpec { min: -54.0, width: 0.05, bins: 2160 }, // x
            AttrSpec { min: -54.0, width: 0.05, bins: 2160 }, // y
            AttrSpec { min: -5.0, width: 0.05, bins: 160 },   // z
            AttrSpec { min: 0.0, width: 0.05, bins: 600 },    // l
            AttrSpec { min: 0.0, width: 0.05, bins: 200 },    // w
            AttrSpec { min: 0.0, width: 0.05, bins: 200 },    // h
            AttrSpec { min: -PI, width: 2.0 * PI / 125.0, bins: 125 }, // yaw
            AttrSpec { min: -30.0, width: 0.1, bins: 600 },   // vx
            AttrSpec { min: -30.0, width: 0.1, bins: 600 },   // vy
        ];
        VocabLayout::new(categories, attrs, TokenOrder::ClassFirst)
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn attr(&self, a: NumericAttr) -> &AttrSpec {
        &self.attrs[a.index()]
    }

    pub fn segment_start(&self, a: NumericAttr) -> u32 {
        self.seg_starts[a.index()]
    }

    pub fn category_token(&self, category: usize) -> Result<u32, CodecError> {
        if category >= self.categories {
            return Err(CodecError::CategoryOutOfRange {
                category,
                categories: self.categories,
            });
        }
        Ok(3 + category as u32)
    }

    /// Classifies a token ID into the unique segment that contains it.
    pub fn kind_of(&self, token: u32) -> Result<TokenKind, CodecError> {
        match token {
            PAD => return Ok(TokenKind::Pad),
            START => return Ok(TokenKind::Start),
            END => return Ok(TokenKind::End),
            _ => {}
        }
        let cat_end = 3 + self.categories as u32;
        if token < cat_end {
            return Ok(TokenKind::Category((token - 3) as usize));
        }
        for a in NumericAttr::ALL {
            let start = self.segment_start(a);
            let end = start + self.attr(a).bins as u32;
            if token >= start && token < end {
                return Ok(TokenKind::Numeric(a, (token - start) as usize));
            }
        }
        Err(CodecError::OutOfVocab {
            token,
            vocab_size: self.vocab_size,
        })
    }

    /// The slot kind demanded at interior offset `k` plus whether END is
    /// legal there (object boundaries only).
    pub fn expected_kind(&self, interior_offset: usize) -> LegalTokens {
        let slot_idx = interior_offset % TOKENS_PER_BOX;
        LegalTokens {
            slot: self.token_order.slots()[slot_idx],
            allow_end: slot_idx == 0,
        }
    }

    /// Half the bin width: the worst-case reconstruction error per attribute.
    pub fn half_width(&self, a: NumericAttr) -> f64 {
        self.attr(a).width / 2.0
    }
}

/// The legal token set at one interior sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LegalTokens {
    pub slot: SlotKind,
    pub allow_end: bool,
}

impl LegalTokens {
    pub fn contains(&self, token: u32, layout: &VocabLayout) -> bool {
        if token == END {
            return self.allow_end;
        }
        match (self.slot, layout.kind_of(token)) {
            (SlotKind::Category, Ok(TokenKind::Category(_))) => true,
            (SlotKind::Numeric(want), Ok(TokenKind::Numeric(got, _))) => want == got,
            _ => false,
        }
    }

    /// Contiguous ID ranges legal at this position, END excluded.
    pub fn segment_range(&self, layout: &VocabLayout) -> std::ops::Range<u32> {
        match self.slot {
            SlotKind::Category => 3..3 + layout.categories as u32,
            SlotKind::Numeric(a) => {
                let s = layout.segment_start(a);
                s..s + layout.attr(a).bins as u32
            }
        }
    }
}

/// Quantizes a numeric attribute value: out-of-range values clamp to the
/// first/last bin.
pub fn quantize(value: f64, attr: NumericAttr, layout: &VocabLayout) -> Result<u32, CodecError> {
    if !value.is_finite() {
        return Err(CodecError::NonFinite {
            attr: attr.name(),
            value,
        });
    }
    let spec = layout.attr(attr);
    let raw = ((value - spec.min) / spec.width).floor();
    let bin = raw.clamp(0.0, (spec.bins - 1) as f64) as u32;
    Ok(layout.segment_start(attr) + bin)
}

/// Bin-center reconstruction of a numeric token.
pub fn dequantize(token: u32, layout: &VocabLayout) -> Result<f64, CodecError> {
    match layout.kind_of(token)? {
        TokenKind::Numeric(attr, bin) => {
            let spec = layout.attr(attr);
            Ok(spec.min + (bin as f64 + 0.5) * spec.width)
        }
        _ => Err(CodecError::NotNumeric { token }),
    }
}

/// Encodes one box as its 10-token slot sequence.
pub fn encode_box(b: &Box3D, layout: &VocabLayout) -> Result<[u32; TOKENS_PER_BOX], CodecError> {
    let mut out = [0u32; TOKENS_PER_BOX];
    for (slot, tok) in layout.token_order.slots().iter().zip(out.iter_mut()) {
        *tok = match slot {
            SlotKind::Category => layout.category_token(b.category)?,
            SlotKind::Numeric(a) => {
                let v = match a {
                    NumericAttr::X => b.x,
                    NumericAttr::Y => b.y,
                    NumericAttr::Z => b.z,
                    NumericAttr::L => b.l,
                    NumericAttr::W => b.w,
                    NumericAttr::H => b.h,
                    NumericAttr::Yaw => b.yaw,
                    NumericAttr::Vx => b.vx,
                    NumericAttr::Vy => b.vy,
                };
                quantize(v, *a, layout)?
            }
        };
    }
    Ok(out)
}

/// Inverse of [`encode_box`]: bin-center values, yaw normalized. Errors name
/// the offending slot position when a token sits in the wrong segment.
pub fn decode_box(tokens: &[u32], layout: &VocabLayout) -> Result<Box3D, CodecError> {
    assert_eq!(tokens.len(), TOKENS_PER_BOX);
    let mut b = Box3D {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        l: 0.0,
        w: 0.0,
        h: 0.0,
        yaw: 0.0,
        vx: 0.0,
        vy: 0.0,
        category: 0,
    };
    for (pos, (slot, &tok)) in layout.token_order.slots().iter().zip(tokens).enumerate() {
        let kind = layout.kind_of(tok)?;
        match (slot, kind) {
            (SlotKind::Category, TokenKind::Category(c)) => b.category = c,
            (SlotKind::Numeric(want), TokenKind::Numeric(got, _)) if *want == got => {
                let v = dequantize(tok, layout)?;
                match want {
                    NumericAttr::X => b.x = v,
                    NumericAttr::Y => b.y = v,
                    NumericAttr::Z => b.z = v,
                    NumericAttr::L => b.l = v,
                    NumericAttr::W => b.w = v,
                    NumericAttr::H => b.h = v,
                    NumericAttr::Yaw => b.yaw = yaw_normalize(v),
                    NumericAttr::Vx => b.vx = v,
                    NumericAttr::Vy => b.vy = v,
                }
            }
            _ => {
                return Err(CodecError::WrongSegment {
                    position: pos,
                    token: tok,
                    expected: slot.name(),
                })
            }
        }
    }
    Ok(b)
}

/// How objects are arranged into the scene sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingStrategy {
    NearToFar,
    Random(u64),
    PointCountDescending,
}

/// Permutes boxes per the strategy. Near-to-far sorts by ascending ego range
/// with ties broken by ascending `(x, y, category)`; random is a seeded
/// shuffle; point-count sorts descending and needs `point_counts`.
pub fn order_boxes(
    boxes: &[Box3D],
    strategy: OrderingStrategy,
    point_counts: Option<&[usize]>,
) -> Result<Vec<Box3D>, CodecError> {
    let mut out: Vec<Box3D> = boxes.to_vec();
    match strategy {
        OrderingStrategy::NearToFar => {
            out.sort_by(|a, b| {
                (range_to_ego(a), a.x, a.y, a.category)
                    .partial_cmp(&(range_to_ego(b), b.x, b.y, b.category))
                    .expect("finite box fields")
            });
        }
        OrderingStrategy::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.shuffle(&mut rng);
        }
        OrderingStrategy::PointCountDescending => {
            let counts = point_counts.ok_or(CodecError::MissingPointCounts)?;
            assert_eq!(counts.len(), boxes.len());
            let mut idx: Vec<usize> = (0..boxes.len()).collect();
            idx.sort_by(|&i, &j| counts[j].cmp(&counts[i]));
            out = idx.into_iter().map(|i| boxes[i]).collect();
        }
    }
    Ok(out)
}

/// A `START ... END` token stream encoding an ordered set of boxes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSequence(pub Vec<u32>);

impl SceneSequence {
    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    /// Tokens between START and END.
    pub fn interior(&self) -> &[u32] {
        &self.0[1..self.0.len() - 1]
    }

    pub fn num_boxes(&self) -> usize {
        (self.0.len() - 2) / TOKENS_PER_BOX
    }

    /// Checks the full sequence contract against a layout.
    pub fn validate(&self, layout: &VocabLayout) -> Result<(), CodecError> {
        if self.0.first() != Some(&START) {
            return Err(CodecError::MissingStart);
        }
        if self.0.last() != Some(&END) {
            return Err(CodecError::MissingEnd);
        }
        let interior = self.interior();
        if interior.len() % TOKENS_PER_BOX != 0 {
            return Err(CodecError::BadBodyLength {
                len: interior.len(),
            });
        }
        for (k, &tok) in interior.iter().enumerate() {
            let legal = layout.expected_kind(k);
            if !legal.contains(tok, layout) || tok == END {
                return Err(CodecError::WrongSegment {
                    position: k,
                    token: tok,
                    expected: legal.slot.name(),
                });
            }
        }
        Ok(())
    }
}

/// Orders boxes, encodes each, and wraps with START/END.
pub fn encode_scene(
    boxes: &[Box3D],
    strategy: OrderingStrategy,
    point_counts: Option<&[usize]>,
    layout: &VocabLayout,
) -> Result<SceneSequence, CodecError> {
    let ordered = order_boxes(boxes, strategy, point_counts)?;
    let mut tokens = Vec::with_capacity(2 + TOKENS_PER_BOX * ordered.len());
    tokens.push(START);
    for b in &ordered {
        tokens.extend_from_slice(&encode_box(b, layout)?);
    }
    tokens.push(END);
    Ok(SceneSequence(tokens))
}

/// Inverse of [`encode_scene`]: boxes in sequence order.
pub fn decode_scene(seq: &SceneSequence, layout: &VocabLayout) -> Result<Vec<Box3D>, CodecError> {
    if seq.0.first() != Some(&START) {
        return Err(CodecError::MissingStart);
    }
    if seq.0.last() != Some(&END) {
        return Err(CodecError::MissingEnd);
    }
    let interior = seq.interior();
    if interior.len() % TOKENS_PER_BOX != 0 {
        return Err(CodecError::BadBodyLength {
            len: interior.len(),
        });
    }
    let mut boxes = Vec::with_capacity(interior.len() / TOKENS_PER_BOX);
    for (i, chunk) in interior.chunks_exact(TOKENS_PER_BOX).enumerate() {
        boxes.push(decode_box(chunk, layout).map_err(|e| match e {
            // Re-anchor slot-local positions to the interior offset.
            CodecError::WrongSegment {
                position,
                token,
                expected,
            } => CodecError::WrongSegment {
                position: i * TOKENS_PER_BOX + position,
                token,
                expected,
            },
            other => other,
        })?);
    }
    Ok(boxes)
}
