//! Attention permissions for a packed `[context/target visual tokens, text]`
//! sequence.
//!
//! Rules for a query `q` and key `k`:
//!
//! | query   | key     | permitted                                        |
//! |---------|---------|--------------------------------------------------|
//! | Context | Context | yes                                              |
//! | Context | Target  | no                                               |
//! | Target  | Context | yes                                              |
//! | Target  | Target  | block sets intersect, or always with cross-block |
//! | visual  | Text    | no                                               |
//! | Text    | Context | yes                                              |
//! | Text    | Target  | iff `text_sees_targets`                          |
//! | Text    | Text    | causal (`key position ≤ query position`)         |

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttnError {
    #[error("visual token at sequence index {index} follows a text token")]
    TextBeforeVisual { index: usize },
    #[error("target token at sequence index {index} has no block membership")]
    EmptyMembership { index: usize },
    #[error("text positions must increase along the sequence (index {index})")]
    TextOrder { index: usize },
}

/// Role of one token in the packed sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenRole {
    Context { patch: usize },
    /// A latent target token; `blocks` holds every target block containing the patch.
    Target { patch: usize, blocks: BTreeSet<usize> },
    Text { position: usize },
}

impl TokenRole {
    pub fn target(patch: usize, blocks: impl IntoIterator<Item = usize>) -> Self {
        TokenRole::Target {
            patch,
            blocks: blocks.into_iter().collect(),
        }
    }

    pub fn is_visual(&self) -> bool {
        !matches!(self, TokenRole::Text { .. })
    }

    pub fn is_target(&self) -> bool {
        matches!(self, TokenRole::Target { .. })
    }

    pub fn patch(&self) -> Option<usize> {
        match self {
            TokenRole::Context { patch } | TokenRole::Target { patch, .. } => Some(*patch),
            TokenRole::Text { .. } => None,
        }
    }
}

/// Ablation switches for the attention pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttnVariant {
    /// Let target tokens of different blocks attend to each other.
    pub tgt_cross_block: bool,
    /// Let caption tokens attend to target tokens.
    pub text_sees_targets: bool,
}

impl Default for AttnVariant {
    fn default() -> Self {
        Self {
            tgt_cross_block: false,
            text_sees_targets: true,
        }
    }
}

impl AttnVariant {
    /// The four combinations of the two switches.
    pub fn all() -> [AttnVariant; 4] {
        let v = |tgt_cross_block, text_sees_targets| AttnVariant {
            tgt_cross_block,
            text_sees_targets,
        };
        [v(false, true), v(true, true), v(false, false), v(true, false)]
    }
}

/// Square boolean permission matrix; row = query, column = key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(size * size);
        for q in 0..size {
            for k in 0..size {
                allow.push(f(q, k));
            }
        }
        Self { size, allow }
    }

    pub fn all_allow(size: usize) -> Self {
        Self::from_fn(size, |_, _| true)
    }

    pub fn causal(size: usize) -> Self {
        Self::from_fn(size, |q, k| k <= q)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.size + k]
    }

    fn set(&mut self, q: usize, k: usize) {
        self.allow[q * self.size + k] = true;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.size..(q + 1) * self.size]
    }

    pub fn count_allowed(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    /// True when every permission of `self` is also granted by `other`.
    pub fn is_subset_of(&self, other: &AttentionMask) -> bool {
        self.size == other.size && self.allow.iter().zip(&other.allow).all(|(&a, &b)| !a || b)
    }
}

fn validate(roles: &[TokenRole]) -> Result<(), AttnError> {
    let mut seen_text = false;
    let mut last_pos: Option<usize> = None;
    for (i, r) in roles.iter().enumerate() {
        match r {
            TokenRole::Text { position } => {
                if last_pos.is_some_and(|p| *position <= p) {
                    return Err(AttnError::TextOrder { index: i });
                }
                last_pos = Some(*position);
                seen_text = true;
            }
            _ if seen_text => return Err(AttnError::TextBeforeVisual { index: i }),
            TokenRole::Target { blocks, .. } if blocks.is_empty() => {
                return Err(AttnError::EmptyMembership { index: i })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Builds the permission matrix for a packed sequence.
pub fn build_mask(roles: &[TokenRole], v: AttnVariant) -> Result<AttentionMask, AttnError> {
    build(roles, v, false)
}

/// Negative-control variant that wrongly lets context tokens see targets.
#[doc(hidden)]
pub fn build_mask_tampered(roles: &[TokenRole], v: AttnVariant) -> Result<AttentionMask, AttnError> {
    build(roles, v, true)
}

fn build(roles: &[TokenRole], v: AttnVariant, tamper: bool) -> Result<AttentionMask, AttnError> {
    validate(roles)?;
    let s = roles.len();
    let mut ctx = Vec::new();
    let mut tgt = Vec::new();
    let mut text = Vec::new();
    for (i, r) in roles.iter().enumerate() {
        match r {
            TokenRole::Context { .. } => ctx.push(i),
            TokenRole::Target { .. } => tgt.push(i),
            TokenRole::Text { .. } => text.push(i),
        }
    }
    let blocks = |i: usize| match &roles[i] {
        TokenRole::Target { blocks, .. } => blocks,
        _ => unreachable!("target index"),
    };

    let mut m = AttentionMask {
        size: s,
        allow: vec![false; s * s],
    };
    for &q in &ctx {
        for &k in &ctx {
            m.set(q, k);
        }
        if tamper {
            for &k in &tgt {
                m.set(q, k);
            }
        }
    }
    for &q in &tgt {
        for &k in &ctx {
            m.set(q, k);
        }
        let qb = blocks(q);
        for &k in &tgt {
            if v.tgt_cross_block || blocks(k).iter().any(|b| qb.contains(b)) {
                m.set(q, k);
            }
        }
    }
    for (ti, &q) in text.iter().enumerate() {
        for &k in &ctx {
            m.set(q, k);
        }
        if v.text_sees_targets {
            for &k in &tgt {
                m.set(q, k);
            }
        }
        for &k in &text[..=ti] {
            m.set(q, k);
        }
    }
    Ok(m)
}

/// Reference construction that evaluates the rule table cell by cell.
/// Kept separate from [`build_mask`] so the two can be compared.
pub fn oracle_mask(roles: &[TokenRole], v: AttnVariant) -> Result<AttentionMask, AttnError> {
    validate(roles)?;
    let cell = |q: &TokenRole, k: &TokenRole| -> bool {
        use TokenRole::*;
        match (q, k) {
            (Context { .. }, Context { .. }) => true,
            (Context { .. }, Target { .. }) => false,
            (Target { .. }, Context { .. }) => true,
            (Target { blocks: a, .. }, Target { blocks: b, .. }) => {
                v.tgt_cross_block || !a.is_disjoint(b)
            }
            (Context { .. } | Target { .. }, Text { .. }) => false,
            (Text { .. }, Context { .. }) => true,
            (Text { .. }, Target { .. }) => v.text_sees_targets,
            (Text { position: i }, Text { position: j }) => j <= i,
        }
    };
    Ok(AttentionMask::from_fn(roles.len(), |q, k| cell(&roles[q], &roles[k])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpFormat {
    Text,
    Pgm,
}

/// Serialises a mask: `1`/`.` per cell for text, binary P5 (0 deny, 255 allow) for PGM.
pub fn dump_mask(m: &AttentionMask, format: DumpFormat) -> Vec<u8> {
    let s = m.size;
    match format {
        DumpFormat::Text => {
            let mut out = Vec::with_capacity(s * (s + 1));
            for q in 0..s {
                out.extend(m.row(q).iter().map(|&a| if a { b'1' } else { b'.' }));
                out.push(b'\n');
            }
            out
        }
        DumpFormat::Pgm => {
            let mut out = format!("P5\n{s} {s}\n255\n").into_bytes();
            out.extend(m.allow.iter().map(|&a| if a { 255u8 } else { 0 }));
            out
        }
    }
}
