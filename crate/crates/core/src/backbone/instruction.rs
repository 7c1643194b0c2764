//! Symbolic editing instructions.
//!
//! Instructions are short token sequences over a fixed vocabulary, paired
//! with the structured directives they encode. The token stream conditions
//! the transformer; the directives drive the programmatic judge and the
//! data factory. Encoding and decoding are exact inverses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed instruction vocabulary size (token ids are `0..VOCAB_SIZE`).
pub const VOCAB_SIZE: usize = 32;

/// Maximum reference index expressible as a token (`REF_1`..`REF_8`).
pub const MAX_REF_TOKENS: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum InstructionError {
    #[error("unknown instruction token `{0}`")]
    UnknownToken(String),
    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfRange { id: u16, vocab: usize },
    #[error("instruction ends mid-directive after `{0}`")]
    Truncated(&'static str),
    #[error("expected {expected} token, found `{found}`")]
    UnexpectedToken {
        expected: &'static str,
        found: String,
    },
    #[error("reference index {0} outside REF_1..REF_{MAX_REF_TOKENS}")]
    RefIndexOutOfRange(usize),
    #[error("color index {0} outside the 8-color palette")]
    ColorOutOfRange(usize),
}

/// One of the four target-canvas quadrants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellId {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl CellId {
    pub const ALL: [CellId; 4] = [
        CellId::TopLeft,
        CellId::TopRight,
        CellId::BottomLeft,
        CellId::BottomRight,
    ];

    pub fn index(self) -> usize {
        match self {
            CellId::TopLeft => 0,
            CellId::TopRight => 1,
            CellId::BottomLeft => 2,
            CellId::BottomRight => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// What a directive does with its source element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditAction {
    /// Place the element shown by the reference into `cell`.
    Place,
    /// Recolor the element at `cell` to palette color `to`.
    Recolor { to: usize },
    /// Move the element at `cell` to another cell.
    Move { to: CellId },
    /// Remove the element at `cell`.
    Remove,
}

/// One unit of instruction: which reference, what to do, where.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directive {
    /// 1-based reference index the directive reads from.
    pub ref_index: usize,
    pub action: EditAction,
    pub cell: CellId,
}

// Token id layout.
const TOK_PLACE: u16 = 0;
const TOK_RECOLOR: u16 = 1;
const TOK_MOVE: u16 = 2;
const TOK_REMOVE: u16 = 3;
const TOK_REF_BASE: u16 = 4; // REF_1..REF_8 -> 4..11
const TOK_CELL_BASE: u16 = 12; // CELL_TL, CELL_TR, CELL_BL, CELL_BR -> 12..15
const TOK_COLOR_BASE: u16 = 16; // COLOR_0..COLOR_7 -> 16..23

const CELL_NAMES: [&str; 4] = ["CELL_TL", "CELL_TR", "CELL_BL", "CELL_BR"];

/// Name of a token id, or `None` for reserved ids.
pub fn token_name(id: u16) -> Option<String> {
    match id {
        TOK_PLACE => Some("PLACE".into()),
        TOK_RECOLOR => Some("RECOLOR".into()),
        TOK_MOVE => Some("MOVE".into()),
        TOK_REMOVE => Some("REMOVE".into()),
        _ if (TOK_REF_BASE..TOK_REF_BASE + MAX_REF_TOKENS as u16).contains(&id) => {
            Some(format!("REF_{}", id - TOK_REF_BASE + 1))
        }
        _ if (TOK_CELL_BASE..TOK_CELL_BASE + 4).contains(&id) => {
            Some(CELL_NAMES[(id - TOK_CELL_BASE) as usize].into())
        }
        _ if (TOK_COLOR_BASE..TOK_COLOR_BASE + 8).contains(&id) => {
            Some(format!("COLOR_{}", id - TOK_COLOR_BASE))
        }
        _ => None,
    }
}

fn parse_token(name: &str) -> Result<u16, InstructionError> {
    match name {
        "PLACE" => Ok(TOK_PLACE),
        "RECOLOR" => Ok(TOK_RECOLOR),
        "MOVE" => Ok(TOK_MOVE),
        "REMOVE" => Ok(TOK_REMOVE),
        _ => {
            if let Some(rest) = name.strip_prefix("REF_") {
                let k: usize = rest
                    .parse()
                    .map_err(|_| InstructionError::UnknownToken(name.into()))?;
                if (1..=MAX_REF_TOKENS).contains(&k) {
                    return Ok(TOK_REF_BASE + (k - 1) as u16);
                }
                return Err(InstructionError::RefIndexOutOfRange(k));
            }
            if let Some(idx) = CELL_NAMES.iter().position(|&c| c == name) {
                return Ok(TOK_CELL_BASE + idx as u16);
            }
            if let Some(rest) = name.strip_prefix("COLOR_") {
                let j: usize = rest
                    .parse()
                    .map_err(|_| InstructionError::UnknownToken(name.into()))?;
                if j < 8 {
                    return Ok(TOK_COLOR_BASE + j as u16);
                }
                return Err(InstructionError::ColorOutOfRange(j));
            }
            Err(InstructionError::UnknownToken(name.into()))
        }
    }
}

/// A token sequence with its decoded directives. The two representations
/// are kept consistent by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    tokens: Vec<u16>,
    directives: Vec<Directive>,
}

impl Instruction {
    /// Encode directives into the canonical token stream.
    pub fn from_directives(directives: Vec<Directive>) -> Result<Self, InstructionError> {
        let mut tokens = Vec::new();
        for d in &directives {
            if !(1..=MAX_REF_TOKENS).contains(&d.ref_index) {
                return Err(InstructionError::RefIndexOutOfRange(d.ref_index));
            }
            let ref_token = TOK_REF_BASE + (d.ref_index - 1) as u16;
            let cell_token = TOK_CELL_BASE + d.cell.index() as u16;
            match d.action {
                EditAction::Place => tokens.extend([TOK_PLACE, ref_token, cell_token]),
                EditAction::Recolor { to } => {
                    if to >= 8 {
                        return Err(InstructionError::ColorOutOfRange(to));
                    }
                    tokens.extend([
                        TOK_RECOLOR,
                        ref_token,
                        cell_token,
                        TOK_COLOR_BASE + to as u16,
                    ]);
                }
                EditAction::Move { to } => tokens.extend([
                    TOK_MOVE,
                    ref_token,
                    cell_token,
                    TOK_CELL_BASE + to.index() as u16,
                ]),
                EditAction::Remove => tokens.extend([TOK_REMOVE, ref_token, cell_token]),
            }
        }
        Ok(Self { tokens, directives })
    }

    /// Decode a raw token stream back into directives.
    pub fn from_tokens(tokens: &[u16]) -> Result<Self, InstructionError> {
        for &id in tokens {
            if id as usize >= VOCAB_SIZE {
                return Err(InstructionError::TokenOutOfRange {
                    id,
                    vocab: VOCAB_SIZE,
                });
            }
        }
        let mut directives = Vec::new();
        let mut iter = tokens.iter().copied().peekable();
        let expect = |iter: &mut std::iter::Peekable<std::iter::Copied<std::slice::Iter<u16>>>,
                      what: &'static str,
                      check: fn(u16) -> bool|
         -> Result<u16, InstructionError> {
            match iter.next() {
                None => Err(InstructionError::Truncated(what)),
                Some(tok) if check(tok) => Ok(tok),
                Some(tok) => Err(InstructionError::UnexpectedToken {
                    expected: what,
                    found: token_name(tok).unwrap_or_else(|| format!("#{tok}")),
                }),
            }
        };
        let is_ref = |t: u16| (TOK_REF_BASE..TOK_REF_BASE + MAX_REF_TOKENS as u16).contains(&t);
        let is_cell = |t: u16| (TOK_CELL_BASE..TOK_CELL_BASE + 4).contains(&t);
        let is_color = |t: u16| (TOK_COLOR_BASE..TOK_COLOR_BASE + 8).contains(&t);

        while let Some(action_tok) = iter.next() {
            let ref_tok = expect(&mut iter, "reference", is_ref)?;
            let cell_tok = expect(&mut iter, "cell", is_cell)?;
            let ref_index = (ref_tok - TOK_REF_BASE) as usize + 1;
            let cell = CellId::from_index((cell_tok - TOK_CELL_BASE) as usize).unwrap();
            let action = match action_tok {
                TOK_PLACE => EditAction::Place,
                TOK_RECOLOR => {
                    let color_tok = expect(&mut iter, "color", is_color)?;
                    EditAction::Recolor {
                        to: (color_tok - TOK_COLOR_BASE) as usize,
                    }
                }
                TOK_MOVE => {
                    let to_tok = expect(&mut iter, "destination cell", is_cell)?;
                    EditAction::Move {
                        to: CellId::from_index((to_tok - TOK_CELL_BASE) as usize).unwrap(),
                    }
                }
                TOK_REMOVE => EditAction::Remove,
                other => {
                    return Err(InstructionError::UnexpectedToken {
                        expected: "action",
                        found: token_name(other).unwrap_or_else(|| format!("#{other}")),
                    })
                }
            };
            directives.push(Directive {
                ref_index,
                action,
                cell,
            });
        }
        Ok(Self {
            tokens: tokens.to_vec(),
            directives,
        })
    }

    /// Parse the whitespace-separated text form, e.g.
    /// `"PLACE REF_1 CELL_TL PLACE REF_2 CELL_BR"`.
    pub fn parse(text: &str) -> Result<Self, InstructionError> {
        let tokens: Vec<u16> = text
            .split_whitespace()
            .map(parse_token)
            .collect::<Result<_, _>>()?;
        Self::from_tokens(&tokens)
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn directives(&self) -> &[Directive] {
        &self.directives
    }

    /// Highest reference index any directive touches (0 when empty).
    pub fn max_ref_index(&self) -> usize {
        self.directives.iter().map(|d| d.ref_index).max().unwrap_or(0)
    }

    /// Whitespace-separated token names.
    pub fn text(&self) -> String {
        self.tokens
            .iter()
            .map(|&t| token_name(t).expect("encoded tokens are always named"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Token names as a vector (dataset manifest form).
    pub fn token_names(&self) -> Vec<String> {
        self.tokens
            .iter()
            .map(|&t| token_name(t).expect("encoded tokens are always named"))
            .collect()
    }
}
