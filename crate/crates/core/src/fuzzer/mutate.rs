//! Mutation and crossover operators.

use rand::Rng;

use super::Token;

/// Mutation operators. Bit index 0 is the most significant bit of a byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MutationOp {
    Bitflip { bit: u8 },
    Byteflip,
    Arith8 { delta: i8 },
    InsertBytes,
    OverwriteBytes,
    Delete { len: usize },
    DictInsert,
}

impl MutationOp {
    pub fn name(&self) -> &'static str {
        match self {
            MutationOp::Bitflip { .. } => "bitflip",
            MutationOp::Byteflip => "byteflip",
            MutationOp::Arith8 { .. } => "arith8",
            MutationOp::InsertBytes => "insert-bytes",
            MutationOp::OverwriteBytes => "overwrite-bytes",
            MutationOp::Delete { .. } => "delete",
            MutationOp::DictInsert => "dict-insert",
        }
    }
}

/// A complete description of one edit.
///
/// `inserted` holds the bytes present in the child at `position` after the
/// edit: the new byte for the single-byte operators, the inserted or written
/// run for the insert/overwrite operators, and nothing for deletions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutationRecord {
    pub operator: MutationOp,
    pub position: usize,
    pub inserted: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("mutation does not apply to a parent of {len} bytes")]
pub struct ReplayError {
    pub len: usize,
}

/// Re-applies `record` to `parent`, reproducing the child.
pub fn replay(parent: &[u8], record: &MutationRecord) -> Result<Vec<u8>, ReplayError> {
    let err = ReplayError { len: parent.len() };
    let pos = record.position;
    let mut child = parent.to_vec();
    match record.operator {
        MutationOp::Bitflip { bit } => {
            let b = child.get_mut(pos).ok_or(err)?;
            if bit > 7 {
                return Err(err);
            }
            *b ^= 0x80 >> bit;
        }
        MutationOp::Byteflip => *child.get_mut(pos).ok_or(err)? ^= 0xff,
        MutationOp::Arith8 { delta } => {
            let b = child.get_mut(pos).ok_or(err)?;
            *b = b.wrapping_add(delta as u8);
        }
        MutationOp::InsertBytes | MutationOp::DictInsert => {
            if pos > child.len() {
                return Err(err);
            }
            child.splice(pos..pos, record.inserted.iter().copied());
        }
        MutationOp::OverwriteBytes => {
            let end = pos + record.inserted.len();
            if end > child.len() {
                return Err(err);
            }
            child[pos..end].copy_from_slice(&record.inserted);
        }
        MutationOp::Delete { len } => {
            if len == 0 || pos + len > child.len() {
                return Err(err);
            }
            child.drain(pos..pos + len);
        }
    }
    Ok(child)
}

fn single_byte(parent: &[u8], op: MutationOp, pos: usize) -> (Vec<u8>, MutationRecord) {
    let mut record = MutationRecord {
        operator: op,
        position: pos,
        inserted: Vec::new(),
    };
    let child = replay(parent, &record).expect("position drawn in range");
    record.inserted = vec![child[pos]];
    (child, record)
}

/// Applies one randomly chosen mutation. The child always differs from the
/// parent. `max_len` bounds growth: insertions that would exceed it are
/// replaced by another operator.
pub fn mutate(
    parent: &[u8],
    rng: &mut impl Rng,
    dictionary: &[Token],
    max_len: usize,
) -> (Vec<u8>, MutationRecord) {
    assert!(!parent.is_empty(), "mutate needs a non-empty parent");
    let len = parent.len();
    loop {
        let pick = rng.gen_range(0..100);
        let pos = rng.gen_range(0..len);
        let grow_ok = len < max_len;
        match pick {
            0..=19 => {
                let bit = rng.gen_range(0..8);
                return single_byte(parent, MutationOp::Bitflip { bit }, pos);
            }
            20..=27 => return single_byte(parent, MutationOp::Byteflip, pos),
            28..=41 => {
                let mag: i8 = rng.gen_range(1..=35);
                let delta = if rng.gen_bool(0.5) { mag } else { -mag };
                return single_byte(parent, MutationOp::Arith8 { delta }, pos);
            }
            42..=51 if grow_ok => {
                let at = rng.gen_range(0..=len);
                let inserted: Vec<u8> = if rng.gen_bool(0.5) {
                    let n = rng.gen_range(1..=4);
                    (0..n).map(|_| rng.gen()).collect()
                } else {
                    let n = rng.gen_range(1..=len.min(8));
                    let from = rng.gen_range(0..=len - n);
                    parent[from..from + n].to_vec()
                };
                let inserted = clamp_growth(inserted, len, max_len);
                let record = MutationRecord {
                    operator: MutationOp::InsertBytes,
                    position: at,
                    inserted,
                };
                let child = replay(parent, &record).expect("in range");
                return (child, record);
            }
            52..=61 => {
                let n = rng.gen_range(1..=4).min(len - pos);
                let inserted: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
                if inserted == parent[pos..pos + n] {
                    continue;
                }
                let record = MutationRecord {
                    operator: MutationOp::OverwriteBytes,
                    position: pos,
                    inserted,
                };
                let child = replay(parent, &record).expect("in range");
                return (child, record);
            }
            62..=75 => {
                if len == 1 {
                    continue;
                }
                let n = rng.gen_range(1..=(len - 1).min(16));
                let at = rng.gen_range(0..=len - n);
                let record = MutationRecord {
                    operator: MutationOp::Delete { len: n },
                    position: at,
                    inserted: Vec::new(),
                };
                let child = replay(parent, &record).expect("in range");
                return (child, record);
            }
            76..=99 if grow_ok && !dictionary.is_empty() => {
                let token = &dictionary[rng.gen_range(0..dictionary.len())];
                let at = rng.gen_range(0..=len);
                let record = MutationRecord {
                    operator: MutationOp::DictInsert,
                    position: at,
                    inserted: clamp_growth(token.bytes().to_vec(), len, max_len),
                };
                let child = replay(parent, &record).expect("in range");
                return (child, record);
            }
            _ => continue,
        }
    }
}

fn clamp_growth(mut bytes: Vec<u8>, len: usize, max_len: usize) -> Vec<u8> {
    bytes.truncate(max_len.saturating_sub(len).max(1));
    bytes
}

/// Prefix of `a` up to `cut_a` followed by the suffix of `b` from `cut_b`.
pub fn splice(a: &[u8], b: &[u8], cut_a: usize, cut_b: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(cut_a + b.len() - cut_b);
    out.extend_from_slice(&a[..cut_a]);
    out.extend_from_slice(&b[cut_b..]);
    out
}

/// Splices `a` and `b` at random cuts. The prefix of `a` and the suffix of
/// `b` are both non-empty.
pub fn crossover(a: &[u8], b: &[u8], rng: &mut impl Rng) -> Vec<u8> {
    assert!(!a.is_empty() && !b.is_empty(), "crossover needs non-empty inputs");
    let cut_a = rng.gen_range(1..=a.len());
    let cut_b = rng.gen_range(0..b.len());
    splice(a, b, cut_a, cut_b)
}
