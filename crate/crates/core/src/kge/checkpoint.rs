//! Binary model checkpoints and a text export.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic b"KGECKPT1" (trailing byte is the format version)
//! 8       1     model kind: 0 TransE, 1 DistMult, 2 ComplEx
//! 9       1     distance norm: 1 L1, 2 L2
//! 10      2     reserved, zero
//! 12      4     dim (u32, logical dimension)
//! 16      8     n_entities (u64)
//! 24      8     n_relations (u64)
//! 32      8     gamma (f64)
//! 40      8     vocabulary hash (u64)
//! 48      24    adam beta1, beta2, epsilon (f64 each)
//! 72      8     adam step count (u64)
//! 80      ...   entity matrix, row-major f64 (n_entities × width)
//!         ...   relation matrix (n_relations × width)
//!         ...   adam moments: m_entity, v_entity, m_relation, v_relation
//! ```
//!
//! Width is dim for TransE/DistMult and 2·dim for ComplEx. The vocabulary
//! hash pins the checkpoint to the dataset's id assignment; loaders must
//! compare it before scoring anything.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::kge::{AdamConfig, AdamState, DistanceNorm, EmbeddingModel, ModelKind};

const MAGIC: &[u8; 8] = b"KGECKPT1";
const HEADER_LEN: u64 = 80;

fn kind_byte(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::TransE => 0,
        ModelKind::DistMult => 1,
        ModelKind::ComplEx => 2,
    }
}

fn norm_byte(norm: DistanceNorm) -> u8 {
    match norm {
        DistanceNorm::L1 => 1,
        DistanceNorm::L2 => 2,
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for &x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes the model and optimizer state. The file is self-describing; no
/// side channel is needed to reload it.
pub fn save_model(
    path: &Path,
    model: &EmbeddingModel,
    adam: &AdamState,
    vocab_hash: u64,
) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut header = Vec::with_capacity(HEADER_LEN as usize);
    header.extend_from_slice(MAGIC);
    header.push(kind_byte(model.kind()));
    header.push(norm_byte(model.norm()));
    header.extend_from_slice(&[0, 0]);
    header.extend_from_slice(&(model.dim() as u32).to_le_bytes());
    header.extend_from_slice(&(model.n_entities() as u64).to_le_bytes());
    header.extend_from_slice(&(model.n_relations() as u64).to_le_bytes());
    header.extend_from_slice(&model.gamma().to_le_bytes());
    header.extend_from_slice(&vocab_hash.to_le_bytes());
    let cfg = adam.config();
    header.extend_from_slice(&cfg.beta1.to_le_bytes());
    header.extend_from_slice(&cfg.beta2.to_le_bytes());
    header.extend_from_slice(&cfg.epsilon.to_le_bytes());
    header.extend_from_slice(&adam.step_count().to_le_bytes());
    debug_assert_eq!(header.len() as u64, HEADER_LEN);
    w.write_all(&header).map_err(io)?;
    write_f64s(&mut w, model.entity_data()).map_err(io)?;
    write_f64s(&mut w, model.relation_data()).map_err(io)?;
    let (m_e, v_e, m_r, v_r) = adam.moments();
    write_f64s(&mut w, m_e).map_err(io)?;
    write_f64s(&mut w, v_e).map_err(io)?;
    write_f64s(&mut w, m_r).map_err(io)?;
    write_f64s(&mut w, v_r).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads a checkpoint back. Returns the stored vocabulary hash for the
/// caller to compare against its dataset.
pub fn load_model(path: &Path) -> Result<(EmbeddingModel, AdamState, u64)> {
    let io = |e| Error::io(path, e);
    let file = File::open(path).map_err(io)?;
    let file_len = file.metadata().map_err(io)?.len();
    let mut r = BufReader::new(file);
    let mut header = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut header)
        .map_err(|_| bad(path, "file shorter than header"))?;
    if &header[0..8] != MAGIC {
        return Err(bad(path, "bad magic; not a model checkpoint"));
    }
    let kind = match header[8] {
        0 => ModelKind::TransE,
        1 => ModelKind::DistMult,
        2 => ModelKind::ComplEx,
        b => return Err(bad(path, format!("unknown model kind byte {b}"))),
    };
    let norm = match header[9] {
        1 => DistanceNorm::L1,
        2 => DistanceNorm::L2,
        b => return Err(bad(path, format!("unknown norm byte {b}"))),
    };
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(header[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(header[o..o + 8].try_into().unwrap());
    let dim = u32_at(12) as usize;
    let n_entities = u64_at(16) as usize;
    let n_relations = u64_at(24) as usize;
    let gamma = f64_at(32);
    let vocab_hash = u64_at(40);
    let adam_cfg = AdamConfig {
        beta1: f64_at(48),
        beta2: f64_at(56),
        epsilon: f64_at(64),
    };
    let adam_step = u64_at(72);
    if dim == 0 {
        return Err(bad(path, "dim is zero"));
    }
    let width = match kind {
        ModelKind::ComplEx => 2 * dim,
        _ => dim,
    };
    let ent_len = n_entities
        .checked_mul(width)
        .ok_or_else(|| bad(path, "entity matrix size overflows"))?;
    let rel_len = n_relations
        .checked_mul(width)
        .ok_or_else(|| bad(path, "relation matrix size overflows"))?;
    let expected = HEADER_LEN
        + 8 * (3 * ent_len as u64)
        + 8 * (3 * rel_len as u64);
    if file_len != expected {
        return Err(bad(
            path,
            format!("size mismatch: expected {expected} bytes, file has {file_len}"),
        ));
    }
    let entity = read_f64s(&mut r, ent_len).map_err(io)?;
    let relation = read_f64s(&mut r, rel_len).map_err(io)?;
    let m_e = read_f64s(&mut r, ent_len).map_err(io)?;
    let v_e = read_f64s(&mut r, ent_len).map_err(io)?;
    let m_r = read_f64s(&mut r, rel_len).map_err(io)?;
    let v_r = read_f64s(&mut r, rel_len).map_err(io)?;
    let model = EmbeddingModel::from_raw(
        kind, norm, dim, gamma, n_entities, n_relations, entity, relation,
    );
    let adam = AdamState::from_raw(adam_cfg, adam_step, m_e, v_e, m_r, v_r);
    Ok((model, adam, vocab_hash))
}

/// Errors unless the checkpoint hash matches the dataset's.
pub fn ensure_vocab_match(stored: u64, kg: &KnowledgeGraph) -> Result<()> {
    let expected = kg.vocab_hash();
    if stored != expected {
        return Err(Error::VocabularyMismatch {
            expected,
            found: stored,
        });
    }
    Ok(())
}

/// Human-readable dump: one row per line, `E`/`R`, name, then
/// space-separated values.
pub fn export_text(
    model: &EmbeddingModel,
    kg: &KnowledgeGraph,
    mut w: impl Write,
) -> std::io::Result<()> {
    let width = model.width();
    for (i, name) in kg.entities().names().iter().enumerate() {
        let row = &model.entity_data()[i * width..(i + 1) * width];
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "E\t{name}\t{}", vals.join(" "))?;
    }
    for (i, name) in kg.relations().names().iter().enumerate() {
        let row = &model.relation_data()[i * width..(i + 1) * width];
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "R\t{name}\t{}", vals.join(" "))?;
    }
    Ok(())
}
