//! Sample records, the JSONL dataset format, marker-token assembly and
//! candidate-pair enumeration.
//!
//! A dataset file stores one raw record per line: original tokens, entity
//! spans over those tokens, one caption token list per object, object grids
//! and gold triplets. [`assemble_text`] turns a raw record into the final
//! marker-delimited sequence consumed by the encoder.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

// Special token ids, fixed across every vocabulary.
pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const S_OPEN: usize = 2;
pub const S_CLOSE: usize = 3;
pub const O_OPEN: usize = 4;
pub const O_CLOSE: usize = 5;
pub const MASK: usize = 6;
pub const FIRST_REGULAR_TOKEN: usize = 7;

/// Reference to a relation argument: a textual entity or a visual object.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ItemRef {
    Entity(usize),
    Object(usize),
}

impl std::fmt::Display for ItemRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ItemRef::Entity(i) => write!(f, "e{i}"),
            ItemRef::Object(i) => write!(f, "o{i}"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Triplet {
    pub head: ItemRef,
    pub tail: ItemRef,
    pub relation: usize,
}

/// One visual object: RGB and depth grids in `[0, 1]` plus the normalized
/// box `(cx, cy, w, h)` of the object in the image.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ObjectDescriptor {
    /// Row-major `H x W x 3`.
    pub rgb: Vec<f32>,
    /// Row-major `H x W`.
    pub depth: Vec<f32>,
    pub position: [f32; 4],
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
}

impl ObjectDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.rgb.len() != self.h * self.w * 3 {
            return Err(Error::Data(format!(
                "rgb grid has {} values, expected {}",
                self.rgb.len(),
                self.h * self.w * 3
            )));
        }
        if self.depth.len() != self.h * self.w {
            return Err(Error::Data(format!(
                "depth grid has {} values, expected {}",
                self.depth.len(),
                self.h * self.w
            )));
        }
        let in_unit = |vals: &[f32]| vals.iter().all(|&v| (0.0..=1.0).contains(&v));
        if !in_unit(&self.rgb) || !in_unit(&self.depth) || !in_unit(&self.position) {
            return Err(Error::Data("grid or position values outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Mean of the depth grid; the planted object-object rule reads this.
    pub fn mean_depth(&self) -> f32 {
        self.depth.iter().sum::<f32>() / self.depth.len() as f32
    }
}

/// On-disk record: tokens before marker insertion.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RawSample {
    pub sample_id: String,
    pub tokens: Vec<usize>,
    /// `(start, end)` over raw token positions, half-open.
    pub entity_spans: Vec<(usize, usize)>,
    /// One caption token list per object, index-aligned.
    pub captions: Vec<Vec<usize>>,
    pub objects: Vec<ObjectDescriptor>,
    pub gold_triplets: Vec<Triplet>,
}

/// Assembled record: final token sequence with markers and spans recorded
/// against final positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub tokens: Vec<usize>,
    /// Interior of each entity, excluding its markers, in final positions.
    pub entity_spans: Vec<(usize, usize)>,
    /// Interior of each caption, excluding its markers, index-aligned with
    /// `objects`.
    pub caption_spans: Vec<(usize, usize)>,
    pub objects: Vec<ObjectDescriptor>,
    pub gold_triplets: Vec<Triplet>,
}

impl SampleRecord {
    pub fn refs(&self) -> Vec<ItemRef> {
        let mut out: Vec<ItemRef> = (0..self.entity_spans.len()).map(ItemRef::Entity).collect();
        out.extend((0..self.objects.len()).map(ItemRef::Object));
        out
    }

    pub fn gold_relation(&self, head: ItemRef, tail: ItemRef) -> usize {
        self.gold_triplets
            .iter()
            .find(|t| t.head == head && t.tail == tail)
            .map(|t| t.relation)
            .unwrap_or(crate::config::NONE_RELATION)
    }
}

/// Marker-sequence layout: `[CLS]`, original tokens with each entity wrapped
/// in `<s>`/`</s>`, `[SEP]`, then each caption wrapped in `<o>`/`</o>` in
/// object order. Returns the final sequence plus entity and caption interior
/// spans against final positions.
pub fn assemble_text(
    raw_tokens: &[usize],
    entities: &[(usize, usize)],
    captions: &[Vec<usize>],
) -> Result<(Vec<usize>, Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let mut sorted: Vec<(usize, (usize, usize))> = entities.iter().copied().enumerate().collect();
    sorted.sort_by_key(|&(_, span)| span);
    let mut prev_end = 0usize;
    for &(_, (s, e)) in &sorted {
        if s >= e || e > raw_tokens.len() {
            return Err(Error::Data(format!(
                "entity span ({s}, {e}) out of bounds for {} raw tokens",
                raw_tokens.len()
            )));
        }
        if s < prev_end {
            return Err(Error::Data(format!("entity spans overlap at position {s}")));
        }
        prev_end = e;
    }

    let mut tokens = Vec::with_capacity(raw_tokens.len() + 4 * entities.len() + 8);
    let mut entity_spans = vec![(0usize, 0usize); entities.len()];
    tokens.push(CLS);
    let mut cursor = 0usize;
    for &(idx, (s, e)) in &sorted {
        tokens.extend_from_slice(&raw_tokens[cursor..s]);
        tokens.push(S_OPEN);
        let start = tokens.len();
        tokens.extend_from_slice(&raw_tokens[s..e]);
        entity_spans[idx] = (start, tokens.len());
        tokens.push(S_CLOSE);
        cursor = e;
    }
    tokens.extend_from_slice(&raw_tokens[cursor..]);
    tokens.push(SEP);

    let mut caption_spans = Vec::with_capacity(captions.len());
    for caption in captions {
        tokens.push(O_OPEN);
        let start = tokens.len();
        tokens.extend_from_slice(caption);
        caption_spans.push((start, tokens.len()));
        tokens.push(O_CLOSE);
    }
    Ok((tokens, entity_spans, caption_spans))
}

/// Inverse of [`assemble_text`]: recover entity and caption interiors from a
/// marker sequence. Used to check that assembly is injective.
pub fn parse_markers(tokens: &[usize]) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let mut entities = Vec::new();
    let mut captions = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &t) in tokens.iter().enumerate() {
        match t {
            S_OPEN | O_OPEN => {
                if open.is_some() {
                    return Err(Error::Data(format!("nested marker at position {i}")));
                }
                open = Some((t, i + 1));
            }
            S_CLOSE => match open.take() {
                Some((S_OPEN, s)) => entities.push((s, i)),
                _ => return Err(Error::Data(format!("stray </s> at position {i}"))),
            },
            O_CLOSE => match open.take() {
                Some((O_OPEN, s)) => captions.push((s, i)),
                _ => return Err(Error::Data(format!("stray </o> at position {i}"))),
            },
            _ => {}
        }
    }
    if open.is_some() {
        return Err(Error::Data("unclosed marker".into()));
    }
    Ok((entities, captions))
}

/// Assemble and validate a raw record against the run configuration.
pub fn assemble_sample(raw: &RawSample, config: &RunConfig) -> Result<SampleRecord> {
    if raw.captions.len() != raw.objects.len() {
        return Err(Error::Data(format!(
            "sample {}: {} captions for {} objects",
            raw.sample_id,
            raw.captions.len(),
            raw.objects.len()
        )));
    }
    if raw.objects.is_empty() {
        return Err(Error::Data(format!(
            "sample {}: at least one object is required",
            raw.sample_id
        )));
    }
    if raw.objects.len() > config.max_objects {
        return Err(Error::Data(format!(
            "sample {}: {} objects exceed the limit {}",
            raw.sample_id,
            raw.objects.len(),
            config.max_objects
        )));
    }
    for obj in &raw.objects {
        obj.validate()?;
    }
    let (tokens, entity_spans, caption_spans) =
        assemble_text(&raw.tokens, &raw.entity_spans, &raw.captions)?;
    if tokens.len() > config.max_tokens {
        return Err(Error::Data(format!(
            "sample {}: assembled length {} exceeds max_tokens {}",
            raw.sample_id,
            tokens.len(),
            config.max_tokens
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Data(format!(
            "sample {}: token id {} outside vocabulary of {}",
            raw.sample_id, t, config.vocab_size
        )));
    }
    let n_rel = config.relation_count();
    for t in &raw.gold_triplets {
        let ok = |r: ItemRef| match r {
            ItemRef::Entity(i) => i < entity_spans.len(),
            ItemRef::Object(i) => i < raw.objects.len(),
        };
        if !ok(t.head) || !ok(t.tail) {
            return Err(Error::Data(format!(
                "sample {}: triplet references a missing item",
                raw.sample_id
            )));
        }
        if t.relation >= n_rel {
            return Err(Error::Data(format!(
                "sample {}: relation id {} outside vocabulary of {}",
                raw.sample_id, t.relation, n_rel
            )));
        }
    }
    Ok(SampleRecord {
        sample_id: raw.sample_id.clone(),
        tokens,
        entity_spans,
        caption_spans,
        objects: raw.objects.clone(),
        gold_triplets: raw.gold_triplets.clone(),
    })
}

/// All ordered (head, tail) candidate pairs over entities and objects.
/// Identical refs are excluded unless `self_relations` is set.
pub fn candidate_pairs(sample: &SampleRecord, self_relations: bool) -> Vec<(ItemRef, ItemRef)> {
    let refs = sample.refs();
    let mut out = Vec::with_capacity(refs.len() * refs.len());
    for &h in &refs {
        for &t in &refs {
            if h == t && !self_relations {
                continue;
            }
            out.push((h, t));
        }
    }
    out
}

pub fn write_jsonl(path: &Path, samples: &[RawSample]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut file, s)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RawSample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open dataset {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(raw);
    }
    Ok(out)
}

/// Load, assemble and validate a dataset file.
pub fn load_dataset(path: &Path, config: &RunConfig) -> Result<Vec<SampleRecord>> {
    read_jsonl(path)?
        .iter()
        .map(|raw| assemble_sample(raw, config))
        .collect()
}

/// Stable FNV-1a hash of a sample id; drives the train/holdout split so the
/// split is identical across runs and platforms.
pub fn sample_id_hash(id: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// True when the sample belongs to the holdout split.
pub fn is_holdout(id: &str, holdout_fraction: f64) -> bool {
    let h = sample_id_hash(id) % 10_000;
    (h as f64) < holdout_fraction * 10_000.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assemble_no_entities_no_objects() {
        let (tokens, es, cs) = assemble_text(&[10, 11, 12], &[], &[]).unwrap();
        assert_eq!(tokens, vec![CLS, 10, 11, 12, SEP]);
        assert!(es.is_empty() && cs.is_empty());
    }

    #[test]
    fn assemble_single_entity_and_caption() {
        // raw: x AB y with entity AB, one caption "c"
        let (tokens, es, cs) =
            assemble_text(&[20, 30, 31, 21], &[(1, 3)], &[vec![40]]).unwrap();
        assert_eq!(
            tokens,
            vec![CLS, 20, S_OPEN, 30, 31, S_CLOSE, 21, SEP, O_OPEN, 40, O_CLOSE]
        );
        assert_eq!(es, vec![(3, 5)]);
        assert_eq!(cs, vec![(9, 10)]);
        assert_eq!(&tokens[es[0].0..es[0].1], &[30, 31]);
    }

    #[test]
    fn assemble_rejects_overlapping_spans() {
        assert!(assemble_text(&[10, 11, 12], &[(0, 2), (1, 3)], &[]).is_err());
    }

    #[test]
    fn captions_follow_object_order() {
        let (tokens, _, cs) =
            assemble_text(&[10], &[], &[vec![50, 51], vec![60]]).unwrap();
        assert_eq!(&tokens[cs[0].0..cs[0].1], &[50, 51]);
        assert_eq!(&tokens[cs[1].0..cs[1].1], &[60]);
    }

    #[test]
    fn parse_recovers_spans() {
        let raw = vec![20, 30, 31, 21];
        let (tokens, es, cs) = assemble_text(&raw, &[(1, 3)], &[vec![40], vec![41, 42]]).unwrap();
        let (pe, pc) = parse_markers(&tokens).unwrap();
        assert_eq!(pe, es);
        assert_eq!(pc, cs);
    }

    #[test]
    fn candidate_pairs_exclude_identity_by_default() {
        let sample = SampleRecord {
            sample_id: "t".into(),
            tokens: vec![CLS, SEP],
            entity_spans: vec![(0, 1), (1, 2)],
            caption_spans: vec![(0, 1)],
            objects: vec![ObjectDescriptor {
                rgb: vec![0.0; 3],
                depth: vec![0.0],
                position: [0.5, 0.5, 0.1, 0.1],
                h: 1,
                w: 1,
            }],
            gold_triplets: vec![],
        };
        let pairs = candidate_pairs(&sample, false);
        assert_eq!(pairs.len(), 6); // 3 refs, ordered, no identity
        let with_self = candidate_pairs(&sample, true);
        assert_eq!(with_self.len(), 9);
    }

    #[test]
    fn holdout_split_is_stable() {
        let a = is_holdout("sample_000042", 0.2);
        for _ in 0..3 {
            assert_eq!(a, is_holdout("sample_000042", 0.2));
        }
        // roughly a fifth of ids land in holdout
        let n = 2_000;
        let hits = (0..n)
            .filter(|i| is_holdout(&format!("s7_{i:06}"), 0.2))
            .count();
        assert!(hits > n / 8 && hits < n / 3, "split fraction off: {hits}/{n}");
    }
}
