use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_checkpoint_bytes, write_checkpoint_bytes, Bound, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::backbone::sequence::{Sequence, Slot};
use crate::backbone::vocab::Vocabulary;
use crate::data::TextVocab;
use crate::error::{Error, Result};
use crate::fusion::{add_task_tower, build_block, routed_block_forward, BaseBlock, BlockConfig, BlockParams, RoutingTable, Tower, TowerVariant, NORM_EPS};
use crate::patterns::{LayoutKind, PAD};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub block: BlockConfig,
    pub variant: TowerVariant,
    pub layout: LayoutKind,
    pub levels: usize,
    pub codebook_size: usize,
    pub text_vocab: usize,
    /// Longest sequence the positional table covers.
    pub max_len: usize,
    pub init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            block: BlockConfig::default(),
            variant: TowerVariant::default(),
            layout: LayoutKind::Delay,
            levels: 4,
            codebook_size: 32,
            text_vocab: TextVocab::default().len(),
            max_len: 256,
            init_std: 0.02,
        }
    }

    pub fn paper() -> Self {
        Self {
            block: BlockConfig {
                d_model: 512,
                d_ff: 2048,
                heads: 8,
                layers: 6,
                ..BlockConfig::default()
            },
            levels: 6,
            codebook_size: 512,
            max_len: 1024,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        self.variant.validate(&self.block)?;
        Vocabulary::new(self.text_vocab, self.levels, self.codebook_size)?;
        if self.max_len == 0 || self.block.layers == 0 {
            return Err(Error::Config("max_len and layers must be positive".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary {
            text: self.text_vocab,
            levels: self.levels,
            codebook_size: self.codebook_size,
        }
    }
}

/// Sequences concatenated row-wise for one forward pass.
#[derive(Clone, Debug)]
pub struct Packed {
    pub slots: Vec<Slot>,
    pub positions: Vec<usize>,
    pub tags: Vec<Tower>,
    pub segments: Vec<(usize, usize)>,
}

/// Embedding lookup recorded during a forward pass: rows `rows` of the
/// packed input received `var`'s rows from stream `level` (or the word
/// table when `None`).
#[derive(Clone, Debug)]
pub struct Lookup {
    pub var: Var,
    pub level: Option<usize>,
    pub rows: Vec<usize>,
}

pub struct Hidden {
    /// Final-normalized hidden states `[n × d_k]`.
    pub states: Var,
    pub lookups: Vec<Lookup>,
}

/// Summed NLL and token count of one head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenSum {
    pub sum: f64,
    pub count: usize,
}

impl TokenSum {
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    fn add(&mut self, other: TokenSum) {
        self.sum += other.sum;
        self.count += other.count;
    }
}

pub struct NllTerms {
    /// Mean over every target token.
    pub loss: Var,
    pub text: TokenSum,
    pub streams: Vec<TokenSum>,
}

/// Teacher-forced NLL of a set of sequences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub text: TokenSum,
    pub streams: Vec<TokenSum>,
}

impl NllReport {
    pub fn merge(&mut self, other: &NllReport) {
        self.text.add(other.text);
        if self.streams.is_empty() {
            self.streams = vec![TokenSum::default(); other.streams.len()];
        }
        for (a, b) in self.streams.iter_mut().zip(&other.streams) {
            a.add(*b);
        }
    }

    pub fn total(&self) -> TokenSum {
        let mut t = self.text;
        for s in &self.streams {
            t.add(*s);
        }
        t
    }

    pub fn mean(&self) -> Option<f64> {
        self.total().mean()
    }

    /// Mean NLL over streams `from..`, 0-based.
    pub fn streams_from(&self, from: usize) -> Option<f64> {
        let mut t = TokenSum::default();
        for s in self.streams.iter().skip(from) {
            t.add(*s);
        }
        t.mean()
    }
}

/// Decoder-only causal transformer over the unified vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<S> {
    config: BackboneConfig,
    vocab: Vocabulary,
    store: ParamStore<S>,
    blocks: Vec<BlockParams>,
    word_embed: ParamId,
    stream_embed: Vec<ParamId>,
    position: ParamId,
    final_norm: ParamId,
    word_head: ParamId,
    stream_heads: Vec<ParamId>,
    routing: RoutingTable,
    /// Last completed training stage; 0 when untrained.
    stage: u8,
}

impl<S: Scalar> Backbone<S> {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocab();
        let (d, std) = (config.block.d_model, config.init_std);
        let mut store = ParamStore::new();
        let word_embed = store.add("embed.word", ParamKind::Embedding, Tensor::randn(&[vocab.words(), d], std, rng));
        // Row K of each stream table is that stream's learned pad embedding.
        let stream_embed = (0..config.levels)
            .map(|l| {
                store.add(
                    format!("embed.stream{l}"),
                    ParamKind::Embedding,
                    Tensor::randn(&[config.codebook_size + 1, d], std, rng),
                )
            })
            .collect();
        let position = store.add("embed.pos", ParamKind::Embedding, Tensor::randn(&[config.max_len, d], std, rng));
        let mut blocks = Vec::with_capacity(config.block.layers);
        for i in 0..config.block.layers {
            let base = BaseBlock::random(&config.block, std, rng);
            blocks.push(build_block(&mut store, &format!("blk{i}"), &base, &config.block, &config.variant, std, rng)?);
        }
        let final_norm = store.add("norm.final", ParamKind::Norm, Tensor::full(&[d], S::one()));
        let word_head = store.add("head.word", ParamKind::Weight, Tensor::randn(&[d, vocab.words()], std, rng));
        let stream_heads = (0..config.levels)
            .map(|l| {
                store.add(
                    format!("head.stream{l}"),
                    ParamKind::Weight,
                    Tensor::randn(&[d, config.codebook_size], std, rng),
                )
            })
            .collect();
        Ok(Self {
            config,
            vocab,
            store,
            blocks,
            word_embed,
            stream_embed,
            position,
            final_norm,
            word_head,
            stream_heads,
            routing: RoutingTable::default(),
            stage: 0,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn routing(&self) -> RoutingTable {
        self.routing
    }

    pub fn stage(&self) -> u8 {
        self.stage
    }

    pub fn set_stage(&mut self, stage: u8) {
        self.stage = stage;
    }

    pub fn stream_heads(&self) -> &[ParamId] {
        &self.stream_heads
    }

    pub fn word_head(&self) -> ParamId {
        self.word_head
    }

    pub fn content_hash(&self) -> String {
        self.store.content_hash()
    }

    /// Clones the motion tower of every block into a task tower and routes
    /// motion-to-motion tasks through it. Returns `false` and changes nothing
    /// when the variant has no motion-specific parameters.
    pub fn enable_task_tower(&mut self) -> Result<bool> {
        if self.routing.task_tower {
            return Err(Error::Config("task tower already enabled".into()));
        }
        let mut any = false;
        for block in &mut self.blocks {
            any |= add_task_tower(&mut self.store, block)?;
        }
        self.routing.task_tower = any;
        Ok(any)
    }

    /// Ids read only by `tower` in some block.
    pub fn tower_params(&self, tower: Tower) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.exclusive_ids(tower)).collect()
    }

    pub fn pack(&self, seqs: &[&Sequence]) -> Result<Packed> {
        let mut packed = Packed {
            slots: Vec::new(),
            positions: Vec::new(),
            tags: Vec::new(),
            segments: Vec::with_capacity(seqs.len()),
        };
        for s in seqs {
            if s.is_empty() || s.target.len() != s.len() {
                return Err(Error::shape("pack", "empty sequence or target flags misaligned with slots"));
            }
            if s.len() > self.config.max_len {
                return Err(Error::Truncation {
                    what: "sequence positions",
                    len: s.len(),
                    limit: self.config.max_len,
                });
            }
            packed.segments.push((packed.slots.len(), s.len()));
            for (p, slot) in s.slots.iter().enumerate() {
                slot.validate(&self.vocab)?;
                packed.tags.push(self.routing.tag(slot.is_motion(), s.task));
                packed.positions.push(p);
                packed.slots.push(slot.clone());
            }
        }
        Ok(packed)
    }

    /// Input embeddings: per-stream lookups summed over streams (Σ f^l) for
    /// motion positions, word lookups otherwise, plus a positional term.
    pub(crate) fn embed(&self, tape: &mut Tape<S>, b: &Bound, p: &Packed) -> Result<(Var, Vec<Lookup>)> {
        let n = p.slots.len();
        let d = self.config.block.d_model;
        let k = self.config.codebook_size;
        let mut lookups = Vec::new();
        let mut word = (Vec::new(), Vec::new());
        let mut streams = vec![(Vec::new(), Vec::new()); self.config.levels];
        for (r, slot) in p.slots.iter().enumerate() {
            match slot {
                Slot::Word(w) => {
                    word.0.push(r);
                    word.1.push(*w as usize);
                }
                Slot::Group(codes) => {
                    for (l, &c) in codes.iter().enumerate() {
                        streams[l].0.push(r);
                        streams[l].1.push(if c == PAD { k } else { c as usize });
                    }
                }
                Slot::Single { level, code } => {
                    streams[*level].0.push(r);
                    streams[*level].1.push(*code as usize);
                }
            }
        }
        let mut parts = vec![(None, word)];
        parts.extend(streams.into_iter().enumerate().map(|(l, s)| (Some(l), s)));
        let mut x: Option<Var> = None;
        for (level, (rows, ids)) in parts {
            if rows.is_empty() {
                continue;
            }
            let table = match level {
                None => self.word_embed,
                Some(l) => self.stream_embed[l],
            };
            let e = tape.embedding(b[table], &ids)?;
            lookups.push(Lookup {
                var: e,
                level,
                rows: rows.clone(),
            });
            let full = if rows.len() == n {
                e
            } else {
                let rest: Vec<usize> = (0..n).filter(|r| rows.binary_search(r).is_err()).collect();
                let zeros = tape.constant(Tensor::zeros(&[rest.len(), d]))?;
                tape.merge_rows(&[(e, rows), (zeros, rest)], n)?
            };
            x = Some(match x {
                None => full,
                Some(acc) => tape.add(acc, full)?,
            });
        }
        let x = x.ok_or_else(|| Error::shape("embed", "no positions"))?;
        let pos = tape.embedding(b[self.position], &p.positions)?;
        Ok((tape.add(x, pos)?, lookups))
    }

    pub fn hidden(&self, tape: &mut Tape<S>, b: &Bound, p: &Packed) -> Result<Hidden> {
        let (mut x, lookups) = self.embed(tape, b, p)?;
        for block in &self.blocks {
            x = routed_block_forward(tape, b, block, &self.config.block, &self.config.variant, x, &p.tags, &p.segments)?;
        }
        let states = tape.rms_norm(x, b[self.final_norm], NORM_EPS)?;
        Ok(Hidden { states, lookups })
    }

    /// Word-head logits of the given rows.
    pub fn word_logits(&self, tape: &mut Tape<S>, b: &Bound, h: Var, rows: &[usize]) -> Result<Var> {
        let x = tape.gather_rows(h, rows)?;
        tape.matmul(x, b[self.word_head])
    }

    /// Stream-`level` head logits of the given rows.
    pub fn stream_logits(&self, tape: &mut Tape<S>, b: &Bound, h: Var, level: usize, rows: &[usize]) -> Result<Var> {
        let x = tape.gather_rows(h, rows)?;
        tape.matmul(x, b[self.stream_heads[level]])
    }

    /// Mean next-token NLL over every target token of `seqs`. A grouped
    /// position contributes one term per non-pad stream.
    pub fn nll_on_tape(&self, tape: &mut Tape<S>, b: &Bound, seqs: &[&Sequence]) -> Result<NllTerms> {
        let packed = self.pack(seqs)?;
        let h = self.hidden(tape, b, &packed)?.states;
        let mut word = (Vec::new(), Vec::new());
        let mut streams = vec![(Vec::new(), Vec::new()); self.config.levels];
        for (&(start, len), s) in packed.segments.iter().zip(seqs) {
            for i in 1..len {
                if !s.target[i] {
                    continue;
                }
                let row = start + i - 1;
                match &s.slots[i] {
                    Slot::Word(w) => {
                        word.0.push(row);
                        word.1.push(Some(*w as usize));
                    }
                    Slot::Group(codes) => {
                        for (l, &c) in codes.iter().enumerate() {
                            if c != PAD {
                                streams[l].0.push(row);
                                streams[l].1.push(Some(c as usize));
                            }
                        }
                    }
                    Slot::Single { level, code } => {
                        streams[*level].0.push(row);
                        streams[*level].1.push(Some(*code as usize));
                    }
                }
            }
        }
        let mut total: Option<Var> = None;
        let mut count = 0;
        let mut head_sum = |tape: &mut Tape<S>, logits: Var, targets: &[Option<usize>]| -> Result<TokenSum> {
            let ce = tape.cross_entropy(logits, targets)?;
            let s = tape.sum(ce)?;
            count += targets.len();
            let value = tape.value(s).data()[0].as_f64();
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
            Ok(TokenSum {
                sum: value,
                count: targets.len(),
            })
        };
        let mut text = TokenSum::default();
        if !word.0.is_empty() {
            let logits = self.word_logits(tape, b, h, &word.0)?;
            text = head_sum(tape, logits, &word.1)?;
        }
        let mut per_stream = vec![TokenSum::default(); self.config.levels];
        for (l, (rows, targets)) in streams.iter().enumerate() {
            if !rows.is_empty() {
                let logits = self.stream_logits(tape, b, h, l, rows)?;
                per_stream[l] = head_sum(tape, logits, targets)?;
            }
        }
        let total = total.ok_or_else(|| Error::EmptyLoss("no target tokens in batch".into()))?;
        let loss = tape.scale(total, S::lit(1.0 / count as f64))?;
        Ok(NllTerms {
            loss,
            text,
            streams: per_stream,
        })
    }

    /// Evaluates teacher-forced NLL without recording gradients, in chunks.
    pub fn nll(&self, seqs: &[Sequence]) -> Result<NllReport> {
        let mut report = NllReport {
            text: TokenSum::default(),
            streams: vec![TokenSum::default(); self.config.levels],
        };
        for chunk in seqs.chunks(16) {
            let refs: Vec<&Sequence> = chunk.iter().filter(|s| s.target.iter().any(|&t| t)).collect();
            if refs.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let b = self.store.bind(&mut tape, false)?;
            let terms = self.nll_on_tape(&mut tape, &b, &refs)?;
            report.merge(&NllReport {
                text: terms.text,
                streams: terms.streams,
            });
        }
        if report.total().count == 0 {
            return Err(Error::EmptyLoss("no target tokens in evaluation set".into()));
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, write_checkpoint_bytes(&self.store))?;
        let meta = SavedMeta {
            config: self.config.clone(),
            task_tower: self.routing.task_tower,
            stage: self.stage,
        };
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: SavedMeta = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
        let store: ParamStore<S> = read_checkpoint_bytes(&std::fs::read(path)?)?;
        let mut model = Self::new(meta.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        if meta.task_tower {
            model.enable_task_tower()?;
        }
        if store.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                store.len(),
                model.store.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.entry(id).name.clone();
            let src = store.find(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if store.get(src).shape() != model.store.get(id).shape() {
                return Err(Error::Format(format!("{name} has shape {:?}", store.get(src).shape())));
            }
            *model.store.get_mut(id) = store.get(src).clone();
        }
        model.stage = meta.stage;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedMeta {
    config: BackboneConfig,
    task_tower: bool,
    stage: u8,
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
