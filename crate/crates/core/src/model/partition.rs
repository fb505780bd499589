use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::tensor::{Tensor, TensorError};

use super::block::{causal_mask, normal_tensor, Block, WEIGHT_STD};
use super::{ModelConfig, ModelError, Result, TokenBatch};

const TOKEN_EMBED_STD: f32 = 1.0;
const POSITION_EMBED_STD: f32 = 0.2;

/// Vars bound on a tape for one segment, in [`Params::named`] order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bound(pub Vec<Var>);

/// A set of named parameter tensors with a fixed binding order.
pub trait Params {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// Records every parameter on `tape`, as trainable leaves or constants.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut vars = Vec::new();
        for (_, t) in self.named() {
            let t = t.detached();
            vars.push(if trainable { tape.param(t)? } else { tape.constant(t)? });
        }
        Ok(Bound(vars))
    }

    /// Copies each bound parameter's gradient into its `grad` slot.
    fn store_grads(&mut self, grads: &Gradients, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors_mut().into_iter().zip(&bound.0) {
            t.set_grad(grads.get_or_zeros(v))?;
        }
        Ok(())
    }

    fn clear_grads(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::clear_grad);
    }

    fn write_checkpoint(&self, ck: &mut Checkpoint) {
        for (name, t) in self.named() {
            ck.push(name, t);
        }
    }

    /// Overwrites every parameter with the same-named checkpoint tensor.
    fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(self.tensors_mut()) {
            let src = ck.get(name)?;
            if src.shape() != t.shape() {
                return Err(ModelError::Config(format!(
                    "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.detached();
        }
        Ok(())
    }

    fn param_numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Consecutive transformer layers tagged with their global layer indices.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStack {
    pub blocks: Vec<Block>,
    pub layer_indices: Vec<usize>,
    n_heads: usize,
    d_model: usize,
}

impl BlockStack {
    fn zeros(cfg: &ModelConfig, layer_indices: Vec<usize>) -> Self {
        Self {
            blocks: layer_indices.iter().map(|_| Block::zeros(cfg)).collect(),
            layer_indices,
            n_heads: cfg.n_heads,
            d_model: cfg.d_model,
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Runs `x[B, T, D]` through every layer.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d_model {
            return Err(TensorError::Dimension(format!(
                "segment expects [batch, seq, {}] activations, got {s:?}",
                self.d_model
            ))
            .into());
        }
        let per = Block::param_count(self.n_heads);
        if bound.0.len() != per * self.blocks.len() {
            return Err(ModelError::Config("bound vars do not match layer stack".into()));
        }
        if self.blocks.is_empty() {
            return Ok(x);
        }
        let mask = tape.constant(causal_mask(s[1]))?;
        let mut h = x;
        for vars in bound.0.chunks(per) {
            h = Block::forward(tape, vars, self.n_heads, h, mask)?;
        }
        Ok(h)
    }
}

impl Params for BlockStack {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (block, idx) in self.blocks.iter().zip(&self.layer_indices) {
            for (n, t) in block.named() {
                out.push((format!("layer.{idx}.{n}"), t));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks.iter_mut().flat_map(Block::tensors_mut).collect()
    }
}

/// Token and position embeddings followed by the client's bottom layers.
#[derive(Clone, Debug, PartialEq)]
pub struct InputAdapter {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub stack: BlockStack,
}

/// Both outputs of the input adapter: `emb(x)` and the cut-point activation.
#[derive(Clone, Copy, Debug)]
pub struct InputForward {
    pub emb: Var,
    pub out: Var,
}

impl InputAdapter {
    fn ids(&self, tokens: &TokenBatch) -> Result<Vec<usize>> {
        let vocab = self.tok_emb.shape()[0];
        let max_seq = self.pos_emb.shape()[0];
        if tokens.seq == 0 || tokens.seq > max_seq {
            return Err(TensorError::Dimension(format!("sequence length {} outside 1..={max_seq}", tokens.seq)).into());
        }
        tokens
            .ids
            .iter()
            .map(|&id| {
                let id = id as usize;
                if id < vocab {
                    Ok(id)
                } else {
                    Err(TensorError::Index { index: id, size: vocab }.into())
                }
            })
            .collect()
    }

    /// Embedding lookup plus positional embedding, `[B, T, D]`.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, tokens: &TokenBatch) -> Result<Var> {
        let ids = self.ids(tokens)?;
        let d = self.tok_emb.shape()[1];
        let tok = tape.gather(bound.0[0], &ids)?;
        let tok = tape.reshape(tok, &[tokens.batch, tokens.seq, d])?;
        self.add_positions(tape, bound, tok)
    }

    /// Adds positional embeddings to token embeddings `[B, T, D]`.
    pub fn add_positions(&self, tape: &mut Tape, bound: &Bound, tok: Var) -> Result<Var> {
        let seq = tape.shape(tok).get(1).copied().unwrap_or(0);
        if seq == 0 || seq > self.pos_emb.shape()[0] {
            return Err(TensorError::Dimension(format!("sequence length {seq} outside positional table")).into());
        }
        let positions: Vec<usize> = (0..seq).collect();
        let pos = tape.gather(bound.0[1], &positions)?;
        Ok(tape.add(tok, pos)?)
    }

    /// Runs the adapter's transformer layers on an embedded input.
    pub fn layers(&self, tape: &mut Tape, bound: &Bound, emb: Var) -> Result<Var> {
        self.stack.forward(tape, &Bound(bound.0[2..].to_vec()), emb)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, tokens: &TokenBatch) -> Result<InputForward> {
        let emb = self.embed(tape, bound, tokens)?;
        let out = self.layers(tape, bound, emb)?;
        Ok(InputForward { emb, out })
    }
}

impl Params for InputAdapter {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.tok".to_string(), &self.tok_emb),
            ("embed.pos".to_string(), &self.pos_emb),
        ];
        out.extend(self.stack.named());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        out.extend(self.stack.tensors_mut());
        out
    }
}

/// The client's top layers, final layer norm and LM head.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputAdapter {
    pub stack: BlockStack,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head: Tensor,
}

impl OutputAdapter {
    /// Logits `[B, T, V]` for activations `x[B, T, D]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let n = bound.0.len();
        let h = self.stack.forward(tape, &Bound(bound.0[..n - 3].to_vec()), x)?;
        let h = tape.layer_norm(h, bound.0[n - 3], bound.0[n - 2])?;
        Ok(tape.matmul(h, bound.0[n - 1])?)
    }
}

impl Params for OutputAdapter {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.stack.named();
        out.extend([
            ("final_ln.g".to_string(), &self.lnf_g),
            ("final_ln.b".to_string(), &self.lnf_b),
            ("head.w".to_string(), &self.head),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.stack.tensors_mut();
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head]);
        out
    }
}

/// The full model divided into its three segments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPartition {
    pub config: ModelConfig,
    pub input: InputAdapter,
    pub backbone: BlockStack,
    pub output: OutputAdapter,
}

/// Deterministically initialized model partitioned per `config.split`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelPartition> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut part = ModelPartition::zeros(config);
    part.input.tok_emb = normal_tensor(&mut rng, &[config.vocab_size, config.d_model], TOKEN_EMBED_STD);
    part.input.pos_emb = normal_tensor(&mut rng, &[config.max_seq_len, config.d_model], POSITION_EMBED_STD);
    for stack in [&mut part.input.stack, &mut part.backbone, &mut part.output.stack] {
        for block in &mut stack.blocks {
            *block = Block::init(config, &mut rng);
        }
    }
    part.output.lnf_g = Tensor::ones(&[config.d_model]);
    part.output.head = normal_tensor(&mut rng, &[config.d_model, config.vocab_size], WEIGHT_STD);
    Ok(part)
}

impl ModelPartition {
    /// Zero-valued partition with every shape and layer index in place.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (n_in, n_bb) = (config.split.0, config.split.1);
        let d = config.d_model;
        Self {
            config: config.clone(),
            input: InputAdapter {
                tok_emb: Tensor::zeros(&[config.vocab_size, d]),
                pos_emb: Tensor::zeros(&[config.max_seq_len, d]),
                stack: BlockStack::zeros(config, (0..n_in).collect()),
            },
            backbone: BlockStack::zeros(config, (n_in..n_in + n_bb).collect()),
            output: OutputAdapter {
                stack: BlockStack::zeros(config, (n_in + n_bb..config.n_layers_total).collect()),
                lnf_g: Tensor::zeros(&[d]),
                lnf_b: Tensor::zeros(&[d]),
                head: Tensor::zeros(&[d, config.vocab_size]),
            },
        }
    }

    /// Global layer indices per segment.
    pub fn segment_indices(&self) -> [&[usize]; 3] {
        [
            &self.input.stack.layer_indices,
            &self.backbone.layer_indices,
            &self.output.stack.layer_indices,
        ]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.input.write_checkpoint(&mut ck);
        self.backbone.write_checkpoint(&mut ck);
        self.output.write_checkpoint(&mut ck);
        ck
    }

    pub fn from_checkpoint(config: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let mut part = Self::zeros(config);
        part.input.load_checkpoint(ck)?;
        part.backbone.load_checkpoint(ck)?;
        part.output.load_checkpoint(ck)?;
        Ok(part)
    }

    /// Unsplit forward pass on one tape. Returns the input adapter outputs
    /// and the logits.
    pub fn forward(&self, tape: &mut Tape, bounds: &[Bound; 3], tokens: &TokenBatch) -> Result<(InputForward, Var)> {
        let inp = self.input.forward(tape, &bounds[0], tokens)?;
        let mid = self.backbone.forward(tape, &bounds[1], inp.out)?;
        let logits = self.output.forward(tape, &bounds[2], mid)?;
        Ok((inp, logits))
    }

    pub fn bind_all(&self, tape: &mut Tape, trainable: [bool; 3]) -> Result<[Bound; 3]> {
        Ok([
            self.input.bind(tape, trainable[0])?,
            self.backbone.bind(tape, trainable[1])?,
            self.output.bind(tape, trainable[2])?,
        ])
    }

    /// Partition manifest: segment name to global layer indices.
    pub fn manifest(&self) -> String {
        let fmt = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        format!(
            "[segments]\ninput_adapter = [{}]\nbackbone = [{}]\noutput_adapter = [{}]\n",
            fmt(&self.input.stack.layer_indices),
            fmt(&self.backbone.layer_indices),
            fmt(&self.output.stack.layer_indices)
        )
    }
}

/// Backbone indices kept when uniformly dropping down to `size` layers:
/// `round(i * (n - 1) / (size - 1))` for `i` in `0..size`.
pub fn emulator_indices(n_backbone: usize, size: usize) -> Result<Vec<usize>> {
    if size < 2 || size > n_backbone {
        return Err(ModelError::Config(format!(
            "emulator size {size} must lie in 2..={n_backbone}"
        )));
    }
    Ok((0..size)
        .map(|i| ((i * (n_backbone - 1)) as f64 / (size - 1) as f64).round() as usize)
        .collect())
}

/// Backbone stand-in holding copies of a uniformly spaced subset of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Emulator {
    pub stack: BlockStack,
    /// Positions within the backbone, strictly increasing.
    pub kept: Vec<usize>,
}

pub fn build_emulator(backbone: &BlockStack, size: usize) -> Result<Emulator> {
    let kept = emulator_indices(backbone.len(), size)?;
    Ok(Emulator {
        stack: BlockStack {
            blocks: kept.iter().map(|&i| backbone.blocks[i].clone()).collect(),
            layer_indices: kept.iter().map(|&i| backbone.layer_indices[i]).collect(),
            n_heads: backbone.n_heads,
            d_model: backbone.d_model,
        },
        kept,
    })
}

impl Emulator {
    /// Rebuilds an emulator from checkpoint tensors named `layer.{i}.*`
    /// whose global index falls inside the backbone range.
    pub fn from_checkpoint(config: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let (n_in, n_bb) = (config.split.0, config.split.1);
        let mut globals: Vec<usize> = ck
            .names()
            .filter_map(layer_index_of)
            .filter(|g| (n_in..n_in + n_bb).contains(g))
            .collect();
        globals.dedup();
        let mut stack = BlockStack::zeros(config, globals.clone());
        stack.load_checkpoint(ck)?;
        Ok(Self {
            stack,
            kept: globals.iter().map(|g| g - n_in).collect(),
        })
    }
}

/// Global layer index encoded in a parameter name `layer.{i}.…`.
pub fn layer_index_of(name: &str) -> Option<usize> {
    name.strip_prefix("layer.")?.split('.').next()?.parse().ok()
}

impl InputAdapter {
    pub fn from_checkpoint(config: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut a = ModelPartition::zeros(config).input;
        a.load_checkpoint(ck)?;
        Ok(a)
    }
}

impl OutputAdapter {
    pub fn from_checkpoint(config: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut a = ModelPartition::zeros(config).output;
        a.load_checkpoint(ck)?;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Split;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_heads: 2,
            n_layers_total: 6,
            max_seq_len: 8,
            split: Split(1, 4, 1),
        }
    }

    fn tokens(batch: usize, seq: usize) -> TokenBatch {
        TokenBatch::new(batch, seq, (0..batch * seq).map(|i| (i * 7 % 32) as u32).collect()).unwrap()
    }

    #[test]
    fn split_sizes() {
        let m = build_model(&tiny(), 1).unwrap();
        let [a, b, c] = m.segment_indices();
        assert_eq!((a.len(), b.len(), c.len()), (1, 4, 1));
        let mut all: Vec<usize> = a.iter().chain(b).chain(c).copied().collect();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn two_twenty_two_split_is_accepted() {
        let cfg = ModelConfig {
            n_layers_total: 24,
            split: Split(2, 20, 2),
            ..tiny()
        };
        cfg.validate().unwrap();
        let bad = ModelConfig {
            split: Split(2, 20, 1),
            ..cfg
        };
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&tiny(), 9).unwrap();
        let b = build_model(&tiny(), 9).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
        let c = build_model(&tiny(), 10).unwrap();
        assert_ne!(a.to_checkpoint().to_bytes(), c.to_checkpoint().to_bytes());
    }

    #[test]
    fn emulator_index_rule() {
        assert_eq!(emulator_indices(20, 8).unwrap(), vec![0, 3, 5, 8, 11, 14, 16, 19]);
        assert_eq!(emulator_indices(4, 4).unwrap(), vec![0, 1, 2, 3]);
        let k = emulator_indices(26, 14).unwrap();
        assert_eq!(k.len(), 14);
        assert_eq!((k[0], k[13]), (0, 25));
        assert!(k.windows(2).all(|w| w[0] < w[1]));
        assert!(emulator_indices(4, 1).is_err());
        assert!(emulator_indices(4, 5).is_err());
    }

    #[test]
    fn emulator_copies_backbone_layers() {
        let m = build_model(&tiny(), 3).unwrap();
        let emu = build_emulator(&m.backbone, 2).unwrap();
        assert_eq!(emu.kept, vec![0, 3]);
        let bb: Vec<(String, &Tensor)> = m.backbone.named();
        for (name, t) in emu.stack.named() {
            let src = bb.iter().find(|(n, _)| *n == name).unwrap().1;
            assert!(t.bit_eq(src), "{name}");
        }
    }

    #[test]
    fn emulator_from_checkpoint() {
        let m = build_model(&tiny(), 3).unwrap();
        let emu = build_emulator(&m.backbone, 3).unwrap();
        let mut ck = Checkpoint::new();
        emu.stack.write_checkpoint(&mut ck);
        let back = Emulator::from_checkpoint(&tiny(), &ck).unwrap();
        assert_eq!(back, emu);
    }

    #[test]
    fn segment_shape_contracts() {
        let m = build_model(&tiny(), 2).unwrap();
        let mut tape = Tape::new();
        let b = m.bind_all(&mut tape, [false; 3]).unwrap();
        let tk = tokens(3, 5);
        let inp = m.input.forward(&mut tape, &b[0], &tk).unwrap();
        assert_eq!(tape.shape(inp.out), &[3, 5, 16]);
        assert_eq!(tape.shape(inp.emb), &[3, 5, 16]);
        let mid = m.backbone.forward(&mut tape, &b[1], inp.out).unwrap();
        assert_eq!(tape.shape(mid), &[3, 5, 16]);
        let logits = m.output.forward(&mut tape, &b[2], mid).unwrap();
        assert_eq!(tape.shape(logits), &[3, 5, 32]);

        let wrong = tape.constant(Tensor::zeros(&[3, 5, 8])).unwrap();
        assert!(m.backbone.forward(&mut tape, &b[1], wrong).is_err());
        let bad_ids = TokenBatch::new(1, 2, vec![0, 32]).unwrap();
        assert!(matches!(
            m.input.forward(&mut tape, &b[0], &bad_ids),
            Err(ModelError::Tensor(TensorError::Index { .. }))
        ));
    }

    #[test]
    fn repeated_ids_share_embedding_rows() {
        let m = build_model(&tiny(), 2).unwrap();
        let mut tape = Tape::new();
        let b = m.input.bind(&mut tape, false).unwrap();
        let tok = tape.gather(b.0[0], &[0, 0]).unwrap();
        let v = tape.value(tok).data();
        assert_eq!(v[..16], v[16..]);
        let emb = m
            .input
            .embed(&mut tape, &b, &TokenBatch::new(1, 2, vec![0, 0]).unwrap())
            .unwrap();
        assert_eq!(tape.shape(emb), &[1, 2, 16]);
    }

    #[test]
    fn embed_matches_first_stage_of_forward() {
        let m = build_model(&tiny(), 4).unwrap();
        let tk = tokens(2, 6);
        let mut t1 = Tape::new();
        let b1 = m.input.bind(&mut t1, false).unwrap();
        let e = m.input.embed(&mut t1, &b1, &tk).unwrap();
        let mut t2 = Tape::new();
        let b2 = m.input.bind(&mut t2, false).unwrap();
        let f = m.input.forward(&mut t2, &b2, &tk).unwrap();
        assert!(t1.value(e).bit_eq(t2.value(f.emb)));
    }

    #[test]
    fn split_chain_equals_monolithic_bitwise() {
        let m = build_model(&tiny(), 5).unwrap();
        let tk = tokens(2, 7);
        let mut mono = Tape::new();
        let b = m.bind_all(&mut mono, [false; 3]).unwrap();
        let (_, logits) = m.forward(&mut mono, &b, &tk).unwrap();

        let mut t1 = Tape::new();
        let b1 = m.input.bind(&mut t1, false).unwrap();
        let o1 = m.input.forward(&mut t1, &b1, &tk).unwrap().out;
        let a1 = t1.value(o1).clone();
        let mut t2 = Tape::new();
        let b2 = m.backbone.bind(&mut t2, false).unwrap();
        let x2 = t2.constant(a1).unwrap();
        let o2 = m.backbone.forward(&mut t2, &b2, x2).unwrap();
        let a2 = t2.value(o2).clone();
        let mut t3 = Tape::new();
        let b3 = m.output.bind(&mut t3, false).unwrap();
        let x3 = t3.constant(a2).unwrap();
        let l3 = m.output.forward(&mut t3, &b3, x3).unwrap();
        assert!(t3.value(l3).bit_eq(mono.value(logits)));
    }

    #[test]
    fn checkpoint_round_trip_and_manifest() {
        let m = build_model(&tiny(), 6).unwrap();
        let back = ModelPartition::from_checkpoint(&tiny(), &m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
        assert!(m.manifest().contains("backbone = [1, 2, 3, 4]"));
    }
}
