//! Toy frozen dual encoder hosting the learnable prompt.
//!
//! The text side is a small pre-norm causal transformer over the sequence
//! `[v_1, ..., v_M, E[class_token], E[eot]]`. Its hidden states at the `M`
//! prompt positions feed a bias-free LM head whose weight is the transpose of
//! the token embedding table; the state at the `eot` position is projected
//! into the joint space and normalised to give the class text feature. The
//! image side is a bank of precomputed unit-norm features.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{Matrix, ParamId, Tape, Var};

/// Identifier of the prompt context on a [`Tape`].
pub const PROMPT_PARAM: ParamId = ParamId(0);

const EMBEDDING_STD: f64 = 0.02;
const POSITIONAL_STD: f64 = 0.01;
const LAYER_NORM_EPS: f64 = 1e-5;
const FFN_EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub joint_dim: usize,
    pub prompt_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            embed_dim: 32,
            encoder_layers: 2,
            attention_heads: 2,
            joint_dim: 16,
            prompt_len: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.vocab_size >= 1
                && self.embed_dim >= 1
                && self.encoder_layers >= 1
                && self.attention_heads >= 1
                && self.joint_dim >= 1
                && self.prompt_len >= 1,
            Parameter,
            "model dimensions must all be at least 1: {self:?}"
        );
        ensure!(
            self.embed_dim.is_multiple_of(self.attention_heads),
            Parameter,
            "embed_dim {} is not divisible by {} heads",
            self.embed_dim,
            self.attention_heads
        );
        ensure!(
            self.vocab_size >= self.prompt_len + 2,
            Parameter,
            "vocab_size {} must be at least prompt_len + 2",
            self.vocab_size
        );
        Ok(())
    }

    /// Reserved end-of-text token, always the last vocabulary entry.
    pub fn eot_token(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn sequence_len(&self) -> usize {
        self.prompt_len + 2
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.attention_heads
    }
}

/// Frozen token embedding table, `vocab_size x embed_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabEmbedding {
    table: Matrix,
}

impl VocabEmbedding {
    pub fn new(table: Matrix) -> Result<Self> {
        if let Some(i) = table
            .row_iter()
            .position(|r| r.iter().all(|&v| v == 0.0))
        {
            return Err(Error::Degenerate(format!("embedding row {i} has zero norm")));
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }
}

/// Bias-free linear map `hidden -> vocabulary logits`, tied to the embedding.
///
/// Holds a borrow of the embedding table rather than a copy, so the weight is
/// always exactly `E^T`.
#[derive(Clone, Copy, Debug)]
pub struct LmHead<'a> {
    embedding: &'a VocabEmbedding,
}

impl LmHead<'_> {
    /// `embed_dim x vocab_size`.
    pub fn weight(&self) -> Matrix {
        self.embedding.table.transpose()
    }

    pub fn logits(&self, hidden: &Matrix) -> Result<Matrix> {
        crate::numerics::matmul(hidden, &self.weight())
    }
}

/// Learnable context vectors `v_1..v_M`, `M x embed_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub vectors: Matrix,
}

impl PromptContext {
    pub fn new(vectors: Matrix) -> Self {
        Self { vectors }
    }

    /// Entries drawn from `Normal(0, 0.02)`.
    pub fn random(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, EMBEDDING_STD).expect("valid std");
        Self {
            vectors: Matrix::from_fn(config.prompt_len, config.embed_dim, |_, _| {
                normal.sample(rng)
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub class_token: usize,
    pub name: String,
}

/// Frozen unit-norm image features with their class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatureBank {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl ImageFeatureBank {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        ensure!(
            features.rows() == labels.len(),
            Dimension,
            "{} features for {} labels",
            features.rows(),
            labels.len()
        );
        for (i, row) in features.row_iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure!(
                (norm - 1.0).abs() <= 1e-9,
                Contract,
                "image feature {i} has norm {norm}"
            );
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn joint_dim(&self) -> usize {
        self.features.cols()
    }

    /// Images whose label is in `keep`, relabelled to positions in `keep`.
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(pos) = keep.iter().position(|k| k == l) {
                rows.push(i);
                labels.push(pos);
            }
        }
        Ok(Self {
            features: self.features.select_rows(&rows)?,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub ln_attn_gamma: Vec<f64>,
    pub ln_attn_beta: Vec<f64>,
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
    pub w_out: Matrix,
    pub ln_ffn_gamma: Vec<f64>,
    pub ln_ffn_beta: Vec<f64>,
    pub w_fc1: Matrix,
    pub b_fc1: Matrix,
    pub w_fc2: Matrix,
    pub b_fc2: Matrix,
}

/// Frozen text-encoder weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderState {
    pub positional: Matrix,
    pub layers: Vec<EncoderLayer>,
    pub ln_final_gamma: Vec<f64>,
    pub ln_final_beta: Vec<f64>,
    /// `embed_dim x joint_dim`.
    pub projection: Matrix,
}

/// Output of the text encoder for one prompt sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedText {
    /// Final-layer states, `(M + 2) x embed_dim`.
    pub hidden: Matrix,
    /// Unit-norm joint-space feature taken at the `eot` position.
    pub text_feature: Vec<f64>,
}

/// The frozen text model: embedding table, encoder and (implicitly) the tied LM head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextModel {
    pub config: ModelConfig,
    pub embedding: VocabEmbedding,
    pub encoder: TextEncoderState,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Draws every frozen weight from a generator seeded with `config.seed`.
pub fn init_model(config: &ModelConfig) -> Result<TextModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.embed_dim;
    let hidden = FFN_EXPANSION * d;
    let proj_std = (d as f64).powf(-0.5);

    let embedding = VocabEmbedding::new(normal_matrix(&mut rng, config.vocab_size, d, EMBEDDING_STD))?;
    let positional = normal_matrix(&mut rng, config.sequence_len(), d, POSITIONAL_STD);
    let layers = (0..config.encoder_layers)
        .map(|_| EncoderLayer {
            ln_attn_gamma: vec![1.0; d],
            ln_attn_beta: vec![0.0; d],
            w_query: normal_matrix(&mut rng, d, d, proj_std),
            w_key: normal_matrix(&mut rng, d, d, proj_std),
            w_value: normal_matrix(&mut rng, d, d, proj_std),
            w_out: normal_matrix(&mut rng, d, d, proj_std),
            ln_ffn_gamma: vec![1.0; d],
            ln_ffn_beta: vec![0.0; d],
            w_fc1: normal_matrix(&mut rng, d, hidden, proj_std),
            b_fc1: Matrix::zeros(1, hidden),
            w_fc2: normal_matrix(&mut rng, hidden, d, (hidden as f64).powf(-0.5)),
            b_fc2: Matrix::zeros(1, d),
        })
        .collect();
    let projection = normal_matrix(&mut rng, d, config.joint_dim, proj_std);

    Ok(TextModel {
        config: config.clone(),
        embedding,
        encoder: TextEncoderState {
            positional,
            layers,
            ln_final_gamma: vec![1.0; d],
            ln_final_beta: vec![0.0; d],
            projection,
        },
    })
}

impl TextModel {
    pub fn lm_head(&self) -> LmHead<'_> {
        LmHead {
            embedding: &self.embedding,
        }
    }

    fn check_class(&self, class: &ClassSpec) -> Result<()> {
        ensure!(
            class.class_token < self.config.vocab_size,
            Parameter,
            "class token {} outside vocabulary of {}",
            class.class_token,
            self.config.vocab_size
        );
        ensure!(
            class.class_token != self.config.eot_token(),
            Parameter,
            "class token {} is the reserved end-of-text token",
            class.class_token
        );
        Ok(())
    }

    fn check_prompt(&self, prompt: &Matrix) -> Result<()> {
        ensure!(
            prompt.shape() == (self.config.prompt_len, self.config.embed_dim),
            Dimension,
            "prompt shape {:?}, model expects {}x{}",
            prompt.shape(),
            self.config.prompt_len,
            self.config.embed_dim
        );
        Ok(())
    }

    /// `[v_1, ..., v_M, E[class_token], E[eot]]`.
    pub fn build_prompt_sequence(&self, prompt: &PromptContext, class: &ClassSpec) -> Result<Matrix> {
        self.check_prompt(&prompt.vectors)?;
        self.check_class(class)?;
        let tail = self
            .embedding
            .table
            .select_rows(&[class.class_token, self.config.eot_token()])?;
        Matrix::concat_rows(&[&prompt.vectors, &tail])
    }

    /// Runs the encoder on a sequence produced by [`build_prompt_sequence`](Self::build_prompt_sequence).
    pub fn encode_text(&self, sequence: &Matrix) -> Result<EncodedText> {
        ensure!(
            sequence.shape() == (self.config.sequence_len(), self.config.embed_dim),
            Dimension,
            "sequence shape {:?}",
            sequence.shape()
        );
        let mut tape = Tape::new();
        let frozen = self.bind(&mut tape);
        let input = tape.constant(sequence.clone());
        let (hidden, feature) = frozen.encode_sequence(&mut tape, input)?;
        Ok(EncodedText {
            hidden: tape.value(hidden).clone(),
            text_feature: tape.value(feature).values().to_vec(),
        })
    }

    /// Logits over the vocabulary for the first `M` rows of `hidden`.
    pub fn lm_head_logits(&self, hidden: &Matrix) -> Result<Matrix> {
        ensure!(
            hidden.rows() >= self.config.prompt_len,
            Dimension,
            "hidden has {} rows, need at least {}",
            hidden.rows(),
            self.config.prompt_len
        );
        self.lm_head()
            .logits(&hidden.slice_rows(0, self.config.prompt_len)?)
    }

    /// Unit-norm text features for every class, `K x joint_dim`.
    pub fn class_text_features(&self, prompt: &PromptContext, classes: &[ClassSpec]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let frozen = self.bind(&mut tape);
        let v = tape.constant(prompt.vectors.clone());
        let mut rows = Vec::with_capacity(classes.len());
        for class in classes {
            let enc = frozen.encode_class(&mut tape, v, class)?;
            rows.push(tape.value(enc.text_feature).clone());
        }
        let refs: Vec<&Matrix> = rows.iter().collect();
        Matrix::concat_rows(&refs)
    }

    /// Registers the frozen weights as constants on `tape`.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> BoundModel<'m> {
        let enc = &self.encoder;
        BoundModel {
            model: self,
            positional: tape.constant(enc.positional.clone()),
            layers: enc
                .layers
                .iter()
                .map(|l| BoundLayer {
                    weights: l,
                    w_query: tape.constant(l.w_query.clone()),
                    w_key: tape.constant(l.w_key.clone()),
                    w_value: tape.constant(l.w_value.clone()),
                    w_out: tape.constant(l.w_out.clone()),
                    w_fc1: tape.constant(l.w_fc1.clone()),
                    b_fc1: tape.constant(l.b_fc1.clone()),
                    w_fc2: tape.constant(l.w_fc2.clone()),
                    b_fc2: tape.constant(l.b_fc2.clone()),
                })
                .collect(),
            projection: tape.constant(enc.projection.clone()),
            embedding: tape.constant(self.embedding.table.clone()),
            lm_head: tape.constant(self.lm_head().weight()),
        }
    }
}

struct BoundLayer<'m> {
    weights: &'m EncoderLayer,
    w_query: Var,
    w_key: Var,
    w_value: Var,
    w_out: Var,
    w_fc1: Var,
    b_fc1: Var,
    w_fc2: Var,
    b_fc2: Var,
}

/// Class encoding on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub hidden: Var,
    pub text_feature: Var,
}

/// A [`TextModel`] whose frozen weights live on a particular tape.
pub struct BoundModel<'m> {
    model: &'m TextModel,
    positional: Var,
    layers: Vec<BoundLayer<'m>>,
    projection: Var,
    embedding: Var,
    lm_head: Var,
}

impl BoundModel<'_> {
    pub fn model(&self) -> &TextModel {
        self.model
    }

    /// The embedding table as a constant node.
    pub fn embedding(&self) -> Var {
        self.embedding
    }

    /// Builds the sequence for `class` around the prompt node and encodes it.
    pub fn encode_class(&self, tape: &mut Tape, prompt: Var, class: &ClassSpec) -> Result<EncodedVars> {
        self.model.check_prompt(tape.value(prompt))?;
        self.model.check_class(class)?;
        let tail = tape.constant(
            self.model
                .embedding
                .table
                .select_rows(&[class.class_token, self.model.config.eot_token()])?,
        );
        let sequence = tape.concat_rows(&[prompt, tail])?;
        let (hidden, text_feature) = self.encode_sequence(tape, sequence)?;
        Ok(EncodedVars { hidden, text_feature })
    }

    /// Logits for the `M` prompt positions of `hidden`.
    pub fn lm_head_logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let prompt_rows = tape.slice_rows(hidden, 0, self.model.config.prompt_len)?;
        tape.matmul(prompt_rows, self.lm_head)
    }

    fn encode_sequence(&self, tape: &mut Tape, sequence: Var) -> Result<(Var, Var)> {
        let config = &self.model.config;
        let mut x = tape.add(sequence, self.positional)?;
        for layer in &self.layers {
            x = self.attention_block(tape, layer, x)?;
            x = self.feed_forward_block(tape, layer, x)?;
        }
        let enc = &self.model.encoder;
        let hidden = tape.layer_norm(x, &enc.ln_final_gamma, &enc.ln_final_beta, LAYER_NORM_EPS)?;
        let pooled = tape.slice_rows(hidden, config.sequence_len() - 1, 1)?;
        let projected = tape.matmul(pooled, self.projection)?;
        let feature = tape.l2_normalize_rows(projected)?;
        Ok((hidden, feature))
    }

    fn attention_block(&self, tape: &mut Tape, layer: &BoundLayer<'_>, x: Var) -> Result<Var> {
        let config = &self.model.config;
        let w = layer.weights;
        let h = tape.layer_norm(x, &w.ln_attn_gamma, &w.ln_attn_beta, LAYER_NORM_EPS)?;
        let q = tape.matmul(h, layer.w_query)?;
        let k = tape.matmul(h, layer.w_key)?;
        let v = tape.matmul(h, layer.w_value)?;
        let head_dim = config.head_dim();
        let scale = (head_dim as f64).powf(-0.5);
        let mut heads = Vec::with_capacity(config.attention_heads);
        for head in 0..config.attention_heads {
            let start = head * head_dim;
            let qh = tape.slice_cols(q, start, head_dim)?;
            let kh = tape.slice_cols(k, start, head_dim)?;
            let vh = tape.slice_cols(v, start, head_dim)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let scores = tape.scale(raw, scale)?;
            let attn = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let out = tape.matmul(merged, layer.w_out)?;
        tape.add(x, out)
    }

    fn feed_forward_block(&self, tape: &mut Tape, layer: &BoundLayer<'_>, x: Var) -> Result<Var> {
        let w = layer.weights;
        let h = tape.layer_norm(x, &w.ln_ffn_gamma, &w.ln_ffn_beta, LAYER_NORM_EPS)?;
        let fc1 = tape.matmul(h, layer.w_fc1)?;
        let fc1 = tape.add_row(fc1, layer.b_fc1)?;
        let act = tape.quick_gelu(fc1)?;
        let fc2 = tape.matmul(act, layer.w_fc2)?;
        let fc2 = tape.add_row(fc2, layer.b_fc2)?;
        tape.add(x, fc2)
    }
}

const SNAPSHOT_FORMAT: &str = "plpp-weights";
const SNAPSHOT_VERSION: u32 = 1;

/// On-disk container for the frozen model and, optionally, a trained prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSnapshot {
    pub format: String,
    pub version: u32,
    pub model: TextModel,
    pub prompt: Option<PromptContext>,
}

impl WeightSnapshot {
    pub fn new(model: TextModel, prompt: Option<PromptContext>) -> Self {
        Self {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            model,
            prompt,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("snapshot serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let snap: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported container {} v{}", snap.format, snap.version),
            ));
        }
        snap.model.config.validate()?;
        let c = &snap.model.config;
        ensure!(
            snap.model.embedding.table().shape() == (c.vocab_size, c.embed_dim)
                && snap.model.encoder.layers.len() == c.encoder_layers
                && snap.model.encoder.projection.shape() == (c.embed_dim, c.joint_dim),
            Dimension,
            "snapshot weights do not match the echoed config"
        );
        if let Some(p) = &snap.prompt {
            snap.model.check_prompt(&p.vectors)?;
        }
        Ok(snap)
    }
}
