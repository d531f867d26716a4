//! Class prototypes from prompts run through a frozen text map.
//!
//! A prompt is a token-embedding sequence: either `K` learnable context
//! vectors followed by the class-name tokens, or a fixed template with the
//! class name substituted. The frozen map averages the sequence and applies
//! two seeded affine + tanh layers. The background prototype `p_0` is a free
//! learnable vector.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, Parameters};
use crate::tensor::Matrix;

/// Placeholder replaced by the class name in template prompts.
pub const CLASS_SLOT: &str = "[CLASS]";

pub const DEFAULT_TEMPLATE: &str = "a [CLASS] part of a person";

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| c == '.' || c == ',' || c == '"')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seeded token table plus the fixed nonlinear sequence-to-prototype map.
/// Nothing in here is ever updated by an optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTextEncoder {
    token_dim: usize,
    out_dim: usize,
    table: BTreeMap<String, Vec<f64>>,
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
}

impl FrozenTextEncoder {
    /// Vocabulary = lower-cased words of `texts`; `[CLASS]` slots are skipped.
    pub fn new<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        token_dim: usize,
        out_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if token_dim == 0 || out_dim == 0 {
            return Err(Error::Config("text encoder widths must be positive".into()));
        }
        let mut table = BTreeMap::new();
        for text in texts {
            for w in words(text) {
                if w == CLASS_SLOT.to_lowercase() {
                    continue;
                }
                table.entry(w.clone()).or_insert_with(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&w));
                    Matrix::randn(1, token_dim, 1.0, &mut rng).into_vec()
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x7e47));
        let gain = 2.0;
        let w1 = Matrix::randn(token_dim, out_dim, gain / libm::sqrt(token_dim as f64), &mut rng);
        let b1 = Matrix::randn(1, out_dim, 0.1, &mut rng);
        let w2 = Matrix::randn(out_dim, out_dim, gain / libm::sqrt(out_dim as f64), &mut rng);
        let b2 = Matrix::randn(1, out_dim, 0.1, &mut rng);
        Ok(Self {
            token_dim,
            out_dim,
            table,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(String::as_str)
    }

    /// Embeddings of the whitespace tokens of `text`, one row each.
    pub fn embed_tokens(&self, text: &str) -> Result<Matrix> {
        let mut data = Vec::new();
        let mut rows = 0;
        for w in words(text) {
            let emb = self.table.get(&w).ok_or_else(|| Error::UnknownToken(w.clone()))?;
            data.extend_from_slice(emb);
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::UnknownToken(text.to_string()));
        }
        Matrix::from_vec(rows, self.token_dim, data)
    }

    /// Encodes an `L x e` sequence node into a `1 x d` prototype node.
    pub fn encode_sequence(&self, g: &mut Graph, sequence: Var) -> Result<Var> {
        if g.value(sequence).cols() != self.token_dim {
            return Err(Error::Dimension {
                expected: self.token_dim,
                found: g.value(sequence).cols(),
            });
        }
        let pooled = g.mean_rows(sequence)?;
        let w1 = g.constant(self.w1.clone());
        let b1 = g.constant(self.b1.clone());
        let w2 = g.constant(self.w2.clone());
        let b2 = g.constant(self.b2.clone());
        let h = g.matmul(pooled, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.tanh(h);
        let o = g.matmul(h, w2)?;
        let o = g.add_row(o, b2)?;
        Ok(g.tanh(o))
    }

    /// Stable byte dump of every frozen value, for freeze checks.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (word, emb) in &self.table {
            out.extend_from_slice(word.as_bytes());
            for v in emb {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for m in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// `K` learnable context vectors of token width `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    vectors: Matrix,
}

impl PromptContext {
    pub fn new(len: usize, token_dim: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config(
                "prompt context length K must be at least 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            vectors: Matrix::randn(len, token_dim, 0.02, &mut rng),
        })
    }

    pub fn from_matrix(vectors: Matrix) -> Result<Self> {
        if vectors.rows() == 0 || !vectors.is_finite() {
            return Err(Error::Config("prompt context must be finite with K >= 1".into()));
        }
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Matrix {
        &mut self.vectors
    }
}

/// `[V]_1 .. [V]_K` followed by the class-name token embeddings.
pub fn build_prompt_sequence(
    context: &PromptContext,
    class_name: &str,
    encoder: &FrozenTextEncoder,
) -> Result<Matrix> {
    if context.vectors.cols() != encoder.token_dim() {
        return Err(Error::Dimension {
            expected: encoder.token_dim(),
            found: context.vectors.cols(),
        });
    }
    let tokens = encoder.embed_tokens(class_name)?;
    Matrix::stack_rows(&[&context.vectors, &tokens])
}

/// Hand-crafted prompt: the template with `[CLASS]` replaced by the name.
pub fn build_template_sequence(
    template: &str,
    class_name: &str,
    encoder: &FrozenTextEncoder,
) -> Result<Matrix> {
    if !template.contains(CLASS_SLOT) {
        return Err(Error::Config(format!(
            "prompt template `{template}` lacks a {CLASS_SLOT} slot"
        )));
    }
    encoder.embed_tokens(&template.replace(CLASS_SLOT, class_name))
}

/// Class prototypes `p_1..p_N`, the background `p_0`, and the class names.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Matrix,
    pub background: Vec<f64>,
    pub class_names: Vec<String>,
    /// Imported sets are never trained.
    pub frozen: bool,
}

impl PrototypeSet {
    pub fn new(prototypes: Matrix, background: Vec<f64>, class_names: Vec<String>) -> Result<Self> {
        if prototypes.rows() == 0 || prototypes.rows() != class_names.len() {
            return Err(Error::Config(format!(
                "{} prototypes for {} class names",
                prototypes.rows(),
                class_names.len()
            )));
        }
        if background.len() != prototypes.cols() {
            return Err(Error::Dimension {
                expected: prototypes.cols(),
                found: background.len(),
            });
        }
        if !prototypes.is_finite() || background.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("prototype values must be finite".into()));
        }
        Ok(Self {
            prototypes,
            background,
            class_names,
            frozen: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    /// `(N+1) x d` with the background in row 0.
    pub fn with_background(&self) -> Matrix {
        let bg = Matrix::row_vector(self.background.clone());
        Matrix::stack_rows(&[&bg, &self.prototypes]).expect("widths checked at construction")
    }
}

const PROTO_MAGIC: &[u8; 8] = b"RGAPROTO";
const PROTO_VERSION: u32 = 1;

/// Serialises a prototype set.
///
/// Layout, all integers little-endian:
/// `"RGAPROTO"`, `u32` version (1), `u32` N, `u32` d, N rows of d `f32`
/// (classes 1..N), one row of d `f32` (background), then every class name
/// followed by `'\n'`.
pub fn encode_prototypes_container(set: &PrototypeSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PROTO_MAGIC);
    out.extend_from_slice(&PROTO_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.classes() as u32).to_le_bytes());
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    for v in set.prototypes.as_slice().iter().chain(&set.background) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for name in &set.class_names {
        out.extend_from_slice(name.as_bytes());
        out.push(b'\n');
    }
    out
}

/// Parses a prototype container; `expected_dim` guards against a feature
/// width mismatch. The result is marked frozen.
pub fn decode_prototypes_container(bytes: &[u8], expected_dim: Option<usize>) -> Result<PrototypeSet> {
    let corrupt = |m: &str| Error::Format(format!("prototype container: {m}"));
    if bytes.len() < 20 || &bytes[..8] != PROTO_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != PROTO_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let n = u32_at(12) as usize;
    let d = u32_at(16) as usize;
    if n == 0 || d == 0 {
        return Err(corrupt("empty header"));
    }
    if let Some(expected) = expected_dim {
        if expected != d {
            return Err(Error::Dimension { expected, found: d });
        }
    }
    let floats = (n + 1).checked_mul(d).ok_or_else(|| corrupt("header overflow"))?;
    let body_end = 20 + floats * 4;
    if bytes.len() < body_end {
        return Err(corrupt("truncated rows"));
    }
    let values: Vec<f64> = bytes[20..body_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let text = core::str::from_utf8(&bytes[body_end..]).map_err(|_| corrupt("names not UTF-8"))?;
    let names: Vec<String> = text.split_terminator('\n').map(String::from).collect();
    if names.len() != n {
        return Err(corrupt(&format!("{} class names for N = {n}", names.len())));
    }
    let prototypes = Matrix::from_vec(n, d, values[..n * d].to_vec())?;
    let mut set = PrototypeSet::new(prototypes, values[n * d..].to_vec(), names)?;
    set.frozen = true;
    Ok(set)
}

/// How prototypes are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Prompt {
    Learned(PromptContext),
    Template(String),
    Imported(PrototypeSet),
}

/// Text side of the model: frozen map, prompt state, and background `p_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptModule {
    pub text: FrozenTextEncoder,
    pub prompt: Prompt,
    pub background: Matrix,
    pub class_names: Vec<String>,
}

impl PromptModule {
    pub fn new(
        text: FrozenTextEncoder,
        prompt: Prompt,
        class_names: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Config("at least one region class name is required".into()));
        }
        let background = match &prompt {
            Prompt::Imported(set) => {
                if set.class_names.len() != class_names.len() {
                    return Err(Error::Config(format!(
                        "imported prototypes have {} classes, configuration has {}",
                        set.class_names.len(),
                        class_names.len()
                    )));
                }
                Matrix::row_vector(set.background.clone())
            }
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Matrix::randn(1, text.out_dim(), 0.02, &mut rng)
            }
        };
        let module = Self {
            text,
            prompt,
            background,
            class_names,
        };
        // surface tokenisation errors at construction
        module.encode()?;
        Ok(module)
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_learned(&self) -> bool {
        matches!(self.prompt, Prompt::Learned(_))
    }

    pub fn is_imported(&self) -> bool {
        matches!(self.prompt, Prompt::Imported(_))
    }

    pub fn context(&self) -> Option<&PromptContext> {
        match &self.prompt {
            Prompt::Learned(c) => Some(c),
            _ => None,
        }
    }

    /// `(N+1) x d` prototype node, background first.
    pub fn prototypes_on_graph(
        &self,
        binder: &mut Binder<'_>,
        train_context: bool,
        train_background: bool,
    ) -> Result<Var> {
        if let Prompt::Imported(set) = &self.prompt {
            let rows = Matrix::stack_rows(&[&self.background, &set.prototypes])?;
            return Ok(binder.graph.constant(rows));
        }
        let background = binder.bind("prompt.background", &self.background, train_background);
        let context = match &self.prompt {
            Prompt::Learned(ctx) => Some(binder.bind("prompt.context", &ctx.vectors, train_context)),
            _ => None,
        };
        let g = &mut *binder.graph;
        let mut rows = Vec::with_capacity(self.classes() + 1);
        rows.push(background);
        for name in &self.class_names {
            let seq = match (&self.prompt, context) {
                (Prompt::Template(template), _) => {
                    let tokens = build_template_sequence(template, name, &self.text)?;
                    g.constant(tokens)
                }
                (_, Some(ctx)) => {
                    let tokens = g.constant(self.text.embed_tokens(name)?);
                    g.concat_rows(&[ctx, tokens])?
                }
                _ => unreachable!("imported prompts return early"),
            };
            rows.push(self.text.encode_sequence(g, seq)?);
        }
        g.concat_rows(&rows)
    }

    /// Value-level prototypes.
    pub fn encode(&self) -> Result<PrototypeSet> {
        if let Prompt::Imported(set) = &self.prompt {
            let mut set = set.clone();
            set.background = self.background.as_slice().to_vec();
            return Ok(set);
        }
        let mut graph = Graph::new();
        let mut binder = Binder::new(&mut graph);
        let all = self.prototypes_on_graph(&mut binder, false, false)?;
        let m = graph.value(all);
        PrototypeSet::new(
            m.select_rows(1, m.rows()),
            m.row(0).to_vec(),
            self.class_names.clone(),
        )
    }
}

impl Parameters for PromptModule {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        match &self.prompt {
            Prompt::Learned(ctx) => f("prompt.context", &ctx.vectors),
            Prompt::Imported(set) => {
                f("prompt.imported", &set.prototypes);
            }
            Prompt::Template(_) => {}
        }
        f("prompt.background", &self.background);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        match &mut self.prompt {
            Prompt::Learned(ctx) => f("prompt.context", &mut ctx.vectors),
            Prompt::Imported(set) => f("prompt.imported", &mut set.prototypes),
            Prompt::Template(_) => {}
        }
        f("prompt.background", &mut self.background);
    }
}

/// Prototypes from a learned context, one per class name, via the frozen map.
pub fn encode_prototypes(
    context: &PromptContext,
    class_names: &[String],
    encoder: &FrozenTextEncoder,
    background: &[f64],
) -> Result<PrototypeSet> {
    let module = PromptModule {
        text: encoder.clone(),
        prompt: Prompt::Learned(context.clone()),
        background: Matrix::row_vector(background.to_vec()),
        class_names: class_names.to_vec(),
    };
    module.encode()
}
