//! The assembled network: encoder, prompt module, assessment heads, global
//! classifier, and memory bank.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, PromptMode, RegionMode};
use crate::data::Image;
use crate::encoder::{EncoderParams, EncoderVars, FeatureMap};
use crate::error::{Error, Result};
use crate::params::{init_weight, Binder, Bound, Parameters};
use crate::prototypes::{FrozenTextEncoder, Prompt, PromptContext, PromptModule, PrototypeSet};
use crate::ram::{alpha_on_graph, fuse_on_graph, ConfidenceScores, MemoryBank, RamHeads, RamVars};
use crate::rgm::{masks_on_graph, stripe_masks, SegmentationMasks};
use crate::tensor::{self, Matrix};

/// Decorrelated per-component seeds from the run seed.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Which parameters a graph may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Prompt context and background only.
    Prompt,
    /// Everything except the prompt context.
    Joint,
    /// Nothing.
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: Config,
    pub encoder: EncoderParams,
    pub prompt: PromptModule,
    pub heads: RamHeads,
    /// Global identity head, `d x C`.
    pub classifier: Matrix,
    pub memory: Option<MemoryBank>,
    /// Joint-stage epochs completed.
    pub epoch: u32,
}

pub struct ModelVars {
    pub encoder: EncoderVars,
    pub prototypes: Option<Var>,
    pub ram: RamVars,
    pub classifier: Var,
}

/// Graph nodes of one batch forward pass.
pub struct Forward {
    pub batch: usize,
    /// `(B*P) x d`.
    pub features: Var,
    /// `(B*P) x (N+1)`, background first; `None` when `N = 0`.
    pub masks: Option<Var>,
    /// Region-major `(N*B) x d`.
    pub regions: Option<Var>,
    /// `B x d`.
    pub global: Var,
}

/// Inference output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub global: Vec<f64>,
    pub regions: Matrix,
    pub scores: ConfidenceScores,
    pub masks: Option<SegmentationMasks>,
}

fn text_encoder(config: &Config) -> Result<FrozenTextEncoder> {
    let texts = config
        .class_names
        .iter()
        .map(String::as_str)
        .chain([config.prompt_template.as_str()]);
    FrozenTextEncoder::new(texts, config.token_dim, config.feature_dim, derive_seed(config.seed, 2))
}

impl Model {
    /// Fresh model for `identities` training identities; `imported` supplies
    /// the prototypes when the configuration asks for them.
    pub fn new(config: &Config, identities: usize, imported: Option<PrototypeSet>) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let encoder = EncoderParams::new(config.encoder(), derive_seed(seed, 1))?;
        let text = text_encoder(config)?;
        let prompt = match config.prompt_mode {
            PromptMode::Learned => Prompt::Learned(PromptContext::new(
                config.context_len,
                config.token_dim,
                derive_seed(seed, 3),
            )?),
            PromptMode::Template => Prompt::Template(config.prompt_template.clone()),
            PromptMode::Imported => {
                let set = imported.ok_or_else(|| Error::Missing("imported prototype set".into()))?;
                if set.dim() != config.feature_dim {
                    return Err(Error::Dimension {
                        expected: config.feature_dim,
                        found: set.dim(),
                    });
                }
                Prompt::Imported(set)
            }
        };
        let class_names = if config.regions == 0 {
            // the prompt module needs a class; it is unused without regions
            alloc::vec![String::from(config.prompt_template.split_whitespace().next().unwrap_or("a"))]
        } else {
            config.class_names.clone()
        };
        let prompt = PromptModule::new(text, prompt, class_names, derive_seed(seed, 4))?;
        let heads = RamHeads::new(config.regions, config.feature_dim, identities, derive_seed(seed, 5))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 6));
        let classifier = init_weight(config.feature_dim, identities, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            prompt,
            heads,
            classifier,
            memory: None,
            epoch: 0,
        })
    }

    pub fn regions(&self) -> usize {
        self.config.regions
    }

    pub fn identities(&self) -> usize {
        self.classifier.cols()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.encoder.config().grid()
    }

    pub fn bind(&self, binder: &mut Binder<'_>, stage: Stage) -> Result<ModelVars> {
        let joint = stage == Stage::Joint;
        let encoder = self.encoder.bind(binder, joint);
        let prototypes = if self.config.region_mode == RegionMode::Rgm && self.regions() > 0 {
            Some(self.prompt.prototypes_on_graph(binder, stage == Stage::Prompt, stage != Stage::Inference)?)
        } else {
            None
        };
        let ram = self.heads.bind(binder, joint);
        let classifier = binder.bind("global.classifier", &self.classifier, joint);
        Ok(ModelVars {
            encoder,
            prototypes,
            ram,
            classifier,
        })
    }

    /// Forward pass over a batch of images of the configured size.
    pub fn forward(&self, g: &mut Graph, vars: &ModelVars, images: &[&Image]) -> Result<Forward> {
        let nodes: Vec<Var> = images.iter().map(|im| g.constant(im.to_matrix())).collect();
        let sizes: Vec<(usize, usize)> = images.iter().map(|im| (im.height(), im.width())).collect();
        let features = vars.encoder.forward(g, &nodes, &sizes)?;
        let (h, w) = self.grid();
        let p = h * w;
        let batch = images.len();
        let n = self.regions();
        let masks = if n == 0 {
            None
        } else {
            Some(match vars.prototypes {
                Some(protos) => masks_on_graph(g, features, protos, self.config.gamma)?,
                None => g.constant(stripe_masks(h, w, n, batch)?),
            })
        };
        let regions = match masks {
            Some(m) => Some(g.masked_pool(m, features, p)?),
            None => None,
        };
        let global = g.block_mean_rows(features, p)?;
        Ok(Forward {
            batch,
            features,
            masks,
            regions,
            global,
        })
    }

    /// `B x N` invariance scores from region-major values, or zeros when the
    /// invariance indicator is disabled.
    pub fn beta_matrix(&self, regions: &Matrix, batch: usize) -> Result<Matrix> {
        let n = self.regions();
        let mut beta = Matrix::zeros(batch, n);
        if !self.config.use_iai || n == 0 {
            return Ok(beta);
        }
        let bank = self.memory.as_ref().ok_or_else(|| Error::Missing("memory bank".into()))?;
        for b in 0..batch {
            let mut sims = Vec::with_capacity(n);
            for j in 0..n {
                let f = regions.row(j * batch + b);
                let s = tensor::cosine(f, bank.centers.row(j)).ok_or(Error::DegenerateNorm {
                    what: "region feature or memory center",
                    index: j,
                })?;
                sims.push(s);
            }
            beta.row_mut(b).copy_from_slice(&tensor::softmax(&sims));
        }
        Ok(beta)
    }

    /// Alpha node (when the discrimination indicator is on), the fused
    /// region-major weight node, and the beta values used.
    pub fn confidence(&self, g: &mut Graph, vars: &ModelVars, fwd: &Forward) -> Result<(Option<Var>, Var, Matrix)> {
        let regions = fwd.regions.ok_or_else(|| Error::Missing("region features".into()))?;
        let n = self.regions();
        let beta = {
            let r = g.value(regions).clone();
            self.beta_matrix(&r, fwd.batch)?
        };
        let alpha = if self.config.use_dai {
            Some(alpha_on_graph(g, regions, vars.ram.w_a)?)
        } else {
            None
        };
        let logit_alpha = match alpha {
            Some(a) if self.config.dai_grad => a,
            Some(a) => g.detach(a),
            None => g.constant(Matrix::zeros(n * fwd.batch, 1)),
        };
        let w = fuse_on_graph(g, logit_alpha, &beta, self.config.fusion)?;
        Ok((alpha, w, beta))
    }

    /// Inference embeddings with the memory bank frozen.
    pub fn embed(&self, images: &[&Image]) -> Result<Vec<Embedding>> {
        let n = self.regions();
        if n > 0 && self.memory.is_none() {
            return Err(Error::Missing(
                "memory bank (train the joint stage before building an index)".into(),
            ));
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(&mut g);
        let vars = self.bind(&mut binder, Stage::Inference)?;
        let fwd = self.forward(&mut g, &vars, images)?;
        let batch = fwd.batch;
        let d = self.config.feature_dim;
        let (h, w) = self.grid();
        let p = h * w;
        let (alpha, weights, beta) = if n > 0 {
            let (a, w, b) = self.confidence(&mut g, &vars, &fwd)?;
            (a.map(|a| g.value(a).clone()), Some(g.value(w).clone()), b)
        } else {
            (None, None, Matrix::zeros(batch, 0))
        };
        let global = g.value(fwd.global);
        let regions = fwd.regions.map(|r| g.value(r));
        let masks = fwd.masks.map(|m| g.value(m));
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut reg = Matrix::zeros(n, d);
            let mut a = Vec::with_capacity(n);
            let mut wv = Vec::with_capacity(n);
            for j in 0..n {
                let row = j * batch + b;
                reg.row_mut(j).copy_from_slice(regions.expect("regions when N > 0").row(row));
                a.push(alpha.as_ref().map_or(0.5, |m| m.get(row, 0)));
                wv.push(weights.as_ref().expect("weights when N > 0").get(row, 0));
            }
            out.push(Embedding {
                global: global.row(b).to_vec(),
                regions: reg,
                scores: ConfidenceScores {
                    alpha: a,
                    beta: beta.row(b).to_vec(),
                    w: wv,
                },
                masks: masks.map(|m| SegmentationMasks {
                    height: h,
                    width: w,
                    masks: m.select_rows(b * p, (b + 1) * p),
                    gamma: self.config.gamma,
                }),
            });
        }
        Ok(out)
    }

    /// Encoder feature maps without building a training graph.
    pub fn feature_maps(&self, images: &[&Image]) -> Result<Vec<FeatureMap>> {
        let mut g = Graph::new();
        let mut binder = Binder::new(&mut g);
        let vars = self.encoder.bind(&mut binder, false);
        let nodes: Vec<Var> = images.iter().map(|im| g.constant(im.to_matrix())).collect();
        let sizes: Vec<(usize, usize)> = images.iter().map(|im| (im.height(), im.width())).collect();
        let f = vars.forward(&mut g, &nodes, &sizes)?;
        let (h, w) = self.grid();
        let v = g.value(f);
        (0..images.len())
            .map(|b| FeatureMap::new(h, w, v.select_rows(b * h * w, (b + 1) * h * w)))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut arrays = self.to_named();
        if let Some(bank) = &self.memory {
            arrays.insert(String::from("memory.centers"), bank.centers.clone());
        }
        Checkpoint {
            epoch: self.epoch,
            config: self.config.to_text(),
            arrays,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = Config::parse(&ckpt.config)?;
        let classifier = ckpt
            .arrays
            .get("global.classifier")
            .ok_or_else(|| Error::Missing("checkpoint array `global.classifier`".into()))?;
        let imported = match config.prompt_mode {
            PromptMode::Imported => {
                let protos = ckpt
                    .arrays
                    .get("prompt.imported")
                    .ok_or_else(|| Error::Missing("checkpoint array `prompt.imported`".into()))?;
                let mut set = PrototypeSet::new(
                    protos.clone(),
                    alloc::vec![0.0; protos.cols()],
                    config.class_names.clone(),
                )?;
                set.frozen = true;
                Some(set)
            }
            _ => None,
        };
        let mut model = Model::new(&config, classifier.cols(), imported)?;
        let mut problem: Option<Error> = None;
        model.visit_mut(&mut |name, m| {
            if problem.is_some() {
                return;
            }
            match ckpt.arrays.get(name) {
                Some(a) if a.shape() == m.shape() => *m = a.clone(),
                Some(a) => {
                    problem = Some(Error::Format(format!(
                        "array `{name}` is {:?}, model expects {:?}",
                        a.shape(),
                        m.shape()
                    )))
                }
                None => problem = Some(Error::Missing(format!("checkpoint array `{name}`"))),
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }
        if let Some(centers) = ckpt.arrays.get("memory.centers") {
            model.memory = Some(MemoryBank::new(centers.clone(), config.momentum, config.tau)?);
        }
        model.epoch = ckpt.epoch;
        Ok(model)
    }

    /// Names of the parameters a stage may change.
    pub fn trainable_names(&self, stage: Stage) -> Vec<String> {
        let mut g = Graph::new();
        let mut binder = Binder::new(&mut g);
        match self.bind(&mut binder, stage) {
            Ok(_) => binder.finish().names().map(String::from).collect(),
            Err(_) => Vec::new(),
        }
    }
}

impl Parameters for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.encoder.visit(f);
        self.prompt.visit(f);
        self.heads.visit(f);
        f("global.classifier", &self.classifier);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.encoder.visit_mut(f);
        self.prompt.visit_mut(f);
        self.heads.visit_mut(f);
        f("global.classifier", &mut self.classifier);
    }
}

/// Gradients of the bound parameters keyed by name.
pub fn named_gradients(g: &Graph, bound: &Bound, loss: Var) -> BTreeMap<String, Matrix> {
    let grads = g.backward(loss);
    bound.gradients(g, &grads)
}
