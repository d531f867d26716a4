//! Patch-embedding backbone producing the feature map `F` and its global
//! average `F_g`.
//!
//! Architecture: non-overlapping patches are linearly embedded and offset by
//! a learned positional table, then pass through residual mixing blocks
//! (optional token mixing across positions followed by channel mixing), and
//! finally a linear projection to the feature width. Without token mixing
//! every feature depends on its own patch and position only.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::params::{init_weight, Binder, Parameters};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: (usize, usize),
    pub patch: usize,
    pub dim: usize,
    pub blocks: usize,
    pub token_mixing: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 32),
            patch: 8,
            dim: 64,
            blocks: 2,
            token_mixing: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} is not a whole number of {}px patches",
                self.patch
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("feature dim must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size `(H, W)` of the feature map.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch, self.image_size.1 / self.patch)
    }

    pub fn positions(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

/// Feature map with `H*W` rows (row-major positions) and `d` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    values: Matrix,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, values: Matrix) -> Result<Self> {
        if values.rows() != height * width || values.cols() == 0 {
            return Err(Error::Shape {
                op: "feature_map",
                detail: format!("{:?} for a {height}x{width} grid", values.shape()),
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Channel `c` at row `y`, column `x`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values.get(y * self.width + x, c)
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        self.values.row(y * self.width + x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeature(pub Vec<f64>);

/// Mean over all positions of every channel.
pub fn global_average_pool(features: &FeatureMap) -> GlobalFeature {
    let n = features.values.rows() as f64;
    GlobalFeature(
        features
            .values
            .col_sums()
            .as_slice()
            .iter()
            .map(|v| v / n)
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
struct TokenMixing {
    token_in: Matrix,
    token_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
struct MixingBlock {
    token: Option<TokenMixing>,
    channel_in: Matrix,
    channel_in_bias: Matrix,
    channel_out: Matrix,
    channel_out_bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    patch_weight: Matrix,
    patch_bias: Matrix,
    position: Matrix,
    blocks: Vec<MixingBlock>,
    proj_weight: Matrix,
    proj_bias: Matrix,
}

impl EncoderParams {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let p = config.positions();
        let patch_in = Image::CHANNELS * config.patch * config.patch;
        let patch_weight = init_weight(patch_in, d, &mut rng);
        let position = Matrix::randn(p, d, 0.5, &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| MixingBlock {
                token: config.token_mixing.then(|| TokenMixing {
                    token_in: init_weight(p, p, &mut rng),
                    token_out: init_weight(p, p, &mut rng),
                }),
                channel_in: init_weight(d, d, &mut rng),
                channel_in_bias: Matrix::zeros(1, d),
                channel_out: init_weight(d, d, &mut rng),
                channel_out_bias: Matrix::zeros(1, d),
            })
            .collect();
        let proj_weight = init_weight(d, d, &mut rng);
        Ok(Self {
            config,
            patch_weight,
            patch_bias: Matrix::zeros(1, d),
            position,
            blocks,
            proj_weight,
            proj_bias: Matrix::zeros(1, d),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn bind(&self, binder: &mut Binder<'_>, trainable: bool) -> EncoderVars {
        let mut b = |name: &str, m: &Matrix| binder.bind(&format!("encoder.{name}"), m, trainable);
        let patch_weight = b("patch_weight", &self.patch_weight);
        let patch_bias = b("patch_bias", &self.patch_bias);
        let position = b("position", &self.position);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, blk)| BlockVars {
                token: blk.token.as_ref().map(|t| {
                    (
                        b(&format!("block{i}.token_in"), &t.token_in),
                        b(&format!("block{i}.token_out"), &t.token_out),
                    )
                }),
                channel_in: b(&format!("block{i}.channel_in"), &blk.channel_in),
                channel_in_bias: b(&format!("block{i}.channel_in_bias"), &blk.channel_in_bias),
                channel_out: b(&format!("block{i}.channel_out"), &blk.channel_out),
                channel_out_bias: b(&format!("block{i}.channel_out_bias"), &blk.channel_out_bias),
            })
            .collect();
        let proj_weight = b("proj_weight", &self.proj_weight);
        let proj_bias = b("proj_bias", &self.proj_bias);
        EncoderVars {
            config: self.config,
            patch_weight,
            patch_bias,
            position,
            blocks,
            proj_weight,
            proj_bias,
        }
    }

    /// Value-level forward pass of one image.
    pub fn encode_image(&self, image: &Image) -> Result<FeatureMap> {
        let mut graph = Graph::new();
        let mut binder = Binder::new(&mut graph);
        let vars = self.bind(&mut binder, false);
        let img = graph.constant(image.to_matrix());
        let out = vars.forward(&mut graph, &[img], &[(image.height(), image.width())])?;
        let (h, w) = self.config.grid();
        FeatureMap::new(h, w, graph.value(out).clone())
    }
}

impl Parameters for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("encoder.patch_weight", &self.patch_weight);
        f("encoder.patch_bias", &self.patch_bias);
        f("encoder.position", &self.position);
        for (i, blk) in self.blocks.iter().enumerate() {
            if let Some(t) = &blk.token {
                f(&format!("encoder.block{i}.token_in"), &t.token_in);
                f(&format!("encoder.block{i}.token_out"), &t.token_out);
            }
            f(&format!("encoder.block{i}.channel_in"), &blk.channel_in);
            f(&format!("encoder.block{i}.channel_in_bias"), &blk.channel_in_bias);
            f(&format!("encoder.block{i}.channel_out"), &blk.channel_out);
            f(&format!("encoder.block{i}.channel_out_bias"), &blk.channel_out_bias);
        }
        f("encoder.proj_weight", &self.proj_weight);
        f("encoder.proj_bias", &self.proj_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("encoder.patch_weight", &mut self.patch_weight);
        f("encoder.patch_bias", &mut self.patch_bias);
        f("encoder.position", &mut self.position);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            if let Some(t) = &mut blk.token {
                f(&format!("encoder.block{i}.token_in"), &mut t.token_in);
                f(&format!("encoder.block{i}.token_out"), &mut t.token_out);
            }
            f(&format!("encoder.block{i}.channel_in"), &mut blk.channel_in);
            f(&format!("encoder.block{i}.channel_in_bias"), &mut blk.channel_in_bias);
            f(&format!("encoder.block{i}.channel_out"), &mut blk.channel_out);
            f(&format!("encoder.block{i}.channel_out_bias"), &mut blk.channel_out_bias);
        }
        f("encoder.proj_weight", &mut self.proj_weight);
        f("encoder.proj_bias", &mut self.proj_bias);
    }
}

struct BlockVars {
    /// `(in, out)` token-mixing weights.
    token: Option<(Var, Var)>,
    channel_in: Var,
    channel_in_bias: Var,
    channel_out: Var,
    channel_out_bias: Var,
}

/// Encoder parameters placed on a graph.
pub struct EncoderVars {
    config: EncoderConfig,
    patch_weight: Var,
    patch_bias: Var,
    position: Var,
    blocks: Vec<BlockVars>,
    proj_weight: Var,
    proj_bias: Var,
}

impl EncoderVars {
    /// Encodes a batch of `3 x (H*W)` image nodes into a `(B*P) x d` node,
    /// image `b` occupying rows `b*P..(b+1)*P`.
    pub fn forward(&self, g: &mut Graph, images: &[Var], sizes: &[(usize, usize)]) -> Result<Var> {
        let (h, w) = self.config.image_size;
        let mut patches = Vec::with_capacity(images.len());
        for (&img, &size) in images.iter().zip(sizes) {
            if size != (h, w) || g.value(img).shape() != (Image::CHANNELS, h * w) {
                return Err(Error::Shape {
                    op: "encode_image",
                    detail: format!("image {}x{} but encoder expects {h}x{w}", size.0, size.1),
                });
            }
            patches.push(g.patchify(img, h, w, self.config.patch)?);
        }
        if patches.is_empty() {
            return Err(Error::Shape {
                op: "encode_image",
                detail: "empty batch".into(),
            });
        }
        let x = g.concat_rows(&patches)?;
        let x = g.matmul(x, self.patch_weight)?;
        let x = g.add_row(x, self.patch_bias)?;
        let mut x = g.add_block(x, self.position)?;
        for blk in &self.blocks {
            if let Some((token_in, token_out)) = blk.token {
                let t = g.block_left_mul(token_in, x)?;
                let t = g.tanh(t);
                let t = g.block_left_mul(token_out, t)?;
                x = g.add(x, t)?;
            }
            let c = g.matmul(x, blk.channel_in)?;
            let c = g.add_row(c, blk.channel_in_bias)?;
            let c = g.tanh(c);
            let c = g.matmul(c, blk.channel_out)?;
            let c = g.add_row(c, blk.channel_out_bias)?;
            x = g.add(x, c)?;
        }
        let x = g.matmul(x, self.proj_weight)?;
        g.add_row(x, self.proj_bias)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }
}
