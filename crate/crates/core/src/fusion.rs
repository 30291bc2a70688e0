//! Toy encoders, the visual-text fuser and a dot-product mask decoder.
//!
//! Data flow for one (scene, caption) pair:
//!
//! ```text
//! cell channels x_c ──W_img──▶ pixel features p_c ──mean──▶ x_I
//! caption tokens ──counts──W_txt──▶ x_T
//! z = normalize(W_f · [x_I; x_T] + b)
//! logit_c = p_c · z / temp
//! ```
//!
//! The fuser taps the pooled image feature and the text feature; there is no
//! separate cross-modal decoder feeding it. Every stage has a hand-written
//! backward pass so the combined objective can be differentiated end to end.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FeatureGrid};
use crate::numcore::{self, axpy, dot, Matrix, Vector, ZERO_NORM_TOL};

/// Token ↔ index map for the bag-of-tokens text encoder. Stopwords are
/// accepted in captions but contribute nothing to the count vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRecord", into = "VocabularyRecord")]
pub struct Vocabulary {
    tokens: Vec<String>,
    stopwords: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyRecord {
    tokens: Vec<String>,
    #[serde(default)]
    stopwords: Vec<String>,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_stopwords(tokens, Vec::<String>::new())
    }

    pub fn with_stopwords<I, S, J, T>(tokens: I, stopwords: J) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
        J: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut out = Vocabulary {
            tokens: Vec::new(),
            stopwords: Vec::new(),
            index: HashMap::new(),
        };
        for t in tokens {
            let t = t.into();
            if !out.index.contains_key(&t) {
                out.index.insert(t.clone(), out.tokens.len());
                out.tokens.push(t);
            }
        }
        for t in stopwords {
            let t = t.into();
            if !out.index.contains_key(&t) && !out.stopwords.contains(&t) {
                out.stopwords.push(t);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn stopwords(&self) -> &[String] {
        &self.stopwords
    }

    /// Bag-of-tokens count vector.
    pub fn counts<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>> {
        let mut counts = vec![0.0; self.len()];
        for t in tokens {
            let t = t.as_ref();
            match self.index_of(t) {
                Some(i) => counts[i] += 1.0,
                None if self.stopwords.iter().any(|s| s == t) => {}
                None => return Err(Error::UnknownToken(t.to_string())),
            }
        }
        Ok(counts)
    }
}

impl From<VocabularyRecord> for Vocabulary {
    fn from(r: VocabularyRecord) -> Self {
        Vocabulary::with_stopwords(r.tokens, r.stopwords)
    }
}

impl From<Vocabulary> for VocabularyRecord {
    fn from(v: Vocabulary) -> Self {
        VocabularyRecord {
            tokens: v.tokens,
            stopwords: v.stopwords,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuserParams {
    /// `d_out × (d_img + d_txt)`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Shapes and initialisation of a [`ToyModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Shared width of pixel features, pooled image feature and fused embedding.
    pub embed_dim: usize,
    pub text_dim: usize,
    pub decode_temp: f64,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 16,
            text_dim: 16,
            decode_temp: 0.1,
            init_scale: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("model.embed_dim", "must be >= 1"));
        }
        if self.text_dim == 0 {
            return Err(Error::config("model.text_dim", "must be >= 1"));
        }
        if !(self.decode_temp > 0.0) {
            return Err(Error::config("model.decode_temp", "must be > 0"));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::config("model.init_scale", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub vocab: Vocabulary,
    /// `d × c_in`, applied per cell.
    pub image_encoder: Matrix,
    /// `d_txt × vocab`, applied to token counts.
    pub text_encoder: Matrix,
    pub fuser: FuserParams,
    pub decode_temp: f64,
}

/// A fused embedding. `normalized` is set when it lies on the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vector,
    pub normalized: bool,
}

/// Per-cell pixel features of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatures {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PixelFeatures {
    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Decoder output, one logit per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl LogitGrid {
    /// Cells with a strictly positive logit.
    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask {
            rows: self.rows,
            cols: self.cols,
            bits: self.values.iter().map(|&l| l > 0.0).collect(),
        }
    }
}

/// Intermediate values of one `fuse` call, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FuseTrace {
    /// Mean cell channel vector of the image.
    pub channel_mean: Vec<f64>,
    pub token_counts: Vec<f64>,
    pub fused: FusedFeatures,
}

/// Fuser input, pre-normalization norm and output of one fusion.
#[derive(Debug, Clone)]
pub struct FusedFeatures {
    pub input: Vec<f64>,
    pub pre_norm: f64,
    pub z: Vec<f64>,
}

/// Gradients with the same layout as the model's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub image_encoder: Matrix,
    pub text_encoder: Matrix,
    pub fuser_weight: Matrix,
    pub fuser_bias: Vec<f64>,
}

impl ModelGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.image_encoder.values());
        out.extend_from_slice(self.text_encoder.values());
        out.extend_from_slice(self.fuser_weight.values());
        out.extend_from_slice(&self.fuser_bias);
        out
    }

    pub fn zero_encoders(&mut self) {
        self.image_encoder.values_mut().iter_mut().for_each(|v| *v = 0.0);
        self.text_encoder.values_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

impl ToyModel {
    /// Random initialisation: encoders `N(0, init_scale²)`, fuser weight
    /// `N(0, 1/fan_in)`, bias zero.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, channels: usize, vocab: Vocabulary, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let image_encoder = Matrix::random_normal(d, channels, cfg.init_scale, rng);
        let text_encoder = Matrix::random_normal(cfg.text_dim, vocab.len(), cfg.init_scale, rng);
        let fan_in = d + cfg.text_dim;
        let weight = Matrix::random_normal(d, fan_in, 1.0 / (fan_in as f64).sqrt(), rng);
        Ok(ToyModel {
            vocab,
            image_encoder,
            text_encoder,
            fuser: FuserParams {
                weight,
                bias: vec![0.0; d],
            },
            decode_temp: cfg.decode_temp,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.image_encoder.rows()
    }

    pub fn channels(&self) -> usize {
        self.image_encoder.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim();
        let dt = self.text_encoder.rows();
        if self.text_encoder.cols() != self.vocab.len() {
            return Err(Error::ShapeMismatch {
                context: "text encoder",
                expected: format!("{} columns", self.vocab.len()),
                got: format!("{} columns", self.text_encoder.cols()),
            });
        }
        if self.fuser.weight.rows() != d || self.fuser.weight.cols() != d + dt || self.fuser.bias.len() != d {
            return Err(Error::ShapeMismatch {
                context: "fuser",
                expected: format!("{d}x{} weight and {d} bias", d + dt),
                got: format!(
                    "{}x{} weight and {} bias",
                    self.fuser.weight.rows(),
                    self.fuser.weight.cols(),
                    self.fuser.bias.len()
                ),
            });
        }
        if !(self.decode_temp > 0.0) {
            return Err(Error::config("decode_temp", "must be > 0"));
        }
        if !self.is_finite() {
            return Err(Error::non_finite("model parameters"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.image_encoder.is_finite()
            && self.text_encoder.is_finite()
            && self.fuser.weight.is_finite()
            && self.fuser.bias.iter().all(|v| v.is_finite())
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            image_encoder: Matrix::zeros(self.image_encoder.rows(), self.image_encoder.cols()),
            text_encoder: Matrix::zeros(self.text_encoder.rows(), self.text_encoder.cols()),
            fuser_weight: Matrix::zeros(self.fuser.weight.rows(), self.fuser.weight.cols()),
            fuser_bias: vec![0.0; self.fuser.bias.len()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.image_encoder.values().len()
            + self.text_encoder.values().len()
            + self.fuser.weight.values().len()
            + self.fuser.bias.len()
    }

    /// All trainable parameters in a fixed order
    /// (image encoder, text encoder, fuser weight, fuser bias).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.image_encoder.values());
        out.extend_from_slice(self.text_encoder.values());
        out.extend_from_slice(self.fuser.weight.values());
        out.extend_from_slice(&self.fuser.bias);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut rest = flat;
        for dst in [
            self.image_encoder.values_mut(),
            self.text_encoder.values_mut(),
            self.fuser.weight.values_mut(),
            &mut self.fuser.bias[..],
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn encode_image(&self, scene: &FeatureGrid) -> Result<(PixelFeatures, Vec<f64>)> {
        if scene.channels != self.channels() {
            return Err(Error::ShapeMismatch {
                context: "encode_image",
                expected: format!("{} channels", self.channels()),
                got: format!("{} channels", scene.channels),
            });
        }
        let d = self.embed_dim();
        let mut data = Vec::with_capacity(scene.cells() * d);
        let mut pooled = vec![0.0; d];
        for c in 0..scene.cells() {
            let f = self.image_encoder.matvec(scene.cell(c))?;
            axpy(1.0, &f, &mut pooled);
            data.extend(f);
        }
        numcore::scale_in_place(1.0 / scene.cells() as f64, &mut pooled);
        Ok((
            PixelFeatures {
                rows: scene.rows,
                cols: scene.cols,
                dim: d,
                data,
            },
            pooled,
        ))
    }

    /// Pooled image feature only; equals the mean of the pixel features.
    pub fn pooled_feature(&self, channel_mean: &[f64]) -> Result<Vec<f64>> {
        self.image_encoder.matvec(channel_mean)
    }

    pub fn encode_text<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>> {
        let counts = self.vocab.counts(tokens)?;
        self.text_encoder.matvec(&counts)
    }

    pub fn fuse(&self, x_img: &[f64], x_txt: &[f64]) -> Result<Embedding> {
        let f = self.fuse_features(x_img, x_txt)?;
        Ok(Embedding {
            values: Vector::from_raw(f.z),
            normalized: true,
        })
    }

    /// Fuses already-encoded features, keeping what the backward pass needs.
    pub fn fuse_features(&self, x_img: &[f64], x_txt: &[f64]) -> Result<FusedFeatures> {
        let expected = self.fuser.weight.cols();
        if x_img.len() + x_txt.len() != expected || x_img.len() != self.embed_dim() {
            return Err(Error::ShapeMismatch {
                context: "fuse",
                expected: format!("{} image + {} text features", self.embed_dim(), expected - self.embed_dim()),
                got: format!("{} image + {} text features", x_img.len(), x_txt.len()),
            });
        }
        let mut input = Vec::with_capacity(expected);
        input.extend_from_slice(x_img);
        input.extend_from_slice(x_txt);
        let mut h = self.fuser.weight.matvec(&input)?;
        axpy(1.0, &self.fuser.bias, &mut h);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("fuser output"));
        }
        let n = numcore::norm(&h);
        if n < ZERO_NORM_TOL {
            return Err(Error::ZeroNorm { norm: n });
        }
        let z = h.iter().map(|v| v / n).collect();
        Ok(FusedFeatures { input, pre_norm: n, z })
    }

    /// Accumulates the fuser gradients for one fusion and returns `∂L/∂[x_I; x_T]`.
    pub fn fuse_features_backward(&self, f: &FusedFeatures, grad_z: &[f64], grads: &mut ModelGrads) -> Result<Vec<f64>> {
        // through normalization: (I − z zᵀ) g / ‖h‖
        let radial = dot(&f.z, grad_z);
        let grad_h: Vec<f64> = grad_z
            .iter()
            .zip(&f.z)
            .map(|(g, z)| (g - radial * z) / f.pre_norm)
            .collect();
        grads.fuser_weight.add_outer(1.0, &grad_h, &f.input);
        axpy(1.0, &grad_h, &mut grads.fuser_bias);
        self.fuser.weight.matvec_t(&grad_h)
    }

    /// Fuses an image (given by its mean channel vector) with token counts,
    /// recording what the backward pass needs.
    pub fn fuse_traced(&self, channel_mean: &[f64], token_counts: &[f64]) -> Result<FuseTrace> {
        let x_img = self.image_encoder.matvec(channel_mean)?;
        let x_txt = self.text_encoder.matvec(token_counts)?;
        let fused = self.fuse_features(&x_img, &x_txt)?;
        Ok(FuseTrace {
            channel_mean: channel_mean.to_vec(),
            token_counts: token_counts.to_vec(),
            fused,
        })
    }

    /// Accumulates `∂L/∂params` given `∂L/∂z` for one traced fusion.
    pub fn fuse_backward(&self, trace: &FuseTrace, grad_z: &[f64], grads: &mut ModelGrads) -> Result<()> {
        let d = self.embed_dim();
        let grad_in = self.fuse_features_backward(&trace.fused, grad_z, grads)?;
        grads.image_encoder.add_outer(1.0, &grad_in[..d], &trace.channel_mean);
        grads.text_encoder.add_outer(1.0, &grad_in[d..], &trace.token_counts);
        Ok(())
    }

    /// Cross-fusion grid: entry `(i, j)` fuses image `i` with text `j`.
    pub fn cross_fusion_matrix<A, B>(&self, images: &[A], texts: &[B]) -> Result<Vec<Vec<Embedding>>>
    where
        A: AsRef<[f64]>,
        B: AsRef<[f64]>,
    {
        if images.len() != texts.len() {
            return Err(Error::DimensionMismatch {
                expected: images.len(),
                got: texts.len(),
            });
        }
        images
            .iter()
            .map(|img| texts.iter().map(|txt| self.fuse(img.as_ref(), txt.as_ref())).collect())
            .collect()
    }

    /// Decoder with this model's temperature.
    pub fn decode(&self, pixels: &PixelFeatures, z: &[f64]) -> Result<LogitGrid> {
        decode_mask(pixels, z, self.decode_temp)
    }

    /// Backward through the decoder: adds `∂L/∂z` into `grad_z` and the pixel
    /// path into the image-encoder gradient.
    pub fn decode_backward(
        &self,
        scene: &FeatureGrid,
        pixels: &PixelFeatures,
        z: &[f64],
        grad_logits: &[f64],
        grad_z: &mut [f64],
        grads: &mut ModelGrads,
    ) {
        let t = self.decode_temp;
        let mut weighted_channels = vec![0.0; scene.channels];
        for (c, &g) in grad_logits.iter().enumerate() {
            if g != 0.0 {
                axpy(g / t, pixels.cell(c), grad_z);
                axpy(g, scene.cell(c), &mut weighted_channels);
            }
        }
        grads.image_encoder.add_outer(1.0 / t, z, &weighted_channels);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_checkpoint_str(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidData(format!("not a checkpoint file (format `{}`)", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: ck.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        ck.model.validate()?;
        Ok(ck.model)
    }
}

pub const CHECKPOINT_FORMAT: &str = "mracl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint file: a JSON object holding every matrix with explicit shape.
/// Floats are written in shortest round-trip form, so loading is lossless.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    model: ToyModel,
}

pub fn decode_mask(pixels: &PixelFeatures, z: &[f64], temp: f64) -> Result<LogitGrid> {
    if pixels.dim != z.len() {
        return Err(Error::ShapeMismatch {
            context: "decode_mask",
            expected: format!("embedding of dim {}", pixels.dim),
            got: format!("dim {}", z.len()),
        });
    }
    if !(temp > 0.0) {
        return Err(Error::config("decode_temp", "must be > 0"));
    }
    let values = (0..pixels.cells()).map(|c| dot(pixels.cell(c), z) / temp).collect();
    Ok(LogitGrid {
        rows: pixels.rows,
        cols: pixels.cols,
        values,
    })
}

/// Mean binary cross-entropy with logits and its gradient `(σ(x) − y)/N`.
pub fn seg_loss(logits: &LogitGrid, gt: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    if logits.rows != gt.rows || logits.cols != gt.cols {
        return Err(Error::ShapeMismatch {
            context: "seg_loss",
            expected: format!("{}x{}", gt.rows, gt.cols),
            got: format!("{}x{}", logits.rows, logits.cols),
        });
    }
    let n = logits.values.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.values.len());
    for (&x, &y) in logits.values.iter().zip(&gt.bits) {
        let y = if y { 1.0 } else { 0.0 };
        total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        let sigma = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        grad.push((sigma - y) / n);
    }
    if !total.is_finite() {
        return Err(Error::non_finite("segmentation loss"));
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(channels: usize, vocab: &[&str], d: usize) -> ToyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig {
            embed_dim: d,
            text_dim: d,
            ..ModelConfig::default()
        };
        ToyModel::init(&cfg, channels, Vocabulary::new(vocab.iter().copied()), &mut rng).unwrap()
    }

    #[test]
    fn zero_scene_encodes_to_zero() {
        let m = tiny_model(3, &["a"], 4);
        let scene = FeatureGrid::zeros(8, 8, 3);
        let (pix, pooled) = m.encode_image(&scene).unwrap();
        assert!(pix.data.iter().all(|&v| v == 0.0));
        assert!(pooled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_encoder_single_cell() {
        let mut m = tiny_model(3, &["a"], 3);
        m.image_encoder = Matrix::identity(3);
        let mut scene = FeatureGrid::zeros(2, 2, 3);
        scene.cell_mut(1).copy_from_slice(&[1.0, 2.0, 4.0]);
        let (_, pooled) = m.encode_image(&scene).unwrap();
        assert_eq!(pooled, vec![0.25, 0.5, 1.0]);
        assert!(m.encode_image(&FeatureGrid::zeros(2, 2, 4)).is_err());
    }

    #[test]
    fn text_encoding_is_bag_of_tokens() {
        let mut m = tiny_model(2, &["the", "run", "dog"], 3);
        m.text_encoder = Matrix::identity(3);
        assert_eq!(m.encode_text::<&str>(&[]).unwrap(), vec![0.0; 3]);
        assert_eq!(m.encode_text(&["run", "run"]).unwrap(), vec![0.0, 2.0, 0.0]);
        let m = tiny_model(2, &["the", "run", "dog"], 3);
        assert_eq!(
            m.encode_text(&["the", "dog", "run"]).unwrap(),
            m.encode_text(&["run", "the", "dog"]).unwrap()
        );
        assert!(matches!(m.encode_text(&["cat"]), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn fuse_zero_weight_bias_e1() {
        let mut m = tiny_model(2, &["a"], 3);
        m.fuser.weight = Matrix::zeros(3, 6);
        m.fuser.bias = vec![2.0, 0.0, 0.0];
        let e = m.fuse(&[0.3, 0.1, 0.2], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(e.values.as_slice(), &[1.0, 0.0, 0.0]);
        assert!(e.normalized);
        m.fuser.bias = vec![0.0; 3];
        assert!(matches!(m.fuse(&[0.0; 3], &[0.0; 3]), Err(Error::ZeroNorm { .. })));
        assert!(m.fuse(&[0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn fuse_scale_equivariant() {
        let m = tiny_model(2, &["a"], 4);
        let mut doubled = m.clone();
        doubled.fuser.weight = m.fuser.weight.scaled(2.0);
        doubled.fuser.bias = m.fuser.bias.iter().map(|b| 2.0 * b).collect();
        let x = [0.1, -0.4, 0.3, 0.9];
        let t = [1.0, 0.0, -0.5, 0.2];
        let a = m.fuse(&x, &t).unwrap();
        let b = doubled.fuse(&x, &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_examples() {
        let pixels = PixelFeatures {
            rows: 1,
            cols: 2,
            dim: 2,
            data: vec![0.0, 3.0, 1.0, 0.0],
        };
        let l = decode_mask(&pixels, &[1.0, 0.0], 1.0).unwrap();
        assert_eq!(l.values, vec![0.0, 1.0]);
        let half = decode_mask(&pixels, &[1.0, 0.0], 2.0).unwrap();
        assert_eq!(half.values, vec![0.0, 0.5]);
        let orth = decode_mask(&pixels, &[0.0, 0.0], 1.0).unwrap();
        assert!(orth.values.iter().all(|&v| v == 0.0));
        assert!(decode_mask(&pixels, &[1.0], 1.0).is_err());
    }

    #[test]
    fn seg_loss_examples() {
        let gt = BinaryMask::from_fn(2, 2, |r, c| r == c);
        let zero = LogitGrid {
            rows: 2,
            cols: 2,
            values: vec![0.0; 4],
        };
        let (l, _) = seg_loss(&zero, &gt).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let sat = LogitGrid {
            rows: 2,
            cols: 2,
            values: gt.bits.iter().map(|&b| if b { 30.0 } else { -30.0 }).collect(),
        };
        let (l, _) = seg_loss(&sat, &gt).unwrap();
        // log(1 + e^{-30}) = 9.3576e-14
        assert!(l <= 1e-12);
        assert!((l - 9.357_622_968_839_737e-14).abs() < 1e-20);
        assert!(seg_loss(&zero, &BinaryMask::empty(1, 4)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let m = tiny_model(5, &["a", "b", "c"], 6);
        let s = m.to_checkpoint_string().unwrap();
        let back = ToyModel::from_checkpoint_str(&s).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint_string().unwrap(), s);
        let bumped = s.replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(ToyModel::from_checkpoint_str(&bumped), Err(Error::Version { .. })));
    }

    #[test]
    fn flatten_set_params_round_trip() {
        let m = tiny_model(3, &["a", "b"], 4);
        let mut n = m.clone();
        let flat: Vec<f64> = m.flatten_params().iter().map(|v| v + 1.0).collect();
        n.set_params(&flat).unwrap();
        assert_eq!(n.flatten_params(), flat);
        assert!(n.set_params(&flat[1..]).is_err());
    }
}
