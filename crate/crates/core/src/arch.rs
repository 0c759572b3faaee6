use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{AttentionTrace, EmbeddingTable, EncoderStack, LinearLayer};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Architectural hyperparameters shared by all models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Embedding width.
    pub h: usize,
    pub heads: usize,
    /// Encoder depth of the vision-only model.
    pub vision_layers: usize,
    /// Encoder depth of the joint video-text model.
    pub cross_layers: usize,
    /// Feature channels coming out of the (frozen) backbone.
    pub c_prime: usize,
    /// Visual tokens per clip.
    pub t_prime: usize,
    /// Attribute vocabulary size.
    pub n_attributes: usize,
    pub num_classes: usize,
    /// Spatial extents of the backbone feature map.
    pub h_prime: usize,
    pub w_prime: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.h % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible into {} heads",
                self.h, self.heads
            )));
        }
        for (name, v) in [
            ("h", self.h),
            ("vision_layers", self.vision_layers),
            ("cross_layers", self.cross_layers),
            ("c_prime", self.c_prime),
            ("t_prime", self.t_prime),
            ("n_attributes", self.n_attributes),
            ("num_classes", self.num_classes),
            ("h_prime", self.h_prime),
            ("w_prime", self.w_prime),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk_default() -> Self {
        Self {
            h: 64,
            heads: 4,
            vision_layers: 1,
            cross_layers: 2,
            c_prime: 64,
            t_prime: 8,
            n_attributes: 12,
            num_classes: 16,
            h_prime: 2,
            w_prime: 2,
        }
    }
}

/// Backbone output block, extents `[C', T', H', W']`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub values: Tensor,
}

impl FeatureVolume {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::ShapeMismatch {
                op: "feature_volume",
                lhs: values.shape().to_vec(),
                rhs: vec![0, 0, 0, 0],
            });
        }
        if !values.all_finite() {
            return Err(Error::NonFinite {
                op: "feature_volume",
                what: "backbone output".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn extents(&self) -> (usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Mean over the spatial extents: `[C', T', H', W'] -> [C', T']`.
pub fn spatial_avg_pool(f: &FeatureVolume) -> Tensor {
    let (c, t, h, w) = f.extents();
    let hw = h * w;
    let src = f.values.data();
    let mut out = vec![0.0; c * t];
    for ci in 0..c {
        for ti in 0..t {
            let base = (ci * t + ti) * hw;
            out[ci * t + ti] = src[base..base + hw].iter().sum::<f64>() / hw as f64;
        }
    }
    Tensor::new(vec![c, t], out).expect("pool shape")
}

/// Ordered attribute descriptions; the token id of a description is its index.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    descriptions: Vec<String>,
}

impl Vocabulary {
    pub fn new(descriptions: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for d in &descriptions {
            if !seen.insert(d.as_str()) {
                return Err(Error::Config(format!("duplicate attribute description: {d}")));
            }
        }
        Ok(Self { descriptions })
    }

    /// `attribute_0 .. attribute_{n-1}` placeholder descriptions.
    pub fn numbered(n: usize) -> Self {
        Self {
            descriptions: (0..n).map(|i| format!("attribute_{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    pub fn description(&self, id: usize) -> Option<&str> {
        self.descriptions.get(id).map(String::as_str)
    }
}

/// Frozen stand-in for a pretrained 3D CNN: temporal striding, spatial patch
/// averaging, and a fixed random 3->C' channel projection. Its weights live
/// outside every [`ParamStore`], so no optimizer can ever touch them.
#[derive(Debug, Clone)]
pub struct BackboneStub {
    pub c_prime: usize,
    pub t_prime: usize,
    pub h_prime: usize,
    pub w_prime: usize,
    proj: Tensor, // [3, C']
}

impl BackboneStub {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // unit-ish output scale across the 3 input channels
        let proj = trunc_normal(&mut rng, vec![3, cfg.c_prime], 1.0 / (3f64).sqrt());
        Self {
            c_prime: cfg.c_prime,
            t_prime: cfg.t_prime,
            h_prime: cfg.h_prime,
            w_prime: cfg.w_prime,
            proj,
        }
    }

    /// Whole-video forward. The temporal stride is `T / T'`, so `T` must be a
    /// multiple of `T'`, and the spatial extents must divide into patches.
    pub fn forward(&self, video: &Tensor) -> Result<FeatureVolume> {
        let s = video.shape();
        if s.len() != 4 || s[3] != 3 || s[0] % self.t_prime != 0 {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                lhs: s.to_vec(),
                rhs: vec![self.t_prime, 0, 0, 3],
            });
        }
        self.forward_strided(video, 0, s[0] / self.t_prime)
    }

    /// Forward over the window of frames `offset + i*stride`, `i < T'`.
    pub fn forward_strided(&self, video: &Tensor, offset: usize, stride: usize) -> Result<FeatureVolume> {
        let s = video.shape().to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                lhs: s,
                rhs: vec![0, 0, 0, 3],
            });
        }
        let (frames, height, width) = (s[0], s[1], s[2]);
        let span = (self.t_prime - 1) * stride + 1;
        if stride == 0 || offset + span > frames {
            return Err(Error::Config(format!(
                "backbone window (offset {offset}, stride {stride}, {} tokens) exceeds {frames} frames",
                self.t_prime
            )));
        }
        if height % self.h_prime != 0 || width % self.w_prime != 0 {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                lhs: vec![height, width],
                rhs: vec![self.h_prime, self.w_prime],
            });
        }
        let (ph, pw) = (height / self.h_prime, width / self.w_prime);
        let patch_n = (ph * pw) as f64;
        let src = video.data();
        let mut out = vec![0.0; self.c_prime * self.t_prime * self.h_prime * self.w_prime];
        for t in 0..self.t_prime {
            let frame = offset + t * stride;
            for hy in 0..self.h_prime {
                for wx in 0..self.w_prime {
                    // mean RGB over the patch, then project 3 -> C'
                    let mut rgb = [0.0f64; 3];
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let y = hy * ph + dy;
                            let x = wx * pw + dx;
                            let base = ((frame * height + y) * width + x) * 3;
                            rgb[0] += src[base];
                            rgb[1] += src[base + 1];
                            rgb[2] += src[base + 2];
                        }
                    }
                    rgb.iter_mut().for_each(|v| *v /= patch_n);
                    let pj = self.proj.data();
                    for c in 0..self.c_prime {
                        let v = rgb[0] * pj[c] + rgb[1] * pj[self.c_prime + c] + rgb[2] * pj[2 * self.c_prime + c];
                        out[((c * self.t_prime + t) * self.h_prime + hy) * self.w_prime + wx] = v;
                    }
                }
            }
        }
        FeatureVolume::new(Tensor::new(
            vec![self.c_prime, self.t_prime, self.h_prime, self.w_prime],
            out,
        )?)
    }

    /// backbone + spatial pooling in one call: video -> `[C', T']`.
    pub fn features(&self, video: &Tensor) -> Result<Tensor> {
        Ok(spatial_avg_pool(&self.forward(video)?))
    }
}

/// Anything that maps pooled features `[C', T']` to class logits.
pub trait Model: Sync {
    fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var>;
    fn num_classes(&self) -> usize;

    /// Plain-value forward for evaluation.
    fn logits_for(&self, store: &ParamStore, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let out = self.forward(&mut g, store, x)?;
        Ok(g.value(out).clone())
    }
}

/// Order-blind reference model: temporal mean pooling of the raw features
/// followed by a single linear classifier. By construction it cannot tell
/// apart classes that share an attribute multiset.
pub struct MeanPoolBaseline {
    pub cfg: ModelConfig,
    head: LinearLayer,
}

impl MeanPoolBaseline {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = LinearLayer::init(store, &mut rng, "baseline.head", cfg.c_prime, cfg.num_classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            head,
        })
    }
}

impl Model for MeanPoolBaseline {
    fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let tokens = g.transpose(features)?; // [T', C']
        let pooled = g.mean_axis(tokens, 0)?; // [C']
        let row = g.reshape(pooled, vec![1, self.cfg.c_prime])?;
        let logits = self.head.forward(g, store, row)?;
        g.reshape(logits, vec![self.cfg.num_classes])
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }
}

/// Vision-only architecture: token embedding with learned positions, a stack
/// of encoder layers, temporal mean pooling and a linear classifier.
pub struct VisionEncoderModel {
    pub cfg: ModelConfig,
    proj: LinearLayer,
    pos: ParamId,
    stack: EncoderStack,
    head: LinearLayer,
}

impl VisionEncoderModel {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = LinearLayer::init(store, &mut rng, "vision.embed", cfg.c_prime, cfg.h)?;
        let pos = store.register(
            "vision.pos",
            trunc_normal(&mut rng, vec![cfg.t_prime, cfg.h], crate::nn::INIT_STD),
            true,
        )?;
        let stack = EncoderStack::init(store, &mut rng, "vision", cfg.vision_layers, cfg.h, cfg.heads)?;
        let head = LinearLayer::init(store, &mut rng, "vision.head", cfg.h, cfg.num_classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            proj,
            pos,
            stack,
            head,
        })
    }

    /// `[C', T']` features -> `[T', h]` tokens with positions added.
    pub fn video_embed(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let tokens = g.transpose(features)?;
        let projected = self.proj.forward(g, store, tokens)?;
        let pos = g.param(store, self.pos);
        g.add(projected, pos)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let tokens = self.video_embed(g, store, features)?;
        let encoded = self.stack.forward(g, store, tokens, trace)?;
        let pooled = g.mean_axis(encoded, 0)?;
        let row = g.reshape(pooled, vec![1, self.cfg.h])?;
        let logits = self.head.forward(g, store, row)?;
        g.reshape(logits, vec![self.cfg.num_classes])
    }
}

impl Model for VisionEncoderModel {
    fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        self.forward_traced(g, store, features, None)
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }
}

/// Joint video-text architecture: the attribute vocabulary rides along as N
/// extra tokens, one shared positional table covers the whole `T'+N` range,
/// and a 2-row token-type table marks the modality. After encoding, the two
/// modalities are pooled separately and concatenated for classification.
pub struct CrossEncoderModel {
    pub cfg: ModelConfig,
    proj: LinearLayer,
    text: EmbeddingTable,
    pos: ParamId,
    token_type: ParamId,
    stack: EncoderStack,
    head: LinearLayer,
}

impl CrossEncoderModel {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = LinearLayer::init(store, &mut rng, "cross.embed", cfg.c_prime, cfg.h)?;
        let text = EmbeddingTable::init(store, &mut rng, "cross.text", cfg.n_attributes, cfg.h)?;
        let pos = store.register(
            "cross.pos",
            trunc_normal(&mut rng, vec![cfg.t_prime + cfg.n_attributes, cfg.h], crate::nn::INIT_STD),
            true,
        )?;
        let token_type = store.register(
            "cross.type",
            trunc_normal(&mut rng, vec![2, cfg.h], crate::nn::INIT_STD),
            true,
        )?;
        let stack = EncoderStack::init(store, &mut rng, "cross", cfg.cross_layers, cfg.h, cfg.heads)?;
        let head = LinearLayer::init(store, &mut rng, "cross.head", 2 * cfg.h, cfg.num_classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            proj,
            text,
            pos,
            token_type,
            stack,
            head,
        })
    }

    /// Position-free visual tokens `[T', h]`. Positions enter once, in
    /// [`Self::cross_embed`].
    pub fn visual_tokens(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let tokens = g.transpose(features)?;
        self.proj.forward(g, store, tokens)
    }

    /// Position-free text tokens `[N, h]` (the whole vocabulary, in id order).
    pub fn text_tokens(&self, g: &mut Graph, store: &ParamStore, vocab: &Vocabulary) -> Result<Var> {
        if vocab.len() != self.cfg.n_attributes {
            return Err(Error::Config(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                self.cfg.n_attributes
            )));
        }
        Ok(self.text.all(g, store))
    }

    /// Standalone positioned text representation `[N, h]`: table row i plus
    /// the shared positional row `T' + i`. The forward pipeline does not call
    /// this (positions are added once, in `cross_embed`); it exists so the
    /// text pathway can be inspected in isolation.
    pub fn text_embed(&self, g: &mut Graph, store: &ParamStore, vocab: &Vocabulary) -> Result<Var> {
        let tokens = self.text_tokens(g, store, vocab)?;
        let pos = g.param(store, self.pos);
        let text_pos = g.slice_rows(pos, self.cfg.t_prime, self.cfg.t_prime + self.cfg.n_attributes)?;
        g.add(tokens, text_pos)
    }

    /// Concatenate visual-then-text tokens, add the shared positional row p
    /// to row p, and add token-type row 0 (visual) or 1 (text) per modality.
    pub fn cross_embed(&self, g: &mut Graph, store: &ParamStore, visual: Var, text: Var) -> Result<Var> {
        let (t, n, h) = (self.cfg.t_prime, self.cfg.n_attributes, self.cfg.h);
        if g.shape(visual) != [t, h] || g.shape(text) != [n, h] {
            return Err(Error::ShapeMismatch {
                op: "cross_embed",
                lhs: g.shape(visual).to_vec(),
                rhs: g.shape(text).to_vec(),
            });
        }
        let types = g.param(store, self.token_type);
        let type_vis = g.slice_rows(types, 0, 1)?;
        let type_txt = g.slice_rows(types, 1, 2)?;
        let vis = g.add_broadcast_row(visual, type_vis)?;
        let txt = g.add_broadcast_row(text, type_txt)?;
        let joint = g.concat_rows(&[vis, txt])?;
        let pos = g.param(store, self.pos);
        g.add(joint, pos)
    }

    /// Encode and split back into modalities: `([T', h], [N, h])`.
    pub fn encode_split(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<(Var, Var)> {
        let vocab = Vocabulary::numbered(self.cfg.n_attributes);
        let visual = self.visual_tokens(g, store, features)?;
        let text = self.text_tokens(g, store, &vocab)?;
        let joint = self.cross_embed(g, store, visual, text)?;
        let encoded = self.stack.forward(g, store, joint, trace)?;
        let t = self.cfg.t_prime;
        let vis = g.slice_rows(encoded, 0, t)?;
        let txt = g.slice_rows(encoded, t, t + self.cfg.n_attributes)?;
        Ok((vis, txt))
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let (vis, txt) = self.encode_split(g, store, features, trace)?;
        let vis_pooled = g.mean_axis(vis, 0)?;
        let txt_pooled = g.mean_axis(txt, 0)?;
        let vis_row = g.reshape(vis_pooled, vec![1, self.cfg.h])?;
        let txt_row = g.reshape(txt_pooled, vec![1, self.cfg.h])?;
        let joint = g.concat_cols(&[vis_row, txt_row])?;
        let logits = self.head.forward(g, store, joint)?;
        g.reshape(logits, vec![self.cfg.num_classes])
    }
}

impl Model for CrossEncoderModel {
    fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        self.forward_traced(g, store, features, None)
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }
}

/// Head-averaged attention from each text token to each visual token in the
/// last cross-encoder layer: `[N, T']`. Rows are slices of full softmax rows
/// over `T'+N` keys, so they sum to at most 1.
pub fn cross_attention_diagnostic(
    model: &CrossEncoderModel,
    store: &ParamStore,
    features: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let mut trace = AttentionTrace::default();
    model.forward_traced(&mut g, store, x, Some(&mut trace))?;
    let last = trace
        .layers
        .last()
        .ok_or_else(|| Error::Config("encoder stack has no layers".into()))?;
    let (t, n) = (model.cfg.t_prime, model.cfg.n_attributes);
    let s = t + n;
    let mut out = vec![0.0; n * t];
    for &head in last {
        let probs = g.value(head).data();
        for qi in 0..n {
            for ki in 0..t {
                out[qi * t + ki] += probs[(t + qi) * s + ki];
            }
        }
    }
    let inv = 1.0 / last.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![n, t], out)
}
