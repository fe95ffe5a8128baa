//! The class-conditioned encoder–decoder `S̄ = D(E_I(I), e_S)`.
//!
//! [`Model`] owns the image encoder, the voxel decoder and whichever prior
//! structures its [`PriorKind`] needs. Parameters are named hierarchically:
//!
//! ```text
//! encoder/…  decoder/…
//! priors/gce/<class>
//! priors/cgce/codes               priors/cgce/attention/<class>
//! priors/cbn/<class>/<layer>/{gamma,beta}
//! priors/cab/<layer>/codes        priors/cab/<layer>/attention/<class>
//! priors/wallace/encoder/…        priors/wallace/field/<class>   (buffer)
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::join;
use crate::nn::{
    logits_to_field, Checkpoint, Conditioning, Decoder, DecoderCache, DecoderConfig, Encoder,
    EncoderCache, EncoderConfig, Modulations, Module, Param, Real, Tensor, DECODER_LAYERS,
};
use crate::priors::wallace::ShapeEncoderCache;
use crate::priors::{
    compose_cgce, compose_cgce_backward, knockout_codebook, AttentionTable, CabBank, CbnBank,
    CodebookSet, EmbeddingFusion, GlobalEmbeddingTable, PriorKind, ShapeEncoder, DEFAULT_CODEBOOKS,
    DEFAULT_CODES,
};
use crate::seed::rng_for;
use crate::voxel::OccupancyField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: PriorKind,
    pub resolution: usize,
    pub image_size: usize,
    pub embedding_dim: usize,
    pub encoder_width: f64,
    pub decoder_width: f64,
    pub blocks_per_stage: usize,
    pub codebooks: usize,
    pub codes_per_book: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: PriorKind::None,
            resolution: 32,
            image_size: 128,
            embedding_dim: 128,
            encoder_width: 1.0,
            decoder_width: 1.0,
            blocks_per_stage: 2,
            codebooks: DEFAULT_CODEBOOKS,
            codes_per_book: DEFAULT_CODES,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_size: self.image_size,
            embedding_dim: self.embedding_dim,
            width_scale: self.encoder_width,
            blocks_per_stage: self.blocks_per_stage,
            conditioning: self.variant.encoder_conditioning(),
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let input_dim = match self.variant.fusion() {
            EmbeddingFusion::Concat => 2 * self.embedding_dim,
            _ => self.embedding_dim,
        };
        DecoderConfig {
            output_resolution: self.resolution,
            num_layers: DECODER_LAYERS,
            input_dim,
            width_scale: self.decoder_width,
            conditioning: self.variant.decoder_conditioning(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassRole {
    Base,
    Novel,
}

#[derive(Clone, Debug)]
pub struct WallacePrior<T> {
    pub encoder: ShapeEncoder<T>,
    /// Average-shape fields `[R³]` keyed by class.
    pub fields: BTreeMap<String, Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct Priors<T> {
    pub gce: Option<GlobalEmbeddingTable<T>>,
    pub cgce: Option<(CodebookSet<T>, AttentionTable<T>)>,
    pub cbn: Option<CbnBank<T>>,
    pub cab: Option<CabBank<T>>,
    pub wallace: Option<WallacePrior<T>>,
}

/// Which gradients a backward pass produces. Class-specific prior
/// parameters always receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradMode {
    /// Encoder, decoder and average-shape encoder parameters.
    pub backbone: bool,
    /// Codebooks shared across classes.
    pub shared_priors: bool,
}

impl GradMode {
    pub const ALL: GradMode = GradMode {
        backbone: true,
        shared_priors: true,
    };
    pub const CLASS_ONLY: GradMode = GradMode {
        backbone: false,
        shared_priors: false,
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub train: bool,
    /// Remove one codebook (1-based) from the composed class embedding.
    pub knockout: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct DecodeCache<T> {
    classes: Vec<String>,
    decoder: DecoderCache<T>,
    /// Distinct classes of the batch and each sample's index into them.
    distinct: Vec<String>,
    sample_class: Vec<usize>,
    wallace: Option<ShapeEncoderCache<T>>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub encoder: Option<EncoderCache<T>>,
    pub decode: DecodeCache<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub priors: Priors<T>,
    classes: BTreeMap<String, ClassRole>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    classes: BTreeMap<String, ClassRole>,
}

fn check_class_id(class: &str) -> Result<()> {
    if class.is_empty() || class.contains('/') || class.contains(char::is_whitespace) {
        return Err(Error::Configuration(format!(
            "class id {class:?} must be non-empty without '/' or whitespace"
        )));
    }
    Ok(())
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, base_classes: &[&str]) -> Result<Self> {
        if config.embedding_dim == 0 || config.codebooks == 0 || config.codes_per_book == 0 {
            return Err(Error::Configuration(format!(
                "invalid model config {config:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::new(config.encoder_config(), &mut rng)?;
        let decoder = Decoder::new(config.decoder_config(), &mut rng)?;
        let variant = config.variant;

        let mut cbn_layers = Vec::new();
        let mut cab_layers = Vec::new();
        for (cond, layers) in [
            (variant.encoder_conditioning(), encoder.bn_layers()),
            (variant.decoder_conditioning(), decoder.bn_layers()),
        ] {
            match cond {
                Conditioning::Cbn => cbn_layers.extend(layers),
                Conditioning::Cab => cab_layers.extend(layers),
                Conditioning::None => {}
            }
        }
        let mut priors = Priors {
            gce: (variant == PriorKind::Gce)
                .then(|| GlobalEmbeddingTable::new(config.embedding_dim)),
            cgce: (variant == PriorKind::Cgce).then(|| {
                let mut r = rng_for(config.seed, &["cgce", "codes"]);
                (
                    CodebookSet::new(
                        config.codebooks,
                        config.codes_per_book,
                        config.embedding_dim,
                        &mut r,
                    ),
                    AttentionTable::new(config.codebooks, config.codes_per_book),
                )
            }),
            cbn: (!cbn_layers.is_empty()).then(|| CbnBank::new(cbn_layers)),
            cab: (!cab_layers.is_empty()).then(|| {
                CabBank::new(
                    cab_layers,
                    config.codebooks,
                    config.codes_per_book,
                    config.seed,
                )
            }),
            wallace: None,
        };
        if variant == PriorKind::WallaceAvg {
            let mut r = rng_for(config.seed, &["wallace", "encoder"]);
            let width = ((16.0 * config.decoder_width).round() as usize).max(1);
            priors.wallace = Some(WallacePrior {
                encoder: ShapeEncoder::new(config.resolution, width, config.embedding_dim, &mut r),
                fields: BTreeMap::new(),
            });
        }
        let mut model = Self {
            config,
            encoder,
            decoder,
            priors,
            classes: BTreeMap::new(),
        };
        for c in base_classes {
            model.add_base_class(c)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> PriorKind {
        self.config.variant
    }

    pub fn classes(&self) -> &BTreeMap<String, ClassRole> {
        &self.classes
    }

    pub fn base_classes(&self) -> Vec<&str> {
        self.classes
            .iter()
            .filter(|(_, r)| **r == ClassRole::Base)
            .map(|(c, _)| c.as_str())
            .collect()
    }

    fn add_base_class(&mut self, class: &str) -> Result<()> {
        check_class_id(class)?;
        if self.classes.contains_key(class) {
            return Err(Error::Configuration(format!(
                "class {class} registered twice"
            )));
        }
        let seed = self.config.seed;
        let p = &mut self.priors;
        if let Some(g) = &mut p.gce {
            g.init_base(class, seed);
        }
        if let Some((_, a)) = &mut p.cgce {
            a.init_class(class, seed, "cgce");
        }
        if let Some(b) = &mut p.cbn {
            b.init_class(class, seed);
        }
        if let Some(b) = &mut p.cab {
            b.init_class(class, seed);
        }
        self.classes.insert(class.to_string(), ClassRole::Base);
        Ok(())
    }

    /// Registers (or re-initialises) the class-specific parameters of a novel
    /// class. GCE rows start at the base mean; attention logits and CBN rows
    /// are drawn afresh. Average-shape variants additionally need
    /// [`Model::set_average_shape`].
    pub fn add_novel_class(&mut self, class: &str) -> Result<()> {
        check_class_id(class)?;
        if self.classes.get(class) == Some(&ClassRole::Base) {
            return Err(Error::Configuration(format!("{class} is a base class")));
        }
        let seed = self.config.seed;
        let base: Vec<String> = self.base_classes().into_iter().map(String::from).collect();
        let base: Vec<&str> = base.iter().map(String::as_str).collect();
        let p = &mut self.priors;
        if let Some(g) = &mut p.gce {
            g.init_novel(class, &base)?;
        }
        if let Some((_, a)) = &mut p.cgce {
            a.init_class(class, seed, "cgce");
        }
        if let Some(b) = &mut p.cbn {
            b.init_class(class, seed);
        }
        if let Some(b) = &mut p.cab {
            b.init_class(class, seed);
        }
        self.classes.insert(class.to_string(), ClassRole::Novel);
        Ok(())
    }

    /// Stores the average-shape prior of a registered class.
    pub fn set_average_shape(&mut self, class: &str, field: &OccupancyField) -> Result<()> {
        if !self.classes.contains_key(class) {
            return Err(Error::Lookup(format!("unknown class {class}")));
        }
        let w = self
            .priors
            .wallace
            .as_mut()
            .ok_or_else(|| Error::Configuration("variant has no average-shape prior".into()))?;
        if field.resolution() != self.config.resolution {
            return Err(Error::Dimension(format!(
                "average shape at {}³ for a {}³ model",
                field.resolution(),
                self.config.resolution
            )));
        }
        let t = Tensor::from_vec(
            &[field.len()],
            field.probabilities().iter().map(|&p| T::of(p)).collect(),
        )?;
        w.fields.insert(class.to_string(), t);
        Ok(())
    }

    /// Whether `class` has every conditioning structure the variant needs.
    pub fn has_conditioning(&self, class: &str) -> bool {
        if !self.variant().is_conditioned() {
            return true;
        }
        if !self.classes.contains_key(class) {
            return false;
        }
        match &self.priors.wallace {
            Some(w) => w.fields.contains_key(class),
            None => true,
        }
    }

    fn check_classes(&self, classes: &[&str]) -> Result<()> {
        let missing: Vec<&str> = classes
            .iter()
            .copied()
            .filter(|c| !self.has_conditioning(c))
            .collect();
        if !missing.is_empty() {
            let mut m = missing;
            m.sort_unstable();
            m.dedup();
            return Err(Error::Lookup(format!(
                "no class conditioning for {}",
                m.join(", ")
            )));
        }
        Ok(())
    }

    fn modulations(&self, classes: &[&str]) -> Result<Modulations<T>> {
        let mut mods = Modulations::new();
        if let Some(b) = &self.priors.cbn {
            mods.extend(b.modulations(classes)?);
        }
        if let Some(b) = &self.priors.cab {
            mods.extend(b.modulations(classes)?);
        }
        Ok(mods)
    }

    /// Image embeddings `e_I`, `[N, embedding_dim]`.
    pub fn encode(
        &self,
        images: &Tensor<T>,
        classes: &[&str],
        train: bool,
    ) -> Result<(Tensor<T>, EncoderCache<T>)> {
        if images.batch() != classes.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} class labels",
                images.batch(),
                classes.len()
            )));
        }
        let mods = if self.variant().encoder_conditioning().is_conditioned() {
            self.check_classes(classes)?;
            self.modulations(classes)?
        } else {
            Modulations::new()
        };
        self.encoder.forward(images, &mods, train)
    }

    /// Decodes image embeddings under class conditioning to logits `[N, 1, R, R, R]`.
    pub fn decode_from(
        &self,
        e_i: &Tensor<T>,
        classes: &[&str],
        opts: ForwardOptions,
    ) -> Result<(Tensor<T>, DecodeCache<T>)> {
        let n = e_i.batch();
        if classes.len() != n {
            return Err(Error::Dimension(format!(
                "{n} embeddings but {} class labels",
                classes.len()
            )));
        }
        if opts.knockout.is_some() && self.variant() != PriorKind::Cgce {
            return Err(Error::Configuration(format!(
                "codebook knockout needs a cgce model, not {}",
                self.variant()
            )));
        }
        self.check_classes(classes)?;
        let mut distinct: Vec<String> = Vec::new();
        let sample_class: Vec<usize> = classes
            .iter()
            .map(|c| match distinct.iter().position(|d| d == c) {
                Some(i) => i,
                None => {
                    distinct.push(c.to_string());
                    distinct.len() - 1
                }
            })
            .collect();

        let mut wallace_cache = None;
        let z = match self.variant().fusion() {
            EmbeddingFusion::None => e_i.clone(),
            EmbeddingFusion::Concat => {
                let rows: Vec<Vec<T>> = distinct
                    .iter()
                    .map(|c| self.class_embedding(c, opts.knockout))
                    .collect::<Result<_>>()?;
                let mut es = Tensor::zeros(&[n, self.config.embedding_dim]);
                for (i, &k) in sample_class.iter().enumerate() {
                    es.item_mut(i).copy_from_slice(&rows[k]);
                }
                Tensor::concat_features(e_i, &es)?
            }
            EmbeddingFusion::Sum => {
                let w = self
                    .priors
                    .wallace
                    .as_ref()
                    .expect("sum fusion has a shape encoder");
                let fields: Vec<&Tensor<T>> =
                    distinct.iter().map(|c| &w.fields[c.as_str()]).collect();
                let stacked = Tensor::stack(&fields)?;
                let r3 = stacked.item_len();
                let (es, cache) = w
                    .encoder
                    .forward(&stacked.reshape(&[distinct.len(), r3])?)?;
                wallace_cache = Some(cache);
                let mut z = e_i.clone();
                for (i, &k) in sample_class.iter().enumerate() {
                    for (a, &b) in z.item_mut(i).iter_mut().zip(es.item(k)) {
                        *a += b;
                    }
                }
                z
            }
        };
        let mods = if self.variant().decoder_conditioning().is_conditioned() {
            self.modulations(classes)?
        } else {
            Modulations::new()
        };
        let (logits, decoder) = self.decoder.forward(&z, &mods, opts.train)?;
        Ok((
            logits,
            DecodeCache {
                classes: classes.iter().map(|c| c.to_string()).collect(),
                decoder,
                distinct,
                sample_class,
                wallace: wallace_cache,
            },
        ))
    }

    /// The composed class embedding `e_S` of concatenating variants.
    pub fn class_embedding(&self, class: &str, knockout: Option<usize>) -> Result<Vec<T>> {
        if let Some(g) = &self.priors.gce {
            return Ok(g.compose(class)?.to_vec());
        }
        if let Some((codes, attn)) = &self.priors.cgce {
            return match knockout {
                Some(j) => knockout_codebook(codes, attn, class, j),
                None => compose_cgce(codes, attn, class),
            };
        }
        Err(Error::Configuration(format!(
            "{} has no class embedding vector",
            self.variant()
        )))
    }

    pub fn forward(
        &self,
        images: &Tensor<T>,
        classes: &[&str],
        opts: ForwardOptions,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (e, enc) = self.encode(images, classes, opts.train)?;
        let (logits, decode) = self.decode_from(&e, classes, opts)?;
        Ok((
            logits,
            ForwardCache {
                encoder: Some(enc),
                decode,
            },
        ))
    }

    /// Accumulates gradients of `dlogits` into the parameters selected by `mode`.
    pub fn backward(
        &mut self,
        cache: &ForwardCache<T>,
        dlogits: &Tensor<T>,
        mode: GradMode,
    ) -> Result<()> {
        let d = &cache.decode;
        let classes: Vec<&str> = d.classes.iter().map(String::as_str).collect();
        let fusion = self.variant().fusion();
        let enc_cond = self.variant().encoder_conditioning().is_conditioned();
        let need_encoder = cache.encoder.is_some() && (mode.backbone || enc_cond);
        let need_dz = fusion == EmbeddingFusion::Concat
            || need_encoder
            || (fusion == EmbeddingFusion::Sum && mode.backbone);

        let (dz, dmods) = self
            .decoder
            .backward(&d.decoder, dlogits, mode.backbone, need_dz)?;
        self.route_modulation_grads(&classes, &dmods, mode)?;

        let Some(dz) = dz else { return Ok(()) };
        let de_i = match fusion {
            EmbeddingFusion::None => dz,
            EmbeddingFusion::Concat => {
                let (de_i, de_s) = dz.split_features(self.config.embedding_dim);
                let mut per_class =
                    vec![vec![T::zero(); self.config.embedding_dim]; d.distinct.len()];
                for (i, &k) in d.sample_class.iter().enumerate() {
                    for (a, &b) in per_class[k].iter_mut().zip(de_s.item(i)) {
                        *a += b;
                    }
                }
                for (class, g) in d.distinct.iter().zip(&per_class) {
                    if let Some(t) = &mut self.priors.gce {
                        t.row_mut(class)?.grad.add_slice(g);
                    }
                    if let Some((codes, attn)) = &mut self.priors.cgce {
                        compose_cgce_backward(codes, attn, class, g, mode.shared_priors)?;
                    }
                }
                de_i
            }
            EmbeddingFusion::Sum => {
                if mode.backbone {
                    let mut des = Tensor::zeros(&[d.distinct.len(), self.config.embedding_dim]);
                    for (i, &k) in d.sample_class.iter().enumerate() {
                        for (a, &b) in des.item_mut(k).iter_mut().zip(dz.item(i)) {
                            *a += b;
                        }
                    }
                    let w = self
                        .priors
                        .wallace
                        .as_mut()
                        .expect("sum fusion has a shape encoder");
                    w.encoder
                        .backward(d.wallace.as_ref().expect("cached"), &des)?;
                }
                dz
            }
        };
        if let (true, Some(enc)) = (need_encoder, &cache.encoder) {
            let mg = self.encoder.backward(enc, &de_i, mode.backbone)?;
            self.route_modulation_grads(&classes, &mg, mode)?;
        }
        Ok(())
    }

    fn route_modulation_grads(
        &mut self,
        classes: &[&str],
        grads: &Modulations<T>,
        mode: GradMode,
    ) -> Result<()> {
        if grads.is_empty() {
            return Ok(());
        }
        if let Some(b) = &mut self.priors.cbn {
            b.accumulate(classes, grads)?;
        }
        if let Some(b) = &mut self.priors.cab {
            b.accumulate(classes, grads, mode.shared_priors)?;
        }
        Ok(())
    }

    pub fn update_running(&mut self, cache: &ForwardCache<T>) {
        if let Some(e) = &cache.encoder {
            self.encoder.update_running(e);
        }
        self.decoder.update_running(&cache.decode.decoder);
    }

    /// Eval-mode occupancy fields for a batch.
    pub fn predict_batch(
        &self,
        images: &Tensor<T>,
        classes: &[&str],
    ) -> Result<Vec<OccupancyField>> {
        let (logits, _) = self.forward(images, classes, ForwardOptions::default())?;
        (0..logits.batch())
            .map(|i| logits_to_field(&logits, i, self.config.resolution))
            .collect()
    }

    /// Eval-mode prediction for one `[3, S, S]` image.
    pub fn predict(&self, image: &Tensor<T>, class: &str) -> Result<OccupancyField> {
        let s = image.shape().to_vec();
        let batch = image.clone().reshape(&[&[1], s.as_slice()].concat())?;
        Ok(self.predict_batch(&batch, &[class])?.remove(0))
    }

    /// Names of the parameters that belong to `class` alone.
    pub fn class_param_names(&self, class: &str) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| {
            if is_class_param(name, class) {
                names.push(name.to_string());
            }
        });
        names
    }

    /// Names of every parameter that is not class-specific.
    pub fn shared_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| {
            if class_of_param(name).is_none() {
                names.push(name.to_string());
            }
        });
        names
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = CheckpointHeader {
            model: self.config.clone(),
            classes: self.classes.clone(),
        };
        Checkpoint::capture(
            self,
            serde_json::to_value(header).expect("serialisable header"),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header: CheckpointHeader = serde_json::from_value(ck.config.clone())?;
        let base: Vec<&str> = header
            .classes
            .iter()
            .filter(|(_, r)| **r == ClassRole::Base)
            .map(|(c, _)| c.as_str())
            .collect();
        let mut model = Self::new(header.model, &base)?;
        for (c, r) in &header.classes {
            if *r == ClassRole::Novel {
                model.classes.insert(c.clone(), ClassRole::Novel);
                let p = &mut model.priors;
                let seed = model.config.seed;
                if let Some(g) = &mut p.gce {
                    g.insert(c, vec![T::zero(); g.dim]);
                }
                if let Some((_, a)) = &mut p.cgce {
                    a.init_class(c, seed, "cgce");
                }
                if let Some(b) = &mut p.cbn {
                    b.init_class(c, seed);
                }
                if let Some(b) = &mut p.cab {
                    b.init_class(c, seed);
                }
            }
        }
        if let Some(w) = &mut model.priors.wallace {
            for (name, a) in ck.subset("priors/wallace/field/") {
                let class = &name["priors/wallace/field/".len()..];
                w.fields.insert(class.to_string(), Tensor::zeros(&a.shape));
            }
        }
        ck.restore(&mut model)?;
        Ok(model)
    }
}

/// The class a parameter name belongs to, if it is class-specific.
pub fn class_of_param(name: &str) -> Option<&str> {
    let rest = name.strip_prefix("priors/")?;
    if let Some(c) = rest.strip_prefix("gce/") {
        return Some(c);
    }
    if let Some(c) = rest.strip_prefix("cgce/attention/") {
        return Some(c);
    }
    if let Some(r) = rest.strip_prefix("cbn/") {
        return r.split('/').next();
    }
    if let Some(r) = rest.strip_prefix("cab/") {
        let (_, c) = r.rsplit_once("/attention/")?;
        return Some(c);
    }
    if let Some(c) = rest.strip_prefix("wallace/field/") {
        return Some(c);
    }
    None
}

pub fn is_class_param(name: &str, class: &str) -> bool {
    class_of_param(name) == Some(class)
}

impl<T: Real> Module<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(prefix, f);
        self.decoder.visit(prefix, f);
        let p = join(prefix, "priors");
        if let Some(g) = &self.priors.gce {
            for (c, row) in g.rows() {
                f(&join(&p, &format!("gce/{c}")), row);
            }
        }
        if let Some((codes, attn)) = &self.priors.cgce {
            f(&join(&p, "cgce/codes"), &codes.codes);
            for (c, row) in attn.rows() {
                f(&join(&p, &format!("cgce/attention/{c}")), row);
            }
        }
        if let Some(b) = &self.priors.cbn {
            b.for_each(|c, layer, row| {
                f(&join(&p, &format!("cbn/{c}/{layer}/gamma")), &row.gamma);
                f(&join(&p, &format!("cbn/{c}/{layer}/beta")), &row.beta);
            });
        }
        if let Some(b) = &self.priors.cab {
            for l in &b.layers {
                f(&join(&p, &format!("cab/{}/codes", l.id)), &l.codes.codes);
                for (c, row) in l.attention.rows() {
                    f(&join(&p, &format!("cab/{}/attention/{c}", l.id)), row);
                }
            }
        }
        if let Some(w) = &self.priors.wallace {
            w.encoder.visit(&join(&p, "wallace/encoder"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(prefix, f);
        self.decoder.visit_mut(prefix, f);
        let p = join(prefix, "priors");
        if let Some(g) = &mut self.priors.gce {
            for (c, row) in g.rows_mut() {
                f(&join(&p, &format!("gce/{c}")), row);
            }
        }
        if let Some((codes, attn)) = &mut self.priors.cgce {
            f(&join(&p, "cgce/codes"), &mut codes.codes);
            for (c, row) in attn.rows_mut() {
                f(&join(&p, &format!("cgce/attention/{c}")), row);
            }
        }
        if let Some(b) = &mut self.priors.cbn {
            b.for_each_mut(|c, layer, row| {
                f(&join(&p, &format!("cbn/{c}/{layer}/gamma")), &mut row.gamma);
                f(&join(&p, &format!("cbn/{c}/{layer}/beta")), &mut row.beta);
            });
        }
        if let Some(b) = &mut self.priors.cab {
            for l in &mut b.layers {
                f(
                    &join(&p, &format!("cab/{}/codes", l.id)),
                    &mut l.codes.codes,
                );
                for (c, row) in l.attention.rows_mut() {
                    f(&join(&p, &format!("cab/{}/attention/{c}", l.id)), row);
                }
            }
        }
        if let Some(w) = &mut self.priors.wallace {
            w.encoder.visit_mut(&join(&p, "wallace/encoder"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.encoder.visit_buffers(prefix, f);
        self.decoder.visit_buffers(prefix, f);
        if let Some(w) = &self.priors.wallace {
            for (c, t) in &w.fields {
                f(&join(prefix, &format!("priors/wallace/field/{c}")), t);
            }
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.encoder.visit_buffers_mut(prefix, f);
        self.decoder.visit_buffers_mut(prefix, f);
        if let Some(w) = &mut self.priors.wallace {
            for (c, t) in &mut w.fields {
                f(&join(prefix, &format!("priors/wallace/field/{c}")), t);
            }
        }
    }
}
