use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_class_param, ClassRole, ForwardCache, ForwardOptions, GradMode, Model};
use crate::nn::{bce_with_logits, build_optimizer, Module, OptimizerKind, Real, Tensor};
use crate::priors::{wallace_prior, PriorKind};
use crate::seed::rng_for;
use crate::synth::{Dataset, Split};
use crate::voxel::VoxelGrid;

use super::{batch_images, batch_targets};

/// K support pairs and the held-out queries of one novel class, as sample
/// indices into a [`Dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotEpisode {
    pub class_id: String,
    pub k: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl FewShotEpisode {
    /// Draws `k` distinct training shapes of `class` with one random view
    /// each; the queries are every test-split sample of the class.
    pub fn sample(data: &Dataset, class: &str, k: usize, seed: u64) -> Result<Self> {
        let mut shapes = data.shapes_of(class, Split::Train);
        if k == 0 || shapes.len() < k {
            return Err(Error::Parameter(format!(
                "{k}-shot episode for {class}, which has {} training shapes",
                shapes.len()
            )));
        }
        let mut rng = rng_for(seed, &["episode", class, &k.to_string()]);
        shapes.shuffle(&mut rng);
        let mut support = Vec::with_capacity(k);
        for &s in &shapes[..k] {
            let views = data.select(|x| x.shape == s && x.split == Split::Train);
            support.push(views[rng.random_range(0..views.len())]);
        }
        let query = data.select(|x| x.class == class && x.split == Split::Test);
        let ep = Self {
            class_id: class.to_string(),
            k,
            support,
            query,
        };
        ep.validate(data)?;
        Ok(ep)
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.support.len() != self.k {
            return Err(Error::Configuration(format!(
                "episode declares K={} but has {} support samples",
                self.k,
                self.support.len()
            )));
        }
        for &i in self.support.iter().chain(&self.query) {
            let s = data
                .samples
                .get(i)
                .ok_or_else(|| Error::Lookup(format!("sample {i} is not in the dataset")))?;
            if s.class != self.class_id {
                return Err(Error::Configuration(format!(
                    "sample {i} of class {} in an episode of {}",
                    s.class, self.class_id
                )));
            }
        }
        let support_shapes: Vec<usize> = self
            .support
            .iter()
            .map(|&i| data.samples[i].shape)
            .collect();
        if self
            .query
            .iter()
            .any(|&i| support_shapes.contains(&data.samples[i].shape))
        {
            return Err(Error::Configuration(
                "support and query share a shape".into(),
            ));
        }
        Ok(())
    }

    pub fn support_shapes<'a>(&self, data: &'a Dataset) -> Vec<&'a VoxelGrid> {
        batch_targets(data, &self.support)
    }
}

/// Optimisation of the class-specific parameters of one novel class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Stop after this many steps without a lower support loss.
    pub patience: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate: 0.01,
            momentum: 0.9,
            patience: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub class_id: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    /// Parameters (or buffers) the adaptation wrote.
    pub updated: Vec<String>,
}

fn snapshot<T: Real>(model: &Model<T>, names: &[String]) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(names.len());
    model.visit("", &mut |n, p| {
        if names.iter().any(|x| x == n) {
            out.push(p.value.data().to_vec());
        }
    });
    out
}

fn restore<T: Real>(model: &mut Model<T>, names: &[String], values: &[Vec<T>]) {
    let mut i = 0;
    model.visit_mut("", &mut |n, p| {
        if names.iter().any(|x| x == n) {
            p.value.data_mut().copy_from_slice(&values[i]);
            i += 1;
        }
    });
}

/// Fits the conditioning of `episode.class_id` to its support set with the
/// encoder, decoder and shared codebooks frozen. The network runs in eval
/// mode, so normalisation statistics are not touched either. The lowest
/// support loss seen is kept.
pub fn adapt_novel<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    episode: &FewShotEpisode,
    config: &AdaptConfig,
) -> Result<AdaptReport> {
    let variant = model.variant();
    if !variant.is_conditioned() {
        return Err(Error::Configuration(format!(
            "{variant} has no class-specific parameters to adapt"
        )));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::Configuration(
            "adaptation learning rate must be positive".into(),
        ));
    }
    episode.validate(data)?;
    let class = episode.class_id.as_str();
    match model.classes().get(class) {
        Some(ClassRole::Base) => {
            return Err(Error::Configuration(format!(
                "{class} is a base class of the model"
            )));
        }
        Some(ClassRole::Novel) => {}
        None => model.add_novel_class(class)?,
    }
    let targets = episode.support_shapes(data);
    let images = batch_images::<T>(data, &episode.support)?;
    let classes = vec![class; episode.support.len()];

    if variant == PriorKind::WallaceAvg {
        model.set_average_shape(class, &wallace_prior(&targets)?)?;
        let (logits, _) = model.forward(&images, &classes, ForwardOptions::default())?;
        let loss = bce_with_logits(&logits, &targets)?.0;
        return Ok(AdaptReport {
            class_id: class.to_string(),
            initial_loss: loss,
            final_loss: loss,
            steps: 0,
            updated: vec![format!("priors/wallace/field/{class}")],
        });
    }

    let names = model.class_param_names(class);
    let frozen_encoder = !variant.encoder_conditioning().is_conditioned();
    let e_i: Option<Tensor<T>> = if frozen_encoder {
        Some(model.encode(&images, &classes, false)?.0)
    } else {
        None
    };
    let eval = ForwardOptions::default();
    let run = |model: &Model<T>| -> Result<(Tensor<T>, ForwardCache<T>)> {
        match &e_i {
            Some(e) => {
                let (logits, decode) = model.decode_from(e, &classes, eval)?;
                Ok((
                    logits,
                    ForwardCache {
                        encoder: None,
                        decode,
                    },
                ))
            }
            None => model.forward(&images, &classes, eval),
        }
    };

    let mut opt = build_optimizer::<T>(config.optimizer, config.learning_rate, config.momentum);
    let mut best = f64::INFINITY;
    let mut best_values = snapshot(model, &names);
    let mut initial = None;
    let mut since_best = 0;
    let mut steps = 0;
    loop {
        let (logits, cache) = run(model)?;
        let (loss, dl) = bce_with_logits(&logits, &targets)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "support loss became {loss} while adapting {class}"
            )));
        }
        initial.get_or_insert(loss);
        if loss < best {
            best = loss;
            best_values = snapshot(model, &names);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if steps == config.steps || since_best >= config.patience.max(1) {
            break;
        }
        model.zero_grad();
        model.backward(&cache, &dl, GradMode::CLASS_ONLY)?;
        opt.begin_step();
        model.visit_mut("", &mut |name, p| {
            if is_class_param(name, class) {
                opt.update(name, p);
            }
        });
        steps += 1;
    }
    restore(model, &names, &best_values);
    model.zero_grad();
    Ok(AdaptReport {
        class_id: class.to_string(),
        initial_loss: initial.unwrap_or(best),
        final_loss: best,
        steps,
        updated: names,
    })
}
