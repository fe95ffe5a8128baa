use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalOptions, ReportRow};
use crate::error::{Error, Result};
use crate::model::{ClassRole, Model, ModelConfig};
use crate::priors::PriorKind;
use crate::seed::derive_seed;
use crate::synth::{Dataset, Split};
use crate::train::{
    adapt_novel, train_base, AdaptConfig, AdaptReport, FewShotEpisode, LossCurve, TrainConfig,
};

/// A row label of the comparison: the two unconditioned baselines or a prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// Trained on base classes only, applied to novel classes unchanged.
    Zs,
    /// Trained on base and novel classes with all their training data.
    As,
    Prior(PriorKind),
}

impl Method {
    pub fn variant(self) -> PriorKind {
        match self {
            Method::Zs | Method::As => PriorKind::None,
            Method::Prior(k) => k,
        }
    }

    pub fn name(self) -> String {
        match self {
            Method::Zs => "zs".into(),
            Method::As => "as".into(),
            Method::Prior(PriorKind::WallaceAvg) => "wallace".into(),
            Method::Prior(k) => k.name().replace('_', "-"),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        match norm.as_str() {
            "zs" => return Ok(Method::Zs),
            "as" => return Ok(Method::As),
            "wallace" | "wallace-avg" => return Ok(Method::Prior(PriorKind::WallaceAvg)),
            _ => {}
        }
        PriorKind::ALL
            .into_iter()
            .filter(|k| *k != PriorKind::None)
            .find(|k| k.name().replace('_', "-") == norm)
            .map(Method::Prior)
            .ok_or_else(|| Error::Configuration(format!("unknown method {s:?}")))
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name()
    }
}

/// Everything one comparison run needs besides the data and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    /// Architecture template; the variant and seed are set per run.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub shots: usize,
    pub eval: EvalOptions,
}

/// Trains `method` on the training split: base classes only, or every class
/// for [`Method::As`].
pub fn train_method(
    method: Method,
    exp: &Experiment,
    data: &Dataset,
    seed: u64,
) -> Result<(Model<f32>, LossCurve)> {
    let classes: Vec<String> = match method {
        Method::As => data.roles.keys().cloned().collect(),
        _ => data.classes(ClassRole::Base),
    };
    if classes.is_empty() {
        return Err(Error::Configuration(
            "the dataset has no base classes".into(),
        ));
    }
    let config = ModelConfig {
        variant: method.variant(),
        seed,
        ..exp.model.clone()
    };
    let refs: Vec<&str> = classes.iter().map(String::as_str).collect();
    let mut model = Model::<f32>::new(config, &refs)?;
    let samples = data.select(|s| s.split == Split::Train && classes.contains(&s.class));
    let train = TrainConfig {
        seed,
        ..exp.train.clone()
    };
    let curve = train_base(&mut model, data, &samples, &train)?;
    Ok((model, curve))
}

/// Adapts every novel class of `data` from a `shots`-shot episode. Episodes
/// depend on the seed and class only, so every method sees the same support
/// sets. Unconditioned models are left untouched.
pub fn adapt_novel_classes(
    model: &mut Model<f32>,
    exp: &Experiment,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<AdaptReport>> {
    if !model.variant().is_conditioned() {
        return Ok(Vec::new());
    }
    data.classes(ClassRole::Novel)
        .iter()
        .map(|c| {
            let ep = FewShotEpisode::sample(data, c, exp.shots, derive_seed(seed, &["episode"]))?;
            adapt_novel(model, data, &ep, &exp.adapt)
        })
        .collect()
}

/// A trained (and, where applicable, adapted) method with its novel-class rows.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: Method,
    pub model: Model<f32>,
    pub curve: LossCurve,
    pub adaptation: Vec<AdaptReport>,
    pub novel: Vec<ReportRow>,
}

impl MethodRun {
    /// Train, adapt to every novel class, evaluate on the novel classes.
    pub fn run(method: Method, exp: &Experiment, data: &Dataset, seed: u64) -> Result<Self> {
        let (mut model, curve) = train_method(method, exp, data, seed)?;
        let adaptation = adapt_novel_classes(&mut model, exp, data, seed)?;
        let novel_classes = data.classes(ClassRole::Novel);
        let shots = if method.variant().is_conditioned() {
            exp.shots
        } else {
            0
        };
        let novel = evaluate(
            &model,
            data,
            Some(&novel_classes),
            &method.name(),
            shots,
            exp.eval,
        )?;
        Ok(Self {
            method,
            model,
            curve,
            adaptation,
            novel,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Zs, Method::As]
            .into_iter()
            .chain(PriorKind::ALL[1..].iter().map(|&k| Method::Prior(k)))
        {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!(
            "mcce_dec".parse::<Method>().unwrap(),
            Method::Prior(PriorKind::McceDec)
        );
        assert!("nope".parse::<Method>().is_err());
    }
}
