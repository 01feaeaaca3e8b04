//! Seeded synthetic datasets for the four training stages.
//!
//! Token ids 0..4 are reserved (`PAD`, `BOS`, `SEP`, `EOS`); content tokens
//! occupy `4..vocab`.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{lift_to_world, sinusoidal_encode, CameraFrame, GeoEncodingConfig};
use crate::model::ModelConfig;
use crate::rng::{derive_seed, fnv1a, stream, Rng};
use crate::synergy::TeacherFeatures;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: usize = 4;
pub const MAX_SEQ_LEN: usize = 32;

/// One training sequence plus its supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `P × d_vis`
    pub visual: Tensor,
    /// `P × d_model` coordinate encodings, if the sample carries geometry
    pub geo: Option<Tensor>,
    pub text_ids: Vec<usize>,
    /// sequence rows whose logits are scored
    pub ce_rows: Vec<usize>,
    /// next-token targets aligned with `ce_rows`
    pub ce_targets: Vec<usize>,
    pub synergy_count: usize,
    pub teachers: Option<TeacherFeatures>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.visual.rows() + self.text_ids.len() + self.synergy_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub samples: usize,
    pub classes: usize,
    pub visual_tokens: usize,
    pub visual_noise: f64,
    pub caption_len: usize,
    pub copy_len: usize,
    /// fraction of CSQA sequences in the stage_2_2 mix; the rest are copy-task
    pub mix_ratio: f64,
    pub geo: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            samples: 64,
            classes: 4,
            visual_tokens: 4,
            visual_noise: 0.1,
            caption_len: 4,
            copy_len: 4,
            mix_ratio: 0.5,
            geo: true,
        }
    }
}

impl DataConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.samples == 0 || self.classes == 0 {
            return Err(Error::Parameter("samples and classes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Parameter(format!(
                "mix_ratio must lie in [0, 1], got {}",
                self.mix_ratio
            )));
        }
        if !(self.visual_noise >= 0.0 && self.visual_noise.is_finite()) {
            return Err(Error::Parameter(
                "visual_noise must be finite and >= 0".into(),
            ));
        }
        let caption = self.visual_tokens + self.caption_len + 2;
        let copy = 2 + 2 * self.copy_len + 3;
        let coarse = self.visual_tokens + 1 + model.synergy_tokens;
        for (name, len) in [("caption", caption), ("copy", copy), ("coarse", coarse)] {
            if len > MAX_SEQ_LEN {
                return Err(Error::Parameter(format!(
                    "{name} sequences would be {len} long, limit is {MAX_SEQ_LEN}"
                )));
            }
        }
        if self.caption_len == 0 || self.copy_len == 0 {
            return Err(Error::Parameter(
                "caption_len and copy_len must be >= 1".into(),
            ));
        }
        if model.vocab <= RESERVED {
            return Err(Error::Parameter(format!(
                "vocab must exceed {RESERVED} reserved ids"
            )));
        }
        Ok(())
    }
}

fn content_token(rng: &mut Rng, vocab: usize) -> usize {
    rng.random_range(RESERVED..vocab)
}

/// Whitespace tokenizer hashing each lowercased alphanumeric word into the
/// content range of the vocabulary.
pub fn hash_tokenize(text: &str, vocab: usize) -> Vec<usize> {
    let span = (vocab - RESERVED) as u64;
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .map(|w| RESERVED + (fnv1a(w.as_bytes()) % span) as usize)
        .collect()
}

struct Classes {
    prototypes: Vec<Tensor>,
    captions: Vec<Vec<usize>>,
}

fn classes(cfg: &DataConfig, model: &ModelConfig, seed: u64) -> Classes {
    let mut rng = stream(seed, "data/classes");
    let prototypes = (0..cfg.classes)
        .map(|_| Tensor::randn(&[cfg.visual_tokens, model.d_vis], 1.0, &mut rng))
        .collect();
    let captions = (0..cfg.classes)
        .map(|_| {
            (0..cfg.caption_len)
                .map(|_| content_token(&mut rng, model.vocab))
                .collect()
        })
        .collect();
    Classes {
        prototypes,
        captions,
    }
}

fn visual_for(class: &Tensor, noise: f64, rng: &mut Rng) -> Tensor {
    let n = Tensor::randn(class.shape(), noise, rng);
    let data = class
        .data()
        .iter()
        .zip(n.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(class.shape().to_vec(), data).expect("same shape")
}

/// Encoded world coordinates of a random square rig, one row per visual token.
fn geo_for(tokens: usize, d_model: usize, rng: &mut Rng) -> Result<Tensor> {
    let side = (tokens as f64).sqrt().ceil() as usize;
    let frame = CameraFrame::random(side, side, rng);
    let points = lift_to_world(&frame)?;
    let enc = sinusoidal_encode(&points, &GeoEncodingConfig::for_width(d_model))?;
    let rows: Vec<f64> = enc.data()[..tokens * d_model].to_vec();
    Tensor::new(vec![tokens, d_model], rows)
}

fn maybe_geo(cfg: &DataConfig, model: &ModelConfig, rng: &mut Rng) -> Result<Option<Tensor>> {
    if cfg.geo && cfg.visual_tokens > 0 {
        geo_for(cfg.visual_tokens, model.d_model, rng).map(Some)
    } else {
        Ok(None)
    }
}

/// Next-token supervision over `text[from..]`: each of those tokens is
/// predicted from the row just before it.
fn next_token_targets(prefix: usize, text: &[usize], from: usize) -> (Vec<usize>, Vec<usize>) {
    let rows = (from..text.len()).map(|i| prefix + i - 1).collect();
    let targets = text[from..].to_vec();
    (rows, targets)
}

/// Class-conditioned captioning: visual tokens drawn around a class prototype,
/// caption `BOS c_1 .. c_n EOS` fixed per class.
pub fn captioning(cfg: &DataConfig, model: &ModelConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate(model)?;
    let cls = classes(cfg, model, seed);
    let mut rng = stream(seed, "data/captioning");
    (0..cfg.samples)
        .map(|i| {
            let c = i % cfg.classes;
            let visual = visual_for(&cls.prototypes[c], cfg.visual_noise, &mut rng);
            let geo = maybe_geo(cfg, model, &mut rng)?;
            let mut text = vec![BOS];
            text.extend(&cls.captions[c]);
            text.push(EOS);
            let (ce_rows, ce_targets) = next_token_targets(cfg.visual_tokens, &text, 1);
            Ok(Sample {
                visual,
                geo,
                text_ids: text,
                ce_rows,
                ce_targets,
                synergy_count: 0,
                teachers: None,
            })
        })
        .collect()
}

fn copy_sample(cfg: &DataConfig, model: &ModelConfig, rng: &mut Rng) -> Sample {
    let visual = Tensor::randn(&[2, model.d_vis], 1.0, rng);
    let body: Vec<usize> = (0..cfg.copy_len)
        .map(|_| content_token(rng, model.vocab))
        .collect();
    let mut text = vec![BOS];
    text.extend(&body);
    text.push(SEP);
    text.extend(&body);
    text.push(EOS);
    let (ce_rows, ce_targets) = next_token_targets(2, &text, cfg.copy_len + 2);
    Sample {
        visual,
        geo: None,
        text_ids: text,
        ce_rows,
        ce_targets,
        synergy_count: 0,
        teachers: None,
    }
}

/// `BOS x SEP x EOS`, scored on the second copy.
pub fn copy_task(cfg: &DataConfig, model: &ModelConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate(model)?;
    let mut rng = stream(seed, "data/copy");
    Ok((0..cfg.samples)
        .map(|_| copy_sample(cfg, model, &mut rng))
        .collect())
}

/// Synergy distillation: class-prototype visuals followed by `BOS` and the
/// synergy tokens, with one mock teacher pair per class.
pub fn coarse_task(cfg: &DataConfig, model: &ModelConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate(model)?;
    let cls = classes(cfg, model, seed);
    let teachers = (0..cfg.classes)
        .map(|c| {
            TeacherFeatures::mock(
                derive_seed(seed, &format!("teacher/class{c}")),
                model.synergy_tokens,
                model.d_align_temporal,
                model.d_align_spatial,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = stream(seed, "data/coarse");
    (0..cfg.samples)
        .map(|i| {
            let c = i % cfg.classes;
            Ok(Sample {
                visual: visual_for(&cls.prototypes[c], cfg.visual_noise, &mut rng),
                geo: maybe_geo(cfg, model, &mut rng)?,
                text_ids: vec![BOS],
                ce_rows: vec![],
                ce_targets: vec![],
                synergy_count: model.synergy_tokens,
                teachers: Some(teachers[c].clone()),
            })
        })
        .collect()
}

/// `BOS question SEP answer EOS`, scored on the answer and `EOS`, truncated
/// from the question side to fit the sequence limit.
pub fn qa_sample(question: &str, answer: &str, vocab: usize) -> Sample {
    let mut a = hash_tokenize(answer, vocab);
    a.truncate(MAX_SEQ_LEN / 2 - 1);
    let mut q = hash_tokenize(question, vocab);
    q.truncate(MAX_SEQ_LEN - a.len() - 3);
    let mut text = vec![BOS];
    text.extend(&q);
    text.push(SEP);
    let from = text.len();
    text.extend(&a);
    text.push(EOS);
    let (ce_rows, ce_targets) = next_token_targets(0, &text, from);
    Sample {
        visual: Tensor::zeros(&[0, 1]),
        geo: None,
        text_ids: text,
        ce_rows,
        ce_targets,
        synergy_count: 0,
        teachers: None,
    }
}

/// Instruction mix: CSQA pairs interleaved with copy-task sequences.
pub fn instruction_mix(
    qa: &[(String, String)],
    cfg: &DataConfig,
    model: &ModelConfig,
    seed: u64,
) -> Result<Vec<Sample>> {
    cfg.validate(model)?;
    if qa.is_empty() {
        return Err(Error::Data(
            "instruction mix needs at least one QA pair".into(),
        ));
    }
    let n_qa = (cfg.samples as f64 * cfg.mix_ratio).round() as usize;
    let mut rng = stream(seed, "data/mix");
    let order = sample(&mut rng, qa.len(), qa.len()).into_vec();
    let mut out = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        if i < n_qa {
            let (q, a) = &qa[order[i % qa.len()]];
            let mut s = qa_sample(q, a, model.vocab);
            s.visual = Tensor::zeros(&[0, model.d_vis]);
            out.push(s);
        } else {
            out.push(copy_sample(cfg, model, &mut rng));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_is_stable_and_in_range() {
        let a = hash_tokenize("Does any NEW object appear?", 64);
        assert_eq!(a, hash_tokenize("does any new object appear", 64));
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|&t| (RESERVED..64).contains(&t)));
    }

    #[test]
    fn captioning_targets_line_up() {
        let m = ModelConfig::default();
        let d = captioning(&DataConfig::default(), &m, 1).unwrap();
        assert_eq!(d.len(), 64);
        let s = &d[0];
        assert_eq!(s.text_ids.len(), 6);
        assert_eq!(s.ce_rows, vec![4, 5, 6, 7, 8]);
        assert_eq!(s.ce_targets, s.text_ids[1..].to_vec());
        assert_eq!(s.geo.as_ref().unwrap().shape(), &[4, 16]);
        assert_eq!(captioning(&DataConfig::default(), &m, 1).unwrap(), d);
        assert!(d.iter().all(|s| s.len() <= MAX_SEQ_LEN));
    }

    #[test]
    fn copy_targets_are_second_copy() {
        let m = ModelConfig::default();
        let d = copy_task(&DataConfig::default(), &m, 2).unwrap();
        let s = &d[3];
        assert_eq!(s.ce_targets, s.text_ids[6..].to_vec());
        assert_eq!(&s.ce_targets[..4], &s.text_ids[1..5]);
        assert_eq!(s.ce_rows[0], 2 + 5);
    }

    #[test]
    fn coarse_task_teachers_per_class() {
        let m = ModelConfig::default();
        let d = coarse_task(&DataConfig::default(), &m, 3).unwrap();
        assert_eq!(d[0].teachers, d[4].teachers);
        assert_ne!(d[0].teachers, d[1].teachers);
        assert_eq!(d[0].teachers.as_ref().unwrap().temporal.shape(), &[4, 12]);
    }

    #[test]
    fn qa_sample_fits() {
        let long = "word ".repeat(100);
        let s = qa_sample(&long, &long, 64);
        assert!(s.len() <= MAX_SEQ_LEN);
        assert_eq!(*s.text_ids.last().unwrap(), EOS);
        assert_eq!(s.ce_rows.len(), s.ce_targets.len());
    }

    #[test]
    fn mix_ratio_respected() {
        let m = ModelConfig::default();
        let qa = vec![(
            "is the ball red".to_string(),
            "yes the ball is red".to_string(),
        )];
        let d = instruction_mix(&qa, &DataConfig::default(), &m, 4).unwrap();
        let n_qa = d.iter().filter(|s| s.visual.rows() == 0).count();
        assert_eq!(n_qa, 32);
        assert!(instruction_mix(&[], &DataConfig::default(), &m, 4).is_err());
    }

    #[test]
    fn oversized_config_rejected() {
        let m = ModelConfig::default();
        let cfg = DataConfig {
            copy_len: 20,
            ..Default::default()
        };
        assert!(cfg.validate(&m).is_err());
    }
}
