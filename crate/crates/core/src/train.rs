//! Contrastive training of the dual encoder on two prompt-family terms.
//!
//! Each term is a softmax cross-entropy between batch images and one
//! normalization set of prompts, with targets given by the match matrix
//! (row-normalized). Which families the terms use depends on the ablation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::AblationKind;
use crate::encoder::{text_features, Binder, DualEncoderParams, ParamGroup, MAX_LOGIT_SCALE};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckReport};
use crate::joint::LabelSpace;
use crate::prompt::{CategoryId, PromptKind, RationaleId, RenderedPrompt};
use crate::tensor::{cross_entropy, Graph, Tensor, Var};
use crate::world::{write_file, Example};

pub const TRAIN_LOG_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_MAX_PROMPTS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Which parameter groups receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    /// Visual prompt tokens only.
    Prompts,
    /// Visual prompts, both projection heads and the logit scale.
    PromptsAndHeads,
    /// Everything except the text backbone, whose features stay cached.
    FrozenTextBackbone,
    All,
}

impl TrainScope {
    pub fn includes(self, group: ParamGroup) -> bool {
        use ParamGroup::*;
        match self {
            TrainScope::Prompts => group == VisualPrompt,
            TrainScope::PromptsAndHeads => matches!(
                group,
                VisualPrompt | TextProjection | ImageProjection | LogitScale
            ),
            TrainScope::FrozenTextBackbone => group != TextBackbone,
            TrainScope::All => true,
        }
    }
}

impl std::str::FromStr for TrainScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompts" => Ok(TrainScope::Prompts),
            "prompts_and_heads" => Ok(TrainScope::PromptsAndHeads),
            "frozen_text_backbone" => Ok(TrainScope::FrozenTextBackbone),
            "all" => Ok(TrainScope::All),
            other => Err(Error::Config(format!("unknown train scope {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub scope: TrainScope,
    pub term_weights: [f64; 2],
    pub ablation: AblationKind,
    /// Larger normalization sets are subsampled per batch.
    pub max_prompts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 5e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            scope: TrainScope::FrozenTextBackbone,
            term_weights: [1.0, 1.0],
            ablation: AblationKind::Ecor,
            max_prompts: DEFAULT_MAX_PROMPTS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if self.term_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("term weights must be finite and >= 0".into()));
        }
        if self.max_prompts == 0 {
            return Err(Error::Config("max_prompts must be positive".into()));
        }
        Ok(())
    }
}

/// Does `prompt` bind exactly the gold labels it mentions?
pub fn prompt_matches(
    prompt: &RenderedPrompt,
    category: CategoryId,
    rationales: &[RationaleId],
) -> bool {
    let cat_ok = prompt.category.is_none_or(|c| c == category);
    let rat_ok = prompt.rationales.is_empty() || {
        let mut gold = rationales.to_vec();
        gold.sort_unstable();
        prompt.rationales == gold
    };
    cat_ok && rat_ok
}

/// Images with gold labels against one prompt set.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub examples: Vec<&'a Example>,
    pub prompts: Vec<RenderedPrompt>,
    /// `[images × prompts]` in {0, 1}.
    pub matches: Tensor,
}

impl<'a> Batch<'a> {
    pub fn new(examples: Vec<&'a Example>, prompts: Vec<RenderedPrompt>) -> Result<Self> {
        let matches = match_matrix(&examples, &prompts)?;
        Ok(Batch {
            examples,
            prompts,
            matches,
        })
    }

    pub fn ids(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.id).collect()
    }
}

/// `y[i][j] = 1` iff prompt `j` matches example `i`. Every row needs a match.
pub fn match_matrix(examples: &[&Example], prompts: &[RenderedPrompt]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(examples.len() * prompts.len());
    for ex in examples {
        let row: Vec<f64> = prompts
            .iter()
            .map(|p| f64::from(u8::from(prompt_matches(p, ex.category, &ex.rationales))))
            .collect();
        if !row.iter().any(|y| *y > 0.0) {
            return Err(Error::Contract(format!(
                "example {} (category {}, rationales {:?}) matches no prompt of the normalization set",
                ex.id, ex.category, ex.rationales
            )));
        }
        data.extend(row);
    }
    Tensor::matrix(examples.len(), prompts.len(), data)
}

/// `ŷ = y / rowsum(y)`.
pub fn row_normalize(y: &Tensor) -> Result<Tensor> {
    let (r, c) = y.dims2()?;
    let mut out = y.clone();
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(Error::Contract(format!("match row {i} has no positive")));
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// Contrastive loss from precomputed scores: mean over rows of the
/// cross-entropy between `ŷ` and the row softmax.
pub fn clip_loss_from_scores(scores: &[Vec<f64>], matches: &Tensor) -> Result<f64> {
    let targets = row_normalize(matches)?;
    let (r, c) = targets.dims2()?;
    if scores.len() != r || scores.iter().any(|s| s.len() != c) {
        return Err(Error::shape(
            "clip_loss",
            &[scores.len(), scores.first().map_or(0, Vec::len)],
            &[r, c],
        ));
    }
    let mut total = 0.0;
    for (i, s) in scores.iter().enumerate() {
        total += cross_entropy(s, targets.row(i))?;
    }
    Ok(total / r as f64)
}

/// Contrastive loss of a batch under frozen `params`.
pub fn clip_loss(params: &DualEncoderParams, batch: &Batch<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let images: Vec<_> = batch.examples.iter().map(|e| &e.image).collect();
    let img = b.encode_images(&mut g, &images)?;
    let refs: Vec<&RenderedPrompt> = batch.prompts.iter().collect();
    let txt = b.encode_text(&mut g, &refs)?;
    let logits = b.logits(&mut g, img, txt)?;
    let loss = g.cross_entropy(logits, &row_normalize(&batch.matches)?)?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub term1: Option<f64>,
    pub term2: Option<f64>,
    pub total: f64,
}

struct Term {
    kind: PromptKind,
    weight: f64,
    prompts: Vec<RenderedPrompt>,
    /// Pooled text features, present when the text backbone is frozen.
    features: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermAudit {
    pub term: usize,
    pub kind: PromptKind,
    pub weight: f64,
    pub normalization_size: usize,
    /// Per-batch prompt count when the set is subsampled.
    pub subsample_size: Option<usize>,
    /// Identical (category, set) prompts appear once.
    pub deduplicated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptAudit {
    pub format_version: u32,
    pub ablation: AblationKind,
    pub terms: Vec<TermAudit>,
}

impl PromptAudit {
    pub fn kinds(&self) -> Vec<PromptKind> {
        self.terms.iter().map(|t| t.kind).collect()
    }
}

/// The two-term training objective of one ablation over a label space.
pub struct Objective {
    ablation: AblationKind,
    terms: Vec<Term>,
    max_prompts: usize,
}

impl Objective {
    /// `cache_text` precomputes pooled text features; only valid while the
    /// text backbone stays fixed.
    pub fn new(
        params: &DualEncoderParams,
        space: &LabelSpace,
        ablation: AblationKind,
        weights: [f64; 2],
        max_prompts: usize,
        cache_text: bool,
    ) -> Result<Self> {
        let mut terms = Vec::new();
        for (kind, weight) in ablation.training_terms().into_iter().zip(weights) {
            let Some(kind) = kind else { continue };
            if weight == 0.0 {
                terms.push(Term {
                    kind,
                    weight,
                    prompts: Vec::new(),
                    features: None,
                });
                continue;
            }
            let prompts = space.prompts(kind)?;
            let features = if cache_text {
                let refs: Vec<&RenderedPrompt> = prompts.iter().collect();
                Some(text_features(params, &refs)?)
            } else {
                None
            };
            terms.push(Term {
                kind,
                weight,
                prompts,
                features,
            });
        }
        if terms.iter().all(|t| t.weight == 0.0) {
            return Err(Error::Config(format!(
                "{ablation} has no weighted loss term"
            )));
        }
        Ok(Objective {
            ablation,
            terms,
            max_prompts,
        })
    }

    pub fn audit(&self) -> PromptAudit {
        let slots = self.ablation.training_terms();
        PromptAudit {
            format_version: TRAIN_LOG_FORMAT_VERSION,
            ablation: self.ablation,
            terms: self
                .terms
                .iter()
                .filter(|t| t.weight > 0.0)
                .map(|t| TermAudit {
                    term: 1 + slots.iter().position(|k| *k == Some(t.kind)).unwrap_or(0),
                    kind: t.kind,
                    weight: t.weight,
                    normalization_size: t.prompts.len(),
                    subsample_size: (t.prompts.len() > self.max_prompts)
                        .then_some(self.max_prompts),
                    deduplicated: true,
                })
                .collect(),
        }
    }

    fn slot(&self, term: &Term) -> usize {
        self.ablation
            .training_terms()
            .iter()
            .position(|k| *k == Some(term.kind))
            .unwrap_or(0)
    }

    /// Prompt indices used for one batch: everything, or all positives plus
    /// a uniform sample of the rest up to `max_prompts`.
    fn select(
        &self,
        term: &Term,
        examples: &[&Example],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Vec<usize> {
        let n = term.prompts.len();
        let Some(rng) = rng.filter(|_| n > self.max_prompts) else {
            return (0..n).collect();
        };
        let (positives, rest): (Vec<usize>, Vec<usize>) = (0..n).partition(|&j| {
            examples
                .iter()
                .any(|e| prompt_matches(&term.prompts[j], e.category, &e.rationales))
        });
        let room = self
            .max_prompts
            .saturating_sub(positives.len())
            .min(rest.len());
        let mut chosen = positives;
        chosen.extend(
            rand::seq::index::sample(rng, rest.len(), room)
                .into_iter()
                .map(|i| rest[i]),
        );
        chosen.sort_unstable();
        chosen
    }

    /// Weighted total loss as a graph node plus per-term nodes by slot.
    pub fn loss(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        examples: &[&Example],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, [Option<Var>; 2])> {
        let images: Vec<_> = examples.iter().map(|e| &e.image).collect();
        let img = binder.encode_images(g, &images)?;
        let mut parts = [None, None];
        let mut total: Option<Var> = None;
        for term in self.terms.iter().filter(|t| t.weight > 0.0) {
            let chosen = self.select(term, examples, rng.as_deref_mut());
            let prompts: Vec<RenderedPrompt> =
                chosen.iter().map(|&j| term.prompts[j].clone()).collect();
            let targets = row_normalize(&match_matrix(examples, &prompts)?)?;
            let txt = match &term.features {
                Some(f) => {
                    let width = f.shape()[1];
                    let rows: Vec<f64> = chosen.iter().flat_map(|&j| f.row(j).to_vec()).collect();
                    let feats = g.constant(Tensor::matrix(chosen.len(), width, rows)?);
                    binder.text_head(g, feats)?
                }
                None => {
                    let refs: Vec<&RenderedPrompt> = prompts.iter().collect();
                    binder.encode_text(g, &refs)?
                }
            };
            let logits = binder.logits(g, img, txt)?;
            let ce = g.cross_entropy(logits, &targets)?;
            parts[self.slot(term)] = Some(ce);
            let weighted = g.scale(ce, term.weight);
            total = Some(match total {
                Some(t) => g.add(t, weighted)?,
                None => weighted,
            });
        }
        let total = total.ok_or_else(|| Error::Config("objective has no active term".into()))?;
        Ok((total, parts))
    }

    /// Exact loss (no subsampling) under frozen `params`.
    pub fn evaluate(
        &self,
        params: &DualEncoderParams,
        examples: &[&Example],
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(params);
        let (total, parts) = self.loss(&mut g, &mut b, examples, None)?;
        Ok(LossBreakdown {
            term1: parts[0].map(|v| g.value(v).item()),
            term2: parts[1].map(|v| g.value(v).item()),
            total: g.value(total).item(),
        })
    }
}

/// Two-term loss of the full method on `examples`, both terms weighted 1.
pub fn ecor_training_loss(
    params: &DualEncoderParams,
    examples: &[&Example],
    space: &LabelSpace,
) -> Result<LossBreakdown> {
    Objective::new(
        params,
        space,
        AblationKind::Ecor,
        [1.0, 1.0],
        usize::MAX,
        false,
    )?
    .evaluate(params, examples)
}

/// Finite-difference check of the objective's gradient with respect to
/// every array in `scope`.
pub fn gradient_check(
    params: &DualEncoderParams,
    examples: &[&Example],
    space: &LabelSpace,
    ablation: AblationKind,
    scope: TrainScope,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let objective = Objective::new(params, space, ablation, [1.0, 1.0], usize::MAX, false)?;
    let mut g = Graph::new();
    let mut binder = Binder::new(params, |grp| scope.includes(grp));
    let (loss, _) = objective.loss(&mut g, &mut binder, examples, None)?;
    let grads = g.backward(loss)?;
    let bound = binder.bound_trainable();
    drop(binder);
    let names: Vec<String> = bound
        .iter()
        .map(|(id, _)| params.arrays()[id.index()].name.clone())
        .collect();
    let inputs: Vec<Tensor> = bound
        .iter()
        .map(|(id, _)| params.array(*id).clone())
        .collect();
    let analytic: Vec<Tensor> = bound
        .iter()
        .map(|(_, v)| grads.get(*v).expect("bound leaf has a gradient slot"))
        .collect();
    let mut work = params.clone();
    gradcheck::check(&names, &inputs, &analytic, epsilon, |arrays| {
        for ((id, _), a) in bound.iter().zip(arrays) {
            work.data_mut(*id).copy_from_slice(a.data());
        }
        Ok(objective.evaluate(&work, examples)?.total)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state carried in checkpoints so training resumes exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub moments: Vec<Moments>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl TrainerState {
    fn moments_for(&mut self, name: &str, len: usize) -> &mut Moments {
        let pos = match self.moments.iter().position(|m| m.name == name) {
            Some(p) => p,
            None => {
                self.moments.push(Moments {
                    name: name.to_string(),
                    m: vec![0.0; len],
                    v: vec![0.0; len],
                });
                self.moments.len() - 1
            }
        };
        &mut self.moments[pos]
    }

    /// Apply one update; the logit scale is clamped to its maximum.
    pub fn step(
        &mut self,
        params: &mut DualEncoderParams,
        grads: &[(crate::encoder::ParamId, Tensor)],
        config: &TrainConfig,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let lr = config.learning_rate;
        for (id, grad) in grads {
            let name = params.arrays()[id.index()].name.clone();
            match config.optimizer {
                OptimizerKind::Sgd => {
                    for (p, g) in params.data_mut(*id).iter_mut().zip(grad.data()) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let mom = self.moments_for(&name, grad.numel());
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    let data = params.data_mut(*id);
                    for (j, g) in grad.data().iter().enumerate() {
                        mom.m[j] = ADAM_BETA1 * mom.m[j] + (1.0 - ADAM_BETA1) * g;
                        mom.v[j] = ADAM_BETA2 * mom.v[j] + (1.0 - ADAM_BETA2) * g * g;
                        let mhat = mom.m[j] / c1;
                        let vhat = mom.v[j] / c2;
                        data[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        let ls = params.logit_scale_id();
        let v = &mut params.data_mut(ls)[0];
        if *v > MAX_LOGIT_SCALE {
            *v = MAX_LOGIT_SCALE;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub format_version: u32,
    pub epoch: usize,
    pub term1: Option<f64>,
    pub term2: Option<f64>,
    pub total: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub format_version: u32,
    pub epoch: usize,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub timings: Vec<TimingRecord>,
    pub audit: PromptAudit,
    pub state: TrainerState,
}

pub const TRAIN_LOG_FILE: &str = "train_log.ndjson";
pub const TIMING_FILE: &str = "timing.ndjson";
pub const AUDIT_FILE: &str = "prompt_audit.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("record serialises")
}

/// Train `params` in place on `examples`, whose gold sets must all lie in
/// `space`. With `out_dir`, every epoch appends to the log files and writes
/// a checkpoint (`checkpoint.json` plus `checkpoints/epoch_NNNN.json`).
/// `resume` continues from a checkpointed state.
pub fn train(
    params: &mut DualEncoderParams,
    examples: &[Example],
    space: &LabelSpace,
    config: &TrainConfig,
    resume: Option<TrainerState>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let cache_text = !config.scope.includes(ParamGroup::TextBackbone);
    let objective = Objective::new(
        params,
        space,
        config.ablation,
        config.term_weights,
        config.max_prompts,
        cache_text,
    )?;
    let audit = objective.audit();
    let mut state = resume.unwrap_or_default();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        write_file(
            &dir.join(AUDIT_FILE),
            serde_json::to_string_pretty(&audit)
                .expect("audit serialises")
                .as_bytes(),
        )?;
        if state.epoch == 0 {
            for f in [TRAIN_LOG_FILE, TIMING_FILE] {
                write_file(&dir.join(f), b"")?;
            }
        }
    }
    let mut log = Vec::new();
    let mut timings = Vec::new();
    while state.epoch < config.epochs {
        let started = Instant::now();
        let epoch = state.epoch + 1;
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut seen = [false; 2];
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let ids: Vec<usize> = batch.iter().map(|e| e.id).collect();
            let nan = |what: String| {
                Error::Numeric(format!("{what} at epoch {epoch}, batch ids {ids:?}"))
            };
            let (values, grads) = {
                let mut g = Graph::new();
                let mut binder = Binder::new(params, |grp| config.scope.includes(grp));
                let (total, parts) =
                    match objective.loss(&mut g, &mut binder, &batch, Some(&mut rng)) {
                        Ok(r) => r,
                        Err(Error::Numeric(msg)) => {
                            return Err(dump_nan(out_dir, epoch, &ids, nan(msg)));
                        }
                        Err(e) => return Err(e),
                    };
                let total_value = g.value(total).item();
                if !total_value.is_finite() {
                    return Err(dump_nan(
                        out_dir,
                        epoch,
                        &ids,
                        nan(format!("loss {total_value}")),
                    ));
                }
                let grads = g.backward(total)?;
                let collected: Vec<_> = binder
                    .bound_trainable()
                    .into_iter()
                    .map(|(id, v)| (id, grads.get(v).expect("bound leaf")))
                    .collect();
                if collected.iter().any(|(_, t)| !t.is_finite()) {
                    return Err(dump_nan(
                        out_dir,
                        epoch,
                        &ids,
                        nan("non-finite gradient".into()),
                    ));
                }
                let values = [
                    parts[0].map(|v| g.value(v).item()),
                    parts[1].map(|v| g.value(v).item()),
                ];
                sums[2] += total_value;
                (values, collected)
            };
            for (k, v) in values.iter().enumerate() {
                if let Some(v) = v {
                    sums[k] += v;
                    seen[k] = true;
                }
            }
            batches += 1;
            state.step(params, &grads, config);
        }
        state.epoch = epoch;
        let n = batches as f64;
        let record = EpochRecord {
            format_version: TRAIN_LOG_FORMAT_VERSION,
            epoch,
            term1: seen[0].then(|| sums[0] / n),
            term2: seen[1].then(|| sums[1] / n),
            total: sums[2] / n,
            seed: config.seed,
        };
        let timing = TimingRecord {
            format_version: TRAIN_LOG_FORMAT_VERSION,
            epoch,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(dir) = out_dir {
            append_line(&dir.join(TRAIN_LOG_FILE), &to_json(&record))?;
            append_line(&dir.join(TIMING_FILE), &to_json(&timing))?;
            let ckpt = params.to_checkpoint(Some(state.clone()));
            ckpt.save(&dir.join(CHECKPOINT_FILE))?;
            ckpt.save(
                &dir.join("checkpoints")
                    .join(format!("epoch_{epoch:04}.json")),
            )?;
        }
        log.push(record);
        timings.push(timing);
    }
    Ok(TrainOutcome {
        log,
        timings,
        audit,
        state,
    })
}

fn dump_nan(out_dir: Option<&Path>, epoch: usize, ids: &[usize], err: Error) -> Error {
    if let Some(dir) = out_dir {
        let doc = serde_json::json!({
            "format_version": TRAIN_LOG_FORMAT_VERSION,
            "epoch": epoch,
            "batch_ids": ids,
            "error": err.to_string(),
        });
        let _ = write_file(&dir.join("nan_dump.json"), doc.to_string().as_bytes());
    }
    err
}
