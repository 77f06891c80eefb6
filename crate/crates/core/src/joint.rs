//! Joint probability tables over (rationale set, category) pairs.
//!
//! Scores come from a [`Scorer`]: either the dual encoder or a stub that
//! supplies them directly. Every table is indexed `[set][category]`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_images, encode_text, DualEncoderParams, ImageTokens};
use crate::error::{Error, Result};
use crate::prompt::{
    enumerate_normalization_set, CategoryId, PromptKind, RationaleId, RenderedPrompt, Vocabulary,
};
use crate::tensor::{dot, softmax};

/// How `P(c | R, I)` is normalized at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionalNormalization {
    /// Softmax over categories with the rationale set held fixed.
    #[default]
    PerRationaleSet,
    /// One softmax over every (category, set) prompt; rows do not sum to one.
    CrossProduct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factorization {
    /// `P(R|I) · P(c|R,I)` with the given conditional prompt family.
    Autoregressive {
        conditional: PromptKind,
        normalization: ConditionalNormalization,
    },
    /// `P(R|I) · P(c|I)`.
    Independent,
    /// `P(c|I) · P(R|c,I)`.
    Inverse,
    /// One softmax over all conditional prompts, read as the joint.
    Flat,
}

impl Factorization {
    pub const ECOR: Factorization = Factorization::Autoregressive {
        conditional: PromptKind::CategoryGivenRationale,
        normalization: ConditionalNormalization::PerRationaleSet,
    };

    /// Prompt families whose scores the factorization consumes.
    pub fn prompt_kinds(self) -> Vec<PromptKind> {
        match self {
            Factorization::Autoregressive { conditional, .. } => {
                vec![PromptKind::Rationale, conditional]
            }
            Factorization::Independent => vec![PromptKind::Rationale, PromptKind::CategoryOnly],
            Factorization::Inverse => {
                vec![PromptKind::CategoryOnly, PromptKind::RationaleGivenCategory]
            }
            Factorization::Flat => vec![PromptKind::CategoryGivenRationale],
        }
    }
}

/// Categories of a vocabulary plus the rationale sets predictions range
/// over (normally the sets observed in training data).
#[derive(Clone, Debug)]
pub struct LabelSpace {
    vocabulary: Vocabulary,
    sets: Vec<Vec<RationaleId>>,
    context_len: usize,
}

impl LabelSpace {
    pub fn new(
        vocabulary: Vocabulary,
        sets: Vec<Vec<RationaleId>>,
        context_len: usize,
    ) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::Contract(
                "label space needs at least one rationale set".into(),
            ));
        }
        if vocabulary.n_categories() == 0 {
            return Err(Error::Contract(
                "label space needs at least one category".into(),
            ));
        }
        let mut canonical = Vec::with_capacity(sets.len());
        for s in sets {
            let mut s = s;
            s.sort_unstable();
            if s.is_empty() || s.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Contract(format!("invalid rationale set {s:?}")));
            }
            if let Some(r) = s.iter().find(|r| **r >= vocabulary.n_rationales()) {
                return Err(Error::Lookup(format!("rationale id {r} out of range")));
            }
            if canonical.contains(&s) {
                return Err(Error::Contract(format!("duplicate rationale set {s:?}")));
            }
            canonical.push(s);
        }
        Ok(LabelSpace {
            vocabulary,
            sets: canonical,
            context_len,
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn sets(&self) -> &[Vec<RationaleId>] {
        &self.sets
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn n_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn n_categories(&self) -> usize {
        self.vocabulary.n_categories()
    }

    pub fn set_index(&self, set: &[RationaleId]) -> Option<usize> {
        let mut s = set.to_vec();
        s.sort_unstable();
        self.sets.iter().position(|x| *x == s)
    }

    /// Normalization set of one prompt family; conditional families are
    /// category-major, so prompt `c·n_sets + s` binds category `c`, set `s`.
    pub fn prompts(&self, kind: PromptKind) -> Result<Vec<RenderedPrompt>> {
        enumerate_normalization_set(&self.vocabulary, kind, &self.sets, self.context_len)
    }

    pub fn set_label(&self, s: usize) -> String {
        self.sets[s]
            .iter()
            .map(|r| self.vocabulary.rationale_name(*r).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Source of image-prompt scores for a fixed list of images.
pub trait Scorer {
    fn n_images(&self) -> usize;

    /// `scores[i][j]` for image `i` against `prompts[j]`.
    fn score_matrix(&self, prompts: &[RenderedPrompt]) -> Result<Vec<Vec<f64>>>;
}

/// Scores supplied by a function of (image index, prompt).
pub struct StubScorer<F> {
    n_images: usize,
    f: F,
}

impl<F: Fn(usize, &RenderedPrompt) -> f64> StubScorer<F> {
    pub fn new(n_images: usize, f: F) -> Self {
        StubScorer { n_images, f }
    }
}

impl<F: Fn(usize, &RenderedPrompt) -> f64> Scorer for StubScorer<F> {
    fn n_images(&self) -> usize {
        self.n_images
    }

    fn score_matrix(&self, prompts: &[RenderedPrompt]) -> Result<Vec<Vec<f64>>> {
        Ok((0..self.n_images)
            .map(|i| prompts.iter().map(|p| (self.f)(i, p)).collect())
            .collect())
    }
}

const IMAGE_CHUNK: usize = 64;
const TEXT_CHUNK: usize = 256;

/// Frozen dual-encoder scores; image embeddings are computed once.
pub struct EncoderScorer<'p> {
    params: &'p DualEncoderParams,
    image_embeddings: Vec<Vec<f64>>,
}

impl<'p> EncoderScorer<'p> {
    pub fn new(params: &'p DualEncoderParams, images: &[&ImageTokens]) -> Result<Self> {
        let mut image_embeddings = Vec::with_capacity(images.len());
        for chunk in images.chunks(IMAGE_CHUNK) {
            let e = encode_images(params, chunk)?;
            image_embeddings.extend((0..chunk.len()).map(|i| e.row(i).to_vec()));
        }
        Ok(EncoderScorer {
            params,
            image_embeddings,
        })
    }
}

impl Scorer for EncoderScorer<'_> {
    fn n_images(&self) -> usize {
        self.image_embeddings.len()
    }

    fn score_matrix(&self, prompts: &[RenderedPrompt]) -> Result<Vec<Vec<f64>>> {
        let mut text = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(TEXT_CHUNK) {
            let refs: Vec<&RenderedPrompt> = chunk.iter().collect();
            let e = encode_text(self.params, &refs)?;
            text.extend((0..chunk.len()).map(|i| e.row(i).to_vec()));
        }
        let scale = self.params.logit_scale().exp();
        Ok(self
            .image_embeddings
            .iter()
            .map(|img| text.iter().map(|t| scale * dot(img, t)).collect())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JointTable {
    pub image_id: usize,
    /// Indices into the label space's rationale sets, one per table row.
    pub set_indices: Vec<usize>,
    pub categories: Vec<CategoryId>,
    pub p_r: Vec<f64>,
    /// `[sets × categories]`.
    pub p_c_given_r: Vec<Vec<f64>>,
    /// `[sets × categories]`.
    pub joint: Vec<Vec<f64>>,
    pub factorization: Factorization,
}

impl JointTable {
    pub fn n_sets(&self) -> usize {
        self.set_indices.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.joint.iter().flatten().sum()
    }

    /// `(set, category)` of the largest joint entry; ties go to the lower
    /// category, then the lower set.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize)> = None;
        for c in 0..self.n_categories() {
            for s in 0..self.n_sets() {
                match best {
                    Some((bs, bc)) if self.joint[s][c] <= self.joint[bs][bc] => {}
                    _ => best = Some((s, c)),
                }
            }
        }
        best
    }

    fn from_joint(
        image_id: usize,
        n_categories: usize,
        joint: Vec<Vec<f64>>,
        factorization: Factorization,
    ) -> Self {
        let p_r: Vec<f64> = joint.iter().map(|row| row.iter().sum()).collect();
        let p_c_given_r = joint
            .iter()
            .zip(&p_r)
            .map(|(row, m)| {
                if *m > 0.0 {
                    row.iter().map(|j| j / m).collect()
                } else {
                    vec![1.0 / n_categories as f64; n_categories]
                }
            })
            .collect();
        JointTable {
            image_id,
            set_indices: (0..joint.len()).collect(),
            categories: (0..n_categories).collect(),
            p_r,
            p_c_given_r,
            joint,
            factorization,
        }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Contract(format!(
            "{what}: {got} scores, expected {want}"
        )));
    }
    Ok(())
}

/// Softmax over rationale-set prompt scores.
pub fn rationale_distribution(set_scores: &[f64]) -> Result<Vec<f64>> {
    softmax(set_scores)
}

/// Softmax over categories of the conditional scores with set `s` fixed.
/// `conditional` is category-major over `n_sets` sets.
pub fn category_given_rationales(conditional: &[f64], n_sets: usize, s: usize) -> Result<Vec<f64>> {
    if n_sets == 0 || !conditional.len().is_multiple_of(n_sets) || s >= n_sets {
        return Err(Error::Contract(
            "conditional scores do not tile the sets".into(),
        ));
    }
    let row: Vec<f64> = (0..conditional.len() / n_sets)
        .map(|c| conditional[c * n_sets + s])
        .collect();
    softmax(&row)
}

pub fn autoregressive_table(
    image_id: usize,
    set_scores: &[f64],
    conditional: &[f64],
    n_categories: usize,
    normalization: ConditionalNormalization,
    conditional_kind: PromptKind,
) -> Result<JointTable> {
    let n_sets = set_scores.len();
    check_len("conditional", conditional.len(), n_sets * n_categories)?;
    let p_r = rationale_distribution(set_scores)?;
    let p_c_given_r: Vec<Vec<f64>> = match normalization {
        ConditionalNormalization::PerRationaleSet => (0..n_sets)
            .map(|s| category_given_rationales(conditional, n_sets, s))
            .collect::<Result<_>>()?,
        ConditionalNormalization::CrossProduct => {
            let q = softmax(conditional)?;
            (0..n_sets)
                .map(|s| (0..n_categories).map(|c| q[c * n_sets + s]).collect())
                .collect()
        }
    };
    let joint = p_c_given_r
        .iter()
        .zip(&p_r)
        .map(|(row, pr)| row.iter().map(|p| pr * p).collect())
        .collect();
    Ok(JointTable {
        image_id,
        set_indices: (0..n_sets).collect(),
        categories: (0..n_categories).collect(),
        p_r,
        p_c_given_r,
        joint,
        factorization: Factorization::Autoregressive {
            conditional: conditional_kind,
            normalization,
        },
    })
}

pub fn independent_table(
    image_id: usize,
    set_scores: &[f64],
    category_scores: &[f64],
) -> Result<JointTable> {
    let p_r = softmax(set_scores)?;
    let p_c = softmax(category_scores)?;
    Ok(JointTable {
        image_id,
        set_indices: (0..p_r.len()).collect(),
        categories: (0..p_c.len()).collect(),
        p_c_given_r: vec![p_c.clone(); p_r.len()],
        joint: p_r
            .iter()
            .map(|pr| p_c.iter().map(|pc| pr * pc).collect())
            .collect(),
        p_r,
        factorization: Factorization::Independent,
    })
}

/// `conditional` holds rationale-given-category scores, category-major.
pub fn inverse_table(
    image_id: usize,
    category_scores: &[f64],
    conditional: &[f64],
) -> Result<JointTable> {
    let n_categories = category_scores.len();
    if n_categories == 0
        || conditional.is_empty()
        || !conditional.len().is_multiple_of(n_categories)
    {
        return Err(Error::Contract(
            "conditional scores do not tile the categories".into(),
        ));
    }
    let n_sets = conditional.len() / n_categories;
    let p_c = softmax(category_scores)?;
    let mut joint = vec![vec![0.0; n_categories]; n_sets];
    for (c, pc) in p_c.iter().enumerate() {
        let p_r_given_c = softmax(&conditional[c * n_sets..(c + 1) * n_sets])?;
        for (s, p) in p_r_given_c.iter().enumerate() {
            joint[s][c] = pc * p;
        }
    }
    Ok(JointTable::from_joint(
        image_id,
        n_categories,
        joint,
        Factorization::Inverse,
    ))
}

pub fn flat_table(image_id: usize, conditional: &[f64], n_categories: usize) -> Result<JointTable> {
    if n_categories == 0
        || conditional.is_empty()
        || !conditional.len().is_multiple_of(n_categories)
    {
        return Err(Error::Contract(
            "conditional scores do not tile the categories".into(),
        ));
    }
    let n_sets = conditional.len() / n_categories;
    let q = softmax(conditional)?;
    let joint = (0..n_sets)
        .map(|s| (0..n_categories).map(|c| q[c * n_sets + s]).collect())
        .collect();
    Ok(JointTable::from_joint(
        image_id,
        n_categories,
        joint,
        Factorization::Flat,
    ))
}

/// One table per scorer image. `image_ids[i]` labels image `i`.
pub fn joint_tables(
    scorer: &dyn Scorer,
    space: &LabelSpace,
    factorization: Factorization,
    image_ids: &[usize],
) -> Result<Vec<JointTable>> {
    check_len("image ids", image_ids.len(), scorer.n_images())?;
    let n_categories = space.n_categories();
    let kinds = factorization.prompt_kinds();
    let matrices = kinds
        .iter()
        .map(|k| scorer.score_matrix(&space.prompts(*k)?))
        .collect::<Result<Vec<_>>>()?;
    image_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| match factorization {
            Factorization::Autoregressive {
                conditional,
                normalization,
            } => autoregressive_table(
                id,
                &matrices[0][i],
                &matrices[1][i],
                n_categories,
                normalization,
                conditional,
            ),
            Factorization::Independent => independent_table(id, &matrices[0][i], &matrices[1][i]),
            Factorization::Inverse => inverse_table(id, &matrices[0][i], &matrices[1][i]),
            Factorization::Flat => flat_table(id, &matrices[0][i], n_categories),
        })
        .collect()
}

pub const JOINT_CSV_FORMAT_VERSION: u32 = 1;
pub const JOINT_CSV_HEADER: &str =
    "image_id,rationale_set,category,p_r,p_c_given_r,joint,format_version";

pub fn tables_to_csv(tables: &[JointTable], space: &LabelSpace) -> String {
    let mut out = String::from(JOINT_CSV_HEADER);
    out.push('\n');
    for t in tables {
        for (row, &s) in t.set_indices.iter().enumerate() {
            for (col, &c) in t.categories.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{JOINT_CSV_FORMAT_VERSION}",
                    t.image_id,
                    space.set_label(s),
                    space.vocabulary().category_name(c).unwrap_or("?"),
                    t.p_r[row],
                    t.p_c_given_r[row][col],
                    t.joint[row][col]
                );
            }
        }
    }
    out
}
