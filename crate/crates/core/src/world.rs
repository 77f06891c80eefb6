//! Synthetic recognition worlds with known ground truth.
//!
//! Each category is defined by a signature: a fixed set of rationales. Each
//! rationale owns a random unit evidence vector. An image of category `c`
//! shows `m` rationales drawn from `c`'s signature by writing their evidence
//! vectors (scaled by the evidence strength) into distinct patch slots. All
//! patches receive Gaussian noise, and non-gold patches occasionally carry
//! weaker evidence of a non-gold rationale as a distractor.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::ImageTokens;
use crate::error::{Error, Result};
use crate::prompt::{CategoryId, RationaleId, Vocabulary};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub n_categories: usize,
    pub n_rationales: usize,
    /// Rationales per category signature (`s`).
    pub signature_size: usize,
    /// Rationales shown per image (`m`).
    pub rationales_per_image: usize,
    pub patch_count: usize,
    pub patch_dim: usize,
    pub evidence_strength: f64,
    pub noise_sigma: f64,
    pub distractor_rate: f64,
    #[serde(default = "default_distractor_strength")]
    pub distractor_strength: f64,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub seed: u64,
}

fn default_distractor_strength() -> f64 {
    0.5
}

impl WorldSpec {
    /// C=4, R=6, every image shows its full two-rationale signature.
    pub fn tiny(seed: u64) -> Self {
        WorldSpec {
            n_categories: 4,
            n_rationales: 6,
            signature_size: 2,
            rationales_per_image: 2,
            patch_count: 8,
            patch_dim: 8,
            evidence_strength: 3.0,
            noise_sigma: 0.0,
            distractor_rate: 0.0,
            distractor_strength: 0.5,
            train_per_category: 12,
            test_per_category: 6,
            seed,
        }
    }

    /// C=10, R=20, s=2, one rationale per image, low noise.
    pub fn small(seed: u64) -> Self {
        WorldSpec {
            n_categories: 10,
            n_rationales: 20,
            signature_size: 2,
            rationales_per_image: 1,
            patch_count: 16,
            patch_dim: 16,
            evidence_strength: 3.0,
            noise_sigma: 0.1,
            distractor_rate: 0.02,
            distractor_strength: 0.5,
            train_per_category: 30,
            test_per_category: 10,
            seed,
        }
    }

    /// C=50, R=100, s=2, one rationale per image.
    pub fn large(seed: u64) -> Self {
        WorldSpec {
            n_categories: 50,
            n_rationales: 100,
            train_per_category: 20,
            test_per_category: 6,
            ..WorldSpec::small(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0 || self.n_rationales == 0 {
            return Err(Error::Config(
                "a world needs categories and rationales".into(),
            ));
        }
        if self.signature_size == 0 || self.signature_size > self.n_rationales {
            return Err(Error::Config(format!(
                "signature size {} must be in 1..={}",
                self.signature_size, self.n_rationales
            )));
        }
        if self.rationales_per_image == 0 || self.rationales_per_image > self.signature_size {
            return Err(Error::Config(format!(
                "rationales per image {} must be in 1..={}",
                self.rationales_per_image, self.signature_size
            )));
        }
        if self.rationales_per_image > self.patch_count || self.patch_dim == 0 {
            return Err(Error::Config(
                "patch grid too small for the rationales shown per image".into(),
            ));
        }
        let finite_nonneg = [
            ("evidence_strength", self.evidence_strength),
            ("noise_sigma", self.noise_sigma),
            ("distractor_strength", self.distractor_strength),
        ];
        for (name, v) in finite_nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::Config("distractor_rate must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub category: CategoryId,
    /// Gold rationale set, ascending.
    pub rationales: Vec<RationaleId>,
    pub image: ImageTokens,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub vocabulary: Vocabulary,
    pub signatures: Vec<Vec<RationaleId>>,
    pub evidence: Vec<Vec<f64>>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n: usize,
    pub mean_rationales: f64,
    pub per_category: Vec<usize>,
    /// Distinct gold rationale sets, sorted lexicographically.
    pub observed_sets: Vec<Vec<RationaleId>>,
}

pub fn dataset_stats(examples: &[Example], n_categories: usize) -> DatasetStats {
    let mut per_category = vec![0; n_categories];
    let mut sets = BTreeSet::new();
    let mut total = 0usize;
    for ex in examples {
        if ex.category < n_categories {
            per_category[ex.category] += 1;
        }
        total += ex.rationales.len();
        sets.insert(ex.rationales.clone());
    }
    DatasetStats {
        n: examples.len(),
        mean_rationales: if examples.is_empty() {
            0.0
        } else {
            total as f64 / examples.len() as f64
        },
        per_category,
        observed_sets: sets.into_iter().collect(),
    }
}

fn names(prefix: &str, start: usize, count: usize, width: usize) -> Vec<String> {
    (start..start + count)
        .map(|i| format!("{prefix}_{i:0width$}"))
        .collect()
}

fn name_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(2)
}

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

fn evidence_vectors(spec: &WorldSpec) -> Vec<Vec<f64>> {
    let mut rng = stream(spec.seed, 1);
    (0..spec.n_rationales)
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.patch_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Draw `count` pairwise distinct signatures, none equal to any of
/// `forbidden`. A disjoint assignment is used whenever it fits.
fn draw_signatures(
    rng: &mut ChaCha8Rng,
    count: usize,
    n_rationales: usize,
    size: usize,
    forbidden: &[Vec<RationaleId>],
) -> Result<Vec<Vec<RationaleId>>> {
    let available = binomial(n_rationales, size) - forbidden.len() as f64;
    if (count as f64) > available {
        return Err(Error::Generation(format!(
            "{count} distinct signatures of size {size} over {n_rationales} rationales are impossible"
        )));
    }
    let fits_disjoint = count * size <= n_rationales;
    for _ in 0..64 {
        if !fits_disjoint {
            break;
        }
        let mut pool: Vec<RationaleId> = (0..n_rationales).collect();
        pool.shuffle(rng);
        let sigs: Vec<Vec<RationaleId>> = pool
            .chunks(size)
            .take(count)
            .map(|c| {
                let mut s = c.to_vec();
                s.sort_unstable();
                s
            })
            .collect();
        if sigs.iter().all(|s| !forbidden.contains(s)) {
            return Ok(sigs);
        }
    }
    let mut seen: BTreeSet<Vec<RationaleId>> = forbidden.iter().cloned().collect();
    let mut sigs = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while sigs.len() < count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Generation(
                "could not draw distinct signatures".into(),
            ));
        }
        let mut s: Vec<RationaleId> = rand::seq::index::sample(rng, n_rationales, size).into_vec();
        s.sort_unstable();
        if seen.insert(s.clone()) {
            sigs.push(s);
        }
    }
    Ok(sigs)
}

fn make_examples(
    spec: &WorldSpec,
    signatures: &[Vec<RationaleId>],
    evidence: &[Vec<f64>],
    per_category: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example>> {
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let mut out = Vec::with_capacity(per_category * signatures.len());
    for (c, sig) in signatures.iter().enumerate() {
        for _ in 0..per_category {
            let mut gold: Vec<RationaleId> = sig
                .choose_multiple(rng, spec.rationales_per_image)
                .copied()
                .collect();
            gold.sort_unstable();
            let slots = rand::seq::index::sample(rng, spec.patch_count, gold.len()).into_vec();
            let mut patches = vec![0.0; spec.patch_count * spec.patch_dim];
            for p in 0..spec.patch_count {
                let row = &mut patches[p * spec.patch_dim..(p + 1) * spec.patch_dim];
                if spec.noise_sigma > 0.0 {
                    row.iter_mut().for_each(|x| *x = noise.sample(rng));
                }
                if let Some(k) = slots.iter().position(|s| *s == p) {
                    for (x, e) in row.iter_mut().zip(&evidence[gold[k]]) {
                        *x += spec.evidence_strength * e;
                    }
                } else if spec.distractor_rate > 0.0
                    && spec.n_rationales > gold.len()
                    && rng.random_bool(spec.distractor_rate)
                {
                    let r = loop {
                        let r = rng.random_range(0..spec.n_rationales);
                        if !gold.contains(&r) {
                            break r;
                        }
                    };
                    for (x, e) in row.iter_mut().zip(&evidence[r]) {
                        *x += spec.distractor_strength * e;
                    }
                }
            }
            let image =
                ImageTokens::new(Tensor::matrix(spec.patch_count, spec.patch_dim, patches)?)?;
            out.push(Example {
                id: out.len(),
                category: c,
                rationales: gold,
                image,
            });
        }
    }
    Ok(out)
}

fn renumber(examples: &mut [Example], offset: usize) {
    for (i, ex) in examples.iter_mut().enumerate() {
        ex.id = offset + i;
    }
}

fn assemble(
    spec: &WorldSpec,
    vocabulary: Vocabulary,
    signatures: Vec<Vec<RationaleId>>,
    evidence: Vec<Vec<f64>>,
    example_stream: u64,
) -> Result<World> {
    let mut rng = stream(spec.seed, example_stream);
    let mut train = make_examples(
        spec,
        &signatures,
        &evidence,
        spec.train_per_category,
        &mut rng,
    )?;
    let mut test = make_examples(
        spec,
        &signatures,
        &evidence,
        spec.test_per_category,
        &mut rng,
    )?;
    renumber(&mut train, 0);
    renumber(&mut test, train.len());
    Ok(World {
        spec: spec.clone(),
        vocabulary,
        signatures,
        evidence,
        train,
        test,
    })
}

/// Generate a world, fully determined by `spec` (including its seed).
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let evidence = evidence_vectors(spec);
    let mut rng = stream(spec.seed, 2);
    let signatures = draw_signatures(
        &mut rng,
        spec.n_categories,
        spec.n_rationales,
        spec.signature_size,
        &[],
    )?;
    let vocabulary = Vocabulary::new(
        names("cat", 0, spec.n_categories, name_width(spec.n_categories)),
        names("rat", 0, spec.n_rationales, name_width(spec.n_rationales)),
    )?;
    assemble(spec, vocabulary, signatures, evidence, 3)
}

/// Two worlds over the same rationales (same names and evidence vectors)
/// with disjoint categories. World B has `n_categories_b ≤ spec.n_categories`
/// categories whose signatures differ from every signature of world A. Both
/// vocabularies share one token table covering every name.
pub fn split_zero_shot(spec: &WorldSpec, n_categories_b: usize) -> Result<(World, World)> {
    spec.validate()?;
    if n_categories_b == 0 || n_categories_b > spec.n_categories {
        return Err(Error::Config(format!(
            "world B needs between 1 and {} categories, got {n_categories_b}",
            spec.n_categories
        )));
    }
    let evidence = evidence_vectors(spec);
    let mut rng = stream(spec.seed, 2);
    let sig_a = draw_signatures(
        &mut rng,
        spec.n_categories,
        spec.n_rationales,
        spec.signature_size,
        &[],
    )?;
    let sig_b = draw_signatures(
        &mut rng,
        n_categories_b,
        spec.n_rationales,
        spec.signature_size,
        &sig_a,
    )?;
    let total = spec.n_categories + n_categories_b;
    let width = name_width(total);
    let cats_a = names("cat", 0, spec.n_categories, width);
    let cats_b = names("cat", spec.n_categories, n_categories_b, width);
    let rats = names("rat", 0, spec.n_rationales, name_width(spec.n_rationales));
    let pool: Vec<String> = cats_a.iter().chain(&cats_b).chain(&rats).cloned().collect();
    let vocab_a = Vocabulary::with_name_pool(cats_a, rats.clone(), &pool)?;
    let vocab_b = Vocabulary::with_name_pool(cats_b, rats, &pool)?;
    let world_a = assemble(spec, vocab_a, sig_a, evidence.clone(), 3)?;
    let spec_b = WorldSpec {
        n_categories: n_categories_b,
        ..spec.clone()
    };
    let world_b = assemble(&spec_b, vocab_b, sig_b, evidence, 4)?;
    Ok((world_a, world_b))
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    format_version: u32,
    id: usize,
    category: CategoryId,
    rationales: Vec<RationaleId>,
    patches: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub format_version: u32,
    pub spec: WorldSpec,
    pub signatures: Vec<Vec<RationaleId>>,
    pub vocabulary: Vocabulary,
    pub evidence: Vec<Vec<f64>>,
    pub train_file: String,
    pub test_file: String,
    /// SHA-256 over the train file bytes followed by the test file bytes.
    pub hash: String,
}

fn examples_jsonl(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        let (rows, _) = ex.image.patches.dims2()?;
        let line = ExampleLine {
            format_version: DATASET_FORMAT_VERSION,
            id: ex.id,
            category: ex.category,
            rationales: ex.rationales.clone(),
            patches: (0..rows)
                .map(|r| ex.image.patches.row(r).to_vec())
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("example serialises"));
        out.push('\n');
    }
    Ok(out)
}

impl World {
    pub fn train_stats(&self) -> DatasetStats {
        dataset_stats(&self.train, self.vocabulary.n_categories())
    }

    pub fn test_stats(&self) -> DatasetStats {
        dataset_stats(&self.test, self.vocabulary.n_categories())
    }

    /// Serialised train and test splits, as written to disk.
    pub fn jsonl(&self) -> Result<(String, String)> {
        Ok((examples_jsonl(&self.train)?, examples_jsonl(&self.test)?))
    }

    pub fn hash(&self) -> Result<String> {
        let (train, test) = self.jsonl()?;
        Ok(content_hash(&[train.as_bytes(), test.as_bytes()]))
    }

    /// Write `train.jsonl`, `test.jsonl` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<WorldManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (train, test) = self.jsonl()?;
        let manifest = WorldManifest {
            format_version: DATASET_FORMAT_VERSION,
            spec: self.spec.clone(),
            signatures: self.signatures.clone(),
            vocabulary: self.vocabulary.clone(),
            evidence: self.evidence.clone(),
            train_file: "train.jsonl".into(),
            test_file: "test.jsonl".into(),
            hash: content_hash(&[train.as_bytes(), test.as_bytes()]),
        };
        write_file(&dir.join(&manifest.train_file), train.as_bytes())?;
        write_file(&dir.join(&manifest.test_file), test.as_bytes())?;
        let m = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        write_file(&dir.join("manifest.json"), m.as_bytes())?;
        Ok(manifest)
    }

    /// Load a world written by [`World::save`], verifying the recorded hash.
    pub fn load(dir: &Path) -> Result<World> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: WorldManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                &mpath,
                format!("unsupported format_version {}", manifest.format_version),
            ));
        }
        let tpath = dir.join(&manifest.train_file);
        let vpath = dir.join(&manifest.test_file);
        let train_text = fs::read_to_string(&tpath).map_err(|e| Error::io(&tpath, e))?;
        let test_text = fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
        let hash = content_hash(&[train_text.as_bytes(), test_text.as_bytes()]);
        if hash != manifest.hash {
            return Err(Error::format(
                dir,
                format!(
                    "dataset hash {hash} does not match manifest {}",
                    manifest.hash
                ),
            ));
        }
        Ok(World {
            spec: manifest.spec,
            vocabulary: manifest.vocabulary,
            signatures: manifest.signatures,
            evidence: manifest.evidence,
            train: parse_jsonl(&tpath, &train_text)?,
            test: parse_jsonl(&vpath, &test_text)?,
        })
    }
}

fn parse_jsonl(path: &Path, text: &str) -> Result<Vec<Example>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let ex: ExampleLine = serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            if ex.format_version != DATASET_FORMAT_VERSION {
                return Err(Error::format(path, "unsupported format_version"));
            }
            Ok(Example {
                id: ex.id,
                category: ex.category,
                rationales: ex.rationales,
                image: ImageTokens::new(Tensor::from_rows(&ex.patches)?)?,
            })
        })
        .collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn content_hash(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn default_world_dir(root: &Path, name: &str) -> PathBuf {
    root.join("worlds").join(name)
}
