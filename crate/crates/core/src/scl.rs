//! Semantic consensus: synonym-library ingestion and adaptive context
//! recalibration of text embeddings, without touching the text encoder.

use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::ProbMap;
use crate::numerics::{Tape, Tensor, TrainableParam, Value};
use crate::vlm::{similarity, DenseFeatureMap, FrozenModel, TextEmbeddings};

/// Offline synonym library: each category maps to exactly Z synonyms.
///
/// File format: one `category: syn1, syn2, ..., synZ` entry per line,
/// `#` comment lines and blank lines ignored. Category lookup is
/// case-insensitive after trimming.
#[derive(Debug, Clone)]
pub struct SynonymLibrary {
    entries: Vec<(String, Vec<String>)>,
    z: usize,
}

fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

impl SynonymLibrary {
    pub fn parse(text: &str) -> Result<SynonymLibrary> {
        let mut entries: Vec<(String, Vec<String>)> = Vec::new();
        let mut z = 0usize;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, rest) = line.split_once(':').ok_or(Error::FormatError {
                line: line_no,
                reason: "expected 'category: syn1, syn2, ...'".into(),
            })?;
            let name = normalize_name(name);
            if name.is_empty() {
                return Err(Error::FormatError {
                    line: line_no,
                    reason: "empty category name".into(),
                });
            }
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(Error::FormatError {
                    line: line_no,
                    reason: format!("duplicate category '{name}'"),
                });
            }
            let synonyms: Vec<String> = rest.split(',').map(|s| s.trim().to_string()).collect();
            if synonyms.iter().any(String::is_empty) {
                return Err(Error::FormatError {
                    line: line_no,
                    reason: "empty synonym".into(),
                });
            }
            if z == 0 {
                z = synonyms.len();
            } else if synonyms.len() != z {
                return Err(Error::InconsistentSynonymCount {
                    category: name,
                    expected: z,
                    got: synonyms.len(),
                });
            }
            entries.push((name, synonyms));
        }
        Ok(SynonymLibrary { entries, z })
    }

    pub fn load(path: &Path) -> Result<SynonymLibrary> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SynonymLibrary::parse(&text)
    }

    /// Synonyms per category (uniform across entries).
    pub fn synonym_count(&self) -> usize {
        self.z
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, category: &str) -> Option<&[String]> {
        let key = normalize_name(category);
        self.entries
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, syns)| syns.as_slice())
    }

    /// Checks that every category in the active set has an entry.
    pub fn validate_for(&self, categories: &[String]) -> Result<()> {
        for c in categories {
            if self.get(c).is_none() {
                return Err(Error::MissingCategory(c.clone()));
            }
        }
        Ok(())
    }
}

/// Loads and parses one synonym library file.
pub fn load_synonyms(path: &Path) -> Result<SynonymLibrary> {
    SynonymLibrary::load(path)
}

/// Unit-norm synonym embeddings per category, columns indexed by synonym,
/// alongside the original category embeddings.
#[derive(Debug, Clone)]
pub struct EnrichedEmbeddings {
    original: TextEmbeddings,
    per_category: Vec<Tensor>,
    z: usize,
}

impl EnrichedEmbeddings {
    pub fn original(&self) -> &TextEmbeddings {
        &self.original
    }

    /// [dim x Z] synonym embedding matrix of category j.
    pub fn category(&self, j: usize) -> &Tensor {
        &self.per_category[j]
    }

    pub fn synonym_count(&self) -> usize {
        self.z
    }

    pub fn dim(&self) -> usize {
        self.original.dim()
    }
}

/// Encodes every category's synonyms through the frozen text pathway.
pub fn enrich(
    model: &FrozenModel,
    text: &TextEmbeddings,
    library: &SynonymLibrary,
) -> Result<EnrichedEmbeddings> {
    library.validate_for(text.names())?;
    if library.synonym_count() == 0 {
        return Err(Error::MissingCategory(
            text.names().first().cloned().unwrap_or_default(),
        ));
    }
    let d = text.dim();
    let z = library.synonym_count();
    let mut per_category = Vec::with_capacity(text.count());
    for name in text.names() {
        let synonyms = library
            .get(name)
            .ok_or_else(|| Error::MissingCategory(name.clone()))?;
        let mut cols = vec![0.0; d * z];
        for (zi, syn) in synonyms.iter().enumerate() {
            let emb = model.encode_text(syn)?;
            for (di, &v) in emb.data().iter().enumerate() {
                cols[di * z + zi] = v;
            }
        }
        per_category.push(Tensor::new(vec![d, z], cols));
    }
    Ok(EnrichedEmbeddings {
        original: text.clone(),
        per_category,
        z,
    })
}

/// How the context logits gate synonyms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextGating {
    /// Softmax over synonyms independently per embedding dimension;
    /// logits have shape [dim x Z]. The default.
    PerDimension,
    /// One softmax over synonyms shared by all dimensions; logits have
    /// shape [1 x Z].
    PerSynonym,
}

/// Trainable mixing logits, reset to zero for every adaptation session
/// and shared across categories.
#[derive(Debug)]
pub struct SceneContexts {
    pub logits: TrainableParam,
    pub tau: f64,
    pub gating: ContextGating,
}

impl SceneContexts {
    pub const PARAM_ID: &'static str = "scene_contexts";

    pub fn zeros(dim: usize, z: usize, tau: f64, gating: ContextGating) -> Result<SceneContexts> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::InvalidTemperature);
        }
        let shape = match gating {
            ContextGating::PerDimension => vec![dim, z],
            ContextGating::PerSynonym => vec![1, z],
        };
        Ok(SceneContexts {
            logits: TrainableParam::new(Self::PARAM_ID, Tensor::zeros(shape)),
            tau,
            gating,
        })
    }
}

/// Differentiable recalibration of one category: softmax-gated convex
/// mixture of its synonym embeddings, then L2 normalization.
pub fn recalibrate_value(
    tape: &Tape,
    logits: &Value,
    tau: f64,
    gating: ContextGating,
    enriched_j: &Tensor,
) -> Result<Value> {
    let (d, z) = enriched_j.dims2()?;
    let lv = tape.tensor(logits);
    let expected = match gating {
        ContextGating::PerDimension => vec![d, z],
        ContextGating::PerSynonym => vec![1, z],
    };
    if lv.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "context logits {:?} for gating over [{d}x{z}]",
            lv.shape()
        )));
    }
    let weights = tape.softmax_rows(logits, tau)?;
    let enriched = Tape::constant(enriched_j.clone());
    let weighted = match gating {
        ContextGating::PerDimension => tape.mul(&weights, &enriched)?,
        ContextGating::PerSynonym => tape.mul_row_broadcast(&enriched, &weights)?,
    };
    let mixed = tape.sum_last_axis(&weighted)?;
    tape.l2_normalize_rows(&mixed)
}

/// Recalibrated embedding of category j with the current contexts.
pub fn recalibrate(
    contexts: &SceneContexts,
    enriched: &EnrichedEmbeddings,
    j: usize,
) -> Result<Tensor> {
    let tape = Tape::new();
    let logits = Tape::constant(contexts.logits.value.clone());
    let out = recalibrate_value(
        &tape,
        &logits,
        contexts.tau,
        contexts.gating,
        enriched.category(j),
    )?;
    Ok(tape.detach(&out))
}

/// Recalibrates every category into a fresh set of text embeddings.
pub fn recalibrate_all(
    contexts: &SceneContexts,
    enriched: &EnrichedEmbeddings,
) -> Result<TextEmbeddings> {
    let d = enriched.dim();
    let mut rows = Vec::with_capacity(enriched.original().count() * d);
    for j in 0..enriched.original().count() {
        rows.extend_from_slice(recalibrate(contexts, enriched, j)?.data());
    }
    TextEmbeddings::new(
        Tensor::new(vec![enriched.original().count(), d], rows),
        enriched.original().names().to_vec(),
    )
}

/// Tracked recalibrated text rows [J x dim] for the adaptation loss.
pub fn recalibrated_rows_value(
    tape: &Tape,
    logits: &Value,
    tau: f64,
    gating: ContextGating,
    enriched: &EnrichedEmbeddings,
) -> Result<Value> {
    let mut parts = Vec::with_capacity(enriched.original().count());
    for j in 0..enriched.original().count() {
        parts.push(recalibrate_value(
            tape,
            logits,
            tau,
            gating,
            enriched.category(j),
        )?);
    }
    tape.concat_rows(&parts)
}

/// The three maps of the semantic branch.
#[derive(Debug, Clone)]
pub struct SemanticConsensus {
    /// Consensus target: the average of the two branch maps.
    pub y_scl: ProbMap,
    /// Similarity against the original embeddings.
    pub y_hat: ProbMap,
    /// Similarity against the recalibrated embeddings.
    pub y_bar: ProbMap,
}

/// Builds the semantic consensus target from both text branches.
pub fn scl_target(
    features: &DenseFeatureMap,
    text: &TextEmbeddings,
    recalibrated: &TextEmbeddings,
) -> Result<SemanticConsensus> {
    let y_hat = similarity(features, text)?;
    let y_bar = similarity(features, recalibrated)?;
    let y_scl = y_hat.blend(&y_bar, 0.5)?;
    Ok(SemanticConsensus {
        y_scl,
        y_hat,
        y_bar,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)] // index loops keep the hand-written oracles close to the math
mod tests {
    use super::*;
    use crate::numerics::finite_diff::{central_difference, max_relative_error};
    use crate::numerics::{ParamSet, RandomStream};
    use crate::vlm::{build_model, ModelConfig};

    fn tiny_model() -> FrozenModel {
        build_model(&ModelConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            vocab_size: 64,
            positional_embeddings: true,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn parses_vehicle_example_line() {
        let lib = SynonymLibrary::parse(
            "# comment\n\nlarge vehicle: truck, lorry, bus, heavy vehicle, transport vehicle\n",
        )
        .unwrap();
        assert_eq!(lib.synonym_count(), 5);
        let syns = lib.get("Large Vehicle").unwrap();
        assert_eq!(syns[0], "truck");
        assert_eq!(syns[4], "transport vehicle");
    }

    #[test]
    fn ragged_synonym_counts_rejected() {
        let err = SynonymLibrary::parse("a: x, y, z, w\nb: p, q, r, s, t\n").unwrap_err();
        assert!(matches!(err, Error::InconsistentSynonymCount { .. }));
    }

    #[test]
    fn empty_library_misses_categories() {
        let lib = SynonymLibrary::parse("").unwrap();
        let err = lib.validate_for(&["water".to_string()]).unwrap_err();
        assert!(matches!(err, Error::MissingCategory(_)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = SynonymLibrary::parse("water: a, b\njust words\n").unwrap_err();
        match err {
            Error::FormatError { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn enriched_fixture(model: &FrozenModel) -> EnrichedEmbeddings {
        let text = model
            .text_embeddings(&["water".into(), "building".into()])
            .unwrap();
        let lib = SynonymLibrary::parse(
            "water: lake, river, pond\nbuilding: house, structure, rooftop\n",
        )
        .unwrap();
        enrich(model, &text, &lib).unwrap()
    }

    #[test]
    fn zero_logits_give_normalized_synonym_mean() {
        let model = tiny_model();
        let enriched = enriched_fixture(&model);
        let contexts =
            SceneContexts::zeros(enriched.dim(), 3, 0.01, ContextGating::PerDimension).unwrap();
        for j in 0..2 {
            let got = recalibrate(&contexts, &enriched, j).unwrap();
            // closed form: normalize(mean over synonyms)
            let e = enriched.category(j);
            let (d, z) = e.dims2().unwrap();
            let mut mean = vec![0.0; d];
            for di in 0..d {
                for zi in 0..z {
                    mean[di] += e.data()[di * z + zi];
                }
                mean[di] /= z as f64;
            }
            let norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (g, m) in got.data().iter().zip(mean.iter()) {
                assert!((g - m / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_logits_select_one_synonym() {
        let model = tiny_model();
        let enriched = enriched_fixture(&model);
        let mut contexts =
            SceneContexts::zeros(enriched.dim(), 3, 0.01, ContextGating::PerDimension).unwrap();
        let pick = 1usize;
        {
            let (d, z) = contexts.logits.value.dims2().unwrap();
            let data = contexts.logits.value.data_mut();
            for di in 0..d {
                data[di * z + pick] = 1000.0;
            }
        }
        let got = recalibrate(&contexts, &enriched, 0).unwrap();
        let e = enriched.category(0);
        let (d, z) = e.dims2().unwrap();
        for di in 0..d {
            assert!((got.data()[di] - e.data()[di * z + pick]).abs() < 1e-9);
        }
        let _ = d;
    }

    #[test]
    fn two_synonym_weights_match_softmax_example() {
        // logits row [0.02, 0] at tau=0.01 -> weights [~0.8808, ~0.1192]
        let d = 4;
        let tape = Tape::new();
        let mut logits = Tensor::zeros(vec![d, 2]);
        for di in 0..d {
            logits.data_mut()[di * 2] = 0.02;
        }
        let enriched = Tensor::new(
            vec![d, 2],
            (0..d * 2).map(|i| (i as f64 * 0.37).sin()).collect(),
        );
        let out = recalibrate_value(
            &tape,
            &Tape::constant(logits),
            0.01,
            ContextGating::PerDimension,
            &enriched,
        )
        .unwrap();
        let got = tape.detach(&out);
        let e2 = 2.0f64.exp();
        let (w0, w1) = (e2 / (e2 + 1.0), 1.0 / (e2 + 1.0));
        let mut mixed = vec![0.0; d];
        for di in 0..d {
            mixed[di] = w0 * enriched.data()[di * 2] + w1 * enriched.data()[di * 2 + 1];
        }
        let norm: f64 = mixed.iter().map(|v| v * v).sum::<f64>().sqrt();
        for di in 0..d {
            assert!((got.data()[di] - mixed[di] / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn per_synonym_gating_shares_weights_across_dims() {
        let d = 3;
        let tape = Tape::new();
        let enriched = Tensor::new(vec![d, 2], vec![1.0, -1.0, 0.5, 0.5, 0.0, 2.0]);
        let out = recalibrate_value(
            &tape,
            &Tape::constant(Tensor::zeros(vec![1, 2])),
            1.0,
            ContextGating::PerSynonym,
            &enriched,
        )
        .unwrap();
        let got = tape.detach(&out);
        // uniform weights -> normalized per-dim mean
        let mixed = [0.0, 0.5, 1.0];
        let norm: f64 = mixed.iter().map(|v| v * v).sum::<f64>().sqrt();
        for di in 0..d {
            assert!((got.data()[di] - mixed[di] / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn recalibrate_gradient_matches_finite_differences() {
        let mut rng = RandomStream::new(31);
        let (d, z) = (5, 3);
        let enriched = Tensor::new(vec![d, z], rng.fill_normal(d * z, 1.0));
        let target = Tensor::new(vec![d], rng.fill_normal(d, 0.5));
        let logits0 = Tensor::new(vec![d, z], rng.fill_normal(d * z, 0.1));
        let tau = 0.5;

        let run = |lv: &[f64]| -> f64 {
            let tape = Tape::new();
            let logits = tape
                .leaf("w", &Tensor::new(vec![d, z], lv.to_vec()))
                .unwrap();
            let out =
                recalibrate_value(&tape, &logits, tau, ContextGating::PerDimension, &enriched)
                    .unwrap();
            tape.tensor(
                &tape
                    .mse_loss(&out, &Tape::constant(target.clone()))
                    .unwrap(),
            )
            .item()
        };

        let mut params = ParamSet::new();
        params
            .register(TrainableParam::new("w", logits0.clone()))
            .unwrap();
        let tape = Tape::new();
        let logits = tape.leaf("w", &logits0).unwrap();
        let out =
            recalibrate_value(&tape, &logits, tau, ContextGating::PerDimension, &enriched).unwrap();
        let loss = tape
            .mse_loss(&out, &Tape::constant(target.clone()))
            .unwrap();
        tape.backward(&loss, &mut params).unwrap();
        let analytic = params.get("w").unwrap().grad.data().to_vec();

        let mut f = |v: &[f64]| run(v);
        let numeric = central_difference(&mut f, logits0.data(), 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-10);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn recalibration_is_a_normalized_convex_mixture() {
        // For random logits the output must equal the normalized softmax
        // mixture recomputed independently, and that mixture must stay
        // inside the per-dimension synonym envelope.
        let mut rng = RandomStream::new(55);
        let (d, z) = (6, 4);
        for trial in 0..25 {
            let enriched = Tensor::new(vec![d, z], rng.fill_normal(d * z, 1.0));
            let logits = Tensor::new(vec![d, z], rng.fill_normal(d * z, 0.02));
            let tau = 0.01;
            let tape = Tape::new();
            let out = recalibrate_value(
                &tape,
                &Tape::constant(logits.clone()),
                tau,
                ContextGating::PerDimension,
                &enriched,
            )
            .unwrap();
            let got = tape.detach(&out);

            let weights = crate::numerics::softmax(&logits, tau).unwrap();
            let mut mixed = vec![0.0; d];
            for di in 0..d {
                let row = &enriched.data()[di * z..(di + 1) * z];
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for (zi, &e) in row.iter().enumerate() {
                    mixed[di] += weights.data()[di * z + zi] * e;
                    lo = lo.min(e);
                    hi = hi.max(e);
                }
                assert!(
                    mixed[di] >= lo - 1e-12 && mixed[di] <= hi + 1e-12,
                    "trial {trial}: coordinate escapes the synonym envelope"
                );
            }
            let norm: f64 = mixed.iter().map(|v| v * v).sum::<f64>().sqrt();
            let unit: f64 = got.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((unit - 1.0).abs() < 1e-12, "output not unit norm");
            for di in 0..d {
                assert!(
                    (got.data()[di] - mixed[di] / norm).abs() < 1e-12,
                    "trial {trial}"
                );
            }
        }
    }

    #[test]
    fn scl_target_degenerate_and_scaled() {
        let model = tiny_model();
        let mut rng = RandomStream::new(12);
        let img = Tensor::new(
            vec![16, 16, 3],
            (0..16 * 16 * 3).map(|_| rng.next_uniform()).collect(),
        );
        let features = model.encode_image(&img).unwrap();
        let text = model
            .text_embeddings(&["water".into(), "building".into()])
            .unwrap();
        // recalibrated == original -> all three maps coincide
        let out = scl_target(&features, &text, &text).unwrap();
        assert_eq!(out.y_scl.scores(), out.y_hat.scores());
        assert_eq!(out.y_scl.scores(), out.y_bar.scores());

        // joint positive rescaling leaves the argmax unchanged
        let argmax = out.y_scl.argmax();
        let scaled = ProbMap::new(
            out.y_scl.height(),
            out.y_scl.width(),
            out.y_scl.classes(),
            out.y_scl.scores().scale(7.25),
        )
        .unwrap();
        assert_eq!(argmax, scaled.argmax());
    }

    #[test]
    fn scl_target_is_branch_average() {
        let model = tiny_model();
        let mut rng = RandomStream::new(13);
        let img = Tensor::new(
            vec![16, 16, 3],
            (0..16 * 16 * 3).map(|_| rng.next_uniform()).collect(),
        );
        let features = model.encode_image(&img).unwrap();
        let text = model
            .text_embeddings(&["water".into(), "building".into()])
            .unwrap();
        let enriched = enriched_fixture(&model);
        let contexts =
            SceneContexts::zeros(enriched.dim(), 3, 0.01, ContextGating::PerDimension).unwrap();
        let recal = recalibrate_all(&contexts, &enriched).unwrap();
        let out = scl_target(&features, &text, &recal).unwrap();
        for ((s, h), b) in out
            .y_scl
            .scores()
            .data()
            .iter()
            .zip(out.y_hat.scores().data())
            .zip(out.y_bar.scores().data())
        {
            assert!((s - (h + b) / 2.0).abs() < 1e-12);
        }
    }
}
