//! Online consensus injector: low-rank adapters on the last P blocks plus
//! scene contexts, the composite consensus loss, single-step test-time
//! adaptation, and the fused final prediction.

use crate::error::{Error, Result};
use crate::gcl::{aggregate_views, tracked_views, Aggregation, GeoConsensus, ViewSet};
use crate::maps::{LabelMap, ProbMap};
use crate::numerics::{
    adamw_step, derive_seed, AdamWConfig, OptimizerState, ParamSet, RandomStream, Tape, Tensor,
    TrainableParam, Value,
};
use crate::scl::{
    recalibrated_rows_value, ContextGating, EnrichedEmbeddings, SceneContexts, SemanticConsensus,
};
use crate::vlm::{
    feature_map_from_tensor, similarity_value, AdapterOverlay, BoundAdapter, FcSlot, FrozenModel,
};

/// Low-rank pair attached to one frozen dense sublayer. The layer then
/// computes frozen(x) + scale * (x Aᵀ) Bᵀ; with B zero the first forward
/// is exactly the frozen forward.
#[derive(Debug)]
pub struct LoRAAdapter {
    pub block: usize,
    pub slot: FcSlot,
    pub a: TrainableParam,
    pub b: TrainableParam,
    pub scale: f64,
    pub rank: usize,
}

impl LoRAAdapter {
    pub fn a_id(block: usize, slot: FcSlot) -> String {
        let name = match slot {
            FcSlot::Fc1 => "fc1",
            FcSlot::Fc2 => "fc2",
        };
        format!("lora.b{block}.{name}.a")
    }

    pub fn b_id(block: usize, slot: FcSlot) -> String {
        let name = match slot {
            FcSlot::Fc1 => "fc1",
            FcSlot::Fc2 => "fc2",
        };
        format!("lora.b{block}.{name}.b")
    }

    /// Trainable scalars contributed by this adapter.
    pub fn trainable_count(&self) -> usize {
        self.a.value.len() + self.b.value.len()
    }
}

/// Builds adapters for both dense sublayers of the last `last_blocks`
/// transformer blocks. A is seeded random scaled by 1/sqrt(rank), B zero.
pub fn attach_lora(
    model: &FrozenModel,
    last_blocks: usize,
    rank: usize,
    scale: f64,
    seed: u64,
) -> Result<Vec<LoRAAdapter>> {
    let total = model.config().num_blocks;
    if last_blocks == 0 || last_blocks > total {
        return Err(Error::ConfigError(format!(
            "cannot adapt the last {last_blocks} of {total} blocks"
        )));
    }
    if rank == 0 {
        return Err(Error::ConfigError("adapter rank must be at least 1".into()));
    }
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::ConfigError(format!(
            "adapter scale {scale} must be positive"
        )));
    }
    let mut rng = RandomStream::new(derive_seed(seed, 0x10A));
    let inv_sqrt_rank = 1.0 / (rank as f64).sqrt();
    let mut adapters = Vec::with_capacity(2 * last_blocks);
    for block in total - last_blocks..total {
        for slot in [FcSlot::Fc1, FcSlot::Fc2] {
            let layer = match slot {
                FcSlot::Fc1 => &model.blocks()[block].fc1,
                FcSlot::Fc2 => &model.blocks()[block].fc2,
            };
            let (d_in, d_out) = (layer.d_in(), layer.d_out());
            let a = TrainableParam::new(
                LoRAAdapter::a_id(block, slot),
                Tensor::new(
                    vec![rank, d_in],
                    rng.fill_normal(rank * d_in, inv_sqrt_rank),
                ),
            );
            let b = TrainableParam::new(
                LoRAAdapter::b_id(block, slot),
                Tensor::zeros(vec![d_out, rank]),
            );
            adapters.push(LoRAAdapter {
                block,
                slot,
                a,
                b,
                scale,
                rank,
            });
        }
    }
    Ok(adapters)
}

/// Everything the adaptation loop needs beyond the model and text.
#[derive(Debug, Clone, Copy)]
pub struct AdaptOptions {
    pub views: ViewSet,
    pub aggregation: Aggregation,
    pub gcl_softmax: bool,
    pub delta: f64,
    pub tau: f64,
    pub last_blocks: usize,
    pub rank: usize,
    pub lora_scale: f64,
    pub iterations: usize,
    pub optimizer: AdamWConfig,
    pub gating: ContextGating,
    pub adapt_seed: u64,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        AdaptOptions {
            views: ViewSet::new(4).expect("4 views"),
            aggregation: Aggregation::Mean,
            gcl_softmax: false,
            delta: 0.5,
            tau: 0.01,
            last_blocks: 2,
            rank: 8,
            lora_scale: 16.0,
            iterations: 1,
            optimizer: AdamWConfig::default(),
            gating: ContextGating::PerDimension,
            adapt_seed: 1001,
        }
    }
}

impl AdaptOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::ConfigError(format!(
                "consensus factor {} outside [0, 1]",
                self.delta
            )));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::InvalidTemperature);
        }
        if self.iterations == 0 {
            return Err(Error::ConfigError("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

struct AdapterSlot {
    block: usize,
    slot: FcSlot,
    scale: f64,
}

/// Final consensus maps (computed with the adapted parameters) plus the
/// loss before and after the update steps.
#[derive(Debug, Clone)]
pub struct AdaptationOutcome {
    pub gcl: GeoConsensus,
    pub scl: SemanticConsensus,
    pub loss_pre: f64,
    pub loss_post: f64,
}

/// Per-sample trainable state: adapters, contexts, optimizer moments.
/// The backbone itself is shared immutably and never changes.
pub struct AdaptationSession<'m> {
    model: &'m FrozenModel,
    enriched: &'m EnrichedEmbeddings,
    opts: AdaptOptions,
    slots: Vec<AdapterSlot>,
    params: ParamSet,
    opt_states: Vec<OptimizerState>,
}

impl<'m> AdaptationSession<'m> {
    pub fn new(
        model: &'m FrozenModel,
        enriched: &'m EnrichedEmbeddings,
        opts: AdaptOptions,
    ) -> Result<AdaptationSession<'m>> {
        opts.validate()?;
        let mut session = AdaptationSession {
            model,
            enriched,
            opts,
            slots: Vec::new(),
            params: ParamSet::new(),
            opt_states: Vec::new(),
        };
        session.init()?;
        Ok(session)
    }

    fn init(&mut self) -> Result<()> {
        self.slots.clear();
        self.params = ParamSet::new();
        self.opt_states = Vec::new();

        let adapters = attach_lora(
            self.model,
            self.opts.last_blocks,
            self.opts.rank,
            self.opts.lora_scale,
            self.opts.adapt_seed,
        )?;
        for adapter in adapters {
            self.slots.push(AdapterSlot {
                block: adapter.block,
                slot: adapter.slot,
                scale: adapter.scale,
            });
            self.params.register(adapter.a)?;
            self.params.register(adapter.b)?;
        }
        let contexts = SceneContexts::zeros(
            self.enriched.dim(),
            self.enriched.synonym_count(),
            self.opts.tau,
            self.opts.gating,
        )?;
        self.params.register(contexts.logits)?;
        for p in self.params.iter() {
            self.opt_states
                .push(OptimizerState::new(p.value.shape(), self.opts.optimizer));
        }
        Ok(())
    }

    /// Drops adapters, contexts and optimizer state, returning the session
    /// to its freshly created state. Forward passes through the model are
    /// unaffected because the backbone was never mutated.
    pub fn reset(&mut self) -> Result<()> {
        self.init()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, id: &str) -> Option<&TrainableParam> {
        self.params.get(id)
    }

    fn overlay(&self, tape: &Tape, tracked: bool) -> Result<AdapterOverlay> {
        let mut overlay = AdapterOverlay::new();
        for slot in &self.slots {
            let a_id = LoRAAdapter::a_id(slot.block, slot.slot);
            let b_id = LoRAAdapter::b_id(slot.block, slot.slot);
            let a_val = &self.params.get(&a_id).expect("registered").value;
            let b_val = &self.params.get(&b_id).expect("registered").value;
            let (a, b) = if tracked {
                (tape.leaf(&a_id, a_val)?, tape.leaf(&b_id, b_val)?)
            } else {
                (Tape::constant(a_val.clone()), Tape::constant(b_val.clone()))
            };
            overlay.insert(
                slot.block,
                slot.slot,
                BoundAdapter {
                    a,
                    b,
                    scale: slot.scale,
                },
            );
        }
        Ok(overlay)
    }

    fn context_logits(&self, tape: &Tape, tracked: bool) -> Result<Value> {
        let value = &self
            .params
            .get(SceneContexts::PARAM_ID)
            .expect("registered")
            .value;
        if tracked {
            tape.leaf(SceneContexts::PARAM_ID, value)
        } else {
            Ok(Tape::constant(value.clone()))
        }
    }

    /// Forward pass producing per-view maps, the semantic branch maps,
    /// the detached consensus targets, and the tracked loss.
    fn forward(
        &self,
        tape: &Tape,
        img: &Tensor,
        tracked: bool,
    ) -> Result<(GeoConsensus, SemanticConsensus, Value)> {
        let side = self.model.config().grid_side();
        let classes = self.enriched.original().count();
        let overlay = self.overlay(tape, tracked)?;
        let views = tracked_views(
            self.model,
            tape,
            img,
            self.enriched.original(),
            self.opts.views,
            Some(&overlay),
            self.opts.gcl_softmax,
        )?;

        let per_view: Vec<ProbMap> = views
            .maps
            .iter()
            .map(|v| ProbMap::from_flat(side, side, classes, tape.detach(v)))
            .collect::<Result<_>>()?;
        let gcl_target_map = aggregate_views(&per_view, self.opts.aggregation)?;

        let logits = self.context_logits(tape, tracked)?;
        let recalibrated_rows = recalibrated_rows_value(
            tape,
            &logits,
            self.opts.tau,
            self.opts.gating,
            self.enriched,
        )?;
        let y_bar = similarity_value(tape, &views.identity_features, &recalibrated_rows)?;
        let y_hat_value = views.maps[self.opts.views.count() - 1].clone();

        let y_hat_map = per_view[self.opts.views.count() - 1].clone();
        let y_bar_map = ProbMap::from_flat(side, side, classes, tape.detach(&y_bar))?;
        let y_scl_map = y_hat_map.blend(&y_bar_map, 0.5)?;

        // Loss: targets enter as constants so gradients flow only through
        // the per-view and branch predictions. Terms reduce in view order.
        let n = side * side;
        let gcl_target_const =
            Tape::constant(gcl_target_map.scores().clone().reshaped(vec![n, classes]));
        let scl_target_const =
            Tape::constant(y_scl_map.scores().clone().reshaped(vec![n, classes]));
        let mut geo: Option<Value> = None;
        for map in &views.maps {
            let term = tape.mse_loss(map, &gcl_target_const)?;
            geo = Some(match geo {
                None => term,
                Some(acc) => tape.add(&acc, &term)?,
            });
        }
        let geo = tape.scale(
            &geo.expect("at least one view"),
            1.0 / self.opts.views.count() as f64,
        )?;
        let sem_hat = tape.mse_loss(&y_hat_value, &scl_target_const)?;
        let sem_bar = tape.mse_loss(&y_bar, &scl_target_const)?;
        let loss = tape.add(&tape.add(&geo, &sem_hat)?, &sem_bar)?;

        Ok((
            GeoConsensus {
                target: gcl_target_map,
                per_view,
            },
            SemanticConsensus {
                y_scl: y_scl_map,
                y_hat: y_hat_map,
                y_bar: y_bar_map,
            },
            loss,
        ))
    }

    /// Runs the configured number of update iterations on this window,
    /// then recomputes the consensus maps with the adapted parameters.
    ///
    /// A non-finite loss aborts with [`Error::AdaptationDiverged`]; the
    /// caller falls back to the static prediction.
    pub fn adapt(&mut self, img: &Tensor) -> Result<AdaptationOutcome> {
        let mut loss_pre = f64::NAN;
        for iteration in 0..self.opts.iterations {
            let tape = Tape::new();
            let (_, _, loss) = self.forward(&tape, img, true)?;
            let loss_value = tape.tensor(&loss).item();
            if !loss_value.is_finite() {
                return Err(Error::AdaptationDiverged);
            }
            if iteration == 0 {
                loss_pre = loss_value;
            }
            tape.backward(&loss, &mut self.params)?;
            for (param, state) in self.params.iter_mut().zip(self.opt_states.iter_mut()) {
                adamw_step(state, param)?;
            }
        }
        // Final consensus with adapted parameters; its loss is what the
        // next iteration would see.
        let tape = Tape::new();
        let (gcl, scl, loss) = self.forward(&tape, img, false)?;
        let loss_post = tape.tensor(&loss).item();
        if !loss_post.is_finite() {
            return Err(Error::AdaptationDiverged);
        }
        Ok(AdaptationOutcome {
            gcl,
            scl,
            loss_pre,
            loss_post,
        })
    }

    /// Consensus maps under the current (possibly adapted) parameters
    /// without recording a graph.
    pub fn consensus(&self, img: &Tensor) -> Result<(GeoConsensus, SemanticConsensus)> {
        let tape = Tape::new();
        let (gcl, scl, _) = self.forward(&tape, img, false)?;
        Ok((gcl, scl))
    }

    /// Consensus loss at the current parameters, without updating anything.
    pub fn loss(&self, img: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let (_, _, loss) = self.forward(&tape, img, false)?;
        Ok(tape.tensor(&loss).item())
    }

    /// One forward/backward pass; fills every parameter's gradient and
    /// returns (loss, [(id, gradient)]) without stepping the optimizer.
    pub fn gradients(&mut self, img: &Tensor) -> Result<(f64, Vec<(String, Tensor)>)> {
        let tape = Tape::new();
        let (_, _, loss) = self.forward(&tape, img, true)?;
        let value = tape.tensor(&loss).item();
        tape.backward(&loss, &mut self.params)?;
        Ok((
            value,
            self.params
                .iter()
                .map(|p| (p.id.clone(), p.grad.clone()))
                .collect(),
        ))
    }

    pub fn param_ids(&self) -> Vec<String> {
        self.params.iter().map(|p| p.id.clone()).collect()
    }

    /// Overrides one trainable's value (finite-difference probes).
    pub fn set_param(&mut self, id: &str, value: Tensor) -> Result<()> {
        for p in self.params.iter_mut() {
            if p.id == id {
                if p.value.shape() != value.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "parameter '{id}' has shape {:?}",
                        p.value.shape()
                    )));
                }
                p.value = value;
                return Ok(());
            }
        }
        Err(Error::Internal(format!("no parameter named '{id}'")))
    }
}

/// Consensus maps of the frozen model alone: no adapters, no contexts,
/// no trainable state of any kind. Only the view/fusion fields of the
/// options are read; the optimizer settings are irrelevant here.
pub fn static_consensus(
    model: &FrozenModel,
    img: &Tensor,
    enriched: &EnrichedEmbeddings,
    opts: &AdaptOptions,
) -> Result<(GeoConsensus, SemanticConsensus)> {
    let side = model.config().grid_side();
    let classes = enriched.original().count();
    let tape = Tape::new();
    let tracked = tracked_views(
        model,
        &tape,
        img,
        enriched.original(),
        opts.views,
        None,
        opts.gcl_softmax,
    )?;
    let per_view: Vec<ProbMap> = tracked
        .maps
        .iter()
        .map(|v| ProbMap::from_flat(side, side, classes, tape.detach(v)))
        .collect::<Result<_>>()?;
    let target = aggregate_views(&per_view, opts.aggregation)?;

    // Zero context logits follow the same recalibration path as an
    // adaptive session at initialization, so the two agree bit for bit.
    let z = enriched.synonym_count();
    let logits_shape = match opts.gating {
        ContextGating::PerDimension => vec![enriched.dim(), z],
        ContextGating::PerSynonym => vec![1, z],
    };
    let logits = Tape::constant(Tensor::zeros(logits_shape));
    let rows = recalibrated_rows_value(&tape, &logits, opts.tau, opts.gating, enriched)?;
    let y_bar_value = similarity_value(&tape, &tracked.identity_features, &rows)?;
    let y_hat = per_view[opts.views.count() - 1].clone();
    let y_bar = ProbMap::from_flat(side, side, classes, tape.detach(&y_bar_value))?;
    let y_scl = y_hat.blend(&y_bar, 0.5)?;

    Ok((
        GeoConsensus { target, per_view },
        SemanticConsensus {
            y_scl,
            y_hat,
            y_bar,
        },
    ))
}

/// The composite consensus loss on plain maps: mean over views of the MSE
/// to the geometric target plus both semantic branch MSE terms.
pub fn seeco_loss(
    consensus: &GeoConsensus,
    y_scl: &ProbMap,
    y_hat: &ProbMap,
    y_bar: &ProbMap,
) -> Result<f64> {
    if consensus.per_view.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut geo = 0.0;
    for view in &consensus.per_view {
        geo += crate::numerics::mse(view.scores(), consensus.target.scores())?;
    }
    let geo = geo * (1.0 / consensus.per_view.len() as f64);
    let sem_hat = crate::numerics::mse(y_hat.scores(), y_scl.scores())?;
    let sem_bar = crate::numerics::mse(y_bar.scores(), y_scl.scores())?;
    Ok(geo + sem_hat + sem_bar)
}

/// Blended consensus scores: delta * geometric + (1 - delta) * semantic.
pub fn fuse_scores(y_gcl: &ProbMap, y_scl: &ProbMap, delta: f64) -> Result<ProbMap> {
    y_gcl.blend(y_scl, delta)
}

/// Final fused label map; ties break to the lowest class index.
pub fn fuse(y_gcl: &ProbMap, y_scl: &ProbMap, delta: f64) -> Result<LabelMap> {
    Ok(fuse_scores(y_gcl, y_scl, delta)?.argmax())
}

/// Re-derives a dense feature map from session-independent state; shared
/// by tests that need the identity-view features.
pub fn identity_features(model: &FrozenModel, img: &Tensor) -> Result<crate::vlm::DenseFeatureMap> {
    let tape = Tape::new();
    let v = model.features_value(&tape, img, None)?;
    feature_map_from_tensor(
        model.config().grid_side(),
        model.config().grid_side(),
        tape.detach(&v),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff::{central_difference, max_relative_error};
    use crate::scl::{enrich, SynonymLibrary};
    use crate::vlm::{build_model, ModelConfig};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 12,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            vocab_size: 64,
            positional_embeddings: true,
            seed: 3,
        }
    }

    fn tiny_opts() -> AdaptOptions {
        AdaptOptions {
            rank: 2,
            ..AdaptOptions::default()
        }
    }

    fn fixture() -> (FrozenModel, EnrichedEmbeddings, Tensor) {
        let model = build_model(&tiny_cfg()).unwrap();
        let text = model
            .text_embeddings(&["water".into(), "building".into()])
            .unwrap();
        let lib = SynonymLibrary::parse(
            "water: lake, river, pond\nbuilding: house, structure, rooftop\n",
        )
        .unwrap();
        let enriched = enrich(&model, &text, &lib).unwrap();
        let mut rng = RandomStream::new(40);
        let img = Tensor::new(
            vec![12, 12, 3],
            (0..12 * 12 * 3).map(|_| rng.next_uniform()).collect(),
        );
        (model, enriched, img)
    }

    #[test]
    fn attach_lora_shapes_and_counts() {
        let model = build_model(&ModelConfig::default()).unwrap();
        let adapters = attach_lora(&model, 2, 8, 16.0, 1).unwrap();
        assert_eq!(adapters.len(), 4);
        for adapter in &adapters {
            let layer = match adapter.slot {
                FcSlot::Fc1 => &model.blocks()[adapter.block].fc1,
                FcSlot::Fc2 => &model.blocks()[adapter.block].fc2,
            };
            assert_eq!(adapter.a.value.shape(), &[8, layer.d_in()]);
            assert_eq!(adapter.b.value.shape(), &[layer.d_out(), 8]);
            assert!(adapter.b.value.data().iter().all(|&v| v == 0.0));
            assert_eq!(
                adapter.trainable_count(),
                8 * (layer.d_in() + layer.d_out())
            );
            assert!(adapter.block >= 2);
        }
    }

    #[test]
    fn attach_lora_rejects_bad_depth() {
        let model = build_model(&tiny_cfg()).unwrap();
        assert!(matches!(
            attach_lora(&model, 3, 2, 16.0, 1).unwrap_err(),
            Error::ConfigError(_)
        ));
        assert!(matches!(
            attach_lora(&model, 0, 2, 16.0, 1).unwrap_err(),
            Error::ConfigError(_)
        ));
    }

    #[test]
    fn zero_init_adapters_do_not_change_the_forward() {
        let (model, enriched, img) = fixture();
        let opts = tiny_opts();
        let session = AdaptationSession::new(&model, &enriched, opts).unwrap();
        let (gcl_s, scl_s) = session.consensus(&img).unwrap();
        let (gcl_f, scl_f) = static_consensus(&model, &img, &enriched, &opts).unwrap();
        assert_eq!(gcl_s.target.scores(), gcl_f.target.scores());
        assert_eq!(scl_s.y_scl.scores(), scl_f.y_scl.scores());
        assert_eq!(scl_s.y_bar.scores(), scl_f.y_bar.scores());
    }

    #[test]
    fn seeco_loss_on_identical_maps_is_zero() {
        let map = ProbMap::new(2, 2, 2, Tensor::filled(vec![2, 2, 2], 0.4)).unwrap();
        let consensus = GeoConsensus {
            target: map.clone(),
            per_view: vec![map.clone(); 4],
        };
        let loss = seeco_loss(&consensus, &map, &map, &map).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn seeco_loss_single_view_reduces_to_one_term() {
        let t = ProbMap::new(
            1,
            2,
            2,
            Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]),
        )
        .unwrap();
        let v = ProbMap::new(
            1,
            2,
            2,
            Tensor::new(vec![1, 2, 2], vec![0.5, 0.0, 0.1, 0.8]),
        )
        .unwrap();
        let consensus = GeoConsensus {
            target: t.clone(),
            per_view: vec![v.clone()],
        };
        let sem = ProbMap::new(1, 2, 2, Tensor::filled(vec![1, 2, 2], 0.25)).unwrap();
        let loss = seeco_loss(&consensus, &sem, &sem, &sem).unwrap();
        let expect = crate::numerics::mse(v.scores(), t.scores()).unwrap();
        assert!((loss - expect).abs() < 1e-15);
    }

    #[test]
    fn seeco_loss_matches_brute_force_recompute() {
        let mut rng = RandomStream::new(77);
        let mk = |rng: &mut RandomStream| {
            ProbMap::new(
                2,
                2,
                3,
                Tensor::new(vec![2, 2, 3], rng.fill_normal(12, 1.0)),
            )
            .unwrap()
        };
        let per_view: Vec<ProbMap> = (0..4).map(|_| mk(&mut rng)).collect();
        let target = aggregate_views(&per_view, Aggregation::Mean).unwrap();
        let y_hat = mk(&mut rng);
        let y_bar = mk(&mut rng);
        let y_scl = y_hat.blend(&y_bar, 0.5).unwrap();
        let consensus = GeoConsensus {
            target: target.clone(),
            per_view: per_view.clone(),
        };
        let got = seeco_loss(&consensus, &y_scl, &y_hat, &y_bar).unwrap();

        // independent naive recomputation
        let n = 12.0;
        let mut expect = 0.0;
        for v in &per_view {
            let mut acc = 0.0;
            for (a, b) in v.scores().data().iter().zip(target.scores().data()) {
                acc += (a - b) * (a - b);
            }
            expect += acc / n;
        }
        expect /= 4.0;
        for branch in [&y_hat, &y_bar] {
            let mut acc = 0.0;
            for (a, b) in branch.scores().data().iter().zip(y_scl.scores().data()) {
                acc += (a - b) * (a - b);
            }
            expect += acc / n;
        }
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (model, enriched, img) = fixture();
        let mut opts = tiny_opts();
        opts.optimizer.learning_rate = 0.0;
        let mut session = AdaptationSession::new(&model, &enriched, opts).unwrap();
        let before: Vec<Tensor> = session.params.iter().map(|p| p.value.clone()).collect();
        let outcome = session.adapt(&img).unwrap();
        let after: Vec<Tensor> = session.params.iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);

        let (gcl_f, scl_f) = static_consensus(&model, &img, &enriched, &opts).unwrap();
        let fused_adapted = fuse(&outcome.gcl.target, &outcome.scl.y_scl, opts.delta).unwrap();
        let fused_static = fuse(&gcl_f.target, &scl_f.y_scl, opts.delta).unwrap();
        assert_eq!(fused_adapted, fused_static);
        assert_eq!(outcome.loss_pre, outcome.loss_post);
    }

    #[test]
    fn adapt_step_reduces_the_consensus_loss() {
        let (model, enriched, img) = fixture();
        let mut session = AdaptationSession::new(&model, &enriched, tiny_opts()).unwrap();
        let outcome = session.adapt(&img).unwrap();
        assert!(
            outcome.loss_post < outcome.loss_pre,
            "pre {} post {}",
            outcome.loss_pre,
            outcome.loss_post
        );
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (model, enriched, img) = fixture();
        let opts = tiny_opts();
        let session = AdaptationSession::new(&model, &enriched, opts).unwrap();

        let tape = Tape::new();
        let (_, _, loss) = session.forward(&tape, &img, true).unwrap();
        let mut params_snapshot = ParamSet::new();
        for p in session.params.iter() {
            params_snapshot.register(p.clone()).unwrap();
        }
        tape.backward(&loss, &mut params_snapshot).unwrap();

        for p in session.params.iter() {
            let analytic = params_snapshot.get(&p.id).unwrap().grad.data().to_vec();
            let base = p.value.clone();
            let mut f = |x: &[f64]| -> f64 {
                let mut probe = AdaptationSession::new(&model, &enriched, opts).unwrap();
                let target = Tensor::new(base.shape().to_vec(), x.to_vec());
                for q in probe.params.iter_mut() {
                    if q.id == p.id {
                        q.value = target.clone();
                    }
                }
                let tape = Tape::new();
                let (_, _, loss) = probe.forward(&tape, &img, false).unwrap();
                tape.tensor(&loss).item()
            };
            let numeric = central_difference(&mut f, base.data(), 1e-5);
            let err = max_relative_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-4, "param {}: rel err {err}", p.id);
        }
    }

    #[test]
    fn fuse_boundaries_and_example() {
        let gcl = ProbMap::new(1, 1, 2, Tensor::new(vec![1, 1, 2], vec![0.9, 0.1])).unwrap();
        let scl = ProbMap::new(1, 1, 2, Tensor::new(vec![1, 1, 2], vec![0.2, 0.6])).unwrap();
        assert_eq!(fuse(&gcl, &scl, 1.0).unwrap().labels(), &[0]);
        assert_eq!(fuse(&gcl, &scl, 0.0).unwrap().labels(), &[1]);
        let blended = fuse_scores(&gcl, &scl, 0.5).unwrap();
        assert!((blended.scores().data()[0] - 0.55).abs() < 1e-15);
        assert!((blended.scores().data()[1] - 0.35).abs() < 1e-15);
        assert_eq!(fuse(&gcl, &scl, 0.5).unwrap().labels(), &[0]);
        assert!(fuse(&gcl, &scl, 1.5).is_err());
    }

    #[test]
    fn fuse_invariant_to_shared_per_pixel_offset() {
        // dyadic values keep the arithmetic exact
        let base: Vec<f64> = vec![0.25, -0.5, 0.75, 0.125];
        let gcl = ProbMap::new(1, 2, 2, Tensor::new(vec![1, 2, 2], base.clone())).unwrap();
        let scl = ProbMap::new(
            1,
            2,
            2,
            Tensor::new(vec![1, 2, 2], vec![-0.25, 0.5, 0.0, 0.375]),
        )
        .unwrap();
        let labels = fuse(&gcl, &scl, 0.5).unwrap();
        let offset = 2.0;
        let gcl2 = ProbMap::new(1, 2, 2, gcl.scores().map(|v| v + offset)).unwrap();
        let scl2 = ProbMap::new(1, 2, 2, scl.scores().map(|v| v + offset)).unwrap();
        assert_eq!(labels, fuse(&gcl2, &scl2, 0.5).unwrap());
    }

    #[test]
    fn reset_restores_per_sample_isolation() {
        let (model, enriched, img_a) = fixture();
        let mut rng = RandomStream::new(41);
        let img_b = Tensor::new(
            vec![12, 12, 3],
            (0..12 * 12 * 3).map(|_| rng.next_uniform()).collect(),
        );

        let mut reused = AdaptationSession::new(&model, &enriched, tiny_opts()).unwrap();
        reused.adapt(&img_a).unwrap();
        reused.reset().unwrap();
        let outcome_reused = reused.adapt(&img_b).unwrap();

        let mut fresh = AdaptationSession::new(&model, &enriched, tiny_opts()).unwrap();
        let outcome_fresh = fresh.adapt(&img_b).unwrap();

        assert_eq!(
            outcome_reused.gcl.target.scores(),
            outcome_fresh.gcl.target.scores()
        );
        assert_eq!(
            outcome_reused.scl.y_scl.scores(),
            outcome_fresh.scl.y_scl.scores()
        );
        assert_eq!(outcome_reused.loss_pre, outcome_fresh.loss_pre);
        assert_eq!(outcome_reused.loss_post, outcome_fresh.loss_post);

        // double reset is idempotent; reset before adapt is a no-op
        let mut idle = AdaptationSession::new(&model, &enriched, tiny_opts()).unwrap();
        idle.reset().unwrap();
        idle.reset().unwrap();
        let outcome_idle = idle.adapt(&img_b).unwrap();
        assert_eq!(outcome_idle.loss_pre, outcome_fresh.loss_pre);
    }

    #[test]
    fn backbone_bytes_unchanged_by_adaptation() {
        let (model, enriched, img) = fixture();
        let before = model.to_bytes();
        let mut session = AdaptationSession::new(&model, &enriched, tiny_opts()).unwrap();
        session.adapt(&img).unwrap();
        assert_eq!(before, model.to_bytes());
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let (model, enriched, img) = fixture();
        let mut opts = tiny_opts();
        opts.optimizer.learning_rate = 1e300;
        opts.iterations = 3;
        let mut session = AdaptationSession::new(&model, &enriched, opts).unwrap();
        match session.adapt(&img) {
            Err(Error::AdaptationDiverged) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
