//! The full matching model: encoders, attention policies, fusion, and the
//! heads used by the auxiliary losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::dataset::{DatasetSpec, Instance};
use crate::attention::{
    fuse, fuse_adjusted, policy_rollout, AttentionTrace, NoiseSource, PolicyKind, PolicyParams,
    SampleMode,
};
use crate::autodiff::{Graph, ParamId, ParamStore, Snapshot, Var};
use crate::distributions::ActionSpace;
use crate::encoders::{embed_words, gcn_reason, region_affinity, uniform_init};
use crate::error::{Error, Result};
use crate::losses::DecoderParams;

/// Data-dependent sizes a model is built against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub dim: usize,
    pub vocab: usize,
    pub classes: usize,
}

impl From<&DatasetSpec> for DataDims {
    fn from(s: &DatasetSpec) -> Self {
        Self {
            dim: s.dim,
            vocab: s.vocab,
            classes: s.classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct GcnLayer {
    w1: ParamId,
    w2: ParamId,
    w: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: DataDims,
    pub store: ParamStore,
    space: ActionSpace,
    gcn: Vec<GcnLayer>,
    proj_img: ParamId,
    words: ParamId,
    proj_txt: ParamId,
    policy_img: PolicyParams,
    policy_txt: PolicyParams,
    classifier: ParamId,
    decoder: DecoderParams,
}

/// One encoded instance: unit-norm `1 × embed` embedding and, when a policy
/// is active, its attention episode.
pub struct Encoded {
    pub emb: Var,
    pub trace: Option<AttentionTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub dims: DataDims,
    pub epoch: usize,
    pub params: Snapshot,
}

impl Model {
    pub fn new(config: &ModelConfig, dims: DataDims) -> Result<Self> {
        config.validate()?;
        let space = config.action_space()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (d, e, h, k) = (dims.dim, config.word_dim, config.hidden, config.embed);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let gcn = (0..config.gcn_layers)
            .map(|l| {
                let w1 = store.add(format!("gcn{l}.w1"), uniform_init(d, h, inv(d), &mut rng));
                let w2 = if config.tied_affinity {
                    w1
                } else {
                    store.add(format!("gcn{l}.w2"), uniform_init(d, h, inv(d), &mut rng))
                };
                GcnLayer {
                    w1,
                    w2,
                    w: store.add(format!("gcn{l}.w"), uniform_init(d, d, 0.1 * inv(d), &mut rng)),
                }
            })
            .collect();
        let proj_img = store.add("image.proj", uniform_init(d, k, inv(d), &mut rng));
        let words = store.add("text.words", uniform_init(dims.vocab, e, 1.0, &mut rng));
        let proj_txt = store.add("text.proj", uniform_init(e, k, inv(e), &mut rng));
        let policy_img =
            PolicyParams::new(&mut store, "image", k, h, &space, config.heads, &mut rng)?;
        let policy_txt =
            PolicyParams::new(&mut store, "text", k, h, &space, config.heads, &mut rng)?;
        let classifier = store.add(
            "classifier",
            uniform_init(k, dims.classes, inv(k), &mut rng),
        );
        let decoder = DecoderParams::new(&mut store, dims.vocab, e, k, h, &mut rng);
        Ok(Self {
            config: config.clone(),
            dims,
            store,
            space,
            gcn,
            proj_img,
            words,
            proj_txt,
            policy_img,
            policy_txt,
            classifier,
            decoder,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(&ck.config, ck.dims)?;
        m.store.load(&ck.params)?;
        Ok(m)
    }

    pub fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            dims: self.dims,
            epoch,
            params: self.store.snapshot(),
        }
    }

    pub fn check_data(&self, spec: &DatasetSpec) -> Result<()> {
        let want = DataDims::from(spec);
        if want != self.dims {
            return Err(Error::Config(format!(
                "model built for {:?} but dataset has {:?}",
                self.dims, want
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> Option<PolicyKind> {
        self.config.pg.policy_kind()
    }

    pub fn classifier(&self) -> ParamId {
        self.classifier
    }

    pub fn decoder(&self) -> &DecoderParams {
        &self.decoder
    }

    /// `T × embed` region features after relation reasoning and projection.
    pub fn image_features(&self, g: &mut Graph, inst: &Instance) -> Result<Var> {
        let mut f = g.constant(inst.regions.features().clone());
        for layer in &self.gcn {
            let w1 = g.param(&self.store, layer.w1);
            let w2 = g.param(&self.store, layer.w2);
            let w = g.param(&self.store, layer.w);
            let rel = region_affinity(g, f, w1, w2)?;
            f = gcn_reason(g, f, rel, w)?;
        }
        let p = g.param(&self.store, self.proj_img);
        g.matmul(f, p)
    }

    /// `N × embed` projected word embeddings.
    pub fn text_features(&self, g: &mut Graph, inst: &Instance) -> Result<Var> {
        let table = g.param(&self.store, self.words);
        let w = embed_words(g, &inst.tokens, table)?;
        let p = g.param(&self.store, self.proj_txt);
        g.matmul(w, p)
    }

    fn attend<N: NoiseSource + ?Sized>(
        &self,
        g: &mut Graph,
        features: Var,
        policy: &PolicyParams,
        mode: SampleMode,
        noise: &mut N,
    ) -> Result<Encoded> {
        let fusion = policy.fusion.bind(g, &self.store);
        let (fused, trace) = match self.kind() {
            None => (fuse_adjusted(g, features, &fusion)?, None),
            Some(kind) => {
                let trace = policy_rollout(
                    g,
                    &self.store,
                    features,
                    policy,
                    &self.space,
                    kind,
                    mode,
                    noise,
                )?;
                let fused = fuse(g, features, &trace.att, self.config.lambda, &fusion)?;
                (fused, Some(trace))
            }
        };
        let emb = g.normalize_rows(fused)?;
        Ok(Encoded { emb, trace })
    }

    pub fn encode_image<N: NoiseSource + ?Sized>(
        &self,
        g: &mut Graph,
        inst: &Instance,
        mode: SampleMode,
        noise: &mut N,
    ) -> Result<Encoded> {
        let x = self.image_features(g, inst)?;
        self.attend(g, x, &self.policy_img, mode, noise)
    }

    pub fn encode_text<N: NoiseSource + ?Sized>(
        &self,
        g: &mut Graph,
        inst: &Instance,
        mode: SampleMode,
        noise: &mut N,
    ) -> Result<Encoded> {
        let x = self.text_features(g, inst)?;
        self.attend(g, x, &self.policy_txt, mode, noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::RngNoise;
    use crate::harness::config::PgMode;
    use crate::harness::dataset::generate_dataset;

    fn tiny() -> (ModelConfig, DatasetSpec) {
        let cfg = ModelConfig {
            hidden: 8,
            embed: 8,
            word_dim: 4,
            actions: 10,
            ..ModelConfig::default()
        };
        let spec = DatasetSpec {
            classes: 4,
            regions: 3,
            tokens: 4,
            dim: 6,
            vocab: 9,
            train_per_class: 2,
            ..DatasetSpec::default()
        };
        (cfg, spec)
    }

    #[test]
    fn tied_affinity_shares_one_map() {
        let (cfg, spec) = tiny();
        let free = Model::new(&cfg, (&spec).into()).unwrap();
        let tied = Model::new(&ModelConfig { tied_affinity: true, ..cfg }, (&spec).into()).unwrap();
        assert!(free.store.find("gcn0.w2").is_some());
        assert!(tied.store.find("gcn0.w2").is_none());
        assert_eq!(free.store.len(), tied.store.len() + 1);
        let mut g = Graph::new();
        tied.image_features(&mut g, &generate_dataset(&spec).unwrap().train[0]).unwrap();
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let (cfg, spec) = tiny();
        let ds = generate_dataset(&spec).unwrap();
        for pg in [PgMode::Off, PgMode::Compound, PgMode::ContinuousOnly] {
            let m = Model::new(&ModelConfig { pg, ..cfg.clone() }, (&spec).into()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut g = Graph::new();
            for inst in &ds.train {
                let a = m
                    .encode_image(&mut g, inst, SampleMode::Stochastic, &mut RngNoise(&mut rng))
                    .unwrap();
                let b = m
                    .encode_text(&mut g, inst, SampleMode::Deterministic, &mut RngNoise(&mut rng))
                    .unwrap();
                for e in [a.emb, b.emb] {
                    let n: f64 = g.value(e).data().iter().map(|x| x * x).sum();
                    assert!((n - 1.0).abs() < 1e-12);
                }
                assert_eq!(a.trace.is_some(), pg != PgMode::Off);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let (cfg, spec) = tiny();
        let m = Model::new(&cfg, (&spec).into()).unwrap();
        let ck = m.checkpoint(3);
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ck);
        let m2 = Model::from_checkpoint(&back).unwrap();
        assert_eq!(m2.store.snapshot(), m.store.snapshot());
        assert!(m2.check_data(&spec).is_ok());
        assert!(m2.check_data(&DatasetSpec { dim: 7, ..spec }).is_err());
    }
}
