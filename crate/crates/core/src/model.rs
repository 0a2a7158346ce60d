//! The full network: image model, AAS classifier and language model over one store.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aas::{AasClassifier, NUM_CLASSES};
use crate::checkpoint;
use crate::engine::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::image_model::{BnUpdates, EcNet, EcNetConfig, GroupSpec, Mode};
use crate::language::{LangConfig, LangModel, SeqFeatures, Vocab};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image: EcNetConfig,
    pub embed: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { image: EcNetConfig::default(), embed: 64, hidden: 128, classes: NUM_CLASSES }
    }
}

impl ModelConfig {
    /// 8×8 toy image model with small language widths.
    pub fn toy() -> Self {
        ModelConfig { image: EcNetConfig::toy(), embed: 6, hidden: 5, classes: NUM_CLASSES }
    }

    fn to_tensor(&self) -> Tensor {
        let c = &self.image;
        let mut v = vec![c.input_h, c.input_w, c.stem_channels, c.groups.len()];
        for g in &c.groups {
            v.push(g.blocks);
            v.push(g.boundary_channels.unwrap_or(0));
        }
        v.extend([self.embed, self.hidden, self.classes]);
        let data: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        Tensor::new(vec![data.len()], data).expect("config vector")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let v: Vec<usize> = t.data().iter().map(|&x| x as usize).collect();
        let bad = || Error::Format("malformed meta.config record".into());
        if v.len() < 4 {
            return Err(bad());
        }
        let ng = v[3];
        if v.len() != 4 + 2 * ng + 3 {
            return Err(bad());
        }
        let groups = (0..ng)
            .map(|g| GroupSpec {
                blocks: v[4 + 2 * g],
                boundary_channels: Some(v[5 + 2 * g]).filter(|&c| c > 0),
            })
            .collect();
        let k = 4 + 2 * ng;
        Ok(ModelConfig {
            image: EcNetConfig { input_h: v[0], input_w: v[1], stem_channels: v[2], groups },
            embed: v[k],
            hidden: v[k + 1],
            classes: v[k + 2],
        })
    }
}

/// Which class's activation map feeds attention.
#[derive(Debug, Clone, Copy)]
pub enum CamSource<'a> {
    /// Training labels.
    Labels(&'a [usize]),
    /// The classifier's own most likely class.
    Argmax,
}

pub struct Forward<'t> {
    pub features: SeqFeatures<'t>,
    /// AAS logits `[N, classes]`.
    pub logits: Var<'t>,
    pub bn_updates: BnUpdates,
}

#[derive(Debug, Clone)]
pub struct Mdnet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub image: EcNet,
    pub aas: AasClassifier,
    pub lang: LangModel,
    pub vocab: Vocab,
}

impl Mdnet {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let image = EcNet::new(&mut store, config.image.clone(), &mut rng)?;
        let d = config.image.out_channels();
        let aas = AasClassifier::new(&mut store, d, config.classes, &mut rng);
        let lc = LangConfig {
            embed: config.embed,
            hidden: config.hidden,
            channels: d,
            positions: config.image.positions(),
            vocab: vocab.len(),
        };
        let lang = LangModel::new(&mut store, lc, &mut rng);
        Ok(Mdnet { config, store, image, aas, lang, vocab })
    }

    /// Image model, classifier logits and attention features for `[N,3,H,W]` images.
    pub fn forward<'t>(&self, tape: &'t Tape, images: Var<'t>, mode: Mode, cam: CamSource<'_>) -> Result<Forward<'t>> {
        let out = self.image.forward(tape, &self.store, images, mode)?;
        let logits = self.aas.logits_from_pooled(tape, &self.store, out.pooled)?;
        let classes: Vec<usize> = match cam {
            CamSource::Labels(l) => l.to_vec(),
            CamSource::Argmax => {
                let lv = logits.value();
                let c = lv.shape()[1];
                lv.data().chunks(c).map(crate::aas::argmax).collect()
            }
        };
        let cam = self.aas.cam(tape, &self.store, out.conv, &classes)?;
        Ok(Forward {
            features: SeqFeatures { conv: out.conv, pooled: out.pooled, cam },
            logits,
            bn_updates: out.bn_updates,
        })
    }

    fn meta(&self) -> Vec<(String, Tensor)> {
        vec![("meta.config".to_string(), self.config.to_tensor())]
    }

    /// Writes the checkpoint to `path` and the vocabulary to `vocab.txt` beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, &self.meta(), path)?;
        self.vocab.save(&vocab_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = checkpoint::read(path)?;
        let cfg = checkpoint::find(&records, "meta.config")
            .ok_or_else(|| Error::Format("checkpoint lacks meta.config".into()))?;
        let config = ModelConfig::from_tensor(cfg)?;
        let vocab = Vocab::load(&vocab_path(path))?;
        let mut m = Mdnet::new(config, vocab, 0)?;
        checkpoint::load_into(&mut m.store, &records)?;
        Ok(m)
    }
}

pub fn vocab_path(ckpt: &Path) -> std::path::PathBuf {
    ckpt.with_file_name("vocab.txt")
}
