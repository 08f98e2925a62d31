//! Episodic meta-training: baseline, global-only and SRasP steps.

use std::time::{Duration, Instant};

use crate::backbone::{proto_classify, Architecture, Backbone, ModelParams, NUM_BLOCKS, STYLE_BLOCKS};
use crate::data::{sample_episode, DomainSpec, Episode, NUM_SOURCE_CLASSES};
use crate::error::{Error, Result};
use crate::harness::adam::Adam;
use crate::harness::config::{Method, TrainConfig};
use crate::harness::stability::StabilityTracker;
use crate::mining::mine_batch;
use crate::objectives::{
    cross_entropy, crop_prototype, loss_adv, loss_cdto, loss_cls, loss_con, loss_fsl, total_loss, LossTerms, LossValues,
};
use crate::perturb::{gate, init_adversarial_style, step_adversarial_style};
use crate::reorient::{extract_style_gradients, reorient};
use crate::rng::{self, Rng};
use crate::style::{chained_range, compute_style, restyle, Style, STYLE_EPS};
use crate::tensor::{Tape, Tensor};

/// Independent random streams of one training episode. Each consumer owns a
/// stream, so a method that skips a stage leaves the others untouched.
pub struct EpisodeRngs {
    pub data: Rng,
    pub gate: Rng,
    pub mining: Rng,
    pub perturb: Rng,
}

impl EpisodeRngs {
    pub fn new(master_seed: u64, episode_index: u64) -> Self {
        let s = |name| rng::stream(master_seed, &[rng::tag(name), episode_index]);
        EpisodeRngs {
            data: s("data"),
            gate: s("gate"),
            mining: s("mining"),
            perturb: s("perturb"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: Adam,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let arch = Architecture {
            base_width: cfg.base_width,
            num_classes: NUM_SOURCE_CLASSES,
            ..Architecture::default()
        };
        let params = ModelParams::init(arch, cfg.proto_temp, rng::derive(cfg.master_seed, &[rng::tag("init")]));
        let adam = Adam::new(cfg.lr, params.num_params());
        TrainState { params, adam }
    }

    fn apply(&mut self, grads: &[f64], clip: f64) -> Result<()> {
        let values = self.params.tensors.iter_mut().flat_map(|t| t.data.iter_mut());
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if clip > 0.0 && norm > clip {
            let scaled: Vec<f64> = grads.iter().map(|g| g * clip / norm).collect();
            self.adam.step(values, &scaled)
        } else {
            self.adam.step(values, grads)
        }
    }
}

/// What one episode did.
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub losses: LossValues,
    pub gate: bool,
    /// `(kappa_mu, kappa_sigma)` per perturbed block.
    pub kappa: Vec<(f64, f64)>,
    /// Blocks left unperturbed because the global style gradient vanished.
    pub skipped_blocks: usize,
    /// Flattened parameter gradient of the total loss.
    pub grad: Vec<f64>,
}

/// Adversarial styles for blocks 1..=3 plus the kappa pairs drawn.
pub struct AdversarialStyles {
    pub styles: Vec<Option<Style>>,
    pub kappa: Vec<(f64, f64)>,
    pub skipped: usize,
}

/// The inner loop: per block, chain global and crop features under the
/// adversarial styles found so far, extract and reorient style gradients,
/// and take the noisy sign step.
pub fn synthesize_adversarial_styles(
    params: &ModelParams,
    images: &Tensor,
    classes: &[usize],
    crops: &[Tensor],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<AdversarialStyles> {
    let bb = params.bind(None);
    let mut global = images.detach();
    let mut crop_feats: Vec<Tensor> = crops.iter().map(Tensor::detach).collect();
    let mut out = AdversarialStyles {
        styles: Vec::with_capacity(STYLE_BLOCKS),
        kappa: Vec::new(),
        skipped: 0,
    };
    for j in 1..=STYLE_BLOCKS {
        let g_out = bb.forward_block(&global, j)?.feature;
        let c_out = crop_feats
            .iter()
            .map(|c| Ok(bb.forward_block(c, j)?.feature))
            .collect::<Result<Vec<_>>>()?;
        let raw = extract_style_gradients(&bb, &g_out, &c_out, classes, j, crops.len())?;
        let adv = match reorient(raw, &cfg.reorient) {
            Ok(set) => {
                let init = init_adversarial_style(&compute_style(&g_out, STYLE_EPS)?, &cfg.perturb, rng)?;
                let (adv, kappa) = step_adversarial_style(&init, &set, &cfg.perturb, rng)?;
                out.kappa.push(kappa);
                Some(adv)
            }
            Err(Error::DegenerateGradient(_)) => {
                out.skipped += 1;
                None
            }
            Err(e) => return Err(e),
        };
        match &adv {
            Some(style) => {
                global = restyle(&g_out, style)?;
                crop_feats = c_out.iter().map(|c| restyle(c, style)).collect::<Result<_>>()?;
            }
            None => {
                global = g_out;
                crop_feats = c_out;
            }
        }
        out.styles.push(adv);
    }
    Ok(out)
}

struct Split {
    n_support: usize,
    n_query: usize,
}

impl Split {
    fn of(ep: &Episode) -> Self {
        Split {
            n_support: ep.support_labels.len(),
            n_query: ep.query_labels.len(),
        }
    }

    fn fsl_logits(&self, ep: &Episode, bb: &Backbone, support_emb: &Tensor, query_emb: &Tensor) -> Result<Tensor> {
        proto_classify(
            &support_emb.slice_batch(0, self.n_support)?,
            &ep.support_labels,
            &query_emb.slice_batch(self.n_support, self.n_query)?,
            ep.n_way,
            bb.proto_temp,
        )
    }
}

/// Loss terms and gradient of one episode without updating parameters.
/// `perturb` selects the gate-on path; `crops` are mined crop batches
/// (empty for the global-only variant).
fn episode_gradient(
    params: &ModelParams,
    ep: &Episode,
    cfg: &TrainConfig,
    adversarial: Option<(&AdversarialStyles, &[Tensor])>,
) -> Result<(LossValues, Vec<f64>)> {
    let tape = Tape::new();
    let bb = params.bind(Some(&tape));
    let images = ep.images()?;
    let classes = ep.image_classes();
    let split = Split::of(ep);
    let b = classes.len();

    let crops: &[Tensor] = adversarial.map_or(&[], |(_, c)| c);
    let mut batch = vec![images.clone()];
    batch.extend(crops.iter().cloned());
    let h1 = bb.forward_block(&Tensor::concat_batch(&batch)?, 1)?.feature;
    let emb_all = bb.embed(&bb.forward_range(&h1, 2, NUM_BLOCKS)?)?;
    let logits_all = bb.classify_embedding(&emb_all)?;
    let emb_g = emb_all.slice_batch(0, b)?;
    let p_g = logits_all.slice_batch(0, b)?;
    let p_g_fsl = split.fsl_logits(ep, &bb, &emb_g, &emb_g)?;

    let terms = match adversarial {
        None => LossTerms {
            cls: loss_cls(&p_g, &[], &classes, 0)?,
            fsl: cross_entropy(&p_g_fsl, &ep.query_labels)?,
            cdto: None,
            con: None,
            adv: None,
        },
        Some((adv, crops)) => {
            // the clean block-1 output of the images is shared with the plain pass
            let g1 = h1.slice_batch(0, b)?;
            let f1 = match adv.styles.first() {
                Some(Some(style)) => restyle(&g1, style)?,
                _ => g1,
            };
            let f3 = chained_range(&bb, &f1, 2, STYLE_BLOCKS, &adv.styles)?;
            let emb_adv = bb.embed(&bb.forward_range(&f3.feature, STYLE_BLOCKS + 1, NUM_BLOCKS)?)?;
            let p_adv_fsl = split.fsl_logits(ep, &bb, &emb_adv, &emb_adv)?;
            let k = crops.len();
            let emb_crops = (0..k)
                .map(|i| emb_all.slice_batch((i + 1) * b, b))
                .collect::<Result<Vec<_>>>()?;
            let p_crops = (0..k)
                .map(|i| logits_all.slice_batch((i + 1) * b, b))
                .collect::<Result<Vec<_>>>()?;
            let (cdto, con) = if k == 0 {
                (None, None)
            } else {
                let f_c = crop_prototype(&emb_crops)?;
                let p_crops_fsl = emb_crops
                    .iter()
                    .map(|e| split.fsl_logits(ep, &bb, &emb_g, e))
                    .collect::<Result<Vec<_>>>()?;
                (
                    Some(loss_cdto(&emb_g, &f_c, &emb_adv, cfg.objective.delta)?),
                    Some(loss_con(&p_crops, &p_g, &p_crops_fsl, &ep.query_labels, cfg.objective.lambda)?),
                )
            };
            LossTerms {
                cls: loss_cls(&p_g, &p_crops, &classes, k)?,
                fsl: loss_fsl(&p_g_fsl, &p_adv_fsl, &ep.query_labels)?,
                cdto,
                con,
                adv: Some(loss_adv(&p_adv_fsl, &p_g_fsl)?),
            }
        }
    };
    let total = total_loss(&terms)?;
    let values = terms.values(&total);
    let grads = tape.backward(&total)?;
    Ok((values, bb.flat_gradients(&grads)))
}

fn finish(state: &mut TrainState, cfg: &TrainConfig, losses: LossValues, grad: Vec<f64>, styles: Option<AdversarialStyles>) -> Result<EpisodeRecord> {
    state.apply(&grad, cfg.grad_clip)?;
    let (gate, kappa, skipped_blocks) = match styles {
        Some(s) => (true, s.kappa, s.skipped),
        None => (false, Vec::new(), 0),
    };
    Ok(EpisodeRecord {
        losses,
        gate,
        kappa,
        skipped_blocks,
        grad,
    })
}

/// `L_cls + CE(p_g_fsl)` followed by one Adam step.
pub fn train_episode_baseline(state: &mut TrainState, ep: &Episode, cfg: &TrainConfig) -> Result<EpisodeRecord> {
    let (losses, grad) = episode_gradient(&state.params, ep, cfg, None)?;
    finish(state, cfg, losses, grad, None)
}

fn perturbed_step(state: &mut TrainState, ep: &Episode, cfg: &TrainConfig, rngs: &mut EpisodeRngs, k: usize) -> Result<EpisodeRecord> {
    if !gate(&cfg.perturb, &mut rngs.gate) {
        return train_episode_baseline(state, ep, cfg);
    }
    let images = ep.images()?;
    let classes = ep.image_classes();
    let crops = if k == 0 {
        Vec::new()
    } else {
        mine_batch(&images, &classes, &cfg.mining, &state.params.bind(None), &mut rngs.mining)?
    };
    let adv = synthesize_adversarial_styles(&state.params, &images, &classes, &crops, cfg, &mut rngs.perturb)?;
    let (losses, grad) = episode_gradient(&state.params, ep, cfg, Some((&adv, &crops)))?;
    finish(state, cfg, losses, grad, Some(adv))
}

/// Gate, then mining, inner loop and the full objective when the gate opens.
pub fn train_episode_srasp(state: &mut TrainState, ep: &Episode, cfg: &TrainConfig, rngs: &mut EpisodeRngs) -> Result<EpisodeRecord> {
    perturbed_step(state, ep, cfg, rngs, cfg.mining.k)
}

/// SRasP without crops: the ensemble is the normalised global gradient and
/// the crop-dependent terms are dropped.
pub fn train_episode_global_only(state: &mut TrainState, ep: &Episode, cfg: &TrainConfig, rngs: &mut EpisodeRngs) -> Result<EpisodeRecord> {
    perturbed_step(state, ep, cfg, rngs, 0)
}

pub fn train_episode(state: &mut TrainState, ep: &Episode, cfg: &TrainConfig, rngs: &mut EpisodeRngs) -> Result<EpisodeRecord> {
    match cfg.method {
        Method::Baseline => train_episode_baseline(state, ep, cfg),
        Method::GlobalOnly => train_episode_global_only(state, ep, cfg, rngs),
        Method::Srasp(_) => train_episode_srasp(state, ep, cfg, rngs),
    }
}

/// Forward-only `L_cls + CE(p_g_fsl)` of an episode.
pub fn baseline_loss(params: &ModelParams, ep: &Episode) -> Result<f64> {
    let bb = params.bind(None);
    let classes = ep.image_classes();
    let emb = bb.embed(&bb.forward(&ep.images()?)?)?;
    let p_g = bb.classify_embedding(&emb)?;
    let p_fsl = Split::of(ep).fsl_logits(ep, &bb, &emb, &emb)?;
    Ok(cross_entropy(&p_g, &classes)?.item() + cross_entropy(&p_fsl, &ep.query_labels)?.item())
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub episode: usize,
    pub losses: LossValues,
    pub gate: bool,
    pub grad_cosine: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub rows: Vec<MetricsRow>,
    /// Mean consecutive-episode gradient cosine per epoch.
    pub epoch_stability: Vec<Option<f64>>,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub kappa_draws: usize,
    pub wall_clock: Duration,
}

/// Runs `cfg.epochs x cfg.episodes_per_epoch` source episodes.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut state = TrainState::new(cfg);
    let source = DomainSpec::source();
    let mut tracker = StabilityTracker::default();
    let mut rows = Vec::new();
    let (mut epoch_stability, mut epoch_loss) = (Vec::new(), Vec::new());
    let mut kappa_draws = 0;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for episode in 0..cfg.episodes_per_epoch {
            let index = (epoch * cfg.episodes_per_epoch + episode) as u64;
            let mut rngs = EpisodeRngs::new(cfg.master_seed, index);
            let ep = sample_episode(cfg.n_way, cfg.k_shot, cfg.m_query, &source, &mut rngs.data)?;
            let rec = train_episode(&mut state, &ep, cfg, &mut rngs)?;
            kappa_draws += rec.kappa.len();
            loss_sum += rec.losses.total;
            let grad_cosine = tracker.push(rec.grad);
            rows.push(MetricsRow {
                epoch,
                episode,
                losses: rec.losses,
                gate: rec.gate,
                grad_cosine,
            });
        }
        epoch_stability.push(tracker.finish_epoch());
        epoch_loss.push(loss_sum / cfg.episodes_per_epoch as f64);
    }
    Ok(TrainOutcome {
        params: state.params,
        rows,
        epoch_stability,
        epoch_loss,
        kappa_draws,
        wall_clock: start.elapsed(),
    })
}
