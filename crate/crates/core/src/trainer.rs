//! Training loop: dataset split, per-step Adam updates, JSON-lines log and
//! checkpoints.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, LossNetEntry};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tape};
use crate::image_io::{load_image, resize_center};
use crate::losses::{total_loss_with_targets, LossReport, LossTargets, LossWeights};
use crate::net::{validate_image_size, stylize, AggregationStrategy, ModelParams, DEFAULT_WIDTH};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::vgg::LossNetwork;

/// Decoded images kept in memory between steps; beyond this the cache is
/// flushed and images are decoded again on demand.
const IMAGE_CACHE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    /// Checkpoint manifest path, rewritten at every save.
    pub out: PathBuf,
    pub epochs: usize,
    /// Overrides `epochs` when set; pairs keep cycling past the last epoch.
    pub max_steps: Option<usize>,
    pub image_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub strategy: AggregationStrategy,
    pub seed: u64,
    pub batch_size: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Defaults to `<out>.log`.
    pub log_path: Option<PathBuf>,
    /// Base channel width of the stylization network.
    pub width: usize,
    /// External loss-network manifest; seeded random weights when absent.
    pub loss_weights: Option<PathBuf>,
    /// Reorder pairs every epoch with a seeded permutation.
    pub reshuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dir: PathBuf::new(),
            out: PathBuf::from("model.ckpt"),
            epochs: 2,
            max_steps: None,
            image_size: 256,
            lr: 1e-4,
            weights: LossWeights::default(),
            strategy: AggregationStrategy::Mfa,
            seed: 0,
            batch_size: 1,
            checkpoint_every: 0,
            log_path: None,
            width: DEFAULT_WIDTH,
            loss_weights: None,
            reshuffle: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_image_size(self.image_size)?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be >= 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        self.weights.validate()
    }

    pub fn log_file(&self) -> PathBuf {
        self.log_path.clone().unwrap_or_else(|| {
            let mut name = self.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".log");
            self.out.with_file_name(name)
        })
    }

    pub fn loss_network(&self) -> Result<LossNetwork<f32>> {
        match &self.loss_weights {
            Some(manifest) => LossNetwork::load_weights(manifest),
            None => Ok(LossNetwork::seeded(self.seed)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub content: Vec<PathBuf>,
    pub style: Vec<PathBuf>,
    pub dropped: Option<PathBuf>,
}

impl Split {
    /// Pair index `i` uses `(content[i mod |C|], style[i mod |S|])`.
    pub fn pair(&self, i: usize) -> (&Path, &Path) {
        (&self.content[i % self.content.len()], &self.style[i % self.style.len()])
    }

    pub fn num_pairs(&self) -> usize {
        self.content.len().max(self.style.len())
    }
}

fn is_image_file(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
}

/// Seeded 50/50 split of the `.png`/`.ppm` files in `dir`.
pub fn split_dataset(dir: impl AsRef<Path>, seed: u64) -> Result<Split> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image_file(p))
        .collect();
    if files.len() < 2 {
        return Err(Error::TooFewImages(files.len()));
    }
    files.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    files.shuffle(&mut rng);
    let dropped = if files.len() % 2 == 1 { files.pop() } else { None };
    if let Some(d) = &dropped {
        warn!("odd number of images; dropping {}", d.display());
    }
    let style = files.split_off(files.len() / 2);
    Ok(Split {
        content: files,
        style,
        dropped,
    })
}

/// Pair order for `epoch`: identity unless reshuffling.
fn epoch_order(num_pairs: usize, seed: u64, epoch: usize, reshuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_pairs).collect();
    if reshuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng.set_stream(4);
        order.shuffle(&mut rng);
    }
    order
}

#[derive(Serialize)]
struct LogHeader<'a> {
    config: &'a TrainConfig,
    seed: u64,
    loss_network: &'a LossNetEntry,
    content_images: usize,
    style_images: usize,
    steps: usize,
    start_step: usize,
}

struct Prepared {
    image: Tensor<f32>,
    feature: Option<Arc<Tensor<f32>>>,
    grams: Option<Vec<Arc<Tensor<f32>>>>,
}

/// Resized images and their loss-network targets, keyed by path.
struct ImageCache<'a> {
    phi: &'a LossNetwork<f32>,
    size: usize,
    entries: HashMap<PathBuf, Prepared>,
    bad: BTreeSet<PathBuf>,
}

impl ImageCache<'_> {
    fn entry(&mut self, path: &Path) -> Option<&mut Prepared> {
        if self.bad.contains(path) {
            return None;
        }
        if !self.entries.contains_key(path) {
            match load_image(path).and_then(|t| resize_center(&t, self.size)) {
                Ok(image) => {
                    if self.entries.len() >= IMAGE_CACHE {
                        self.entries.clear();
                    }
                    self.entries.insert(
                        path.to_path_buf(),
                        Prepared {
                            image,
                            feature: None,
                            grams: None,
                        },
                    );
                }
                Err(e) => {
                    warn!("skipping {}: {e}", path.display());
                    self.bad.insert(path.to_path_buf());
                    return None;
                }
            }
        }
        self.entries.get_mut(path)
    }

    fn content(&mut self, path: &Path) -> Result<Option<(Tensor<f32>, Arc<Tensor<f32>>)>> {
        let phi = self.phi;
        let Some(e) = self.entry(path) else { return Ok(None) };
        if e.feature.is_none() {
            e.feature = Some(LossTargets::content_feature(phi, &e.image)?);
        }
        Ok(Some((e.image.clone(), Arc::clone(e.feature.as_ref().expect("set above")))))
    }

    fn style(&mut self, path: &Path) -> Result<Option<(Tensor<f32>, Vec<Arc<Tensor<f32>>>)>> {
        let phi = self.phi;
        let Some(e) = self.entry(path) else { return Ok(None) };
        if e.grams.is_none() {
            e.grams = Some(LossTargets::style_grams(phi, &e.image)?);
        }
        Ok(Some((e.image.clone(), e.grams.clone().expect("set above"))))
    }
}

fn stack_arcs(items: &[Arc<Tensor<f32>>]) -> Result<Arc<Tensor<f32>>> {
    if items.len() == 1 {
        return Ok(Arc::clone(&items[0]));
    }
    let owned: Vec<Tensor<f32>> = items.iter().map(|t| (**t).clone()).collect();
    Ok(Arc::new(Tensor::stack_batch(&owned)?))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One report per executed step, in order.
    pub reports: Vec<LossReport>,
    /// Images that failed to decode and were skipped.
    pub skipped: Vec<PathBuf>,
}

/// Train from scratch.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    run(config, None)
}

/// Continue from a checkpoint written by an earlier run of the same
/// configuration; `config` decides where to stop.
pub fn resume(config: &TrainConfig, checkpoint: Checkpoint) -> Result<TrainOutcome> {
    run(config, Some(checkpoint))
}

/// Take one optimizer step on a batch; returns the pre-update report.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ModelParams<f32>,
    adam: &mut Adam<f32>,
    phi: &LossNetwork<f32>,
    content: Tensor<f32>,
    style: Tensor<f32>,
    targets: &LossTargets<f32>,
    weights: LossWeights,
    strategy: AggregationStrategy,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let c = tape.constant(content);
    let s = tape.constant(style);
    let out = stylize(&mut tape, &bound, &c, &s, strategy)?;
    let terms = total_loss_with_targets(&mut tape, phi, &out, &c, targets, weights)?;
    let report = terms.report(&tape);
    if !report.is_finite() {
        return Ok(report);
    }
    let grads = tape.backward(terms.total)?;
    let vars = bound.values().to_vec();
    drop(bound);
    drop(tape);
    params.absorb_grads(&vars, &grads);
    adam.step(params.tensors_mut())?;
    Ok(report)
}

fn run(config: &TrainConfig, resume_from: Option<Checkpoint>) -> Result<TrainOutcome> {
    config.validate()?;
    let split = split_dataset(&config.data_dir, config.seed)?;
    let phi = config.loss_network()?;
    let loss_entry = LossNetEntry {
        source: phi.source().clone(),
        hash: phi.recorded_hash().to_string(),
    };

    let (mut params, mut adam, start) = match resume_from {
        Some(ck) => {
            if ck.loss_network.hash != loss_entry.hash {
                return Err(Error::Config(format!(
                    "checkpoint was trained against loss network {} but this run uses {}",
                    ck.loss_network.hash, loss_entry.hash
                )));
            }
            if ck.params.width() != config.width {
                return Err(Error::Config(format!(
                    "checkpoint width {} does not match configured width {}",
                    ck.params.width(),
                    config.width
                )));
            }
            let mut adam = ck.optimizer.unwrap_or_else(|| Adam::new(config.lr));
            adam.lr = config.lr;
            (ck.params, adam, ck.step)
        }
        None => (ModelParams::init(config.width, config.seed), Adam::new(config.lr), 0),
    };

    let pairs = split.num_pairs();
    let steps_per_epoch = pairs.div_ceil(config.batch_size);
    let total_steps = config.max_steps.unwrap_or(config.epochs * steps_per_epoch);

    let log_path = config.log_file();
    let file = if start == 0 {
        File::create(&log_path)
    } else {
        OpenOptions::new().create(true).append(true).open(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let header = LogHeader {
        config,
        seed: config.seed,
        loss_network: &loss_entry,
        content_images: split.content.len(),
        style_images: split.style.len(),
        steps: total_steps,
        start_step: start,
    };
    let header = serde_json::to_string(&header)?;
    info!("{header}");
    writeln!(log, "{header}").map_err(|e| Error::io(&log_path, e))?;

    let mut cache = ImageCache {
        phi: &phi,
        size: config.image_size,
        entries: HashMap::new(),
        bad: BTreeSet::new(),
    };
    let mut reports = Vec::new();
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();

    let checkpoint = |params: &ModelParams<f32>, adam: &Adam<f32>, step: usize| -> Result<Checkpoint> {
        if phi.content_hash() != loss_entry.hash {
            return Err(Error::Config("loss network parameters changed during training".into()));
        }
        let ck = Checkpoint {
            params: params.clone(),
            config: config.clone(),
            step,
            optimizer: Some(adam.clone()),
            loss_network: loss_entry.clone(),
        };
        ck.save(&config.out)?;
        Ok(ck)
    };

    for step in start..total_steps {
        let epoch = step / steps_per_epoch;
        if epoch != order_epoch {
            order = epoch_order(pairs, config.seed, epoch, config.reshuffle);
            order_epoch = epoch;
        }
        let first = (step % steps_per_epoch) * config.batch_size;
        let batch = &order[first..(first + config.batch_size).min(pairs)];

        let (mut cs, mut ss, mut feats, mut grams) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &i in batch {
            let (cp, sp) = split.pair(i);
            let Some((c, f)) = cache.content(cp)? else { continue };
            let Some((s, g)) = cache.style(sp)? else { continue };
            cs.push(c);
            ss.push(s);
            feats.push(f);
            grams.push(g);
        }
        if cs.is_empty() {
            warn!("step {}: no decodable pair, skipped", step + 1);
            continue;
        }
        let targets = LossTargets {
            content_feature: stack_arcs(&feats)?,
            style_grams: (0..grams[0].len())
                .map(|k| stack_arcs(&grams.iter().map(|g| Arc::clone(&g[k])).collect::<Vec<_>>()))
                .collect::<Result<_>>()?,
        };
        let content = Tensor::stack_batch(&cs)?;
        let style = Tensor::stack_batch(&ss)?;
        let report = train_step(
            &mut params,
            &mut adam,
            &phi,
            content,
            style,
            &targets,
            config.weights,
            config.strategy,
        )?;
        let line = report.to_log_line(step + 1);
        if !report.is_finite() {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                report: line,
            });
        }
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        reports.push(report);

        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < total_steps {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            checkpoint(&params, &adam, step + 1)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_ck = checkpoint(&params, &adam, total_steps.max(start))?;
    Ok(TrainOutcome {
        checkpoint: final_ck,
        reports,
        skipped: cache.bad.into_iter().collect(),
    })
}
