use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use wordbridge_core::corpus::{apply_cmvn, generate_synthetic_corpus, load_corpus, Corpus, SynthSpec};
use wordbridge_core::harness::{Dataset, ExperimentConfig, Strategy};
use wordbridge_core::nets::NetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Joint,
    Separate,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Joint => Strategy::Joint,
            StrategyArg::Separate => Strategy::Separate,
        }
    }
}

/// Model, training, alignment and decoding hyperparameters. Unset flags keep
/// the value from `--config`, or the built-in default shown in brackets.
#[derive(Debug, Clone, Default, Args)]
pub struct HyperArgs {
    /// Loss weights for intra audio, intra text, cross audio, cross text, embedding [0.2,1,0.2,1,5]
    #[arg(long, value_delimiter = ',', num_args = 5)]
    pub alpha: Option<Vec<f64>>,
    /// Hinge margin on squared distance to negatives [0.01]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Enable the cycle-consistency term
    #[arg(long)]
    pub cycle: bool,
    /// Weight of the cycle-consistency term [1.0]
    #[arg(long)]
    pub cycle_weight: Option<f64>,
    /// Negative samples per paired word [1]
    #[arg(long)]
    pub negatives: Option<usize>,

    /// Adam learning rate [1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [0.9]
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    /// [0.999]
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    /// [1e-8]
    #[arg(long)]
    pub adam_eps: Option<f64>,
    /// [32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Global gradient-norm clip [5.0]
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// [100]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping [10]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Fraction of the pair set held out for validation [0.1]
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Optimizer steps per epoch [one pass over the data]
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Hard cap on optimizer steps
    #[arg(long)]
    pub max_steps: Option<usize>,

    /// Encoder GRU width [256]
    #[arg(long)]
    pub encoder_hidden: Option<usize>,
    /// Audio decoder GRU width [512]
    #[arg(long)]
    pub audio_decoder_hidden: Option<usize>,
    /// Text decoder GRU width [256]
    #[arg(long)]
    pub text_decoder_hidden: Option<usize>,
    /// Recurrent layers per network, 1 to 3 [1]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Phonetic vector size P [256]
    #[arg(long)]
    pub phonetic_dim: Option<usize>,
    /// Speaker vector size Q [256]
    #[arg(long)]
    pub speaker_dim: Option<usize>,
    /// Subword embedding size [64]
    #[arg(long)]
    pub embedding_dim: Option<usize>,

    /// LM weight in the decoding score [0.01]
    #[arg(long)]
    pub beta: Option<f64>,
    /// [10]
    #[arg(long)]
    pub beam: Option<usize>,
    /// Trigram backoff multiplier [0.4]
    #[arg(long)]
    pub lm_backoff: Option<f64>,

    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Cycle weight of the linear-map objective [1.0]
    #[arg(long)]
    pub lambda_prime: Option<f64>,
    /// PCA dimension for the alignment baseline [128]
    #[arg(long)]
    pub align_dim: Option<usize>,
    /// [1e-3]
    #[arg(long)]
    pub align_lr: Option<f64>,
    /// [5000]
    #[arg(long)]
    pub align_steps: Option<usize>,
    /// Disable the speaker-adversarial critic
    #[arg(long)]
    pub no_adversarial: bool,
    /// [1.0]
    #[arg(long)]
    pub adversarial_weight: Option<f64>,
    /// Critic updates per encoder update [5]
    #[arg(long)]
    pub n_critic: Option<usize>,
    /// Gradient-penalty weight [10]
    #[arg(long)]
    pub gp_weight: Option<f64>,
    /// [256]
    #[arg(long)]
    pub critic_hidden: Option<usize>,
    /// [1e-4]
    #[arg(long)]
    pub critic_lr: Option<f64>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl HyperArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let w = &mut cfg.train.weights;
        if let Some(a) = &self.alpha {
            w.alpha.copy_from_slice(a);
        }
        set!(w.lambda, self.lambda);
        w.cycle |= self.cycle;
        set!(w.cycle_weight, self.cycle_weight);
        w.validate()?;

        let t = &mut cfg.train;
        set!(t.negatives_per_pair, self.negatives);
        set!(t.adam.learning_rate, self.lr);
        set!(t.adam.beta1, self.adam_beta1);
        set!(t.adam.beta2, self.adam_beta2);
        set!(t.adam.epsilon, self.adam_eps);
        set!(t.batch_size, self.batch_size);
        set!(t.clip_norm, self.clip_norm);
        set!(t.max_epochs, self.max_epochs);
        set!(t.patience, self.patience);
        set!(t.validation_fraction, self.validation_fraction);
        if self.steps_per_epoch.is_some() {
            t.steps_per_epoch = self.steps_per_epoch;
        }
        if self.max_steps.is_some() {
            t.max_steps = self.max_steps;
        }

        let n = &mut cfg.net;
        set!(n.encoder_hidden, self.encoder_hidden);
        set!(n.audio_decoder_hidden, self.audio_decoder_hidden);
        set!(n.text_decoder_hidden, self.text_decoder_hidden);
        set!(n.layers, self.layers);
        set!(n.phonetic_dim, self.phonetic_dim);
        set!(n.speaker_dim, self.speaker_dim);
        set!(n.embedding_dim, self.embedding_dim);

        set!(cfg.beta, self.beta);
        set!(cfg.beam, self.beam);
        set!(cfg.lm.backoff, self.lm_backoff);
        if let Some(s) = self.strategy {
            cfg.strategy = s.into();
        }

        let a = &mut cfg.align;
        set!(a.lambda_prime, self.lambda_prime);
        set!(a.dim, self.align_dim);
        set!(a.learning_rate, self.align_lr);
        set!(a.steps, self.align_steps);
        a.adversarial &= !self.no_adversarial;
        set!(a.adversarial_weight, self.adversarial_weight);
        set!(a.n_critic, self.n_critic);
        set!(a.gp_weight, self.gp_weight);
        set!(a.critic_hidden, self.critic_hidden);
        set!(a.critic_learning_rate, self.critic_lr);
        if cfg.beam == 0 {
            bail!("--beam must be at least 1");
        }
        Ok(())
    }
}

/// Where training data comes from: manifests on disk or the synthetic
/// generator.
#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Training manifest (JSON lines); omit to use synthetic data
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    /// Test manifest; required with --train-manifest for grid commands
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    /// Lexicon file (`word<TAB>unit unit ...`)
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Apply per-utterance CMVN to loaded features
    #[arg(long)]
    pub cmvn: bool,
    /// Synthetic corpus spec (TOML) used when no manifest is given
    #[arg(long)]
    pub synth_spec: Option<PathBuf>,
}

pub fn read_spec(path: Option<&Path>) -> Result<SynthSpec> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(SynthSpec::from_toml(&text)?)
        }
        None => Ok(SynthSpec::default()),
    }
}

fn load(manifest: &Path, lexicon: Option<&PathBuf>, cmvn: bool) -> Result<Corpus<f32>> {
    let lexicon = lexicon.context("--lexicon is required with a manifest")?;
    let c = load_corpus(manifest, lexicon).with_context(|| format!("loading {}", manifest.display()))?;
    Ok(if cmvn { apply_cmvn(&c) } else { c })
}

impl DataArgs {
    /// Train and test splits; the synthetic path uses `seed` for generation.
    pub fn dataset(&self, seed: u64) -> Result<Dataset<f32>> {
        match &self.train_manifest {
            Some(train) => {
                let test = self.test_manifest.as_ref().context("--test-manifest is required with --train-manifest")?;
                Ok(Dataset { train: load(train, self.lexicon.as_ref(), self.cmvn)?, test: load(test, self.lexicon.as_ref(), self.cmvn)? })
            }
            None => {
                let spec = read_spec(self.synth_spec.as_deref())?;
                log::info!("no manifest given; generating a synthetic corpus (seed {seed})");
                let syn = generate_synthetic_corpus::<f32>(&spec, seed)?;
                let test = syn.test.context("synthetic spec produces no test split; set test_tokens_per_word")?;
                Ok(Dataset { train: syn.train, test })
            }
        }
    }

    /// Training split only.
    pub fn train(&self, seed: u64) -> Result<Corpus<f32>> {
        match &self.train_manifest {
            Some(train) => load(train, self.lexicon.as_ref(), self.cmvn),
            None => Ok(self.dataset(seed)?.train),
        }
    }
}

/// Base config: the file if given, else defaults; network sized for the data.
pub fn base_config(path: Option<&Path>, corpus: &Corpus<f32>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig { net: NetConfig::new(corpus.feature_dim(), corpus.lexicon().inventory_size()), ..Default::default() },
    };
    cfg.net.feature_dim = corpus.feature_dim();
    cfg.net.inventory_size = corpus.lexicon().inventory_size();
    Ok(cfg)
}

/// Resolves a pair count from an absolute number or a fraction of the
/// annotated words.
pub fn pair_count(n: Option<usize>, fraction: Option<f64>, corpus: &Corpus<f32>) -> Result<usize> {
    let available = corpus.annotated_indices().len();
    match (n, fraction) {
        (Some(_), Some(_)) => bail!("give either --n-paired or --pair-fraction, not both"),
        (Some(n), None) => Ok(n),
        (None, Some(f)) if (0.0..=1.0).contains(&f) => Ok((f * available as f64).round() as usize),
        (None, Some(f)) => bail!("--pair-fraction must be in [0, 1], got {f}"),
        (None, None) => Ok(available),
    }
}
