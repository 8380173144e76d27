use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "nmt", version, about = "Train and run compact translation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build vocabularies and shuffle a parallel corpus into binary shards.
    PrepareData(PrepareArgs),
    /// Train a model on prepared shards.
    Train(TrainArgs),
    /// Translate stdin to stdout, one sentence per line.
    Translate(TranslateArgs),
    /// Estimate a lexical shortlist with IBM Model 1.
    BuildShortlist(ShortlistArgs),
    /// Measure decoding speed and report the analytic step cost.
    Bench(BenchArgs),
    /// Write an INT8 copy of a trained parameter file.
    Quantize(QuantizeArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Source side, one tokenized sentence per line.
    #[arg(short = 's', long)]
    pub source: PathBuf,
    /// Target side, aligned with the source.
    #[arg(short = 't', long)]
    pub target: PathBuf,
    /// Comma-separated source factor files.
    #[arg(long, value_delimiter = ',')]
    pub source_factors: Vec<PathBuf>,
    /// Comma-separated target factor files.
    #[arg(long, value_delimiter = ',')]
    pub target_factors: Vec<PathBuf>,
    /// Output directory; must not exist.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
    /// Number of shards.
    #[arg(long, visible_alias = "shards", default_value_t = 1)]
    pub num_shards: usize,
    /// Random seed.
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    /// Pairs with a side longer than this are dropped.
    #[arg(long, default_value_t = 95)]
    pub max_len: usize,
    /// Minimum token count for a vocabulary entry.
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    /// Maximum number of regular tokens per vocabulary.
    #[arg(long)]
    pub max_vocab: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecoderArg {
    Ssru,
    SelfAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CombineArg {
    Sum,
    Concat,
}

/// Architecture flags; unset values come from the base config.
#[derive(Args, Debug)]
pub struct ArchArgs {
    /// Model width.
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feed-forward inner width.
    #[arg(long)]
    pub ff_dim: Option<usize>,
    /// Encoder depth.
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    /// Decoder depth.
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    /// Decoder layer type.
    #[arg(long, value_enum)]
    pub decoder: Option<DecoderArg>,
    /// Maximum sequence length; longer inputs are chunked at translation.
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Train a neural vocabulary selection head.
    #[arg(long)]
    pub nvs: bool,
    /// Embedding size of each source factor, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub source_factor_dims: Vec<usize>,
    /// How source factor embeddings join the surface embedding.
    #[arg(long, value_enum, default_value_t = CombineArg::Sum)]
    pub source_factor_combine: CombineArg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by prepare-data.
    #[arg(short = 'd', long)]
    pub prepared_data: PathBuf,
    /// Validation source sentences.
    #[arg(long = "vs", visible_alias = "validation-source")]
    pub validation_source: PathBuf,
    /// Validation target sentences.
    #[arg(long = "vt", visible_alias = "validation-target")]
    pub validation_target: PathBuf,
    /// Comma-separated validation source factor files.
    #[arg(long, value_delimiter = ',')]
    pub validation_source_factors: Vec<PathBuf>,
    /// Comma-separated validation target factor files.
    #[arg(long, value_delimiter = ',')]
    pub validation_target_factors: Vec<PathBuf>,
    /// Model output directory.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
    /// Stop after this many updates.
    #[arg(long)]
    pub max_updates: usize,
    /// Updates between checkpoints.
    #[arg(long, default_value_t = 500)]
    pub checkpoint_interval: usize,
    /// Initial parameters for fine-tuning.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Continue the run saved in the output directory.
    #[arg(long, conflicts_with = "params")]
    pub resume: bool,
    /// A preset (all_except_decoder, all_except_output_layer,
    /// all_except_embeddings, all_except_feed_forward) or comma-separated
    /// parameter name globs.
    #[arg(long)]
    pub freeze: Option<String>,
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Peak learning rate.
    #[arg(long, default_value_t = 2e-3)]
    pub learning_rate: f32,
    /// Warmup updates of the inverse square root schedule.
    #[arg(long, default_value_t = 200)]
    pub warmup: usize,
    /// Label smoothing of the cross-entropy terms.
    #[arg(long, default_value_t = 0.1)]
    pub label_smoothing: f32,
    /// Padded target tokens per batch.
    #[arg(long, default_value_t = 1024)]
    pub batch_tokens: usize,
    /// Number of best checkpoints averaged into params.avg.
    #[arg(long, default_value_t = 8)]
    pub average_best: usize,
    /// Loss weight of each target factor, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub factor_loss_weights: Vec<f32>,
    /// Weight of the vocabulary selection loss.
    #[arg(long, default_value_t = 1.0)]
    pub nvs_loss_weight: f32,
    /// Random seed.
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    /// Print the resolved model config and exit.
    #[arg(long)]
    pub show_config: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum QuantizeMode {
    Int8,
}

/// Model loading and search flags shared by translate and bench.
#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// Model directory written by train.
    #[arg(short = 'm', long)]
    pub model: PathBuf,
    /// Parameter file inside the model directory.
    #[arg(long, default_value = "params.best")]
    pub params: String,
    /// Beam size.
    #[arg(long, default_value_t = 5, conflicts_with = "greedy")]
    pub beam: usize,
    /// Greedy search.
    #[arg(long)]
    pub greedy: bool,
    /// Length penalty exponent.
    #[arg(long, default_value_t = 1.0)]
    pub length_alpha: f32,
    /// Lexical shortlist file.
    #[arg(long, conflicts_with = "nvs_threshold")]
    pub shortlist: Option<PathBuf>,
    /// Restrict the output vocabulary with the NVS head.
    #[arg(long)]
    pub nvs_threshold: Option<f32>,
    /// Run linear layers in INT8.
    #[arg(long, value_enum)]
    pub quantize: Option<QuantizeMode>,
    /// Never emit EOS before this many tokens.
    #[arg(long, default_value_t = 0)]
    pub min_len: usize,
    /// Maximum output length; defaults to twice the source length plus 10.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Print the model config and exit.
    #[arg(long)]
    pub show_config: bool,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Read JSON input objects instead of plain text.
    #[arg(long)]
    pub json: bool,
    /// Write JSON records instead of plain text.
    #[arg(long)]
    pub output_json: bool,
    /// Remove the target prefix from the output.
    #[arg(long)]
    pub strip_prefix: bool,
    /// Force the target prefix on every chunk of an over-long input.
    #[arg(long)]
    pub prefix_all_chunks: bool,
    /// Sentences handed to the workers at once.
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct ShortlistArgs {
    #[arg(short = 's', long)]
    pub source: PathBuf,
    #[arg(short = 't', long)]
    pub target: PathBuf,
    #[arg(short = 'o', long)]
    pub output: PathBuf,
    /// Entries kept per source token.
    #[arg(long, default_value_t = 200)]
    pub k: usize,
    /// EM iterations.
    #[arg(long, default_value_t = 5)]
    pub iterations: usize,
    /// Directory holding vocabularies to restrict to (a model or prepared
    /// data directory); built from the corpus otherwise.
    #[arg(long)]
    pub vocab_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Input sentences; stdin when absent.
    #[arg(short = 'i', long)]
    pub input: Option<PathBuf>,
    /// Passes over the input.
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(short = 'm', long)]
    pub model: PathBuf,
    #[arg(long, default_value = "params.best")]
    pub params: String,
    /// Output file.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
}

/// Rewrites the single-dash long forms `-vs` and `-vt`.
pub fn normalize_argv(argv: impl IntoIterator<Item = String>) -> Vec<String> {
    argv.into_iter()
        .map(|a| match a.as_str() {
            "-vs" => "--vs".to_string(),
            "-vt" => "--vt".to_string(),
            _ => a,
        })
        .collect()
}
