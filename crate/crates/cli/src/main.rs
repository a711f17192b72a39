use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dcalign::ablation::{comparison_csv, run_matrix, Matrix};
use dcalign::checkpoint::Checkpoint;
use dcalign::config::RunConfig;
use dcalign::data::Corpus;
use dcalign::gradcheck::{run_gradcheck, GRADCHECK_TOLERANCE};
use dcalign::inference::{build_gallery, evaluate, retrieve};
use dcalign::io::atomic_write;
use dcalign::synthdata::{generate_corpus, Dataset, Split};
use dcalign::train::{train_stage1_with, train_stage2_with, EpochLog};
use dcalign::Error;

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "dcalign", version, about = "Text to RGB-thermal person retrieval: data, training, evaluation and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic RGB-thermal caption corpus.
    GenData {
        /// Run configuration (TOML); its [data] table drives generation. Built-in defaults when omitted.
        #[arg(long, value_name = "FILE", default_value = "built-in defaults")]
        config: ConfigArg,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train stage 1 (additive fusion), stage 2 (ATF) or both.
    Train {
        /// Run configuration (TOML). Built-in defaults when omitted.
        #[arg(long, value_name = "FILE", default_value = "built-in defaults")]
        config: ConfigArg,
        /// Corpus directory written by gen-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Stages to run.
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        /// Stage-1 checkpoint to continue from (required with --stage 2).
        #[arg(long, value_name = "FILE")]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Corpus directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Report file to write.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
        /// Split whose captions query its own pairs.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Rank the pairs of a split against a free-text query.
    Retrieve {
        /// Checkpoint to use.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Corpus directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Query text.
        #[arg(long)]
        query: String,
        /// Number of results (at most the gallery size).
        #[arg(long, default_value_t = 10)]
        topk: usize,
        /// Split providing the gallery.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Finite-difference check of every loss and the ATF module.
    Gradcheck {
        /// Seed of the synthetic batch and parameters.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate an experiment matrix.
    Ablate {
        /// Base run configuration (TOML). Built-in defaults when omitted.
        #[arg(long, value_name = "FILE", default_value = "built-in defaults")]
        config: ConfigArg,
        /// Corpus directory; generated from the configuration when omitted.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Matrix to run.
        #[arg(long, value_enum)]
        matrix: MatrixArg,
        /// Output directory for per-configuration reports and comparison.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

/// `--config` value: a path, or the built-in defaults.
#[derive(Clone, Debug)]
struct ConfigArg(Option<PathBuf>);

impl std::str::FromStr for ConfigArg {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(ConfigArg((s != "built-in defaults").then(|| PathBuf::from(s))))
    }
}

impl ConfigArg {
    fn load(&self) -> dcalign::Result<RunConfig> {
        let cfg = match &self.0 {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MatrixArg {
    Table4,
    Table5,
    Table6,
    Maskratio,
}

impl From<MatrixArg> for Matrix {
    fn from(m: MatrixArg) -> Matrix {
        match m {
            MatrixArg::Table4 => Matrix::Table4,
            MatrixArg::Table5 => Matrix::Table5,
            MatrixArg::Table6 => Matrix::Table6,
            MatrixArg::Maskratio => Matrix::MaskRatio,
        }
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Numerical(_)) { NUMERICAL } else { DATA };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: USAGE, message: message.into() }
}

fn log_epoch(l: &EpochLog) {
    let terms: Vec<String> = l.terms.iter().map(|(k, v)| format!("{}={v:.4}", k.name())).collect();
    eprintln!("stage {} epoch {} steps {} total {:.4} {}", l.stage, l.epoch + 1, l.steps, l.total, terms.join(" "));
}

fn load_corpus_for(ckpt: &Checkpoint, data: &Path) -> dcalign::Result<Corpus> {
    Corpus::with_tokenizer(Dataset::read(data)?, ckpt.tokenizer.clone())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let dataset = generate_corpus(&cfg.data)?;
            dataset.write(&out)?;
            println!("wrote {} pairs of {} identities to {}", dataset.pairs.len(), dataset.identities.len(), out.display());
        }
        Command::Train { config, data, out, stage, from } => {
            match (stage, &from) {
                (StageArg::Two, None) => return Err(usage("--stage 2 needs --from <stage-1 checkpoint>")),
                (StageArg::One | StageArg::All, Some(_)) => return Err(usage("--from is only valid with --stage 2")),
                _ => {}
            }
            let cfg = config.load()?;
            let dataset = Dataset::read(&data)?;
            let ckpt = match (stage, from) {
                (StageArg::Two, Some(from)) => {
                    let start = Checkpoint::load(&from)?;
                    let corpus = Corpus::with_tokenizer(dataset, start.tokenizer.clone())?;
                    train_stage2_with(start, &corpus, &cfg, &mut log_epoch)?.checkpoint
                }
                (stage, _) => {
                    let corpus = Corpus::prepare(dataset, cfg.model.text.max_len)?;
                    let ck = train_stage1_with(&corpus, &cfg, &mut log_epoch)?.checkpoint;
                    if stage == StageArg::All {
                        train_stage2_with(ck, &corpus, &cfg, &mut log_epoch)?.checkpoint
                    } else {
                        ck
                    }
                }
            };
            ckpt.save(&out)?;
            println!("wrote stage-{} checkpoint {}", ckpt.stage, out.display());
        }
        Command::Eval { ckpt, data, report, split } => {
            let ck = Checkpoint::load(&ckpt)?;
            let corpus = load_corpus_for(&ck, &data)?;
            let r = evaluate(&ck.model, ck.fusion, &corpus, split.into())?;
            atomic_write(&report, r.to_json().as_bytes())?;
            println!(
                "rank1 {:.2} rank5 {:.2} rank10 {:.2} map {:.2} rsum {:.2} over {} queries",
                r.rank1, r.rank5, r.rank10, r.map, r.rsum, r.num_queries
            );
        }
        Command::Retrieve { ckpt, data, query, topk, split } => {
            let ck = Checkpoint::load(&ckpt)?;
            let corpus = load_corpus_for(&ck, &data)?;
            let index = build_gallery(&ck.model, ck.fusion, &corpus, split.into())?;
            let hits = retrieve(&ck.model, &ck.tokenizer, &index, &query, topk)?;
            let mut table = String::from("rank\tpair_id\tidentity_id\tscore\n");
            for (i, h) in hits.iter().enumerate() {
                let _ = writeln!(table, "{}\t{}\t{}\t{:.6}", i + 1, h.pair_id, h.identity_id, h.score);
            }
            print!("{table}");
        }
        Command::Gradcheck { seed } => {
            let report = run_gradcheck(seed)?;
            for line in &report.lines {
                println!("{:<12} max_rel_error {:.3e} (worst {})", line.target, line.check.max_rel_error, line.check.worst_param);
            }
            let max = report.max_rel_error();
            println!("max_rel_error {max:.3e} tolerance {GRADCHECK_TOLERANCE:.0e} {}", if report.passed() { "pass" } else { "fail" });
            if !report.passed() {
                return Err(Failure { code: NUMERICAL, message: format!("gradient check failed: {max:.3e}") });
            }
        }
        Command::Ablate { config, data, matrix, out } => {
            let cfg = config.load()?;
            let dataset = match data {
                Some(dir) => Dataset::read(&dir)?,
                None => generate_corpus(&cfg.data)?,
            };
            let corpus = Corpus::prepare(dataset, cfg.model.text.max_len)?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            let mut written = Ok(());
            let rows = run_matrix(&corpus, &cfg, matrix.into(), &mut |name, report| {
                eprintln!("{name}: rank1 {:.2} map {:.2}", report.rank1, report.map);
                if written.is_ok() {
                    written = atomic_write(&out.join(format!("{name}.json")), report.to_json().as_bytes());
                }
            })?;
            written?;
            atomic_write(&out.join("comparison.csv"), comparison_csv(&rows).as_bytes())?;
            print!("{}", comparison_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            eprintln!("error:{USAGE}: {first}");
            eprint!("{}", e.render());
            return ExitCode::from(USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error:{}: {}", f.code, f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
