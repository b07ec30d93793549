mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hftt_core::synth::{write_lines, DEFAULT_CORPUS_TEMPLATE};
use hftt_core::theory::transfer_fixture;
use hftt_core::{
    ensemble_store, eval_report, export_scores, load_model, load_store, load_templates,
    load_word_set, read_scores, run_theory, save_model, save_store, score_baseline, score_hftt,
    train, word2data, DetectorModel, Error, ErrorClass, EvalReport, PromptTemplate, Result,
    ScoreMethod, TaskEmbeddings,
};

use config::TrainSettings;

#[derive(Parser)]
#[command(
    name = "hftt",
    version,
    about = "Train and apply unwanted-content detectors from text embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthMode {
    /// Fill templates with every word of a large vocabulary
    Corpus,
    /// Fill templates with the in-distribution class names
    Indist,
}

#[derive(Subcommand)]
enum Command {
    /// Expand words through prompt templates into one text per line
    Synth {
        /// One template per line, each containing `{}` [default: "This is a photo of a {}."]
        #[arg(long)]
        templates: Option<PathBuf>,
        /// One word or class name per line
        #[arg(long)]
        words: PathBuf,
        #[arg(long, value_enum, default_value = "corpus")]
        mode: SynthMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average prompt embeddings per class into task embeddings
    Ensemble {
        /// Prompt embeddings laid out class-major, equally many per class
        #[arg(long)]
        prompts: PathBuf,
        /// Class names, one per line, in the order of the prompt blocks
        #[arg(long)]
        names: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn trainable embeddings against frozen task embeddings
    Train {
        /// Task embeddings (.hemb)
        #[arg(long)]
        task: PathBuf,
        /// In-distribution text embeddings (.hemb)
        #[arg(long)]
        indist: PathBuf,
        /// Corpus text embeddings (.hemb)
        #[arg(long)]
        corpus: PathBuf,
        /// `key = value` settings file; flags take precedence
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model directory to write; also receives report.json
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: TrainSettings,
    },
    /// Score embeddings, higher meaning more likely out-of-distribution
    Score {
        /// Trained model directory (required for hftt)
        #[arg(long)]
        model: Option<PathBuf>,
        /// Task embeddings for training-free methods
        #[arg(long, conflicts_with = "model")]
        task: Option<PathBuf>,
        /// Embeddings to score (.hemb)
        #[arg(long)]
        input: PathBuf,
        /// hftt, msp, maxlogit, energy or mcm
        #[arg(long, default_value = "hftt")]
        method: ScoreMethod,
        /// Defaults to the model's temperature, else the input store's
        #[arg(long)]
        temperature: Option<f64>,
        /// Output CSV with `id,score` rows
        #[arg(long)]
        out: PathBuf,
    },
    /// AUROC and FPR at 95% TPR from two score files
    Eval {
        /// Scores of in-distribution samples
        #[arg(long)]
        id: PathBuf,
        /// Scores of out-of-distribution samples
        #[arg(long)]
        ood: PathBuf,
        /// Labels for the table row [default: file stems]
        #[arg(long)]
        id_name: Option<String>,
        #[arg(long)]
        ood_name: Option<String>,
        /// JSON report path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the bimodal toy problem and check transfer to the image side
    Theory {
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Samples per class and modality
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        /// Falls back to $HFTT_SEED [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// JSON report path
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the sampled sets plus a ready-to-train task and corpus here
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

fn synth(templates: Option<&Path>, words: &Path, mode: SynthMode, out: &Path) -> Result<()> {
    let templates = match templates {
        Some(p) => load_templates(p)?,
        None => match mode {
            SynthMode::Corpus => vec![PromptTemplate::new(DEFAULT_CORPUS_TEMPLATE)?],
            SynthMode::Indist => vec![PromptTemplate::identity()],
        },
    };
    let words = load_word_set(words)?;
    let lines = word2data(words.words(), &templates)?;
    write_lines(out, &lines)?;
    println!("{} texts -> {}", lines.len(), out.display());
    Ok(())
}

fn ensemble(prompts: &Path, names: &Path, out: &Path) -> Result<()> {
    let store = load_store(prompts)?;
    let names = load_word_set(names)?;
    let task = ensemble_store(&store, names.words())?;
    save_store(&task.to_store(store.temperature())?, out)?;
    println!("{} task embeddings -> {}", task.len(), out.display());
    Ok(())
}

fn train_cmd(
    task: &Path,
    indist: &Path,
    corpus: &Path,
    config: Option<&Path>,
    out: &Path,
    flags: TrainSettings,
) -> Result<()> {
    let file = match config {
        Some(p) => TrainSettings::from_file(p)?,
        None => TrainSettings::default(),
    };
    let cfg = flags.or(file).resolve(config::env_seed()?);
    let task = TaskEmbeddings::from_store(&load_store(task)?)?;
    let indist = load_store(indist)?;
    let corpus = load_store(corpus)?;
    let report = train(&cfg, &task, &indist, &corpus)?;
    save_model(&report.final_model, out, Some(&cfg))?;
    write_json(&out.join("report.json"), &report.to_json())?;
    println!(
        "{} steps, final loss {}, model -> {}",
        report.steps,
        report
            .loss_trace
            .last()
            .map_or_else(|| "n/a".to_owned(), |l| format!("{l:.6}")),
        out.display()
    );
    Ok(())
}

fn score_cmd(
    model: Option<&Path>,
    task: Option<&Path>,
    input: &Path,
    method: ScoreMethod,
    temperature: Option<f64>,
    out: &Path,
) -> Result<()> {
    let x = load_store(input)?;
    let set = match (method, model) {
        (ScoreMethod::Hftt, None) => {
            return Err(Error::validation("method hftt needs --model"));
        }
        (ScoreMethod::Hftt, Some(dir)) => {
            let m = load_model(dir)?;
            match temperature {
                Some(t) => {
                    let m = DetectorModel::new(m.task().clone(), m.trainable().to_vec(), t)?;
                    score_hftt(&m, &x)?
                }
                None => score_hftt(&m, &x)?,
            }
        }
        (m, Some(dir)) => {
            let model = load_model(dir)?;
            let tau = temperature.unwrap_or(model.temperature());
            score_baseline(m, model.task(), &x, tau)?
        }
        (m, None) => {
            let path = task
                .ok_or_else(|| Error::validation(format!("method {m} needs --task or --model")))?;
            let task = TaskEmbeddings::from_store(&load_store(path)?)?;
            let tau = temperature.unwrap_or(f64::from(x.temperature()));
            score_baseline(m, &task, &x, tau)?
        }
    };
    export_scores(&set, out)?;
    println!("{} {} scores -> {}", set.len(), method, out.display());
    Ok(())
}

fn eval_cmd(
    id: &Path,
    ood: &Path,
    id_name: Option<String>,
    ood_name: Option<String>,
    out: Option<&Path>,
) -> Result<()> {
    let id_set = read_scores(id)?;
    let ood_set = read_scores(ood)?;
    let id_name = id_name.unwrap_or_else(|| file_stem(id));
    let ood_name = ood_name.unwrap_or_else(|| file_stem(ood));
    let report = eval_report(&id_set, &ood_set, (&id_name, &ood_name))?;
    println!("{}", EvalReport::render_header());
    println!("{}", report.render_row());
    if let Some(p) = out {
        write_json(
            p,
            &serde_json::to_value(&report).expect("report serializes"),
        )?;
    }
    Ok(())
}

fn theory_cmd(
    dim: usize,
    samples: usize,
    noise: f64,
    seed: Option<u64>,
    out: Option<&Path>,
    dump_dir: Option<&Path>,
) -> Result<()> {
    let seed = seed.or(config::env_seed()?).unwrap_or(0);
    let (report, sample) = run_theory(dim, samples, noise, seed)?;
    println!(
        "cosine(fitted, closed form) {:.6}, corollary holds: {}, sign accuracy {:.4}",
        report.cosine, report.corollary.holds, report.accuracy
    );
    if let Some(p) = out {
        write_json(
            p,
            &serde_json::to_value(&report).expect("report serializes"),
        )?;
    }
    if let Some(dir) = dump_dir {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let fx = transfer_fixture(&sample, seed)?;
        let tau = sample.u_minus.temperature();
        for (name, store) in [
            ("u_minus", &sample.u_minus),
            ("u_plus", &sample.u_plus),
            ("v_minus", &sample.v_minus),
            ("v_plus", &sample.v_plus),
            ("corpus", &fx.corpus),
        ] {
            save_store(store, &dir.join(format!("{name}.hemb")))?;
        }
        save_store(&fx.task.to_store(tau)?, &dir.join("task.hemb"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            templates,
            words,
            mode,
            out,
        } => synth(templates.as_deref(), &words, mode, &out),
        Command::Ensemble {
            prompts,
            names,
            out,
        } => ensemble(&prompts, &names, &out),
        Command::Train {
            task,
            indist,
            corpus,
            config,
            out,
            settings,
        } => train_cmd(&task, &indist, &corpus, config.as_deref(), &out, settings),
        Command::Score {
            model,
            task,
            input,
            method,
            temperature,
            out,
        } => score_cmd(
            model.as_deref(),
            task.as_deref(),
            &input,
            method,
            temperature,
            &out,
        ),
        Command::Eval {
            id,
            ood,
            id_name,
            ood_name,
            out,
        } => eval_cmd(&id, &ood, id_name, ood_name, out.as_deref()),
        Command::Theory {
            dim,
            samples,
            noise,
            seed,
            out,
            dump_dir,
        } => theory_cmd(
            dim,
            samples,
            noise,
            seed,
            out.as_deref(),
            dump_dir.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Io => 1,
                ErrorClass::Validation => 2,
                ErrorClass::Numerical => 3,
            })
        }
    }
}
