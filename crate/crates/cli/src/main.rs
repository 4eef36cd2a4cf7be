//! `slade` command-line driver. Exit status: 0 on success, 1 for invalid
//! input (flags, config, files), 2 when the pipeline fails at runtime.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slade_core::basis::BasisMatrix;
use slade_core::config::TrainConfig;
use slade_core::data::{LabeledSet, PseudoLabeledSet, UnlabeledSet};
use slade_core::formats::{
    checkpoint_id, load_dataset, load_params, read_pseudo_labels, read_text, write_basis,
    write_dataset, write_kmeans, write_params, write_pseudo_labels, write_text, write_truth,
};
use slade_core::gradcheck::{run_gradcheck, GradcheckOptions};
use slade_core::losses::GaussStats;
use slade_core::model::EmbeddingParams;
use slade_core::report::RunReport;
use slade_core::synth::{generate_synth, SynthSpec};
use slade_core::trainer::{
    basis_rows, evaluate_model, generate_pseudo_labels, run_folds, self_train_from, train_student,
    train_teacher, warmup_basis, ConcatEmbedding, PseudoLabelOptions,
};

#[derive(Debug, Parser)]
#[command(
    name = "slade",
    version,
    about = "Self-training metric learning with basis-mined pairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic seen/unseen benchmark.
    GenData(GenDataArgs),
    /// Fit a teacher on labeled data.
    TrainTeacher(TrainTeacherArgs),
    /// Cluster teacher embeddings of unlabeled data into pseudo labels.
    PseudoLabel(PseudoLabelArgs),
    /// Warm up a basis and train a student on labeled and pseudo-labeled data.
    TrainStudent(TrainStudentArgs),
    /// Run the full teacher/student loop for the configured rounds.
    SelfTrain(PipelineArgs),
    /// Train one student per class fold and concatenate their embeddings.
    RunFolds(PipelineArgs),
    /// Retrieval metrics of one checkpoint, or of several concatenated.
    Evaluate(EvaluateArgs),
    /// Compare every analytic gradient with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    seen: usize,
    #[arg(long, default_value_t = 10)]
    unseen: usize,
    #[arg(long, default_value_t = 30)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    within_std: f64,
    /// Seen classes also present in the unlabeled set.
    #[arg(long, default_value_t = 0)]
    overlap: usize,
    /// Held-out samples per unseen class (default: samples-per-class).
    #[arg(long)]
    test_samples_per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving labeled.txt, unlabeled.txt, truth.txt and test.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainTeacherArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    labeled: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PseudoLabelArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    unlabeled: PathBuf,
    /// Overrides the config cluster count.
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the fitted k-means model.
    #[arg(long)]
    kmeans_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainStudentArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    unlabeled: PathBuf,
    /// Pseudo labels for the unlabeled file.
    #[arg(long)]
    pseudo: PathBuf,
    /// Student initialization, usually the teacher checkpoint.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    basis_out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    unlabeled: PathBuf,
    /// Labeled held-out set evaluated after every round.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Start from this teacher instead of training one.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Directory for checkpoints and report.toml.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// One or more checkpoints; several are concatenated.
    #[arg(long = "params", required = true, num_args = 1..)]
    params: Vec<PathBuf>,
    /// Labeled dataset used as a leave-one-out gallery.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
    ks: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum compared coordinates per check.
    #[arg(long, default_value_t = slade_core::gradcheck::DEFAULT_PROBES)]
    probes: usize,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<slade_core::Error> for CliError {
    fn from(e: slade_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Errors while reading user-supplied files are input errors.
fn input<T>(path: &Path, r: slade_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        slade_core::Error::Io(io) => CliError::Validation(format!("{}: {io}", path.display())),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })
}

fn output(path: &Path, text: &str) -> CliResult<()> {
    write_text(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_config(arg: &ConfigArg) -> CliResult<TrainConfig> {
    let mut cfg = match &arg.config {
        Some(path) => {
            let text = input(path, read_text(path))?;
            input(path, TrainConfig::parse(&text))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = arg.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_labeled(path: &Path) -> CliResult<LabeledSet> {
    input(path, load_dataset(path).and_then(|d| d.into_labeled()))
}

fn load_unlabeled(path: &Path) -> CliResult<UnlabeledSet> {
    input(path, load_dataset(path).map(|d| d.into_unlabeled()))
}

fn load_checkpoint(path: &Path) -> CliResult<EmbeddingParams> {
    input(path, load_params(path))
}

fn write_report(path: &Path, report: &RunReport) -> CliResult<()> {
    output(path, &report.to_toml())
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let spec = SynthSpec {
        seen_classes: a.seen,
        unseen_classes: a.unseen,
        samples_per_class: a.samples_per_class,
        dim: a.dim,
        center_separation: a.separation,
        within_std: a.within_std,
        seed: a.seed,
        overlap_classes: a.overlap,
        test_samples_per_class: a.test_samples_per_class,
    };
    let data = generate_synth(&spec)?;
    output(
        &a.out.join("labeled.txt"),
        &write_dataset(&data.labeled.clone().into()),
    )?;
    output(
        &a.out.join("unlabeled.txt"),
        &write_dataset(&data.unlabeled.clone().into()),
    )?;
    output(&a.out.join("truth.txt"), &write_truth(&data.truth))?;
    output(
        &a.out.join("test.txt"),
        &write_dataset(&data.test.clone().into()),
    )?;
    println!(
        "wrote {} labeled, {} unlabeled and {} test rows to {}",
        data.labeled.len(),
        data.unlabeled.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train_teacher_cmd(a: &TrainTeacherArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let labeled = load_labeled(&a.labeled)?;
    let trained = train_teacher(&labeled, &cfg)?;
    output(&a.out, &write_params(&trained.params))?;
    if let Some(path) = &a.report {
        let mut report = RunReport::new("train-teacher", &cfg);
        report.epochs = trained.epochs;
        report.warnings = trained.warnings;
        write_report(path, &report)?;
    }
    println!("teacher {}", checkpoint_id(&trained.params));
    Ok(())
}

fn pseudo_label_cmd(a: &PseudoLabelArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(k) = a.clusters {
        cfg.clusters = k;
        input(Path::new("--clusters"), cfg.validate())?;
    }
    let teacher = load_checkpoint(&a.teacher)?;
    let unlabeled = load_unlabeled(&a.unlabeled)?;
    let (pseudo, model) = generate_pseudo_labels(
        &teacher,
        &unlabeled,
        PseudoLabelOptions::from_config(&cfg, cfg.seed),
    )?;
    output(&a.out, &write_pseudo_labels(&pseudo))?;
    if let Some(path) = &a.kmeans_out {
        output(path, &write_kmeans(&model))?;
    }
    println!(
        "{} samples in {} clusters, inertia {}",
        pseudo.len(),
        pseudo.k,
        model.inertia
    );
    Ok(())
}

fn train_student_cmd(a: &TrainStudentArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let labeled = load_labeled(&a.labeled)?;
    let unlabeled = load_unlabeled(&a.unlabeled)?;
    let pseudo_text = input(&a.pseudo, read_text(&a.pseudo))?;
    let pseudo: PseudoLabeledSet = input(&a.pseudo, read_pseudo_labels(&pseudo_text, unlabeled))?;
    let init = load_checkpoint(&a.init)?;
    let mut report = RunReport::new("train-student", &cfg);
    let mut stats = GaussStats::new(cfg.beta)?;
    let mut basis = None;
    if cfg.use_basis {
        let start = BasisMatrix::random(basis_rows(&cfg, &labeled)?, init.output_dim(), cfg.seed)?;
        let w = warmup_basis(
            &init,
            start,
            stats,
            &labeled,
            Some(&pseudo),
            cfg.basis_warmup_iters,
            &cfg,
        )?;
        stats = w.stats;
        basis = Some(w.basis);
    }
    let trained = train_student(&labeled, Some(&pseudo), &cfg, &init, basis, stats)?;
    output(&a.out, &write_params(&trained.params))?;
    if let (Some(path), Some(b)) = (&a.basis_out, trained.basis.as_ref()) {
        output(path, &write_basis(b))?;
    }
    if let Some(path) = &a.report {
        report.epochs = trained.epochs;
        report.warnings = trained.warnings;
        write_report(path, &report)?;
    }
    println!("student {}", checkpoint_id(&trained.params));
    Ok(())
}

fn print_eval(label: &str, eval: Option<&slade_core::retrieval::RetrievalReport>) {
    if let Some(e) = eval {
        println!(
            "{label}: MAP@R {:.4}  RP {:.4}  P@1 {:.4}",
            e.map_at_r, e.r_precision, e.p_at_1
        );
    }
}

fn self_train_cmd(a: &PipelineArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let labeled = load_labeled(&a.labeled)?;
    let unlabeled = load_unlabeled(&a.unlabeled)?;
    let eval = a.eval.as_deref().map(load_labeled).transpose()?;
    let mut report = RunReport::new("self-train", &cfg);
    let teacher = match &a.teacher {
        Some(path) => load_checkpoint(path)?,
        None => {
            cfg.validate()?;
            let t = train_teacher(&labeled, &cfg)?;
            report.epochs.extend(t.epochs);
            report.warnings.extend(t.warnings);
            t.params
        }
    };
    output(&a.out_dir.join("teacher.params"), &write_params(&teacher))?;
    let state = self_train_from(&labeled, &unlabeled, eval.as_ref(), &cfg, Some(teacher))?;
    for (round, student) in state.round_students.iter().enumerate() {
        output(
            &a.out_dir.join(format!("student-round{round}.params")),
            &write_params(student),
        )?;
    }
    output(
        &a.out_dir.join("student.params"),
        &write_params(&state.student),
    )?;
    if let Some(b) = &state.basis {
        output(&a.out_dir.join("basis.txt"), &write_basis(b))?;
    }
    if let Some(p) = &state.pseudo {
        output(&a.out_dir.join("pseudo.txt"), &write_pseudo_labels(p))?;
    }
    report.add_history(&state.history);
    report.final_eval = state
        .history
        .rounds()
        .last()
        .and_then(|r| r.student_eval.clone());
    write_report(&a.out_dir.join("report.toml"), &report)?;
    for r in state.history.rounds() {
        print_eval(
            &format!("round {} teacher", r.round),
            r.teacher_eval.as_ref(),
        );
        print_eval(
            &format!("round {} student", r.round),
            r.student_eval.as_ref(),
        );
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("student {}", checkpoint_id(&state.student));
    Ok(())
}

fn run_folds_cmd(a: &PipelineArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    if a.teacher.is_some() {
        return Err(CliError::Validation(
            "run-folds trains its own teachers; drop --teacher".into(),
        ));
    }
    let labeled = load_labeled(&a.labeled)?;
    let unlabeled = load_unlabeled(&a.unlabeled)?;
    let eval = a.eval.as_deref().map(load_labeled).transpose()?;
    let outcome = run_folds(&labeled, &unlabeled, eval.as_ref(), &cfg)?;
    for (f, part) in outcome.model.parts.iter().enumerate() {
        output(
            &a.out_dir.join(format!("fold{f}.params")),
            &write_params(part),
        )?;
    }
    let report = RunReport::from_folds("run-folds", &cfg, &outcome);
    write_report(&a.out_dir.join("report.toml"), &report)?;
    for (f, e) in outcome.fold_evals.iter().enumerate() {
        print_eval(&format!("fold {f}"), e.as_ref());
    }
    print_eval("concatenated", outcome.concat_eval.as_ref());
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> CliResult<()> {
    if a.ks.contains(&0) {
        return Err(CliError::Validation("--ks entries must be >= 1".into()));
    }
    let set = load_labeled(&a.data)?;
    let parts = a
        .params
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<CliResult<Vec<_>>>()?;
    let report = if parts.len() == 1 {
        evaluate_model(&parts[0], &set, &a.ks)?
    } else {
        ConcatEmbedding { parts }.evaluate(&set, &a.ks)?
    };
    let text = toml::to_string(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    match &a.out {
        Some(path) => output(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> CliResult<()> {
    let report = run_gradcheck(&GradcheckOptions {
        seed: a.seed,
        probes: a.probes,
        ..GradcheckOptions::default()
    })?;
    for c in &report.checks {
        println!(
            "{} {:<20} probes {:>5}  max relative error {:.3e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.probes,
            c.max_relative_error
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed at tolerance {:e}",
            report.tolerance
        )))
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => train_teacher_cmd(a),
        Command::PseudoLabel(a) => pseudo_label_cmd(a),
        Command::TrainStudent(a) => train_student_cmd(a),
        Command::SelfTrain(a) => self_train_cmd(a),
        Command::RunFolds(a) => run_folds_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Validation(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
