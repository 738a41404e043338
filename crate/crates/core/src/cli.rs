//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed check or diverged run, 2 usage, parse or
//! I/O error. Probability rows are printed with six decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{weight_stats, AttentionMask, HeadScoreStats};
use crate::error::{Error, Result};
use crate::gradients::{check_alpha_grad, check_vjp, GradCheckSettings, GradCheckStats};
use crate::train::{gen_task, train_on, RunStatus, SyntheticTask, ToyModel, TrainerConfig, TrainingRun};
use crate::transforms::{
    entmax, entmax15_into, entmax_bisect_into, softmax_into, sparsemax, sparsemax_into, LogitVector, Temperature,
    DEFAULT_BISECT_ITERS,
};

#[derive(Debug, Parser)]
#[command(name = "adasparse", version, about = "Sparse and monotonic attention toolkit")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "RUN_OUT_DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the probability vector for some logits.
    Transform {
        #[arg(long, value_enum)]
        kind: TransformKind,
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        temp: f64,
        /// Comma-separated logits.
        #[arg(long, allow_hyphen_values = true)]
        logits: String,
    },
    /// Compare analytic derivatives with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Where to write the JSON report (standard output if omitted).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time a transform over a batch of random rows.
    Bench {
        #[arg(long, value_enum)]
        kind: TransformKind,
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(long, default_value_t = 1024)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
    },
    /// Train the toy model described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Dump encoder attention maps of a trained run for one sample.
    Attmap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Softmax,
    Sparsemax,
    Entmax15,
    /// α-entmax with `--alpha`.
    Entmax,
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Softmax => "softmax",
            TransformKind::Sparsemax => "sparsemax",
            TransformKind::Entmax15 => "entmax15",
            TransformKind::Entmax => "entmax",
        }
    }
}

/// Failure carrying its exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Exit 1: a check failed or a run diverged; outputs were still written.
    Failed(String),
    /// Exit 2: bad flags, bad config, missing artifacts or I/O trouble.
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Failed(m) | CliError::Usage(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// A training run as stored on disk. Only `seed` is required; the task and
/// trainer sections fall back to the copy task and the default trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub task: SyntheticTask,
    #[serde(default)]
    pub trainer: TrainerConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Task and trainer with the run seed filled in.
    pub fn resolved(&self) -> (SyntheticTask, TrainerConfig) {
        let mut task = self.task.clone();
        let mut trainer = self.trainer.clone();
        task.seed = self.seed;
        trainer.seed = self.seed;
        (task, trainer)
    }
}

/// Writes `contents` next to `path` and renames it into place, so readers
/// never see a half-written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut file = fs::File::create(&tmp)?;
    file.write_all(contents)?;
    file.sync_all()?;
    drop(file);
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Formats a probability vector with six decimals. Values are rounded with
/// the largest-remainder rule so the printed entries still sum to exactly 1
/// and exact zeros stay zero.
pub fn format_simplex_row(p: &[f64]) -> String {
    const UNITS: u64 = 1_000_000;
    let total: f64 = p.iter().sum();
    let scaled: Vec<f64> = p.iter().map(|&x| x / total * UNITS as f64).collect();
    let mut units: Vec<u64> = scaled.iter().map(|&x| x.floor() as u64).collect();
    let assigned: u64 = units.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &j in order.iter().take(UNITS.saturating_sub(assigned) as usize) {
        units[j] += 1;
    }
    let mut out = String::new();
    for (j, u) in units.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        let _ = write!(out, "{}.{:06}", u / UNITS, u % UNITS);
    }
    out
}

fn parse_logits(text: &str) -> std::result::Result<Vec<f64>, CliError> {
    let values = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|e| CliError::Usage(format!("cannot parse logits {text:?}: {e}")))?;
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Usage(format!("logits must be finite numbers, got {text:?}")));
    }
    Ok(values)
}

pub fn cmd_transform(
    kind: TransformKind,
    alpha: f64,
    temp: f64,
    logits: &str,
) -> std::result::Result<String, CliError> {
    let z = LogitVector::new(parse_logits(logits)?)?;
    let p = match kind {
        TransformKind::Softmax => crate::transforms::softmax(&z, Temperature::new(temp)?)?,
        TransformKind::Sparsemax => sparsemax(&z)?,
        TransformKind::Entmax15 => crate::transforms::entmax15_exact(&z)?,
        TransformKind::Entmax => entmax(&z, alpha)?,
    };
    Ok(format_simplex_row(p.probs()))
}

/// Per-transform tolerances of the gradient check.
pub const VJP_TOL_SOFTMAX: f64 = 1e-5;
pub const VJP_TOL_SPARSEMAX: f64 = 1e-5;
pub const VJP_TOL_ENTMAX: f64 = 1e-4;
pub const ALPHA_GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub dim: usize,
    pub seed: u64,
    pub checks: BTreeMap<String, GradCheckStats>,
    pub pass: bool,
}

/// Runs every transform check from one seeded generator.
pub fn gradcheck_report(trials: usize, dim: usize, seed: u64) -> Result<GradcheckReport> {
    use crate::transforms::Transform;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = GradCheckSettings {
        trials,
        dim,
        ..GradCheckSettings::default()
    };
    let with_tol = |tol| GradCheckSettings { tol, ..base };
    let mut checks = BTreeMap::new();
    let vjp_cases = [
        (
            "softmax",
            Transform::Softmax {
                temp: Temperature::default(),
            },
            VJP_TOL_SOFTMAX,
        ),
        ("sparsemax", Transform::Sparsemax, VJP_TOL_SPARSEMAX),
        ("entmax15", Transform::Entmax15, VJP_TOL_ENTMAX),
        (
            "entmax_bisect_1.3",
            Transform::EntmaxBisect {
                alpha: 1.3,
                iters: DEFAULT_BISECT_ITERS,
            },
            VJP_TOL_ENTMAX,
        ),
    ];
    for (name, t, tol) in vjp_cases {
        checks.insert(name.to_string(), check_vjp(&t, &with_tol(tol), &mut rng)?);
    }
    for alpha in [1.3, 1.5, 1.7] {
        checks.insert(
            format!("alpha_grad_{alpha}"),
            check_alpha_grad(alpha, &with_tol(ALPHA_GRAD_TOL), &mut rng)?,
        );
    }
    let pass = checks.values().all(|c| c.pass);
    Ok(GradcheckReport {
        trials,
        dim,
        seed,
        checks,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub kind: TransformKind,
    pub dim: usize,
    pub batch: usize,
    pub ns_per_row_mean: f64,
    pub ns_per_row_std: f64,
}

impl BenchResult {
    pub const CSV_HEADER: &'static str = "kind,dim,batch,ns_per_row_mean,ns_per_row_std";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6}",
            self.kind.name(),
            self.dim,
            self.batch,
            self.ns_per_row_mean,
            self.ns_per_row_std
        )
    }
}

/// Times `iters` passes over a `batch × dim` block of standard-normal logits
/// after one untimed warm-up pass.
pub fn bench_transform(
    kind: TransformKind,
    dim: usize,
    batch: usize,
    iters: usize,
    alpha: f64,
    seed: u64,
) -> Result<BenchResult> {
    if dim == 0 || batch == 0 || iters == 0 {
        return Err(Error::InvalidArgument("bench sizes must be positive".into()));
    }
    if kind == TransformKind::Entmax && !(alpha > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "bench entmax needs alpha > 1, got {alpha}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let data: Vec<f64> = (0..dim * batch).map(|_| rng.sample::<f64, _>(normal)).collect();
    let mut out = vec![0.0; dim];
    let mut pass = || {
        for row in data.chunks_exact(dim) {
            match kind {
                TransformKind::Softmax => softmax_into(row, 1.0, &mut out),
                TransformKind::Sparsemax => {
                    sparsemax_into(row, &mut out);
                }
                TransformKind::Entmax15 => {
                    entmax15_into(row, &mut out);
                }
                TransformKind::Entmax => {
                    entmax_bisect_into(row, alpha, DEFAULT_BISECT_ITERS, &mut out);
                }
            }
            std::hint::black_box(&mut out);
        }
    };
    pass();
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        pass();
        samples.push(start.elapsed().as_nanos() as f64 / batch as f64);
    }
    let mean = samples.iter().sum::<f64>() / iters as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / iters as f64;
    Ok(BenchResult {
        kind,
        dim,
        batch,
        ns_per_row_mean: mean,
        ns_per_row_std: var.sqrt(),
    })
}

/// `heads.json` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub id: usize,
    pub mean_selection_prob: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsReport {
    pub heads: Vec<HeadSummary>,
    pub token_accuracy: f64,
    pub alignment_accuracy: f64,
}

/// Output directory: `--out` (or `RUN_OUT_DIR`) wins over the config's
/// `out_dir`, which wins over `./run`.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("run"))
}

pub fn trace_csv(run: &TrainingRun) -> String {
    let mut out = String::from("step,loss");
    for h in &run.trace.alpha_heads {
        let _ = write!(out, ",alpha_h{h}");
    }
    out.push('\n');
    for row in &run.trace.rows {
        let _ = write!(out, "{},{:.6}", row.step, row.loss);
        for a in &row.alphas {
            let _ = write!(out, ",{a:.6}");
        }
        out.push('\n');
    }
    out
}

/// Hard alignment paths of every monotonic head on the held-out samples,
/// with the end sentinel written as -1.
pub fn alignment_csv(model: &ToyModel, task: &SyntheticTask) -> Result<String> {
    let data = gen_task(task)?;
    let (train, eval) = data.split();
    let offset = if std::ptr::eq(train.as_ptr(), eval.as_ptr()) {
        0
    } else {
        train.len()
    };
    let mut out = String::from("sample,step,gold");
    for m in 0..model.mono.len() {
        let _ = write!(out, ",t_h{m}");
    }
    out.push('\n');
    for (k, sample) in eval.iter().enumerate() {
        let dec = model.greedy_decode(sample.frames.view(), sample.tokens.len())?;
        for (i, &g) in sample.gold.iter().enumerate() {
            let _ = write!(out, "{},{},{}", offset + k, i, g);
            for path in &dec.paths {
                match path.t[i] {
                    Some(t) => {
                        let _ = write!(out, ",{t}");
                    }
                    None => out.push_str(",-1"),
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// `heads.json`: one entry per monotonic head. `alpha` is the α of the
/// encoder head with the same index (1 when there is none).
pub fn heads_report(run: &TrainingRun) -> HeadsReport {
    let alphas = run.model.alphas();
    let eval = run.trace.eval.as_ref();
    let selection = eval.map(|e| e.head_mean_selection.clone()).unwrap_or_default();
    let heads = (0..run.model.mono.len())
        .map(|id| HeadSummary {
            id,
            mean_selection_prob: selection.get(id).copied().unwrap_or(f64::NAN),
            alpha: alphas.get(id).copied().unwrap_or(1.0),
        })
        .collect();
    HeadsReport {
        heads,
        token_accuracy: run.trace.token_accuracy(),
        alignment_accuracy: run.trace.alignment_accuracy(),
    }
}

fn histogram_csv(run: &TrainingRun) -> String {
    let mut out = String::from("head,kind,bin_lo,bin_hi,count\n");
    if let Some(eval) = &run.trace.eval {
        for (h, stats) in eval.encoder_stats.iter().enumerate() {
            let kind = run.model.encoder_heads[h].name();
            for (b, count) in stats.histogram.iter().enumerate() {
                let lo = b as f64 / stats.histogram.len() as f64;
                let hi = (b + 1) as f64 / stats.histogram.len() as f64;
                let _ = writeln!(out, "{h},{kind},{lo:.6},{hi:.6},{count}");
            }
        }
    }
    out
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Trains and writes `trace.csv`, `alignment.csv`, `heads.json`,
/// `histogram.csv`, `model.json` and `config.json` under `out_dir`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> std::result::Result<TrainingRun, CliError> {
    let (task, trainer) = cfg.resolved();
    let data = gen_task(&task)?;
    let run = train_on(&trainer, &task, &data)?;
    write_atomic(&out_dir.join("trace.csv"), trace_csv(&run).as_bytes())?;
    write_atomic(&out_dir.join("config.json"), &to_json(cfg)?)?;
    write_atomic(&out_dir.join("model.json"), &to_json(&run.model)?)?;
    match run.trace.status {
        RunStatus::Diverged { step } => Err(CliError::Failed(format!(
            "training diverged at step {step}; partial trace in {}",
            out_dir.display()
        ))),
        RunStatus::Converged => {
            write_atomic(
                &out_dir.join("alignment.csv"),
                alignment_csv(&run.model, &task)?.as_bytes(),
            )?;
            write_atomic(&out_dir.join("heads.json"), &to_json(&heads_report(&run))?)?;
            write_atomic(&out_dir.join("histogram.csv"), histogram_csv(&run).as_bytes())?;
            Ok(run)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttmapHead {
    pub head: usize,
    pub kind: &'static str,
    pub alpha: f64,
    pub file: String,
    #[serde(flatten)]
    pub stats: HeadScoreStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttmapSummary {
    pub sample: usize,
    pub heads: Vec<AttmapHead>,
}

/// Reads `model.json` from a finished run and writes one attention CSV per
/// encoder head for sample `k`, plus `attmap_summary.json`.
pub fn cmd_attmap(cfg: &RunConfig, out_dir: &Path, k: usize) -> std::result::Result<AttmapSummary, CliError> {
    let model_path = out_dir.join("model.json");
    let text = fs::read_to_string(&model_path)
        .map_err(|e| CliError::Usage(format!("no trained run at {}: {e}", model_path.display())))?;
    let model: ToyModel =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", model_path.display())))?;
    let (task, _) = cfg.resolved();
    let data = gen_task(&task)?;
    let sample = data
        .samples
        .get(k)
        .ok_or_else(|| CliError::Usage(format!("sample {k} out of range (task has {})", data.samples.len())))?;
    let att = model
        .encoder_attention(sample.frames.view())?
        .ok_or_else(|| CliError::Usage("model has no encoder self-attention".into()))?;
    let mut heads = Vec::with_capacity(att.heads.len());
    for (h, head) in att.heads.iter().enumerate() {
        let file = format!("attmap_s{k}_h{h}.csv");
        let mut csv = String::new();
        for row in head.weights.rows() {
            csv.push_str(&format_simplex_row(&row.to_vec()));
            csv.push('\n');
        }
        write_atomic(&out_dir.join(&file), csv.as_bytes())?;
        let mask = AttentionMask::full(head.weights.nrows(), head.weights.ncols());
        heads.push(AttmapHead {
            head: h,
            kind: att.kinds[h].name(),
            alpha: att.kinds[h].alpha(),
            file,
            stats: weight_stats(head.weights.view(), &mask),
        });
    }
    let summary = AttmapSummary { sample: k, heads };
    write_atomic(&out_dir.join("attmap_summary.json"), &to_json(&summary)?)?;
    Ok(summary)
}

/// Runs a parsed command, printing results to standard output.
pub fn run(cli: Cli) -> std::result::Result<(), CliError> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Transform {
            kind,
            alpha,
            temp,
            logits,
        } => {
            println!("{}", cmd_transform(kind, alpha, temp, &logits)?);
            Ok(())
        }
        Command::Gradcheck { trials, dim, report } => {
            if trials == 0 || dim == 0 {
                return Err(CliError::Usage("--trials and --dim must be positive".into()));
            }
            let rep = gradcheck_report(trials, dim, seed)?;
            let json = to_json(&rep)?;
            match &report {
                Some(path) => {
                    write_atomic(path, &json)?;
                    for (name, c) in &rep.checks {
                        println!(
                            "{name},{:e},{},{}",
                            c.max_rel_err,
                            c.checked,
                            if c.pass { "pass" } else { "fail" }
                        );
                    }
                }
                None => print!("{}", String::from_utf8_lossy(&json)),
            }
            if rep.pass {
                Ok(())
            } else {
                Err(CliError::Failed("gradient check exceeded tolerance".into()))
            }
        }
        Command::Bench {
            kind,
            dim,
            batch,
            iters,
            alpha,
        } => {
            let r = bench_transform(kind, dim, batch, iters, alpha, seed)?;
            println!("{}", BenchResult::CSV_HEADER);
            println!("{}", r.csv_row());
            Ok(())
        }
        Command::Train { config } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = resolve_out_dir(cli.out.as_deref(), &cfg);
            let run = cmd_train(&cfg, &out)?;
            println!(
                "token_accuracy={:.6} alignment_accuracy={:.6} out={}",
                run.trace.token_accuracy(),
                run.trace.alignment_accuracy(),
                out.display()
            );
            Ok(())
        }
        Command::Attmap { config, sample } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = resolve_out_dir(cli.out.as_deref(), &cfg);
            let summary = cmd_attmap(&cfg, &out, sample)?;
            for h in &summary.heads {
                println!("{},{},{:.6},{:.6}", h.head, h.kind, h.alpha, h.stats.zero_fraction);
            }
            Ok(())
        }
    }
}

/// Entry point shared by the binary: parses `args`, runs, returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_examples() {
        assert_eq!(
            cmd_transform(TransformKind::Entmax, 1.5, 1.0, "1,0").unwrap(),
            "0.830719,0.169281"
        );
        assert_eq!(
            cmd_transform(TransformKind::Softmax, 1.5, 1.0, "0,0").unwrap(),
            "0.500000,0.500000"
        );
        assert_eq!(
            cmd_transform(TransformKind::Sparsemax, 1.5, 1.0, "1,0").unwrap(),
            "1.000000,0.000000"
        );
        assert_eq!(
            cmd_transform(TransformKind::Softmax, 1.5, 0.5, "1,0").unwrap(),
            "0.880797,0.119203"
        );
        assert!(matches!(
            cmd_transform(TransformKind::Softmax, 1.5, 1.0, "1,x"),
            Err(CliError::Usage(_))
        ));
        assert!(cmd_transform(TransformKind::Softmax, 1.5, 1.0, "-1,-2").is_ok());
    }

    #[test]
    fn simplex_rows_sum_to_one_after_rounding() {
        let p = vec![1.0 / 3.0; 3];
        assert_eq!(format_simplex_row(&p), "0.333334,0.333333,0.333333");
        let p = [0.5, 0.0, 0.5];
        assert_eq!(format_simplex_row(&p), "0.500000,0.000000,0.500000");
        let p: Vec<f64> = (1..=7).map(|k| k as f64 / 28.0).collect();
        let total: u64 = format_simplex_row(&p)
            .split(',')
            .map(|t| t.replace('.', "").parse::<u64>().unwrap())
            .sum();
        assert_eq!(total, 1_000_000);
    }

    #[test]
    fn run_config_requires_seed_and_rejects_unknown_keys() {
        assert!(RunConfig::from_json("{}").is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "trainer": {"stepz": 2}}"#).is_err());
        let cfg = RunConfig::from_json(r#"{"seed": 7, "trainer": {"steps": 0}}"#).unwrap();
        let (task, trainer) = cfg.resolved();
        assert_eq!((task.seed, trainer.seed, trainer.steps), (7, 7, 0));
        assert_eq!(task.vocab_size, 16);
    }

    #[test]
    fn bench_reports_zero_std_for_one_iteration() {
        let r = bench_transform(TransformKind::Entmax15, 16, 4, 1, 1.5, 0).unwrap();
        assert_eq!(r.ns_per_row_std, 0.0);
        assert!(r.ns_per_row_mean > 0.0 && r.ns_per_row_mean.is_finite());
        assert!(r.csv_row().starts_with("entmax15,16,4,"));
    }

    #[test]
    fn gradcheck_report_is_deterministic() {
        let a = gradcheck_report(10, 6, 3).unwrap();
        let b = gradcheck_report(10, 6, 3).unwrap();
        assert!(a.pass);
        assert_eq!(to_json(&a).unwrap(), to_json(&b).unwrap());
        let one = gradcheck_report(5, 1, 0).unwrap();
        assert!(one.pass && one.checks.values().all(|c| c.max_rel_err == 0.0));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(
            main_with_args(["adasparse", "transform", "--kind", "softmax", "--logits", "0,0"]),
            0
        );
        assert_eq!(
            main_with_args(["adasparse", "transform", "--kind", "softmax", "--logits", "a"]),
            2
        );
        assert_eq!(
            main_with_args(["adasparse", "transform", "--kind", "nope", "--logits", "0"]),
            2
        );
        assert_eq!(main_with_args(["adasparse", "bogus"]), 2);
    }
}
