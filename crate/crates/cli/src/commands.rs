use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gmpool::analysis::{self, HeatmapFormat, DEFAULT_THRESHOLDS};
use gmpool::graph_data::{self, load_jsonl, save_jsonl};
use gmpool::linalg;
use gmpool::pooling::{effective_clusters_from, iterative_decompose, IterativeConfig, Scheme};
use gmpool::training::{self, trace_csv, Loss, Metric};
use gmpool::{Dataset, Model, SyntheticSpec, Tensor, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{announce, layered, set};
use crate::{AnalyzeArgs, DecomposeArgs, EvalArgs, Failure, SizeFilter, SynthArgs, TrainArgs};

fn parse_choice<T: DeserializeOwned>(
    flag: &str,
    value: Option<String>,
) -> Result<Option<T>, Failure> {
    value
        .map(|v| {
            serde_json::from_value(serde_json::Value::String(v.clone()))
                .map_err(|_| Failure::usage(format!("--{flag}: unsupported value `{v}`")))
        })
        .transpose()
}

fn required<'a, T>(value: &'a Option<T>, name: &str) -> Result<&'a T, Failure> {
    value.as_ref().ok_or_else(|| {
        Failure::usage(format!(
            "missing required setting `{name}` (flag --{})",
            name.replace('_', "-")
        ))
    })
}

fn invalid(e: gmpool::Error) -> Failure {
    Failure::usage(e.to_string())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    write_file(
        path,
        serde_json::to_string_pretty(value).expect("serializable") + "\n",
    )
}

fn load_dataset(
    path: &Path,
    min_nodes: Option<usize>,
    max_nodes: Option<usize>,
) -> Result<Dataset, Failure> {
    let ds = load_jsonl(path).map_err(|e| match e {
        gmpool::Error::Io { .. } => Failure::runtime(e.to_string()),
        other => Failure::runtime(format!("{}: {other}", path.display())),
    })?;
    let before = ds.len();
    let ds = ds.filter_by_size(min_nodes, max_nodes);
    println!(
        "loaded {} graphs from {} ({} kept by the size filter)",
        before,
        path.display(),
        ds.len()
    );
    Ok(ds)
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    Model::load(path).map_err(|e| match e {
        gmpool::Error::Io { .. } => Failure::runtime(e.to_string()),
        other => Failure::runtime(format!("{}: {other}", path.display())),
    })
}

fn apply_filter(
    min: &mut Option<usize>,
    max: &mut Option<usize>,
    f: &SizeFilter,
) -> Result<(), Failure> {
    if f.min_nodes.is_some() {
        *min = f.min_nodes;
    }
    if f.max_nodes.is_some() {
        *max = f.max_nodes;
    }
    match (*min, *max) {
        (Some(a), Some(b)) if a > b => Err(Failure::usage(format!(
            "min_nodes {a} exceeds max_nodes {b}"
        ))),
        _ => Ok(()),
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthSettings {
    out: Option<PathBuf>,
    spec: SyntheticSpec,
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mut s: SynthSettings = layered(a.config.as_deref())?;
    set(&mut s.out, a.out.map(Some));
    set(&mut s.spec.groups, a.groups);
    set(&mut s.spec.group_size, a.size_range);
    set(&mut s.spec.inter_group_edges, a.bridges);
    set(&mut s.spec.noise, a.noise);
    set(&mut s.spec.count, a.count);
    set(&mut s.spec.node_dim, a.node_dim);
    set(&mut s.spec.target_rule, parse_choice("target", a.target)?);
    set(&mut s.spec.seed, a.seed);
    let out = required(&s.out, "out")?.clone();
    s.spec.validate().map_err(invalid)?;
    announce("synth", &s, None)?;
    let ds = graph_data::generate_synthetic(&s.spec)?;
    save_jsonl(&ds, &out)?;
    println!("wrote {} graphs to {}", ds.len(), out.display());
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSettings {
    data: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    min_nodes: Option<usize>,
    max_nodes: Option<usize>,
    training: TrainConfig,
}

#[derive(Serialize)]
struct FoldSummary {
    fold: usize,
    best_epoch: usize,
    initial_train_loss: f64,
    final_train_loss: f64,
    test_loss: Option<f64>,
    test_metric: Option<f64>,
    checkpoint: String,
}

#[derive(Serialize)]
struct TrainSummary {
    graphs: usize,
    metric: &'static str,
    mean_test_metric: Option<f64>,
    test_indices: Vec<usize>,
    folds: Vec<FoldSummary>,
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut s: TrainSettings = layered(a.config.as_deref())?;
    set(&mut s.data, a.data.map(Some));
    set(&mut s.out_dir, a.out_dir.map(Some));
    apply_filter(&mut s.min_nodes, &mut s.max_nodes, &a.filter)?;
    let t = &mut s.training;
    set(&mut t.lr, a.lr);
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch);
    set(&mut t.seed, a.seed);
    set(&mut t.folds, a.folds);
    set(&mut t.test_fraction, a.test_fraction);
    set(&mut t.parallel_folds, a.parallel_folds);
    set(&mut t.stop_at_train_ratio, a.stop_at_train_ratio.map(Some));
    set(&mut t.loss, parse_choice("loss", a.loss)?.map(Some));
    let m = &mut t.model;
    set(&mut m.pooling, parse_choice("pooling", a.pooling)?);
    set(&mut m.readout, parse_choice("readout", a.readout)?);
    set(&mut m.hidden, a.hidden);
    set(&mut m.steps_pre, a.steps_pre);
    set(&mut m.steps_post, a.steps_post);
    set(&mut m.dropout, a.dropout);
    set(&mut m.clamp_diagonal, a.clamp_diagonal);
    if let Some(floor) = a.eigengap_floor {
        m.eig = gmpool::EigBackwardConfig::new(floor).map_err(invalid)?;
    }
    let data = required(&s.data, "data")?.clone();
    let out_dir = required(&s.out_dir, "out_dir")?.clone();
    s.training.validate().map_err(invalid)?;
    announce("train", &s, Some(&out_dir))?;

    let ds = load_dataset(&data, s.min_nodes, s.max_nodes)?;
    let outcome = training::train(&ds, &s.training)?;
    let mut folds = Vec::new();
    for f in &outcome.folds {
        let name = format!("fold_{}.json", f.fold);
        f.model.save(out_dir.join(&name))?;
        let test = f.test.as_ref();
        println!(
            "fold {}: best epoch {}, train loss {:.6} -> {:.6}, test {} {}",
            f.fold,
            f.best_epoch,
            f.initial_train_loss,
            f.final_train_loss,
            outcome.metric.name(),
            test.and_then(|t| t.metric)
                .map_or("n/a".to_string(), |v| format!("{v:.6}"))
        );
        folds.push(FoldSummary {
            fold: f.fold,
            best_epoch: f.best_epoch,
            initial_train_loss: f.initial_train_loss,
            final_train_loss: f.final_train_loss,
            test_loss: test.map(|t| t.loss),
            test_metric: test.and_then(|t| t.metric),
            checkpoint: name,
        });
    }
    write_file(&out_dir.join("metrics.csv"), trace_csv(&outcome.trace()))?;
    let summary = TrainSummary {
        graphs: ds.len(),
        metric: outcome.metric.name(),
        mean_test_metric: outcome.mean_test_metric(),
        test_indices: outcome.test_indices.clone(),
        folds,
    };
    json_file(&out_dir.join("summary.json"), &summary)?;
    println!("artifacts written to {}", out_dir.display());
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSettings {
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    predictions: Option<PathBuf>,
    loss: Option<Loss>,
    min_nodes: Option<usize>,
    max_nodes: Option<usize>,
}

#[derive(Serialize)]
struct EvalReport {
    graphs: usize,
    loss: Loss,
    loss_value: f64,
    metric: &'static str,
    metric_value: Option<f64>,
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let mut s: EvalSettings = layered(a.config.as_deref())?;
    set(&mut s.data, a.data.map(Some));
    set(&mut s.checkpoint, a.checkpoint.map(Some));
    set(&mut s.out, a.out.map(Some));
    set(&mut s.predictions, a.predictions.map(Some));
    set(&mut s.loss, parse_choice("loss", a.loss)?.map(Some));
    apply_filter(&mut s.min_nodes, &mut s.max_nodes, &a.filter)?;
    let data = required(&s.data, "data")?.clone();
    let ckpt = required(&s.checkpoint, "checkpoint")?.clone();
    announce("eval", &s, None)?;

    let model = load_model(&ckpt)?;
    let ds = load_dataset(&data, s.min_nodes, s.max_nodes)?;
    if ds.is_empty() {
        return Err(Failure::runtime("no graphs to evaluate"));
    }
    let loss = s.loss.unwrap_or(Loss::for_task(model.task));
    let ev = training::evaluate(&model, &ds, loss)?;
    let metric = Metric::for_task(model.task);
    let report = EvalReport {
        graphs: ds.len(),
        loss,
        loss_value: ev.loss,
        metric: metric.name(),
        metric_value: ev.metric,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable")
    );
    if let Some(out) = &s.out {
        json_file(out, &report)?;
    }
    if let Some(path) = &s.predictions {
        let mut csv = String::from("index,label,prediction\n");
        for (k, g) in ds.graphs.iter().enumerate() {
            let y = g.label.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(csv, "{k},{y},{}", model.predict(g)?);
        }
        write_file(path, csv)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum HeatmapChoice {
    Csv,
    Pgm,
    Both,
    None,
}

impl HeatmapChoice {
    fn formats(self) -> Vec<(HeatmapFormat, &'static str)> {
        match self {
            Self::Csv => vec![(HeatmapFormat::Csv, "csv")],
            Self::Pgm => vec![(HeatmapFormat::Pgm, "pgm")],
            Self::Both => vec![(HeatmapFormat::Csv, "csv"), (HeatmapFormat::Pgm, "pgm")],
            Self::None => vec![],
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AnalyzeSettings {
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    /// Sorted ascending before use.
    thresholds: Vec<f64>,
    heatmaps: HeatmapChoice,
    max_heatmaps: Option<usize>,
    min_nodes: Option<usize>,
    max_nodes: Option<usize>,
}

impl Default for AnalyzeSettings {
    fn default() -> Self {
        Self {
            data: None,
            checkpoint: None,
            out_dir: None,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            heatmaps: HeatmapChoice::Pgm,
            max_heatmaps: None,
            min_nodes: None,
            max_nodes: None,
        }
    }
}

#[derive(Serialize)]
struct AnalysisOutput<'a> {
    histogram: &'a analysis::ClusterHistogram,
    modes: Vec<Option<usize>>,
    report: analysis::ClusterReport,
}

pub fn analyze(a: AnalyzeArgs) -> Result<(), Failure> {
    let mut s: AnalyzeSettings = layered(a.config.as_deref())?;
    set(&mut s.data, a.data.map(Some));
    set(&mut s.checkpoint, a.checkpoint.map(Some));
    set(&mut s.out_dir, a.out_dir.map(Some));
    set(&mut s.thresholds, a.thresholds);
    set(&mut s.heatmaps, parse_choice("heatmaps", a.heatmaps)?);
    set(&mut s.max_heatmaps, a.max_heatmaps.map(Some));
    apply_filter(&mut s.min_nodes, &mut s.max_nodes, &a.filter)?;
    if s.thresholds.is_empty() || s.thresholds.iter().any(|t| !t.is_finite()) {
        return Err(Failure::usage(
            "thresholds must be a non-empty list of finite numbers",
        ));
    }
    s.thresholds.sort_by(f64::total_cmp);
    s.thresholds.dedup();
    let data = required(&s.data, "data")?.clone();
    let ckpt = required(&s.checkpoint, "checkpoint")?.clone();
    let out_dir = required(&s.out_dir, "out_dir")?.clone();
    announce("analyze", &s, Some(&out_dir))?;

    let model = load_model(&ckpt)?;
    let ds = load_dataset(&data, s.min_nodes, s.max_nodes)?;
    if ds.is_empty() {
        return Err(Failure::runtime("no graphs to analyze"));
    }
    let mats = analysis::grouping_matrices(&ds, &model)?;
    let hist = analysis::histogram_of(&mats, &s.thresholds)?;
    let sizes: Vec<usize> = ds.graphs.iter().map(|g| g.n()).collect();
    let out = AnalysisOutput {
        histogram: &hist,
        modes: (0..s.thresholds.len()).map(|t| hist.mode(t)).collect(),
        report: analysis::report_from(&sizes, Some(&hist)),
    };
    json_file(&out_dir.join("histogram.json"), &out)?;
    for (t, thr) in s.thresholds.iter().enumerate() {
        let bins: Vec<String> = hist.bins[t]
            .iter()
            .map(|(c, k)| format!("{c}:{k}"))
            .collect();
        println!(
            "threshold {thr}: mode {:?}, bins {{{}}}",
            out.modes[t],
            bins.join(", ")
        );
    }
    let formats = s.heatmaps.formats();
    if !formats.is_empty() {
        let dir = out_dir.join("heatmaps");
        fs::create_dir_all(&dir)
            .map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
        for (k, m) in mats
            .iter()
            .enumerate()
            .take(s.max_heatmaps.unwrap_or(usize::MAX))
        {
            for (fmt, ext) in &formats {
                analysis::export_heatmap(m, dir.join(format!("graph_{k:05}.{ext}")), *fmt)?;
            }
        }
    }
    println!("artifacts written to {}", out_dir.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DecomposeSettings {
    matrix_csv: Option<PathBuf>,
    out: Option<PathBuf>,
    report: Option<PathBuf>,
    normalized_out: Option<PathBuf>,
    scheme: Scheme,
    iterative: IterativeConfig,
}

impl Default for DecomposeSettings {
    fn default() -> Self {
        Self {
            matrix_csv: None,
            out: None,
            report: None,
            normalized_out: None,
            scheme: Scheme::Eigen,
            iterative: IterativeConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct DecomposeReport {
    scheme: Scheme,
    n: usize,
    rows: usize,
    /// `‖SᵀS − M‖_F`
    reconstruction_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    eigenvalues: Option<Vec<f64>>,
    /// `‖SᵀS − PSD-clamp(M)‖_F`
    #[serde(skip_serializing_if = "Option::is_none")]
    clamped_reconstruction_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    effective_clusters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    monotone: Option<bool>,
}

fn gram(s: &Tensor) -> Result<Tensor, Failure> {
    Ok(s.transpose()?.matmul(s)?)
}

pub fn decompose(a: DecomposeArgs) -> Result<(), Failure> {
    let mut s: DecomposeSettings = layered(a.config.as_deref())?;
    set(&mut s.matrix_csv, a.matrix_csv.map(Some));
    set(&mut s.out, a.out.map(Some));
    set(&mut s.report, a.report.map(Some));
    set(&mut s.normalized_out, a.normalized_out.map(Some));
    set(&mut s.scheme, parse_choice("scheme", a.scheme)?);
    set(&mut s.iterative.rank, a.rank);
    set(&mut s.iterative.iters, a.iters);
    set(&mut s.iterative.tol, a.tol);
    set(&mut s.iterative.seed, a.seed);
    let input = required(&s.matrix_csv, "matrix_csv")?.clone();
    let out = required(&s.out, "out")?.clone();
    if s.iterative.tol.is_nan() || s.iterative.tol < 0.0 {
        return Err(Failure::usage("tol must be non-negative"));
    }
    announce("decompose", &s, None)?;

    let m = analysis::read_matrix_csv(&input)
        .map_err(|e| Failure::runtime(format!("{}: {e}", input.display())))?;
    if !m.is_square_matrix() {
        return Err(Failure::runtime(format!(
            "{}: matrix is {:?}, expected square",
            input.display(),
            m.shape()
        )));
    }
    let n = m.rows();
    let report = match s.scheme {
        Scheme::Eigen => {
            let eig = linalg::sym_eig(&m)?.oriented_by_mass();
            let op = linalg::sqrt_operator(&eig);
            let mut clamped = eig.clone();
            clamped.eigenvalues.iter_mut().for_each(|l| *l = l.max(0.0));
            let g = gram(&op)?;
            write_file(&out, analysis::matrix_to_csv(&op)?)?;
            DecomposeReport {
                scheme: Scheme::Eigen,
                n,
                rows: n,
                reconstruction_error: g.distance(&m),
                clamped_reconstruction_error: Some(g.distance(&clamped.reconstruct())),
                effective_clusters: Some(effective_clusters_from(&eig.eigenvalues, 1.0)),
                eigenvalues: Some(eig.eigenvalues),
                iterations: None,
                final_loss: None,
                monotone: None,
            }
        }
        Scheme::Iterative => {
            let r = s.iterative.rank;
            if r < 1 || r > n {
                return Err(Failure::usage(format!(
                    "rank {r} must lie in 1..={n} for a {n}x{n} matrix"
                )));
            }
            let d = iterative_decompose(&m, &s.iterative)?;
            write_file(&out, analysis::matrix_to_csv(&d.w)?)?;
            if let Some(p) = &s.normalized_out {
                write_file(p, analysis::matrix_to_csv(&d.w_normalized)?)?;
            }
            DecomposeReport {
                scheme: Scheme::Iterative,
                n,
                rows: r,
                reconstruction_error: d.reconstruction_error(&m),
                eigenvalues: None,
                clamped_reconstruction_error: None,
                effective_clusters: None,
                iterations: Some(d.loss_trace.len() - 1),
                final_loss: d.loss_trace.last().copied(),
                monotone: Some(d.loss_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12)),
            }
        }
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable")
    );
    if let Some(p) = &s.report {
        json_file(p, &report)?;
    }
    Ok(())
}
