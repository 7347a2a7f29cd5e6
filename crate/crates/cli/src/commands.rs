use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use ghostserve::coding::{max_tolerance, Codec, CodingScheme, ErasurePattern, SchemeKind};
use ghostserve::sim::{generate_trace, inject_failures, simulate, FailureInjectorConfig, MetricsReport, Strategy};
use ghostserve::store::checksum;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Seeds};
use crate::{Cli, CliError, Command, Format, GlobalArgs};

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Encode(a) => cmd_encode(&cli.global, a, out),
        Command::Reconstruct(a) => cmd_reconstruct(&cli.global, a, out),
        Command::Simulate(a) => cmd_simulate(&cli.global, a, out),
        Command::Bench(a) => cmd_bench(&cli.global, a, out),
        Command::Report(a) => cmd_report(&cli.global, a, out),
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let text = match &g.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    if let Some(s) = g.seed {
        if s > i64::MAX as u64 - 2 {
            return Err(CliError::Usage(format!("--seed must be at most {}", i64::MAX - 2)));
        }
    }
    RunConfig::load(text.as_deref(), &g.set, g.seed)
}

fn out_dir(g: &GlobalArgs, fallback: &Path) -> Result<PathBuf, CliError> {
    let dir = g.out.clone().unwrap_or_else(|| fallback.to_path_buf());
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_csv<S: Serialize>(rows: &[S], w: impl Write) -> Result<(), CliError> {
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    csv.flush()?;
    Ok(())
}

fn emit<S: Serialize>(format: Format, rows: &[S], out: &mut dyn Write) -> Result<(), CliError> {
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut *out, rows).map_err(|e| CliError::Runtime(e.to_string()))?;
            writeln!(out)?;
            Ok(())
        }
        Format::Csv => write_csv(rows, out),
    }
}

// ---- encode / reconstruct ----

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Data shard files, in shard order.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// xor, rdp or rs (default: scheme.kind from the config).
    #[arg(long)]
    pub kind: Option<SchemeKind>,
    /// Declared data shard count (default: number of files).
    #[arg(long)]
    pub n: Option<usize>,
    /// Parity shard count (default: 1 for xor, 2 for rdp, scheme.k for rs).
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Lost shard indices; shards whose files are missing count as lost too.
    #[arg(long, value_delimiter = ',')]
    pub lost: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scheme: CodingScheme,
    pub shard_len: usize,
    pub shards: Vec<ShardEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub index: usize,
    pub role: String,
    pub path: PathBuf,
    pub len: usize,
    pub checksum: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn cmd_encode(g: &GlobalArgs, a: &EncodeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    let kind = a.kind.unwrap_or(cfg.scheme.kind);
    let n = a.n.unwrap_or(a.files.len());
    let k = a.k.unwrap_or(match kind {
        SchemeKind::Xor => 1,
        SchemeKind::Rdp => 2,
        SchemeKind::ReedSolomon => cfg.scheme.k,
    });
    let scheme = CodingScheme::new(kind, n, k).map_err(|e| CliError::Usage(e.to_string()))?;
    if a.files.len() != n {
        return Err(CliError::Usage(format!("{} files given but the scheme declares n = {n}", a.files.len())));
    }
    let data: Vec<Vec<u8>> = a.files.iter().map(fs::read).collect::<Result<_, _>>()?;
    let len = data[0].len();
    if let Some((i, d)) = data.iter().enumerate().find(|(_, d)| d.len() != len) {
        return Err(CliError::Usage(format!(
            "shard files differ in length: {} has {} bytes, {} has {len}",
            a.files[i].display(),
            d.len(),
            a.files[0].display()
        )));
    }
    let parity = Codec::new(scheme).encode(&data).map_err(|e| CliError::Runtime(e.to_string()))?;

    let dir = out_dir(g, Path::new("."))?;
    let mut shards = Vec::new();
    for (i, (path, d)) in a.files.iter().zip(&data).enumerate() {
        let path = fs::canonicalize(path)?;
        shards.push(ShardEntry { index: i, role: "data".into(), path, len, checksum: checksum(&[d]) });
    }
    for (j, p) in parity.iter().enumerate() {
        let path = dir.join(format!("parity_{j}.bin"));
        fs::write(&path, p)?;
        let path = fs::canonicalize(path)?;
        shards.push(ShardEntry { index: n + j, role: "parity".into(), path, len, checksum: checksum(&[p]) });
    }
    let manifest = Manifest { scheme, shard_len: len, shards };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    emit(g.format_or(Format::Json), &manifest.shards, out)
}

fn cmd_reconstruct(g: &GlobalArgs, a: &ReconstructArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.manifest)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("manifest: {e}")))?;
    let scheme = manifest.scheme;
    let total = scheme.total_shards();
    if manifest.shards.len() != total || manifest.shards.iter().enumerate().any(|(i, s)| s.index != i) {
        return Err(CliError::Usage("manifest shard list does not match its scheme".into()));
    }
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let mut lost: BTreeSet<usize> = BTreeSet::new();
    for &i in &a.lost {
        if i >= total {
            return Err(CliError::Usage(format!("lost index {i} out of range for {total} shards")));
        }
        lost.insert(i);
    }
    for s in &manifest.shards {
        if !resolve(&s.path).exists() {
            lost.insert(s.index);
        }
    }
    let tolerance = max_tolerance(&scheme);
    if lost.len() > tolerance {
        return Err(CliError::Runtime(format!(
            "{} shards lost but {} tolerates at most {tolerance}",
            lost.len(),
            describe(&scheme)
        )));
    }

    let mut available = BTreeMap::new();
    for s in manifest.shards.iter().filter(|s| !lost.contains(&s.index)) {
        let bytes = fs::read(resolve(&s.path))?;
        if bytes.len() != s.len || checksum(&[&bytes]) != s.checksum {
            return Err(CliError::Integrity(format!("shard {} ({}) does not match its manifest checksum", s.index, s.path.display())));
        }
        available.insert(s.index, bytes);
    }
    let recovered = Codec::new(scheme)
        .reconstruct(&available, &ErasurePattern::new(lost.iter().copied()))
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let dir = out_dir(g, Path::new("."))?;
    let mut written = Vec::new();
    for (i, bytes) in recovered {
        let entry = &manifest.shards[i];
        if checksum(&[&bytes]) != entry.checksum {
            return Err(CliError::Integrity(format!("recovered shard {i} does not match its manifest checksum")));
        }
        let name = entry.path.file_name().map(PathBuf::from).unwrap_or_else(|| PathBuf::from(format!("shard_{i}.bin")));
        let path = dir.join(name);
        fs::write(&path, &bytes)?;
        written.push(ShardEntry { path, ..entry.clone() });
    }
    emit(g.format_or(Format::Json), &written, out)
}

fn describe(s: &CodingScheme) -> String {
    match s.kind() {
        SchemeKind::Xor => format!("XOR({})", s.data_shards()),
        SchemeKind::Rdp => format!("RDP({})", s.data_shards()),
        SchemeKind::ReedSolomon => format!("RS({},{})", s.data_shards(), s.parity_shards()),
    }
}

// ---- simulate / report ----

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `simulate` (default: --out or output.dir).
    pub dir: Option<PathBuf>,
}

/// One simulation cell: the metrics plus what produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub strategy: String,
    pub scheme: Option<CodingScheme>,
    pub failure_rate: f64,
    pub seeds: Seeds,
    pub failures: usize,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub failure_rate: f64,
    pub failures: usize,
    pub eitr: f64,
    pub mttr: f64,
    pub p50: f64,
    pub p99: f64,
    pub io_bytes_checkpoint: u64,
    pub io_bytes_recovery: u64,
    pub parity_store_peak_bytes: u64,
}

impl From<&CellReport> for SummaryRow {
    fn from(c: &CellReport) -> Self {
        SummaryRow {
            strategy: c.strategy.clone(),
            failure_rate: c.failure_rate,
            failures: c.failures,
            eitr: c.metrics.eitr,
            mttr: c.metrics.mttr,
            p50: c.metrics.p50,
            p99: c.metrics.p99,
            io_bytes_checkpoint: c.metrics.io_bytes_checkpoint,
            io_bytes_recovery: c.metrics.io_bytes_recovery,
            parity_store_peak_bytes: c.metrics.parity_store_peak_bytes,
        }
    }
}

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.csv";

pub fn report_file_name(strategy: &str, rate: f64) -> String {
    format!("report_{strategy}_r{rate}.json")
}

fn cmd_simulate(g: &GlobalArgs, a: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    if a.dry_run {
        write!(out, "{}", cfg.dump())?;
        return Ok(());
    }
    let sim_cfg = cfg.sim_config()?;
    let strategies = cfg.strategies()?;
    let dir = out_dir(g, &cfg.output.dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.dump())?;

    let runtime = |e: ghostserve::sim::SimError| CliError::Runtime(e.to_string());
    let trace = generate_trace(cfg.seeds.trace, &cfg.trace).map_err(runtime)?;
    let mut rows = Vec::new();
    for &rate in &cfg.failure.rates {
        let injector = FailureInjectorConfig { rate, seed: cfg.seeds.failure, workers_per_failure: cfg.failure.workers_per_failure };
        let failures = inject_failures(&trace, cfg.model.tp_degree, &injector).map_err(runtime)?;
        for &strategy in &strategies {
            let result = simulate(&trace, strategy, &sim_cfg, &failures).map_err(runtime)?;
            let report = CellReport {
                strategy: strategy.name().to_string(),
                scheme: match strategy {
                    Strategy::Ghostserve { scheme } => Some(scheme),
                    _ => None,
                },
                failure_rate: rate,
                seeds: cfg.seeds,
                failures: failures.len(),
                metrics: result.report,
            };
            let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
            fs::write(dir.join(report_file_name(strategy.name(), rate)), text + "\n")?;
            if cfg.output.timeline {
                let f = fs::File::create(dir.join(format!("timeline_{}_r{rate}.csv", strategy.name())))?;
                result.timeline.write_csv(std::io::BufWriter::new(f))?;
            }
            rows.push(SummaryRow::from(&report));
        }
    }
    write_csv(&rows, fs::File::create(dir.join(SUMMARY_FILE))?)?;
    emit(g.format_or(Format::Json), &rows, out)
}

pub fn read_reports(dir: &Path) -> Result<Vec<CellReport>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("report_") && name.ends_with(".json")
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn cmd_report(g: &GlobalArgs, a: &ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = match (&a.dir, &g.out) {
        (Some(d), _) | (None, Some(d)) => d.clone(),
        (None, None) => load_config(g)?.output.dir,
    };
    let reports = read_reports(&dir)?;
    if reports.is_empty() {
        return Err(CliError::Runtime(format!("no reports in {}", dir.display())));
    }
    let rows: Vec<SummaryRow> = reports.iter().map(SummaryRow::from).collect();
    emit(g.format_or(Format::Json), &rows, out)
}

// ---- bench ----

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Schemes to measure: xor, rdp, rs.
    #[arg(long, value_delimiter = ',', default_value = "xor,rdp,rs")]
    pub schemes: Vec<SchemeKind>,
    /// Shard sizes in bytes.
    #[arg(long, value_delimiter = ',', default_value = "4096,65536,1048576")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scheme: String,
    pub n: usize,
    pub k: usize,
    pub shard_bytes: usize,
    pub op: String,
    pub reps: usize,
    pub mean_bytes_per_sec: f64,
    pub min_bytes_per_sec: f64,
    pub max_bytes_per_sec: f64,
}

fn throughput_row(scheme: &CodingScheme, size: usize, op: &str, samples: &[f64]) -> BenchRow {
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    BenchRow {
        scheme: scheme.kind().as_str().to_string(),
        n: scheme.data_shards(),
        k: scheme.parity_shards(),
        shard_bytes: size,
        op: op.to_string(),
        reps: samples.len(),
        mean_bytes_per_sec: mean,
        min_bytes_per_sec: samples.iter().copied().fold(f64::INFINITY, f64::min),
        max_bytes_per_sec: samples.iter().copied().fold(0.0, f64::max),
    }
}

pub fn bench(scheme: &CodingScheme, size: usize, reps: usize) -> Result<Vec<BenchRow>, CliError> {
    if size == 0 {
        return Err(CliError::Usage("shard size must be positive".into()));
    }
    if reps == 0 {
        return Err(CliError::Usage("--reps must be positive".into()));
    }
    let n = scheme.data_shards();
    let mut x = 0x9E37_79B9u32;
    let data: Vec<Vec<u8>> = (0..n)
        .map(|_| {
            (0..size)
                .map(|_| {
                    x ^= x << 13;
                    x ^= x >> 17;
                    x ^= x << 5;
                    x as u8
                })
                .collect()
        })
        .collect();
    let codec = Codec::new(*scheme);
    let bytes = (n * size) as f64;
    let mut enc = Vec::with_capacity(reps);
    let mut parity = Vec::new();
    for _ in 0..reps {
        let t = Instant::now();
        parity = codec.encode(&data).map_err(|e| CliError::Runtime(e.to_string()))?;
        enc.push(bytes / t.elapsed().as_secs_f64().max(1e-9));
    }
    let lost: Vec<usize> = (0..scheme.max_tolerance().min(n)).collect();
    let available: BTreeMap<usize, &[u8]> = data
        .iter()
        .chain(&parity)
        .enumerate()
        .filter(|(i, _)| !lost.contains(i))
        .map(|(i, d)| (i, d.as_slice()))
        .collect();
    let pattern = ErasurePattern::new(lost.iter().copied());
    let mut rec = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        let out = codec.reconstruct(&available, &pattern).map_err(|e| CliError::Runtime(e.to_string()))?;
        rec.push(bytes / t.elapsed().as_secs_f64().max(1e-9));
        if lost.iter().any(|i| out[i] != data[*i]) {
            return Err(CliError::Integrity("benchmark reconstruction mismatch".into()));
        }
    }
    Ok(vec![throughput_row(scheme, size, "encode", &enc), throughput_row(scheme, size, "reconstruct", &rec)])
}

fn cmd_bench(g: &GlobalArgs, a: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    if let Some(&0) = a.sizes.iter().find(|&&s| s == 0) {
        return Err(CliError::Usage("shard sizes must be positive".into()));
    }
    let n = cfg.scheme.n;
    let mut rows = Vec::new();
    for &kind in &a.schemes {
        let k = match kind {
            SchemeKind::Xor => 1,
            SchemeKind::Rdp => 2,
            SchemeKind::ReedSolomon => cfg.scheme.k,
        };
        let scheme = CodingScheme::new(kind, n, k).map_err(|e| CliError::Usage(e.to_string()))?;
        for &size in &a.sizes {
            rows.extend(bench(&scheme, size, a.reps)?);
        }
    }
    if let Some(dir) = &g.out {
        fs::create_dir_all(dir)?;
        write_csv(&rows, fs::File::create(dir.join("bench.csv"))?)?;
    }
    emit(g.format_or(Format::Csv), &rows, out)
}
