use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use llec::container::{measure_bitstream, parse_container, Codec};
use llec::event_io::{compute_stats, parse_csv, parse_evt2_with, serialize_csv, serialize_evt2, ParseMode};
use llec::metrics::{bench_anchors, format_table, to_json, write_csv, Anchor, CompressionReport, RowStatus};
use llec::synth::{generate_synthetic, Pattern, SynthParams};
use llec::trainer::{build_dataset, collect_tiles, train, TrainConfig};
use llec::{Architecture, Error, EventStream, Model, PreprocessConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_FORMAT: u8 = 2;
const EXIT_MODEL_MISMATCH: u8 = 3;
const EXIT_TOOL_MISSING: u8 = 4;

#[derive(Parser)]
#[command(name = "llec", version, about = "Lossless event-camera codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress an EVT2 (or .csv) event file.
    Encode {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
        /// Segment length in microseconds (power of two); defaults by resolution.
        #[arg(long)]
        ts: Option<u64>,
        #[command(flatten)]
        sensor: SensorArgs,
    },
    /// Decompress a container; writes EVT2, or CSV when the output ends in .csv.
    Decode {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
    },
    /// Train a hyperprior model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare llec against external general-purpose compressors.
    Bench(BenchArgs),
    /// Print the structure and size breakdown of a container.
    Inspect {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic event stream.
    Synth {
        #[arg(long)]
        pattern: Pattern,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 640)]
        width: u32,
        #[arg(long, default_value_t = 480)]
        height: u32,
        /// Milliseconds.
        #[arg(long, default_value_t = 1000)]
        duration_ms: u64,
        /// Events per second.
        #[arg(long, default_value_t = 1e6)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a randomly initialised (untrained) model.
    InitModel {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    model: PathBuf,
    #[arg(long)]
    ts: Option<u64>,
    /// Comma-separated subset of lz4,bzip2,7z.
    #[arg(long, value_delimiter = ',', default_value = "lz4,bzip2,7z")]
    anchors: Vec<String>,
    /// Exit with status 4 when an anchor tool is missing.
    #[arg(long)]
    strict_anchors: bool,
    /// Write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    sensor: SensorArgs,
}

#[derive(Args, Clone, Copy)]
struct SensorArgs {
    /// Sensor size as WxH; read from a `% geometry` header line when omitted.
    #[arg(long, value_parser = parse_sensor)]
    sensor: Option<(u32, u32)>,
    /// Drop out-of-bounds events instead of failing.
    #[arg(long)]
    lenient: bool,
}

fn parse_sensor(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    Ok((w, h))
}

const DEFAULT_SENSOR: (u32, u32) = (1280, 720);

/// `% geometry WxH` from an EVT2 text header.
fn header_geometry(bytes: &[u8]) -> Option<(u32, u32)> {
    let mut rest = bytes;
    while rest.first() == Some(&b'%') {
        let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
        let line = String::from_utf8_lossy(&rest[..end]);
        if let Some(v) = line.trim_start_matches('%').trim().strip_prefix("geometry") {
            if let Ok(g) = parse_sensor(v.trim()) {
                return Some(g);
            }
        }
        rest = &rest[(end + 1).min(rest.len())..];
    }
    None
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn read_events(path: &Path, sensor: SensorArgs) -> anyhow::Result<EventStream> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if is_csv(path) {
        let (w, h) = sensor.sensor.unwrap_or(DEFAULT_SENSOR);
        let text = String::from_utf8(bytes).map_err(|_| Error::Format("CSV input is not UTF-8".into()))?;
        return Ok(parse_csv(&text, w, h)?);
    }
    let (w, h) = sensor.sensor.or_else(|| header_geometry(&bytes)).unwrap_or(DEFAULT_SENSOR);
    let mode = if sensor.lenient { ParseMode::Lenient } else { ParseMode::Strict };
    let (stream, diag) = parse_evt2_with(&bytes, w, h, mode)?;
    if diag.dropped_out_of_bounds + diag.skipped_words + diag.out_of_order > 0 {
        log::warn!("{}: {diag:?}", path.display());
    }
    Ok(stream)
}

fn write_events(path: &Path, stream: &EventStream) -> anyhow::Result<()> {
    let bytes = if is_csv(path) { serialize_csv(stream).into_bytes() } else { serialize_evt2(stream)? };
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    let file = fs::File::open(path).with_context(|| format!("opening model {}", path.display()))?;
    Ok(Model::load(BufReader::new(file))?)
}

fn save_model(model: &Model, path: &Path) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    model.save(BufWriter::new(file))?;
    Ok(())
}

fn preprocess_config(ts: Option<u64>, stream: &EventStream) -> llec::Result<PreprocessConfig> {
    match ts {
        Some(ts) => PreprocessConfig::new(ts),
        None => Ok(PreprocessConfig::for_resolution(stream.width, stream.height)),
    }
}

/// One entry of a training config: a file on disk or generator parameters.
#[derive(Deserialize)]
#[serde(untagged)]
enum Source {
    File(PathBuf),
    Synthetic { synthetic: SynthParams },
}

#[derive(Deserialize)]
struct TrainFile {
    sequences: Vec<Source>,
    /// Held-out sequences; when absent the last training sequence is held out.
    #[serde(default)]
    validation: Vec<Source>,
    #[serde(default, with = "sensor_opt")]
    sensor: Option<(u32, u32)>,
    #[serde(default)]
    segment_len: Option<u64>,
    output: PathBuf,
    #[serde(default)]
    history: Option<PathBuf>,
    #[serde(default)]
    init_seed: u64,
    #[serde(default)]
    training: TrainConfig,
}

mod sensor_opt {
    use serde::{Deserialize, Deserializer};

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<(u32, u32)>, D::Error> {
        Option::<String>::deserialize(d)?.map(|s| super::parse_sensor(&s).map_err(serde::de::Error::custom)).transpose()
    }
}

fn load_source(src: &Source, sensor: Option<(u32, u32)>, base: &Path) -> anyhow::Result<EventStream> {
    match src {
        Source::File(p) => {
            let p = if p.is_relative() { base.join(p) } else { p.clone() };
            read_events(&p, SensorArgs { sensor, lenient: false })
        }
        Source::Synthetic { synthetic } => Ok(generate_synthetic(synthetic)?),
    }
}

fn cmd_train(config: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg: TrainFile = serde_json::from_str(&text).map_err(Error::from)?;
    cfg.training.validate()?;
    let base = config.parent().unwrap_or(Path::new("."));
    let mut train_streams =
        cfg.sequences.iter().map(|s| load_source(s, cfg.sensor, base)).collect::<anyhow::Result<Vec<_>>>()?;
    let val_streams = if cfg.validation.is_empty() {
        if train_streams.len() < 2 {
            bail!("need a validation list or at least two training sequences");
        }
        vec![train_streams.pop().expect("non-empty")]
    } else {
        cfg.validation.iter().map(|s| load_source(s, cfg.sensor, base)).collect::<anyhow::Result<_>>()?
    };
    let first = &train_streams[0];
    let pre = preprocess_config(cfg.segment_len, first)?;
    let available = collect_tiles(&train_streams, &pre)?.len();
    let target = cfg.training.train_tile_target.min(available);
    if target < cfg.training.train_tile_target {
        log::warn!("only {available} full tiles available, fewer than the target {}", cfg.training.train_tile_target);
    }
    let train_set = build_dataset(&train_streams, &pre, target, cfg.training.rng_seed)?;
    let val_set = collect_tiles(&val_streams, &pre)?;
    log::info!("{} training tiles, {} validation tiles", train_set.len(), val_set.len());

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let init = Model::initialized(Architecture::default(), &mut rng)?;
    let (model, history) = train(init, &train_set, &val_set, &cfg.training)?;
    save_model(&model, &cfg.output)?;
    if let Some(h) = &cfg.history {
        history.write_csv(BufWriter::new(fs::File::create(h)?))?;
    }
    let best = history.best_val_loss().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs, best validation {best:.4} bits/symbol at epoch {}, model {} ({})",
        history.epochs.len(),
        history.best_epoch.unwrap_or(0),
        cfg.output.display(),
        hex(&model.model_id())
    );
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_bench(args: &BenchArgs) -> anyhow::Result<ExitCode> {
    let BenchArgs { input, model, ts, anchors, strict_anchors, csv, json, sensor } = args;
    let anchors = anchors.iter().map(|a| Anchor::parse(a.trim())).collect::<llec::Result<Vec<_>>>()?;
    let stream = read_events(input, *sensor)?;
    if stream.is_empty() {
        bail!("{} holds no events", input.display());
    }
    let model = load_model(model)?;
    let raw = if is_csv(input) { serialize_evt2(&stream)? } else { fs::read(input)? };
    let name = input.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
    let events = stream.len() as u64;
    let bytes = Codec::new(&model)?.encode(&stream, &preprocess_config(*ts, &stream)?)?;
    let mut rows =
        vec![CompressionReport::for_container(&name, 8 * raw.len() as u64, events, measure_bitstream(&bytes)?)?];
    rows.extend(bench_anchors(&name, &raw, events, &anchors));

    print!("{}", format_table(&rows));
    if let Some(p) = csv {
        write_csv(&rows, BufWriter::new(fs::File::create(p)?))?;
    }
    if let Some(p) = json {
        fs::write(p, to_json(&rows)?)?;
    }
    let missing = rows.iter().any(|r| r.status == RowStatus::Skipped && r.note == "not installed");
    Ok(if *strict_anchors && missing { ExitCode::from(EXIT_TOOL_MISSING) } else { ExitCode::SUCCESS })
}

fn cmd_inspect(file: &Path, json: bool) -> anyhow::Result<()> {
    let bytes = fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    let view = parse_container(&bytes)?;
    let sizes = measure_bitstream(&bytes)?;
    let h = &view.header;
    let tiles: usize = view.segments.iter().map(|s| s.tiles.len()).sum();
    let occupancy: usize = view.segments.iter().map(|s| s.occupancy_byte_count).sum();
    if json {
        let v = serde_json::json!({
            "version": h.format_version,
            "width": h.width,
            "height": h.height,
            "segment_len": h.segment_len,
            "tile_len": h.tile_len,
            "latent_dim": h.latent_dim,
            "model_id": hex(&h.model_id),
            "segments": h.segment_count,
            "tiles": tiles,
            "occupancy_bytes": occupancy,
            "bits": sizes,
            "total_bits": sizes.total_bits(),
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(());
    }
    println!("llec container v{}", h.format_version);
    println!("  sensor         {}x{}", h.width, h.height);
    println!("  segment length {} us", h.segment_len);
    println!("  tile length    {} symbols, {} latents", h.tile_len, h.latent_dim);
    println!("  model id       {}", hex(&h.model_id));
    println!("  segments       {}", h.segment_count);
    println!("  tiles          {tiles}");
    println!("  occupancy      {occupancy} bytes");
    println!("  header         {} bits", sizes.header_bits);
    println!("  metadata       {} bits", sizes.metadata_bits);
    println!("  latents        {} bits", sizes.latent_bits);
    println!("  payload        {} bits", sizes.payload_bits);
    println!("  total          {} bits", sizes.total_bits());
    if occupancy > 0 {
        println!("  payload rate   {:.3} bits/symbol", sizes.payload_bits as f64 / occupancy as f64);
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Encode { input, output, model, ts, sensor } => {
            let stream = read_events(&input, sensor)?;
            let model = load_model(&model)?;
            let cfg = preprocess_config(ts, &stream)?;
            let bytes = Codec::new(&model)?.encode(&stream, &cfg)?;
            fs::write(&output, &bytes).with_context(|| format!("writing {}", output.display()))?;
            let stats = compute_stats(&stream);
            println!(
                "{} events ({:.2} s) -> {} bytes, {:.3} bits/event",
                stats.event_count,
                stats.duration,
                bytes.len(),
                if stream.is_empty() { 0.0 } else { 8.0 * bytes.len() as f64 / stream.len() as f64 }
            );
        }
        Command::Decode { input, output, model } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let model = load_model(&model)?;
            let stream = Codec::new(&model)?.decode(&bytes)?;
            write_events(&output, &stream)?;
            println!("{} events written to {}", stream.len(), output.display());
        }
        Command::Train { config } => cmd_train(&config)?,
        Command::Bench(args) => return cmd_bench(&args),
        Command::Inspect { file, json } => cmd_inspect(&file, json)?,
        Command::Synth { pattern, output, width, height, duration_ms, rate, seed } => {
            let params = SynthParams { pattern, width, height, duration: duration_ms * 1000, rate, seed };
            let stream = generate_synthetic(&params)?;
            write_events(&output, &stream)?;
            println!("{} {pattern} events written to {}", stream.len(), output.display());
        }
        Command::InitModel { output, seed } => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let model = Model::initialized(Architecture::default(), &mut rng)?;
            save_model(&model, &output)?;
            println!("model {} written to {}", hex(&model.model_id()), output.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::ModelMismatch { .. }) => EXIT_MODEL_MISMATCH,
        Some(Error::Format(_) | Error::Csv { .. } | Error::Corrupt(_) | Error::ModelCorrupt(_) | Error::Json(_)) => {
            EXIT_FORMAT
        }
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
