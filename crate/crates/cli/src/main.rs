mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regleak::cnn::{self, CnnModel};
use regleak::covert::{self, Channel, ChannelMode, DEFAULT_GRID, WINDOW_WORDS};
use regleak::isa::{parse_program, render_program, Address, Instruction, Program, RegisterRef};
use regleak::llm::{self, EmbeddingTables, ScanOptions};
use regleak::pgm::GrayImage;
use regleak::pixel::{self, AttackOptions, GaParams};
use regleak::sanitize::{self, CleanupScope};
use regleak::sim::{leaks_to_csv, Dispatch, GpuConfig, Lifecycle, Profile, Simulator};
use regleak::kernels;

use output::Artifacts;

/// Stale GPU register leakage experiments on a simulated register file.
#[derive(Debug, Parser)]
#[command(name = "regleak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run kernels back to back and export every stale-register read.
    SimRun(SimRunArgs),
    /// Sender × receiver throughput sweep of the register covert channel.
    CovertBench(CovertArgs),
    /// Reconstruct a rendered screen from leaked fragments.
    PixelAttack(PixelArgs),
    /// Leak first-layer outputs of a CNN victim.
    CnnAttack(CnnArgs),
    /// Recover tokens from leaked embedding values.
    LlmAttack(LlmArgs),
    /// Static uninitialized-register checks and cleanup rewriting.
    #[command(subcommand)]
    Sanitize(SanitizeCommand),
}

#[derive(Debug, Args)]
struct GpuArgs {
    /// GPU profile: adreno, agx or nvidia.
    #[arg(long)]
    profile: Option<String>,
    /// Key/value config file; replaces --profile.
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl GpuArgs {
    fn resolve(&self, default: Profile) -> Result<(Option<Profile>, GpuConfig)> {
        let (profile, mut cfg) = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                (None, GpuConfig::from_config_str(&text)?)
            }
            None => {
                let p = match &self.profile {
                    Some(name) => name.parse::<Profile>()?,
                    None => default,
                };
                (Some(p), p.config())
            }
        };
        cfg.seed = self.seed;
        Ok((profile, cfg))
    }
}

#[derive(Debug, Args)]
struct SimRunArgs {
    #[command(flatten)]
    gpu: GpuArgs,
    /// Assembly files or fixture names, dispatched in order. Defaults to a
    /// register-filling victim followed by the profile's attacker fixture.
    #[arg(long = "kernel")]
    kernels: Vec<String>,
    #[arg(long, default_value_t = 4)]
    groups: usize,
    #[arg(long, default_value_t = 64)]
    group_size: usize,
    #[arg(long, default_value = "leaks.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CovertArgs {
    #[command(flatten)]
    gpu: GpuArgs,
    /// Comma-separated group counts for both senders and receivers.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GRID)]
    grid: Vec<usize>,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PixelArgs {
    #[command(flatten)]
    gpu: GpuArgs,
    /// Binary PGM screen; defaults to the shipped 128×128 test image.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = pixel::DEFAULT_TILE)]
    tile: usize,
    /// Groups of pipeline noise interleaved with the victim.
    #[arg(long, default_value_t = 0)]
    noise_groups: usize,
    #[arg(long, default_value_t = 300)]
    population: usize,
    #[arg(long, default_value_t = 100)]
    generations: usize,
    #[arg(long, default_value = "recon.pgm")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CnnTarget {
    Nvidia,
    Adreno,
}

#[derive(Debug, Args)]
struct CnnArgs {
    #[arg(long, value_enum)]
    model: CnnTarget,
    /// Binary PGM input, resized to 28×28; defaults to the shipped test image.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Leading bytes of the attacker dump that may be zero.
    #[arg(long, default_value_t = 16)]
    zero_prefix: usize,
    #[arg(long, default_value = "leaked.pgm")]
    out: PathBuf,
    #[arg(long, default_value = "coverage.csv")]
    csv: PathBuf,
}

#[derive(Debug, Args)]
struct LlmArgs {
    /// Embedding tables; defaults to seeded desk-scale tables.
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Leaked little-endian f32 words; defaults to a simulated leak of
    /// `--tokens` random tokens.
    #[arg(long)]
    leak: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    max_pos: usize,
    #[arg(long, default_value_t = 20)]
    tokens: usize,
    /// Slide the 16-value window one value at a time.
    #[arg(long)]
    sliding: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "tokens.csv")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum SanitizeCommand {
    /// Exit 0 when the program never reads a register before writing it, 1 otherwise.
    Check { file: PathBuf },
    /// Zero registers before every exit.
    Rewrite {
        file: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Zero the whole declared register window, not only written registers.
        #[arg(long)]
        full: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::SimRun(a) => sim_run(a),
        Command::CovertBench(a) => covert_bench(a),
        Command::PixelAttack(a) => pixel_attack(a),
        Command::CnnAttack(a) => cnn_attack(a),
        Command::LlmAttack(a) => llm_attack(a),
        Command::Sanitize(SanitizeCommand::Check { file }) => {
            let verdict = sanitize::analyze(&load_program(&file.to_string_lossy())?);
            println!("{}", verdict.to_string().trim_end());
            Ok(if verdict.accepted() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Sanitize(SanitizeCommand::Rewrite { file, output, full }) => {
            let scope = if full { CleanupScope::Full } else { CleanupScope::Written };
            let clean = sanitize::rewrite_cleanup(&load_program(&file.to_string_lossy())?, scope);
            let mut art = Artifacts::new("sanitize rewrite", &output);
            art.echo("input", file.display());
            art.echo("scope", format!("{scope:?}"));
            art.add(&output, render_program(&clean)?);
            art.commit()?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_program(spec: &str) -> Result<Program> {
    if let Some((_, src)) = kernels::ALL.iter().find(|(name, _)| *name == spec) {
        return Ok(parse_program(src)?);
    }
    let text = fs::read_to_string(spec).with_context(|| format!("reading {spec}"))?;
    parse_program(&text).with_context(|| format!("parsing {spec}"))
}

fn load_image(path: Option<&Path>) -> Result<GrayImage> {
    match path {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            GrayImage::decode(&bytes).with_context(|| format!("decoding {}", p.display()))
        }
        None => Ok(pixel::synthetic_scene(128, 128, pixel::FIXTURE_SEED)),
    }
}

fn attacker_fixture(profile: Option<Profile>, cfg: &GpuConfig) -> Program {
    match profile {
        Some(Profile::Adreno) => kernels::adreno_attacker(),
        Some(Profile::Nvidia) => kernels::nvidia_attacker(),
        Some(Profile::Agx) => kernels::agx_attacker(),
        None if cfg.register_model == regleak::isa::RegisterModel::Quad => kernels::adreno_attacker(),
        None => kernels::agx_attacker(),
    }
}

/// Writes a recognisable value to every register and stores one of them.
fn filler(cfg: &GpuConfig) -> Program {
    let regs: Vec<RegisterRef> = (0..cfg.regs_per_thread).map(|i| RegisterRef::from_slot(i, cfg.register_model)).collect();
    let mut code: Vec<Instruction> =
        regs.iter().enumerate().map(|(i, r)| Instruction::mov_imm(*r, 0x5EC0_0000 | i as u32)).collect();
    code.push(Instruction::store(Address::per_thread(0), [regs[0]]));
    code.push(Instruction::exit());
    Program::new("filler", code).expect("filler is well formed")
}

fn sim_run(a: SimRunArgs) -> Result<ExitCode> {
    let (profile, cfg) = a.gpu.resolve(Profile::Agx)?;
    let programs = if a.kernels.is_empty() {
        vec![filler(&cfg), attacker_fixture(profile, &cfg)]
    } else {
        a.kernels.iter().map(|k| load_program(k)).collect::<Result<_>>()?
    };
    let mut sim = Simulator::new(cfg.clone())?;
    let threads = a.groups * a.group_size;
    let mut leaks = Vec::new();
    for p in programs {
        let slots = p.buffer_slots().into_iter().max().map_or(0, |s| s as usize + 1);
        let buffers: Vec<_> = (0..slots).map(|_| sim.create_buffer(threads * cfg.regs_per_thread.max(4))).collect();
        let report = sim.dispatch(&Dispatch::new(p, a.groups, a.group_size).bind(buffers))?;
        leaks.extend(report.leaks);
    }
    let uninit = leaks.iter().filter(|l| l.was_uninitialized).count();
    println!("{} register reads, {uninit} uninitialized", leaks.len());
    let mut art = Artifacts::new("sim-run", &a.out);
    art.config(&cfg);
    art.echo("kernels", if a.kernels.is_empty() { "filler,attacker".into() } else { a.kernels.join(",") });
    art.echo("groups", a.groups);
    art.echo("group_size", a.group_size);
    art.add(&a.out, leaks_to_csv(&leaks));
    art.commit()?;
    Ok(ExitCode::SUCCESS)
}

fn covert_bench(a: CovertArgs) -> Result<ExitCode> {
    let (profile, cfg) = a.gpu.resolve(Profile::Agx)?;
    let channel = match profile {
        Some(p) => Channel::with_config(p, cfg.clone()),
        None => {
            let mode = if cfg.lifecycle == Lifecycle::StoreResidue {
                ChannelMode::StoreResidue
            } else {
                ChannelMode::RegisterWindow { base: cfg.regs_per_thread.saturating_sub(WINDOW_WORDS) }
            };
            Channel::new(cfg.clone(), mode)?
        }
    };
    let cells = covert::sweep(&channel, &a.grid, cfg.seed)?;
    let best = cells
        .iter()
        .fold(&cells[0], |b, c| if c.stats.bytes_per_dispatch() > b.stats.bytes_per_dispatch() { c } else { b });
    println!(
        "peak {:.1} bytes/dispatch at {} senders × {} receivers",
        best.stats.bytes_per_dispatch(),
        best.sender_groups,
        best.receiver_groups
    );
    let mut art = Artifacts::new("covert-bench", &a.out);
    art.config(&cfg);
    art.echo("grid", a.grid.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
    art.add(&a.out, covert::sweep_csv(&cells));
    art.commit()?;
    Ok(ExitCode::SUCCESS)
}

fn pixel_attack(a: PixelArgs) -> Result<ExitCode> {
    let (_, cfg) = a.gpu.resolve(Profile::Agx)?;
    let image = load_image(a.image.as_deref())?;
    let mut sim = Simulator::new(cfg.clone())?;
    sim.set_record_leaks(false);
    let ga = GaParams { population: a.population, generations: a.generations, seed: cfg.seed, ..GaParams::default() };
    let opts = AttackOptions { tile: a.tile, noise_groups: a.noise_groups, noise_seed: cfg.seed, ga };
    let out = pixel::attack(&mut sim, &image, &opts)?;
    match out.accuracy {
        Some(acc) => println!("{} fragments, {}×{} tiles, neighbour accuracy {:.4}", out.fragments, out.grid_w, out.grid_h, acc),
        None => println!("{} fragments, {}×{} tiles, incomplete leak", out.fragments, out.grid_w, out.grid_h),
    }
    let mut art = Artifacts::new("pixel-attack", &a.out);
    art.config(&cfg);
    art.echo("image", a.image.as_ref().map_or("builtin:test128".into(), |p| p.display().to_string()));
    art.echo("tile", a.tile);
    art.echo("noise_groups", a.noise_groups);
    art.echo("population", a.population);
    art.echo("generations", a.generations);
    art.add(&a.out, out.image.encode());
    art.commit()?;
    Ok(ExitCode::SUCCESS)
}

fn cnn_attack(a: CnnArgs) -> Result<ExitCode> {
    let img = load_image(a.image.as_deref())?.resized(cnn::INPUT, cnn::INPUT).to_unit();
    let model = CnnModel::seeded(a.seed);
    let mut csv = String::from("model,filter,coverage,longest_run,mask_density\n");
    let (profile, leaked) = match a.model {
        CnnTarget::Nvidia => {
            let mut sim = Simulator::new(Profile::Nvidia.config().with_seed(a.seed))?;
            sim.set_record_leaks(false);
            let leak = cnn::attack_nvidia(&mut sim, &model, &img)?;
            let density = leak.density();
            for (f, mask) in leak.mask.chunks(cnn::CONV_THREADS).enumerate() {
                let hits = mask.iter().filter(|m| **m).count();
                let run = mask.split(|m| !*m).map(<[bool]>::len).max().unwrap_or(0);
                let coverage = hits as f64 / cnn::CONV_THREADS as f64;
                csv.push_str(&format!("nvidia,{f},{coverage:.6},{run},{density:.6}\n"));
            }
            let stitched = cnn::reconstruct_overlap(&leak.segments);
            println!("{} segments, mask density {density:.3}", leak.segments.len());
            (Profile::Nvidia, GrayImage::normalized(stitched.width, stitched.height, &stitched.pixels))
        }
        CnnTarget::Adreno => {
            let mut sim = Simulator::new(Profile::Adreno.config().with_seed(a.seed))?;
            sim.set_record_leaks(false);
            let leak = cnn::attack_adreno(&mut sim, &model, &img, a.zero_prefix)?;
            let density = leak.coverage.iter().sum::<f64>() / leak.coverage.len() as f64;
            for (f, c) in leak.coverage.iter().enumerate() {
                csv.push_str(&format!("adreno,{f},{c:.6},{},{density:.6}\n", leak.runs[f]));
            }
            println!(
                "filter {} coverage {:.3}, longest run {}",
                leak.best_filter,
                leak.best_coverage(),
                leak.longest_run
            );
            (Profile::Adreno, GrayImage::normalized(cnn::CONV, cnn::CONV, &leak.recovered))
        }
    };
    let mut art = Artifacts::new("cnn-attack", &a.out);
    art.config(&profile.config().with_seed(a.seed));
    art.echo("model", profile.name());
    art.echo("image", a.image.as_ref().map_or("builtin:test128".into(), |p| p.display().to_string()));
    art.echo("zero_prefix", a.zero_prefix);
    art.add(&a.out, leaked.encode());
    art.add(&a.csv, csv);
    art.commit()?;
    Ok(ExitCode::SUCCESS)
}

fn llm_attack(a: LlmArgs) -> Result<ExitCode> {
    let tables = match &a.tables {
        Some(p) => {
            let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            EmbeddingTables::read_from(std::io::BufReader::new(f))?
        }
        None => EmbeddingTables::desk(a.seed),
    };
    let leak = match &a.leak {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            if bytes.len() % 4 != 0 {
                bail!("{}: length {} is not a whole number of f32 words", p.display(), bytes.len());
            }
            llm::read_f32s(&bytes)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let tokens: Vec<u32> = (0..a.tokens).map(|_| rng.gen_range(0..tables.vocab as u32)).collect();
            let mut sim = Simulator::new(Profile::Nvidia.config().with_seed(a.seed))?;
            sim.set_record_leaks(false);
            llm::leak_embeddings(&mut sim, &tables, &tokens)?
        }
    };
    let lut = llm::build_lut(&tables, a.max_pos)?;
    let opts = ScanOptions { stride: if a.sliding { 1 } else { llm::CHUNK } };
    let found = llm::reconstruct(&leak, &lut, opts);
    println!("{} chunk matches, {} distinct (token, position) pairs", found.len(), llm::distinct_tokens(&found).len());
    let mut art = Artifacts::new("llm-attack", &a.out);
    art.echo("seed", a.seed);
    art.echo("tables", a.tables.as_ref().map_or(format!("builtin:desk({})", a.seed), |p| p.display().to_string()));
    art.echo("leak", a.leak.as_ref().map_or(format!("builtin:nvidia({} tokens)", a.tokens), |p| p.display().to_string()));
    art.echo("max_pos", a.max_pos);
    art.echo("stride", opts.stride);
    art.add(&a.out, llm::tokens_csv(&found));
    art.commit()?;
    Ok(ExitCode::SUCCESS)
}
