//! Tiled-rendering victim and screen reconstruction from leaked fragments.
//!
//! The victim draws a grayscale texture with the shipped fragment shader, one
//! thread group per screen tile. The rasterizer hands pixels to threads in
//! Morton order inside each tile. An attacker wave queued behind every victim
//! wave dumps the whole register file; fragments are found by their alpha of
//! exactly 1.0, laid out with a mapping learnt from a calibration render, and
//! the shuffled tiles are put back together by [`jigsaw_solve`].

mod jigsaw;
mod scene;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::isa::{Address, Instruction, Program, RegisterRef};
use crate::kernels;
use crate::pgm::GrayImage;
use crate::sim::{ColocationOrder, Dispatch, Kernel, SimError, Simulator, Wave, WaveKernel};

pub use jigsaw::{jigsaw_solve, neighbor_accuracy, Compatibility, GaParams, Solution};
pub use scene::{synthetic_scene, FIXTURE_SEED};

pub const DEFAULT_TILE: usize = 16;
/// Share of a wave's lanes that must agree on the alpha slot.
pub const ALPHA_AGREEMENT: f64 = 0.9;
const ONE: u32 = 0x3f80_0000;
/// Calibration colours are `(index + 1) / CALIBRATION_SCALE`, exact in f32.
const CALIBRATION_SCALE: f32 = 2048.0;

#[derive(Debug, Error)]
pub enum PixelError {
    #[error("tile size {0} unsupported: need a power of two whose area is a multiple of the wave width and at most 1024")]
    TileSize(usize),
    #[error("image is empty")]
    EmptyImage,
    #[error("calibration did not yield a bijective pixel mapping")]
    Calibration,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// One grayscale screen tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    /// Pixels no fragment was found for; their value is 0.
    pub holes: Vec<bool>,
    /// Grid cell the tile came from, when known.
    pub source: Option<usize>,
}

impl Tile {
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn hole_count(&self) -> usize {
        self.holes.iter().filter(|h| **h).count()
    }
}

/// Colour registers of one lane, found in an attacker dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FragmentRecord {
    pub rgba: [f32; 4],
    /// Attacker wave index in the leak stream.
    pub wave: usize,
    pub lane: usize,
}

/// Screen position, inside a tile, of every thread of a tile's group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMapping {
    pub tile: usize,
    /// `(x, y)` per local thread index (`wave * wave_width + lane`).
    pub cells: Vec<(u16, u16)>,
}

impl PixelMapping {
    /// The rasterizer's assignment: Morton order inside the tile.
    pub fn morton(tile: usize) -> Self {
        let cells = (0..tile * tile).map(|t| (deinterleave(t) as u16, deinterleave(t >> 1) as u16)).collect();
        PixelMapping { tile, cells }
    }

    pub fn is_bijective(&self) -> bool {
        let mut seen = vec![false; self.tile * self.tile];
        self.cells.len() == seen.len()
            && self.cells.iter().all(|&(x, y)| {
                let i = y as usize * self.tile + x as usize;
                (x as usize) < self.tile && (y as usize) < self.tile && !std::mem::replace(&mut seen[i], true)
            })
    }
}

fn deinterleave(mut v: usize) -> usize {
    let mut out = 0;
    let mut bit = 0;
    while v != 0 {
        out |= (v & 1) << bit;
        v >>= 2;
        bit += 1;
    }
    out
}

fn check_tile(tile: usize, wave_width: usize) -> Result<(), PixelError> {
    let area = tile * tile;
    if !tile.is_power_of_two() || !area.is_multiple_of(wave_width) || area > 1024 {
        return Err(PixelError::TileSize(tile));
    }
    Ok(())
}

/// A render pass ready to dispatch.
#[derive(Debug, Clone)]
pub struct RenderPass {
    pub dispatch: Dispatch,
    pub tile: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub width: usize,
    pub height: usize,
    /// Tile memory: RGBA per thread.
    pub target: crate::sim::BufferId,
}

impl RenderPass {
    /// Uploads `texture` (row-major, `width × height`, zero-padded up to whole
    /// tiles) in the order the rasterizer feeds threads.
    pub fn new(sim: &mut Simulator, texture: &[f32], width: usize, height: usize, tile: usize) -> Result<Self, PixelError> {
        check_tile(tile, sim.config().wave_width)?;
        if width == 0 || height == 0 {
            return Err(PixelError::EmptyImage);
        }
        assert_eq!(texture.len(), width * height);
        let (tiles_x, tiles_y) = (width.div_ceil(tile), height.div_ceil(tile));
        let map = PixelMapping::morton(tile);
        let mut fed = Vec::with_capacity(tiles_x * tiles_y * tile * tile);
        for g in 0..tiles_x * tiles_y {
            let (ox, oy) = ((g % tiles_x) * tile, (g / tiles_x) * tile);
            for &(x, y) in &map.cells {
                let (x, y) = (ox + x as usize, oy + y as usize);
                let v = if x < width && y < height { texture[y * width + x] } else { 0.0 };
                fed.push(v.to_bits());
            }
        }
        let source = sim.buffer_from(&fed);
        let target = sim.create_buffer(fed.len() * 4);
        let dispatch = Dispatch::new(kernels::fragment_shader(), tiles_x * tiles_y, tile * tile).bind([source, target]);
        Ok(RenderPass { dispatch, tile, tiles_x, tiles_y, width, height, target })
    }

    pub fn waves_per_tile(&self, wave_width: usize) -> usize {
        self.tile * self.tile / wave_width
    }
}

/// Renders `image` on its own and returns the tile memory (RGBA per thread).
pub fn render_victim(sim: &mut Simulator, image: &GrayImage, tile: usize) -> Result<(RenderPass, Vec<f32>), PixelError> {
    let pass = RenderPass::new(sim, &image.to_unit(), image.width, image.height, tile)?;
    sim.dispatch(&pass.dispatch)?;
    let out = sim.read_words(pass.target)?.iter().map(|w| f32::from_bits(*w)).collect();
    Ok((pass, out))
}

/// Stand-in for the rest of the rendering pipeline: fills every register with
/// uniform floats in `[0, 1)`, a few of them clamped to exactly 1.0.
#[derive(Debug, Clone)]
pub struct NoiseKernel {
    pub seed: u64,
    pub clamp_rate: f64,
}

impl WaveKernel for NoiseKernel {
    fn name(&self) -> &str {
        "pipeline_noise"
    }

    fn run(&self, wave: &mut Wave<'_>) -> Result<(), SimError> {
        let p = wave.placement();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((p.group as u64) << 20 | p.wave_in_group as u64));
        let model = wave.config().register_model;
        for slot in 0..wave.config().regs_per_thread {
            let values: Vec<u32> = (0..wave.lanes())
                .map(|_| if rng.gen_bool(self.clamp_rate) { ONE } else { rng.gen::<f32>().to_bits() })
                .collect();
            wave.write(RegisterRef::from_slot(slot, model), &values)?;
        }
        Ok(())
    }
}

/// Dumps every register of every lane with one vector store.
pub fn dump_kernel(sim: &Simulator) -> Program {
    let cfg = sim.config();
    let regs = (0..cfg.regs_per_thread).map(|i| RegisterRef::from_slot(i, cfg.register_model));
    Program::new("register_dump", vec![Instruction::store(Address::per_thread(0), regs), Instruction::exit()])
        .expect("dump kernel is well formed")
}

/// What ran directly before an attacker wave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaveSource {
    Victim { group: usize, wave: usize },
    Noise,
}

/// Attacker register dumps, one per victim or noise wave, in retire order.
#[derive(Debug, Clone)]
pub struct LeakCapture {
    pub dump: Vec<u32>,
    pub regs: usize,
    pub lanes: usize,
    /// Ground truth for each attacker wave; the attack never reads it.
    pub provenance: Vec<WaveSource>,
}

impl LeakCapture {
    pub fn waves(&self) -> usize {
        self.provenance.len()
    }

    fn wave(&self, w: usize) -> &[u32] {
        let size = self.lanes * self.regs;
        &self.dump[w * size..(w + 1) * size]
    }
}

/// Runs the pass with an attacker wave behind every wave, interleaved with
/// `noise_groups` groups of pipeline noise. Groups retire in a shuffled order.
pub fn leak_render(sim: &mut Simulator, pass: &RenderPass, noise_groups: usize, noise_seed: u64) -> Result<LeakCapture, PixelError> {
    let ww = sim.config().wave_width;
    let regs = sim.config().regs_per_thread;
    let mut victims = vec![pass.dispatch.clone()];
    if noise_groups > 0 {
        let noise = NoiseKernel { seed: noise_seed, clamp_rate: 0.02 };
        victims.push(Dispatch::new(Kernel::native(noise), noise_groups, pass.tile * pass.tile));
    }
    let waves = (pass.tiles_x * pass.tiles_y + noise_groups) * pass.waves_per_tile(ww);
    let out = sim.create_buffer(waves * ww * regs);
    let attacker = Dispatch::new(dump_kernel(sim), waves, ww).bind([out]);
    let report = sim.dispatch_colocated(&victims, &attacker, ColocationOrder::ShuffleGroups)?;
    let provenance = report
        .pairs
        .iter()
        .map(|p| match p.victim {
            0 => WaveSource::Victim { group: p.victim_group, wave: p.victim_wave },
            _ => WaveSource::Noise,
        })
        .collect();
    Ok(LeakCapture { dump: sim.read_words(out)?.to_vec(), regs, lanes: ww, provenance })
}

fn unit(bits: u32) -> bool {
    (0.0..=1.0).contains(&f32::from_bits(bits))
}

/// Finds the fragments in a leak stream.
///
/// Each lane's dump is read cyclically, since register remapping rotates
/// the file. A wave holds fragments when one slot carries exactly 1.0 in at
/// least [`ALPHA_AGREEMENT`] of its lanes; the three slots before it are the
/// colour. When several neighbouring slots all hold 1.0 the last one is the
/// alpha. Lanes of an accepted wave whose quad is not a well-formed fragment
/// are dropped.
pub fn identify_fragments(capture: &LeakCapture) -> Vec<FragmentRecord> {
    let (regs, lanes) = (capture.regs, capture.lanes);
    let mut out = Vec::new();
    for w in 0..capture.waves() {
        let dump = capture.wave(w);
        let lane = |l: usize| &dump[l * regs..(l + 1) * regs];
        let counts: Vec<usize> = (0..regs).map(|s| (0..lanes).filter(|l| lane(*l)[s] == ONE).count()).collect();
        let max = *counts.iter().max().unwrap_or(&0);
        if (max as f64) < ALPHA_AGREEMENT * lanes as f64 || max == 0 {
            continue;
        }
        let Some(alpha) = (0..regs).find(|s| counts[*s] == max && counts[(s + 1) % regs] != max) else {
            // every slot of every lane is 1.0
            out.extend((0..lanes).map(|l| FragmentRecord { rgba: [1.0; 4], wave: w, lane: l }));
            continue;
        };
        for l in 0..lanes {
            let quad: [u32; 4] = std::array::from_fn(|i| lane(l)[(alpha + regs - 3 + i) % regs]);
            if quad[3] == ONE && quad.iter().all(|b| unit(*b)) {
                out.push(FragmentRecord { rgba: quad.map(f32::from_bits), wave: w, lane: l });
            }
        }
    }
    out
}

/// Mean of the distinct colour channel values.
pub fn collapse(rgba: [f32; 4]) -> f32 {
    let mut distinct: Vec<f32> = Vec::with_capacity(3);
    for c in &rgba[..3] {
        if !distinct.iter().any(|d| d.to_bits() == c.to_bits()) {
            distinct.push(*c);
        }
    }
    distinct.iter().sum::<f32>() / distinct.len() as f32
}

/// Groups fragments into tiles: every `waves_per_tile` consecutive waves that
/// hold fragments form one tile, laid out with `mapping`.
pub fn to_grayscale(fragments: &[FragmentRecord], mapping: &PixelMapping, wave_width: usize) -> Vec<Tile> {
    let t = mapping.tile;
    let wpt = t * t / wave_width;
    let mut waves: Vec<usize> = fragments.iter().map(|f| f.wave).collect();
    waves.dedup();
    let mut tiles: Vec<Tile> = (0..waves.len().div_ceil(wpt))
        .map(|_| Tile { width: t, height: t, pixels: vec![0.0; t * t], holes: vec![true; t * t], source: None })
        .collect();
    let mut rank = 0;
    let mut last = None;
    for f in fragments {
        if last != Some(f.wave) {
            if last.is_some() {
                rank += 1;
            }
            last = Some(f.wave);
        }
        let (x, y) = mapping.cells[(rank % wpt) * wave_width + f.lane];
        let i = y as usize * t + x as usize;
        let tile = &mut tiles[rank / wpt];
        tile.pixels[i] = collapse(f.rgba);
        tile.holes[i] = false;
    }
    tiles
}

/// Learns the rasterizer's pixel order by rendering a texture whose colour
/// encodes each pixel's position inside its tile.
pub fn calibrate(sim: &mut Simulator, tile: usize) -> Result<PixelMapping, PixelError> {
    check_tile(tile, sim.config().wave_width)?;
    let texture: Vec<f32> = (0..tile * tile).map(|i| (i + 1) as f32 / CALIBRATION_SCALE).collect();
    let pass = RenderPass::new(sim, &texture, tile, tile, tile)?;
    let capture = leak_render(sim, &pass, 0, 0)?;
    let ww = capture.lanes;
    let mut cells = vec![(u16::MAX, u16::MAX); tile * tile];
    let mut rank = 0;
    let mut last = None;
    for f in identify_fragments(&capture) {
        if last.is_some_and(|w| w != f.wave) {
            rank += 1;
        }
        last = Some(f.wave);
        let i = (collapse(f.rgba) * CALIBRATION_SCALE).round() as usize;
        if i == 0 || i > tile * tile || rank * ww + f.lane >= cells.len() {
            return Err(PixelError::Calibration);
        }
        cells[rank * ww + f.lane] = (((i - 1) % tile) as u16, ((i - 1) / tile) as u16);
    }
    scrub(sim)?;
    let mapping = PixelMapping { tile, cells };
    if mapping.is_bijective() {
        Ok(mapping)
    } else {
        Err(PixelError::Calibration)
    }
}

/// Zeroes every register on every SIMD unit, so the calibration image does
/// not show up again as stale fragments.
fn scrub(sim: &mut Simulator) -> Result<(), PixelError> {
    let cfg = sim.config();
    let mut code: Vec<Instruction> =
        (0..cfg.regs_per_thread).map(|i| Instruction::mov_imm(RegisterRef::from_slot(i, cfg.register_model), 0)).collect();
    code.push(Instruction::exit());
    let program = Program::new("scrub", code).expect("scrub kernel is well formed");
    sim.dispatch(&Dispatch::new(program, cfg.simd_count(), cfg.wave_width))?;
    Ok(())
}

/// Places tiles by arrangement into a `grid_w × grid_h` mosaic, cropped to
/// `width × height`.
pub fn assemble(tiles: &[Tile], arrangement: &[usize], grid_w: usize, width: usize, height: usize) -> Vec<f32> {
    let mut out = vec![0.0; width * height];
    for (cell, t) in arrangement.iter().enumerate() {
        let tile = &tiles[*t];
        let (ox, oy) = ((cell % grid_w) * tile.width, (cell / grid_w) * tile.height);
        for y in 0..tile.height {
            for x in 0..tile.width {
                let (px, py) = (ox + x, oy + y);
                if px < width && py < height {
                    out[py * width + px] = tile.at(x, y);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackOptions {
    pub tile: usize,
    pub noise_groups: usize,
    pub noise_seed: u64,
    pub ga: GaParams,
}

impl Default for AttackOptions {
    fn default() -> Self {
        AttackOptions { tile: DEFAULT_TILE, noise_groups: 0, noise_seed: 0, ga: GaParams::default() }
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub image: GrayImage,
    pub tiles: Vec<Tile>,
    pub solution: Solution,
    pub grid_w: usize,
    pub grid_h: usize,
    pub fragments: usize,
    /// Neighbour accuracy against the simulator's ground truth; `None` when
    /// the leak did not yield exactly one tile per grid cell.
    pub accuracy: Option<f64>,
}

/// Full pipeline: calibrate, render with an attacker behind every wave,
/// identify fragments, collapse to grayscale and solve the jigsaw.
pub fn attack(sim: &mut Simulator, image: &GrayImage, opts: &AttackOptions) -> Result<AttackOutcome, PixelError> {
    let mapping = calibrate(sim, opts.tile)?;
    let pass = RenderPass::new(sim, &image.to_unit(), image.width, image.height, opts.tile)?;
    let capture = leak_render(sim, &pass, opts.noise_groups, opts.noise_seed)?;
    let fragments = identify_fragments(&capture);
    let ww = capture.lanes;
    let mut tiles = to_grayscale(&fragments, &mapping, ww);

    let wpt = pass.waves_per_tile(ww);
    let mut waves: Vec<usize> = fragments.iter().map(|f| f.wave).collect();
    waves.dedup();
    for (k, tile) in tiles.iter_mut().enumerate() {
        if let Some(WaveSource::Victim { group, .. }) = waves.get(k * wpt).map(|w| capture.provenance[*w]) {
            tile.source = Some(group);
        }
    }

    let (grid_w, grid_h) = (pass.tiles_x, pass.tiles_y);
    let n = grid_w * grid_h;
    let blank = Tile { width: opts.tile, height: opts.tile, pixels: vec![0.0; opts.tile * opts.tile], holes: vec![true; opts.tile * opts.tile], source: None };
    let complete = tiles.len() == n;
    tiles.resize(n, blank);
    let solution = jigsaw_solve(&tiles, grid_w, grid_h, &opts.ga);
    let accuracy = complete
        .then(|| tiles.iter().map(|t| t.source).collect::<Option<Vec<usize>>>())
        .flatten()
        .map(|source| neighbor_accuracy(&solution.arrangement, &source, grid_w));
    let pixels = assemble(&tiles, &solution.arrangement, grid_w, image.width, image.height);
    Ok(AttackOutcome {
        image: GrayImage::from_unit(image.width, image.height, &pixels),
        tiles,
        solution,
        grid_w,
        grid_h,
        fragments: fragments.len(),
        accuracy,
    })
}
