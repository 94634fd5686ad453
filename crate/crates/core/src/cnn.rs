//! Small CNN (conv 8×5×5, ReLU, 2×2 max-pool, fully connected 10-way) run
//! one kernel per layer on the simulator, and two attacks on its first layer.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::isa::{Component, RegisterModel, RegisterRef};
use crate::kernels;
use crate::sim::{
    BufferId, ColocationOrder, Dispatch, Kernel, SimError, Simulator, Wave, WaveKernel,
};

pub const INPUT: usize = 28;
pub const KERNEL: usize = 5;
pub const CONV: usize = INPUT - KERNEL + 1;
pub const FILTERS: usize = 8;
pub const CONV_THREADS: usize = CONV * CONV;
pub const POOLED: usize = CONV / 2;
pub const FC_IN: usize = FILTERS * POOLED * POOLED;
pub const CLASSES: usize = 10;
/// Values leaked per half-wave on the store-residue model.
pub const SEGMENT: usize = 16;
pub const OVERLAP: usize = 8;
/// Distance in conv outputs between consecutive leaked segments.
pub const SEGMENT_STRIDE: usize = 32;

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("expected a {INPUT}x{INPUT} image, got {0} values")]
    Shape(usize),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    /// `[filter][ky][kx]`
    pub conv_weights: Vec<f32>,
    pub conv_bias: Vec<f32>,
    /// `[class][filter * 144 + y * 12 + x]`
    pub fc_weights: Vec<f32>,
    pub fc_bias: Vec<f32>,
}

impl CnnModel {
    /// Untrained weights drawn from `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, r: f32| (0..n).map(|_| rng.gen_range(-r..r)).collect::<Vec<f32>>();
        CnnModel {
            conv_weights: draw(FILTERS * KERNEL * KERNEL, 0.5),
            conv_bias: draw(FILTERS, 0.1),
            fc_weights: draw(CLASSES * FC_IN, 0.05),
            fc_bias: draw(CLASSES, 0.1),
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.conv_bias.fill(0.0);
        self.fc_bias.fill(0.0);
        self
    }

    pub fn weight(&self, f: usize, ky: usize, kx: usize) -> f32 {
        self.conv_weights[(f * KERNEL + ky) * KERNEL + kx]
    }

    /// Pre-bias conv accumulators, `[filter][y * 24 + x]`, in the victim's summation order.
    pub fn conv_accumulators(&self, image: &[f32]) -> Vec<f32> {
        let mut out = Vec::with_capacity(FILTERS * CONV_THREADS);
        for f in 0..FILTERS {
            for t in 0..CONV_THREADS {
                let (y, x) = (t / CONV, t % CONV);
                let mut acc = 0.0f32;
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        acc += self.weight(f, ky, kx) * image[(y + ky) * INPUT + x + kx];
                    }
                }
                out.push(acc);
            }
        }
        out
    }
}

/// Register holding the conv accumulator: `r2.x` on quad files, `r2` otherwise.
pub fn accumulator_register(model: RegisterModel) -> RegisterRef {
    match model {
        RegisterModel::Quad => RegisterRef::quad(2, Component::X),
        RegisterModel::Flat => RegisterRef::r(2),
    }
}

fn scratch(model: RegisterModel, i: usize) -> RegisterRef {
    RegisterRef::from_slot(i, model)
}

fn local_ids(wave: &Wave<'_>) -> Vec<usize> {
    (0..wave.lanes()).map(|l| wave.local_id(l) as usize).collect()
}

fn global_ids(wave: &Wave<'_>) -> Vec<u64> {
    (0..wave.lanes()).map(|l| u64::from(wave.thread_id(l))).collect()
}

fn to_bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|f| f.to_bits()).collect()
}

fn from_bits(v: &[u32]) -> Vec<f32> {
    v.iter().map(|b| f32::from_bits(*b)).collect()
}

/// b0: image, b1: conv output. Group `f` applies filter `f`.
#[derive(Debug)]
struct ConvKernel(Arc<CnnModel>);

impl WaveKernel for ConvKernel {
    fn name(&self) -> &str {
        "conv5x5"
    }

    fn run(&self, wave: &mut Wave<'_>) -> Result<(), SimError> {
        let model = wave.config().register_model;
        let f = wave.group() as usize;
        let t = local_ids(wave);
        let mut acc = vec![0.0f32; t.len()];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let bases: Vec<u64> = t.iter().map(|t| ((t / CONV + ky) * INPUT + t % CONV + kx) as u64).collect();
                let x = wave.load(0, &bases, 1)?;
                wave.write(scratch(model, 0), &x)?;
                let w = self.0.weight(f, ky, kx);
                for (a, x) in acc.iter_mut().zip(&x) {
                    *a += w * f32::from_bits(*x);
                }
                wave.write(accumulator_register(model), &to_bits(&acc))?;
            }
        }
        let out: Vec<f32> = acc.iter().map(|a| a + self.0.conv_bias[f]).collect();
        wave.write(scratch(model, 1), &to_bits(&out))?;
        let bases: Vec<u64> = t.iter().map(|t| (f * CONV_THREADS + t) as u64).collect();
        wave.store(1, &bases, 1, &to_bits(&out))
    }
}

/// b0 → b1, elementwise.
#[derive(Debug)]
struct ReluKernel;

impl WaveKernel for ReluKernel {
    fn name(&self) -> &str {
        "relu"
    }

    fn run(&self, wave: &mut Wave<'_>) -> Result<(), SimError> {
        let model = wave.config().register_model;
        let ids = global_ids(wave);
        let x = wave.load(0, &ids, 1)?;
        wave.write(scratch(model, 0), &x)?;
        let y: Vec<f32> = from_bits(&x).into_iter().map(|v| v.max(0.0)).collect();
        wave.write(scratch(model, 1), &to_bits(&y))?;
        wave.store(1, &ids, 1, &to_bits(&y))
    }
}

/// b0 (8×24×24) → b1 (8×12×12). Group `f` pools filter `f`.
#[derive(Debug)]
struct PoolKernel;

impl WaveKernel for PoolKernel {
    fn name(&self) -> &str {
        "maxpool2x2"
    }

    fn run(&self, wave: &mut Wave<'_>) -> Result<(), SimError> {
        let model = wave.config().register_model;
        let f = wave.group() as usize;
        let t = local_ids(wave);
        let mut best: Vec<f32> = Vec::new();
        for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let bases: Vec<u64> = t
                .iter()
                .map(|t| (f * CONV_THREADS + (2 * (t / POOLED) + dy) * CONV + 2 * (t % POOLED) + dx) as u64)
                .collect();
            let v = from_bits(&wave.load(0, &bases, 1)?);
            wave.write(scratch(model, 0), &to_bits(&v))?;
            best = if i == 0 { v } else { best.iter().zip(&v).map(|(a, b)| a.max(*b)).collect() };
            wave.write(scratch(model, 1), &to_bits(&best))?;
        }
        let bases: Vec<u64> = t.iter().map(|t| (f * POOLED * POOLED + t) as u64).collect();
        wave.store(1, &bases, 1, &to_bits(&best))
    }
}

/// b0 (1152) → b1 (10). One thread per class.
#[derive(Debug)]
struct FcKernel(Arc<CnnModel>);

impl WaveKernel for FcKernel {
    fn name(&self) -> &str {
        "fc10"
    }

    fn run(&self, wave: &mut Wave<'_>) -> Result<(), SimError> {
        let model = wave.config().register_model;
        let classes = local_ids(wave);
        let mut acc = vec![0.0f32; classes.len()];
        for i in 0..FC_IN {
            let x = f32::from_bits(wave.load(0, &[i as u64], 1)?[0]);
            for (a, c) in acc.iter_mut().zip(&classes) {
                *a += self.0.fc_weights[c * FC_IN + i] * x;
            }
        }
        let out: Vec<f32> = acc.iter().zip(&classes).map(|(a, c)| a + self.0.fc_bias[*c]).collect();
        wave.write(scratch(model, 0), &to_bits(&out))?;
        let ids = global_ids(wave);
        wave.store(1, &ids, 1, &to_bits(&out))
    }
}

/// Buffers and kernels of one inference.
struct Victim {
    model: Arc<CnnModel>,
    input: BufferId,
    conv: BufferId,
    relu: BufferId,
    pool: BufferId,
    logits: BufferId,
}

impl Victim {
    fn new(sim: &mut Simulator, model: &CnnModel, image: &[f32]) -> Result<Self, CnnError> {
        if image.len() != INPUT * INPUT {
            return Err(CnnError::Shape(image.len()));
        }
        Ok(Victim {
            model: Arc::new(model.clone()),
            input: sim.buffer_from(&to_bits(image)),
            conv: sim.create_buffer(FILTERS * CONV_THREADS),
            relu: sim.create_buffer(FILTERS * CONV_THREADS),
            pool: sim.create_buffer(FC_IN),
            logits: sim.create_buffer(CLASSES),
        })
    }

    fn conv_dispatch(&self) -> Dispatch {
        Dispatch::new(Kernel::native(ConvKernel(self.model.clone())), FILTERS, CONV_THREADS).bind([self.input, self.conv])
    }

    fn finish(&self, sim: &mut Simulator) -> Result<ForwardRun, CnnError> {
        sim.dispatch(&Dispatch::new(Kernel::native(ReluKernel), FILTERS, CONV_THREADS).bind([self.conv, self.relu]))?;
        sim.dispatch(&Dispatch::new(Kernel::native(PoolKernel), FILTERS, POOLED * POOLED).bind([self.relu, self.pool]))?;
        sim.dispatch(&Dispatch::new(Kernel::native(FcKernel(self.model.clone())), 1, CLASSES).bind([self.pool, self.logits]))?;
        let read = |id| sim.read_words(id).map(from_bits);
        Ok(ForwardRun { conv: read(self.conv)?, relu: read(self.relu)?, pool: read(self.pool)?, logits: read(self.logits)? })
    }
}

/// Every layer's output buffer after one inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRun {
    pub conv: Vec<f32>,
    pub relu: Vec<f32>,
    pub pool: Vec<f32>,
    pub logits: Vec<f32>,
}

/// Runs one inference, one dispatch per layer.
pub fn forward(sim: &mut Simulator, model: &CnnModel, image: &[f32]) -> Result<ForwardRun, CnnError> {
    let v = Victim::new(sim, model, image)?;
    sim.dispatch(&v.conv_dispatch())?;
    v.finish(sim)
}

/// Result of the store-residue attack on the conv layer.
#[derive(Debug, Clone)]
pub struct NvidiaLeak {
    /// One 16-value segment per attacker wave, in the order the attacker saw them.
    pub segments: Vec<Vec<f32>>,
    /// Conv outputs whose value an attacker lane reproduced bit-exactly at the
    /// co-located position; ground truth only, for evaluation.
    pub mask: Vec<bool>,
    /// Victim (filter, wave) behind each segment; ground truth only.
    pub origins: Vec<(usize, usize)>,
    pub run: ForwardRun,
}

impl NvidiaLeak {
    pub fn density(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len() as f64
    }
}

/// Runs the victim once with an attacker wave behind each conv wave; the
/// victim's wave order is hidden from the attacker.
pub fn attack_nvidia(sim: &mut Simulator, model: &CnnModel, image: &[f32]) -> Result<NvidiaLeak, CnnError> {
    let v = Victim::new(sim, model, image)?;
    let conv = v.conv_dispatch();
    let waves = FILTERS * conv.waves_per_group(sim.config().wave_width);
    let ww = sim.config().wave_width;
    let out = sim.create_buffer(waves * ww);
    let attacker = Dispatch::new(kernels::nvidia_attacker(), waves, ww).bind([out]);
    let report = sim.dispatch_colocated(&[conv], &attacker, ColocationOrder::ShuffleWaves)?;
    let run = v.finish(sim)?;
    let dump = from_bits(sim.read_words(out)?);

    let mut mask = vec![false; FILTERS * CONV_THREADS];
    let mut origins = Vec::with_capacity(report.pairs.len());
    for pair in &report.pairs {
        let lanes = &dump[pair.attacker_wave * ww..(pair.attacker_wave + 1) * ww];
        let first = pair.victim_group * CONV_THREADS + pair.victim_wave * ww;
        for (l, v) in lanes.iter().enumerate() {
            let pos = first + l;
            if pos < (pair.victim_group + 1) * CONV_THREADS && run.conv[pos].to_bits() == v.to_bits() {
                mask[pos] = true;
            }
        }
        origins.push((pair.victim_group, pair.victim_wave));
    }
    let segments = dump.chunks(ww).take(report.pairs.len()).map(|w| w[..SEGMENT].to_vec()).collect();
    Ok(NvidiaLeak { segments, mask, origins, run })
}

/// Squared difference between the last 8 values of `a` and the first 8 of
/// `b`, which sit directly below them when `b` follows `a`.
pub fn overlap_cost(a: &[f32], b: &[f32]) -> f64 {
    (0..OVERLAP)
        .map(|i| {
            let d = f64::from(a[SEGMENT - OVERLAP + i]) - f64::from(b[i]);
            d * d
        })
        .sum()
}

/// Segments placed on a 24-wide grid, chain position `j` at offset `32 j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stitched {
    pub order: Vec<usize>,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Option<f32>>,
}

/// Places segments on the grid in the given chain order.
pub fn place_segments(segments: &[Vec<f32>], order: &[usize]) -> Stitched {
    let len = order.len().saturating_sub(1) * SEGMENT_STRIDE + SEGMENT;
    let height = len.div_ceil(CONV);
    let mut pixels = vec![None; height * CONV];
    for (j, &s) in order.iter().enumerate() {
        for (i, v) in segments[s].iter().enumerate() {
            pixels[j * SEGMENT_STRIDE + i] = Some(*v);
        }
    }
    Stitched { order: order.to_vec(), width: CONV, height, pixels }
}

/// Greedy chaining. The head is the segment whose cheapest predecessor is the
/// most expensive; each next segment is the cheapest unused successor. Ties go
/// to the lowest index.
pub fn reconstruct_overlap(segments: &[Vec<f32>]) -> Stitched {
    let n = segments.len();
    if n <= 1 {
        return place_segments(segments, &(0..n).collect::<Vec<_>>());
    }
    let cost: Vec<Vec<f64>> = (0..n).map(|a| (0..n).map(|b| overlap_cost(&segments[a], &segments[b])).collect()).collect();
    let incoming = |b: usize| (0..n).filter(|a| *a != b).map(|a| cost[a][b]).fold(f64::INFINITY, f64::min);
    let mut head = 0;
    for b in 1..n {
        if incoming(b) > incoming(head) {
            head = b;
        }
    }
    let mut used = vec![false; n];
    used[head] = true;
    let mut order = vec![head];
    while order.len() < n {
        let cur = *order.last().unwrap();
        let next = (0..n).filter(|b| !used[*b]).min_by(|a, b| cost[cur][*a].total_cmp(&cost[cur][*b])).unwrap();
        used[next] = true;
        order.push(next);
    }
    place_segments(segments, &order)
}

/// Result of the stale-register attack on the quad-register model.
#[derive(Debug, Clone)]
pub struct AdrenoLeak {
    /// Attacker output after stripping the zero prefix.
    pub dump: Vec<f32>,
    pub prefix_words: usize,
    /// Fraction of each filter's accumulators found as whole leaked waves.
    pub coverage: Vec<f64>,
    pub best_filter: usize,
    /// Longest run of consecutive accumulators of one filter, in values.
    pub longest_run: usize,
    /// The same, per filter.
    pub runs: Vec<usize>,
    /// Recovered accumulators of `best_filter`.
    pub recovered: Vec<Option<f32>>,
    pub run: ForwardRun,
}

impl AdrenoLeak {
    pub fn best_coverage(&self) -> f64 {
        self.coverage[self.best_filter]
    }
}

/// Runs the victim once, then an attacker with the same group shape that
/// stores its stale `r2.x`. Accumulators are matched against the victim's
/// true values wave by wave to measure coverage.
pub fn attack_adreno(
    sim: &mut Simulator,
    model: &CnnModel,
    image: &[f32],
    zero_prefix_bytes: usize,
) -> Result<AdrenoLeak, CnnError> {
    let run = forward(sim, model, image)?;
    let total = FILTERS * CONV_THREADS;
    let out = sim.create_buffer(total);
    sim.dispatch(&Dispatch::new(kernels::adreno_attacker(), FILTERS, CONV_THREADS).bind([out]))?;
    let words = sim.read_words(out)?;
    let prefix_words = words.iter().take(zero_prefix_bytes / 4).take_while(|w| **w == 0).count();
    let dump = from_bits(&words[prefix_words..]);

    let ww = sim.config().wave_width;
    let truth = model.conv_accumulators(image);
    let waves_per_filter = CONV_THREADS / ww;
    let mut by_block: HashMap<Vec<u32>, Vec<(usize, usize)>> = HashMap::new();
    for f in 0..FILTERS {
        for w in 0..waves_per_filter {
            let start = f * CONV_THREADS + w * ww;
            by_block.entry(to_bits(&truth[start..start + ww])).or_default().push((f, w));
        }
    }
    let mut found: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); FILTERS];
    let mut prev: HashMap<(usize, usize), usize> = HashMap::new();
    let mut runs = vec![0; FILTERS];
    for block in dump.chunks_exact(ww) {
        let mut cur = HashMap::new();
        if let Some(matches) = by_block.get(&to_bits(block)) {
            for &(f, w) in matches {
                found[f].insert(w);
                let len = 1 + if w > 0 { prev.get(&(f, w - 1)).copied().unwrap_or(0) } else { 0 };
                runs[f] = runs[f].max(len * ww);
                cur.insert((f, w), len);
            }
        }
        prev = cur;
    }
    let coverage: Vec<f64> = found.iter().map(|s| (s.len() * ww) as f64 / CONV_THREADS as f64).collect();
    let best_filter = (0..FILTERS).fold(0, |b, f| if coverage[f] > coverage[b] { f } else { b });
    let mut recovered = vec![None; CONV_THREADS];
    for &w in &found[best_filter] {
        for i in w * ww..(w + 1) * ww {
            recovered[i] = Some(truth[best_filter * CONV_THREADS + i]);
        }
    }
    Ok(AdrenoLeak { dump, prefix_words, coverage, best_filter, longest_run: runs.iter().copied().max().unwrap_or(0), runs, recovered, run })
}
