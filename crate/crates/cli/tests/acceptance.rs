//! One PASS/FAIL line per acceptance criterion. Exits nonzero when any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::HashSet;
use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regleak::cnn::{self, overlap_cost, place_segments, reconstruct_overlap, CnnModel};
use regleak::covert::{sweep, Channel, TransmitOptions, DEFAULT_GRID};
use regleak::isa::Program;
use regleak::kernels;
use regleak::llm::{self, EmbeddingTables, ScanOptions};
use regleak::pgm::GrayImage;
use regleak::pixel::{self, AttackOptions, Compatibility, GaParams, Tile};
use regleak::sanitize::{analyze, rewrite_cleanup, CleanupScope};
use regleak::sim::{Dispatch, Lifecycle, Profile, Simulator};
use tempfile::TempDir;

const FIXTURE: &[u8] = include_bytes!("../../core/fixtures/test128.pgm");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn random_bytes(len: usize, seed: u64) -> Vec<u8> {
    let mut m = vec![0; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut m);
    m
}

fn random_image(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cnn::INPUT * cnn::INPUT).map(|_| rng.gen::<f32>()).collect()
}

fn covert_round_trip() -> Outcome {
    let t = Instant::now();
    let msg = random_bytes(10 * 1024, 42);
    let mut notes = Vec::new();
    let mut pass = true;
    for p in Profile::ALL {
        let ch = Channel::for_profile(p);
        let (got, stats) = ch.transmit(&msg, &TransmitOptions::matched(ch.config())).unwrap();
        pass &= got == msg && stats.losses == 0;
        let zero = Channel::with_config(p, p.config().with_lifecycle(Lifecycle::ZeroOnAlloc));
        let (_, zs) = zero.transmit(&msg, &TransmitOptions::matched(zero.config())).unwrap();
        pass &= zs.frames_received == 0;
        notes.push(format!("{p}: {} frames ok, zeroed {}", stats.frames_sent, zs.frames_received));
    }
    let elapsed = t.elapsed();
    pass &= elapsed < Duration::from_secs(10);
    outcome(pass, format!("{} in {}", notes.join("; "), secs(elapsed)))
}

fn sweep_diagonal() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for p in [Profile::Agx, Profile::Nvidia] {
        let cells = sweep(&Channel::for_profile(p), &DEFAULT_GRID, 42).unwrap();
        let best = cells.iter().fold(&cells[0], |b, c| {
            if c.stats.bytes_per_dispatch() > b.stats.bytes_per_dispatch() { c } else { b }
        });
        pass &= best.sender_groups == best.receiver_groups;
        notes.push(format!("{p} peak at ({}, {})", best.sender_groups, best.receiver_groups));
    }
    outcome(pass, notes.join("; "))
}

/// Direct convolution plus bias, summed in kernel row-major order.
fn host_conv(m: &CnnModel, img: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(cnn::FILTERS * cnn::CONV_THREADS);
    for f in 0..cnn::FILTERS {
        for y in 0..cnn::CONV {
            for x in 0..cnn::CONV {
                let mut acc = 0f32;
                for ky in 0..cnn::KERNEL {
                    for kx in 0..cnn::KERNEL {
                        acc += m.conv_weights[(f * cnn::KERNEL + ky) * cnn::KERNEL + kx] * img[(y + ky) * cnn::INPUT + x + kx];
                    }
                }
                out.push(acc + m.conv_bias[f]);
            }
        }
    }
    out
}

fn nvidia_mask() -> Outcome {
    let model = CnnModel::seeded(1);
    let img = random_image(1);
    let mut sim = Simulator::new(Profile::Nvidia.config().with_seed(1)).unwrap();
    let leak = cnn::attack_nvidia(&mut sim, &model, &img).unwrap();
    let want: Vec<bool> = (0..cnn::FILTERS * cnn::CONV_THREADS).map(|p| p % 32 < 16).collect();
    let oracle = host_conv(&model, &img);
    let bit_equal = leak.segments.iter().zip(&leak.origins).all(|(seg, (f, w))| {
        let start = f * cnn::CONV_THREADS + w * 32;
        seg.iter().zip(&oracle[start..start + 16]).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    let pass = leak.mask == want && leak.density() == 0.5 && bit_equal;
    outcome(pass, format!("density {:.3}, values bit-equal: {bit_equal}", leak.density()))
}

fn brute_force_order(segs: &[Vec<f32>]) -> Vec<usize> {
    let n = segs.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (f64::INFINITY, perm.clone());
    // Heap's algorithm
    let mut c = vec![0; n];
    let score = |p: &[usize]| p.windows(2).map(|w| overlap_cost(&segs[w[0]], &segs[w[1]])).sum::<f64>();
    best.0 = score(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 { perm.swap(0, i) } else { perm.swap(c[i], i) }
            let s = score(&perm);
            if s < best.0 || (s == best.0 && perm < best.1) {
                best = (s, perm.clone());
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best.1
}

fn overlap_stitching() -> Outcome {
    let image = GrayImage::decode(FIXTURE).unwrap().resized(cnn::CONV, 64).to_unit();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cases = 0;
    let mut pass = true;
    for n in 2..=8 {
        for shift in 0..3 {
            let truth: Vec<Vec<f32>> =
                (0..n).map(|j| image[(j + shift) * 32..(j + shift) * 32 + cnn::SEGMENT].to_vec()).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let segs: Vec<Vec<f32>> = perm.iter().map(|i| truth[*i].clone()).collect();
            pass &= reconstruct_overlap(&segs) == place_segments(&segs, &brute_force_order(&segs));
            cases += 1;
        }
    }
    outcome(pass, format!("{cases} shuffles of 2..8 segments"))
}

fn adreno_coverage() -> Outcome {
    let t = Instant::now();
    let mut sim = Simulator::new(Profile::Adreno.config().with_seed(5)).unwrap();
    let leak = cnn::attack_adreno(&mut sim, &CnnModel::seeded(5), &random_image(5), 16).unwrap();
    let elapsed = t.elapsed();
    let pass = leak.best_coverage() >= 0.40 && leak.longest_run >= 256 && elapsed < Duration::from_secs(30);
    outcome(
        pass,
        format!(
            "filter {} coverage {:.3}, longest run {}, {}",
            leak.best_filter,
            leak.best_coverage(),
            leak.longest_run,
            secs(elapsed)
        ),
    )
}

fn llm_reconstruction() -> Outcome {
    let tables = EmbeddingTables::desk(7);
    let t = Instant::now();
    let lut = llm::build_lut(&tables, 30).unwrap();
    let lut_time = t.elapsed();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tokens: Vec<u32> = (0..20).map(|_| rng.gen_range(0..1000)).collect();
    let mut sim = Simulator::new(Profile::Nvidia.config().with_seed(8)).unwrap();
    let leak = llm::leak_embeddings(&mut sim, &tables, &tokens).unwrap();
    let t = Instant::now();
    let found = llm::reconstruct(&leak, &lut, ScanOptions::default());
    let scan_time = t.elapsed();
    let got: HashSet<(u32, u16)> = llm::distinct_tokens(&found).into_iter().collect();
    let want: HashSet<(u32, u16)> = tokens.iter().enumerate().map(|(i, t)| (*t, i as u16)).collect();
    let correct = want.intersection(&got).count();
    let false_hits = (0..100u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f32> = (0..2048).map(|_| rng.gen_range(-0.2f32..0.2)).collect();
            llm::reconstruct(&noise, &lut, ScanOptions { stride: 1 }).len()
        })
        .sum::<usize>();
    let pass = correct == 20
        && got.len() == 20
        && false_hits == 0
        && lut_time < Duration::from_secs(60)
        && scan_time < Duration::from_secs(5);
    outcome(
        pass,
        format!(
            "{correct}/20 tokens, {} wrong, {false_hits} noise hits; LUT {}, scan {}",
            got.len() - correct,
            secs(lut_time),
            secs(scan_time)
        ),
    )
}

fn sanitizer() -> Outcome {
    let rejected = [kernels::adreno_attacker(), kernels::agx_attacker(), kernels::nvidia_attacker()]
        .iter()
        .all(|p| !analyze(p).accepted());
    let accepted = analyze(&kernels::fragment_shader()).accepted();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut n_accept, mut unsound) = (0, 0);
    for _ in 0..1000 {
        let p = common::random_program(&mut rng, 12);
        if analyze(&p).accepted() {
            n_accept += 1;
            let (leaks, _) = common::run_after_filler(&p);
            unsound += usize::from(!leaks.is_empty());
        }
    }
    let pass = rejected && accepted && unsound == 0;
    outcome(
        pass,
        format!("fixtures rejected: {rejected}, shader accepted: {accepted}, {n_accept}/1000 accepted, {unsound} leaked"),
    )
}

fn cleanup_differential() -> Outcome {
    let victim = kernels::fragment_shader();
    let attacker = kernels::agx_attacker();
    let cfg = Profile::Agx.config().with_remap(regleak::sim::RemapPolicy::Identity);
    assert_eq!(cfg.lifecycle, Lifecycle::NoClear);
    let run = |v: &Program| {
        let mut sim = Simulator::new(cfg.clone()).unwrap();
        let texture = sim.buffer_from(&(0..256u32).map(|i| (i as f32 / 255.0).to_bits()).collect::<Vec<_>>());
        let tiles = sim.create_buffer(256 * 4);
        sim.dispatch(&Dispatch::new(v.clone(), 4, 64).bind([texture, tiles])).unwrap();
        let out = sim.read_words(tiles).unwrap().to_vec();
        let spy = sim.create_buffer(256);
        let report = sim.dispatch(&Dispatch::new(attacker.clone(), 4, 64).bind([spy])).unwrap();
        (out, report.leaks.iter().filter(|l| l.was_uninitialized).map(|l| l.value).collect::<Vec<u32>>())
    };
    let (out_before, leaks_before) = run(&victim);
    let (out_after, leaks_after) = run(&rewrite_cleanup(&victim, CleanupScope::Written));
    let nonzero_before = leaks_before.iter().filter(|v| **v != 0).count();
    let nonzero_after = leaks_after.iter().filter(|v| **v != 0).count();
    let pass = nonzero_before > 0 && !leaks_after.is_empty() && nonzero_after == 0 && out_before == out_after;
    outcome(
        pass,
        format!("{nonzero_before} nonzero stale reads before, {nonzero_after} after, outputs identical: {}", out_before == out_after),
    )
}

fn jigsaw() -> Outcome {
    let img = GrayImage::decode(FIXTURE).unwrap();
    let mut sim = Simulator::new(Profile::Agx.config().with_seed(2024)).unwrap();
    sim.set_record_leaks(false);
    let out = pixel::attack(&mut sim, &img, &AttackOptions::default()).unwrap();
    let acc = out.accuracy.unwrap_or(0.0);
    let generations = out.solution.history.len() - 1;

    let gradient: Vec<f32> = (0..32 * 32).map(|i| ((i % 32) as f32 * 0.6 + (i / 32) as f32 * 0.35) / 64.0).collect();
    let tiles: Vec<Tile> = (0..4)
        .map(|c| Tile {
            width: 16,
            height: 16,
            pixels: (0..256).map(|i| gradient[((c / 2) * 16 + i / 16) * 32 + (c % 2) * 16 + i % 16]).collect(),
            holes: vec![false; 256],
            source: Some(c),
        })
        .rev()
        .collect();
    let compat = Compatibility::new(&tiles);
    let mut perms = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    if HashSet::from([a, b, c, d]).len() == 4 {
                        perms.push(vec![a, b, c, d]);
                    }
                }
            }
        }
    }
    let oracle = perms.iter().min_by(|x, y| compat.fitness(x, 2).total_cmp(&compat.fitness(y, 2))).unwrap();
    let solved = pixel::jigsaw_solve(&tiles, 2, 2, &GaParams::default());
    let small = &solved.arrangement == oracle && perms.len() == 24;
    let pass = acc >= 0.95 && generations <= 100 && small;
    outcome(pass, format!("8x8 neighbour accuracy {acc:.4} after {generations} generations; 2x2 equals brute force: {small}"))
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_regleak");
    let shader = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/kernels/agx_attacker.asm");
    let runs: [&[&str]; 7] = [
        &["sim-run", "--profile", "nvidia", "--seed", "42"],
        &["covert-bench", "--profile", "agx", "--seed", "42"],
        &["pixel-attack", "--seed", "42"],
        &["cnn-attack", "--model", "nvidia", "--seed", "42"],
        &["cnn-attack", "--model", "adreno", "--seed", "42"],
        &["llm-attack", "--seed", "42"],
        &["sanitize", "rewrite", shader, "-o", "clean.asm"],
    ];
    let mut files = 0;
    for args in runs {
        let dirs = [TempDir::new().unwrap(), TempDir::new().unwrap()];
        for d in &dirs {
            let status = Command::new(bin).args(args).current_dir(d.path()).output().unwrap().status;
            if !status.success() {
                return outcome(false, format!("{} failed", args[0]));
            }
        }
        let mut names: Vec<_> = fs::read_dir(dirs[0].path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            if fs::read(dirs[0].path().join(&n)).unwrap() != fs::read(dirs[1].path().join(&n)).unwrap() {
                return outcome(false, format!("{} differs for {}", n.to_string_lossy(), args[0]));
            }
            files += 1;
        }
    }
    outcome(true, format!("{} runs, {files} artifacts byte-identical", runs.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("covert channel round trip", covert_round_trip),
        ("sweep peaks on the diagonal", sweep_diagonal),
        ("NVIDIA CNN leak mask", nvidia_mask),
        ("overlap reconstruction", overlap_stitching),
        ("Adreno CNN coverage", adreno_coverage),
        ("LLM token reconstruction", llm_reconstruction),
        ("sanitizer soundness", sanitizer),
        ("cleanup rewriter", cleanup_differential),
        ("jigsaw pipeline", jigsaw),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.pass);
        println!("{} criterion {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
