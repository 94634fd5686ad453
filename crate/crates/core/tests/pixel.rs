use std::collections::BTreeSet;

use regleak::pgm::GrayImage;
use regleak::pixel::{
    attack, calibrate, collapse, identify_fragments, jigsaw_solve, leak_render, neighbor_accuracy, render_victim,
    synthetic_scene, to_grayscale, AttackOptions, Compatibility, GaParams, LeakCapture, PixelError, PixelMapping,
    RenderPass, Tile, WaveSource, FIXTURE_SEED,
};
use regleak::sim::{Profile, Simulator};

const FIXTURE: &[u8] = include_bytes!("../fixtures/test128.pgm");

fn agx(seed: u64) -> Simulator {
    Simulator::new(Profile::Agx.config().with_seed(seed)).unwrap()
}

fn cut(img: &GrayImage, tile: usize) -> Vec<Tile> {
    let (gw, gh) = (img.width / tile, img.height / tile);
    let unit = img.to_unit();
    (0..gw * gh)
        .map(|c| {
            let (ox, oy) = ((c % gw) * tile, (c / gw) * tile);
            let pixels = (0..tile * tile).map(|i| unit[(oy + i / tile) * img.width + ox + i % tile]).collect();
            Tile { width: tile, height: tile, pixels, holes: vec![false; tile * tile], source: Some(c) }
        })
        .collect()
}

fn gradient(w: usize, h: usize) -> GrayImage {
    let unit: Vec<f32> = (0..w * h).map(|i| ((i % w) as f32 * 0.6 + (i / w) as f32 * 0.35) / (w + h) as f32).collect();
    GrayImage::from_unit(w, h, &unit)
}

#[test]
fn shipped_fixture_is_the_synthetic_scene() {
    assert_eq!(GrayImage::decode(FIXTURE).unwrap(), synthetic_scene(128, 128, FIXTURE_SEED));
}

#[test]
fn one_group_per_tile_and_white_stays_white() {
    let mut sim = agx(0);
    let white = GrayImage { width: 64, height: 64, pixels: vec![255; 64 * 64] };
    let (pass, out) = render_victim(&mut sim, &white, 16).unwrap();
    assert_eq!(pass.dispatch.group_count, 16);
    assert!(out.iter().all(|v| *v == 1.0));

    // leaked colour registers are 1.0 too
    let mut sim = agx(1);
    let pass = RenderPass::new(&mut sim, &white.to_unit(), 64, 64, 16).unwrap();
    let cap = leak_render(&mut sim, &pass, 0, 0).unwrap();
    let frags = identify_fragments(&cap);
    assert_eq!(frags.len(), 16 * 256);
    assert!(frags.iter().all(|f| f.rgba == [1.0; 4]));
}

#[test]
fn odd_sizes_are_padded_and_bad_tiles_rejected() {
    let mut sim = agx(0);
    let img = gradient(40, 20);
    let (pass, out) = render_victim(&mut sim, &img, 16).unwrap();
    assert_eq!((pass.tiles_x, pass.tiles_y), (3, 2));
    assert_eq!(out.len(), 6 * 256 * 4);
    for t in [0, 3, 4, 64] {
        assert!(matches!(render_victim(&mut sim, &img, t), Err(PixelError::TileSize(_))), "tile {t}");
    }
}

#[test]
fn calibration_recovers_the_rasterizer_order() {
    for (tile, seed) in [(8, 1), (16, 2), (32, 3)] {
        let mut sim = agx(seed);
        let mapping = calibrate(&mut sim, tile).unwrap();
        assert!(mapping.is_bijective());
        assert_eq!(mapping, PixelMapping::morton(tile));
    }
    assert!(!PixelMapping { tile: 2, cells: vec![(0, 0), (0, 0), (1, 0), (1, 1)] }.is_bijective());
}

fn labels(cap: &LeakCapture) -> (usize, usize, usize) {
    let frags = identify_fragments(cap);
    let positives = cap.provenance.iter().filter(|p| matches!(p, WaveSource::Victim { .. })).count() * cap.lanes;
    let tp = frags.iter().filter(|f| matches!(cap.provenance[f.wave], WaveSource::Victim { .. })).count();
    (tp, frags.len(), positives)
}

#[test]
fn fragment_identification_on_pure_and_mixed_streams() {
    let img = synthetic_scene(64, 64, 3);

    let mut sim = agx(7);
    let pass = RenderPass::new(&mut sim, &img.to_unit(), 64, 64, 16).unwrap();
    let cap = leak_render(&mut sim, &pass, 0, 0).unwrap();
    let (tp, found, pos) = labels(&cap);
    assert_eq!((tp, found), (pos, pos));

    // 50/50 victim and noise waves
    let mut sim = agx(7);
    let pass = RenderPass::new(&mut sim, &img.to_unit(), 64, 64, 16).unwrap();
    let cap = leak_render(&mut sim, &pass, 16, 7).unwrap();
    let (tp, found, pos) = labels(&cap);
    let (precision, recall) = (tp as f64 / found as f64, tp as f64 / pos as f64);
    assert!(precision >= 0.95 && recall >= 0.95, "precision {precision} recall {recall}");

    // noise alone
    let mut sim = agx(8);
    let dark = GrayImage::new(16, 16);
    let _ = render_victim(&mut sim, &dark, 16).unwrap();
    let pass = RenderPass::new(&mut sim, &dark.to_unit(), 16, 16, 16).unwrap();
    let mut cap = leak_render(&mut sim, &pass, 32, 9).unwrap();
    let noise: Vec<usize> = (0..cap.waves()).filter(|w| cap.provenance[*w] == WaveSource::Noise).collect();
    let size = cap.lanes * cap.regs;
    let dump: Vec<u32> = noise.iter().flat_map(|w| cap.dump[w * size..(w + 1) * size].to_vec()).collect();
    cap.provenance = vec![WaveSource::Noise; noise.len()];
    cap.dump = dump;
    assert!(identify_fragments(&cap).is_empty());
}

#[test]
fn collapse_rule() {
    assert_eq!(collapse([0.5, 0.5, 0.5, 1.0]), 0.5);
    assert!((collapse([0.2, 0.8, 0.5, 1.0]) - 0.5).abs() < 1e-6);
    assert!((collapse([0.2, 0.2, 0.8, 1.0]) - 0.5).abs() < 1e-6);
}

#[test]
fn noise_free_leak_yields_complete_source_tiles() {
    let img = synthetic_scene(64, 64, 4);
    let mut sim = agx(4);
    let mapping = calibrate(&mut sim, 16).unwrap();
    let pass = RenderPass::new(&mut sim, &img.to_unit(), 64, 64, 16).unwrap();
    let cap = leak_render(&mut sim, &pass, 0, 0).unwrap();
    let tiles = to_grayscale(&identify_fragments(&cap), &mapping, cap.lanes);
    assert_eq!(tiles.len(), 16);
    let truth = cut(&img, 16);
    let mut matched = BTreeSet::new();
    for t in &tiles {
        assert_eq!(t.hole_count(), 0);
        let hit = truth.iter().position(|s| s.pixels == t.pixels).expect("tile equals a source tile");
        matched.insert(hit);
    }
    assert_eq!(matched.len(), 16);
}

#[test]
fn missing_fragments_become_flagged_holes() {
    let mapping = PixelMapping::morton(8);
    let frags: Vec<_> = (0..32)
        .map(|l| regleak::pixel::FragmentRecord { rgba: [0.25, 0.25, 0.25, 1.0], wave: 0, lane: l })
        .collect();
    let tiles = to_grayscale(&frags, &mapping, 32);
    assert_eq!(tiles.len(), 1);
    assert_eq!(tiles[0].hole_count(), 32);
    assert!(tiles[0].pixels.iter().zip(&tiles[0].holes).all(|(p, h)| if *h { *p == 0.0 } else { *p == 0.25 }));
}

fn small_ga(seed: u64) -> GaParams {
    GaParams { population: 60, generations: 20, seed, ..GaParams::default() }
}

#[test]
fn single_tile_is_identity() {
    let tiles = cut(&gradient(16, 16), 16);
    let s = jigsaw_solve(&tiles, 1, 1, &GaParams::default());
    assert_eq!(s.arrangement, vec![0]);
}

#[test]
fn two_by_two_matches_exhaustive_search() {
    let img = gradient(32, 32);
    let truth = cut(&img, 16);
    for rot in 0..4 {
        let tiles: Vec<Tile> = (0..4).map(|i| truth[(i + rot) % 4].clone()).collect();
        let compat = Compatibility::new(&tiles);
        let mut best = (f64::INFINITY, vec![]);
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let p = vec![a, b, c, d];
                        if p.iter().collect::<BTreeSet<_>>().len() == 4 && compat.fitness(&p, 2) < best.0 {
                            best = (compat.fitness(&p, 2), p);
                        }
                    }
                }
            }
        }
        let s = jigsaw_solve(&tiles, 2, 2, &small_ga(rot as u64));
        assert_eq!(s.arrangement, best.1);
        assert_eq!(s.fitness, best.0);
    }
}

#[test]
fn solutions_are_permutations_with_monotone_elite() {
    let truth = cut(&synthetic_scene(96, 64, 5), 16);
    for seed in 0..4 {
        let s = jigsaw_solve(&truth, 6, 4, &small_ga(seed));
        let mut sorted = s.arrangement.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..24).collect::<Vec<_>>());
        assert_eq!(s.history.len(), 21);
        assert!(s.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*s.history.last().unwrap(), s.fitness);
    }
}

#[test]
fn solver_is_deterministic() {
    let truth = cut(&synthetic_scene(64, 64, 6), 16);
    assert_eq!(jigsaw_solve(&truth, 4, 4, &small_ga(1)), jigsaw_solve(&truth, 4, 4, &small_ga(1)));
}

#[test]
fn neighbor_accuracy_counts_right_and_down_pairs() {
    assert_eq!(neighbor_accuracy(&[0, 1, 2, 3], &[0, 1, 2, 3], 2), 1.0);
    // swapping the two rows keeps both horizontal pairs only
    assert_eq!(neighbor_accuracy(&[2, 3, 0, 1], &[0, 1, 2, 3], 2), 0.5);
    // wrapped rows are not neighbours
    assert_eq!(neighbor_accuracy(&[1, 2, 0, 3], &[0, 1, 2, 3], 2), 0.0);
}

#[test]
fn full_pipeline_on_the_fixture() {
    let img = GrayImage::decode(FIXTURE).unwrap();
    let mut sim = agx(2024);
    let out = attack(&mut sim, &img, &AttackOptions::default()).unwrap();
    assert_eq!((out.grid_w, out.grid_h), (8, 8));
    assert_eq!(out.fragments, 128 * 128);
    let acc = out.accuracy.unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}
