//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! `VV_ACCEPT_ONLY=3,7` restricts the run to the listed criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use vicinity::attn::{mha_context, AttnConfig, EncodingKind, MhaParams};
use vicinity::attviz::{chi2_quantile_2dof, fit_gaussian, fit_points, head_average, AttentionMap};
use vicinity::fuse::{combined_loss, combined_loss_var};
use vicinity::grid::{
    format_memory, index_of, memory_bytes, neighbourhood_len, offset_of, MemoryBank, SlideGrid,
};
use vicinity::metrics::{aggregate, dice_from_counts, dsc_class_slide, slide_dice};
use vicinity::ndiff::{
    grad_check, grad_check_fn, grad_check_report, primitive_cases, Array, Graph, ParamStore,
    SgdMomentum, DEFAULT_EPS,
};
use vicinity::segnet::{DeskNet, DeskNetConfig, Model, ModelConfig};
use vicinity::synth::{
    sample_patches, Dataset, Split, SplitSizes, SynthParams, SynthSlide, TISSUE_A, TISSUE_B,
};
use vicinity::train::{
    all_patches, epoch_memory_fill, evaluate_full, fit, new_bank, train_epoch, TrainConfig,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn c1_memory_formula() -> Check {
    let bytes = memory_bytes(112, 65, 36, 8, 1024);
    ensure(bytes == 1_932_263_424, || format!("got {bytes} bytes"))?;
    let text = format_memory(bytes);
    ensure(text.ends_with("(1.80 GiB)"), || {
        format!("rendered `{text}`")
    })?;
    Ok(text)
}

fn c2_neighbour_mask() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cells = 0;
    for case in 0..200 {
        let (nx, ny) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let k = 1 + case % 3;
        let grid = SlideGrid::new("g", nx, ny, 8, 2).unwrap();
        let mut bank = MemoryBank::new(&[grid], k, 2).unwrap();
        let density = rng.gen_range(0.0..1.0);
        let occ: Vec<bool> = (0..nx * ny).map(|_| rng.gen_bool(density)).collect();
        for j in 0..ny {
            for i in 0..nx {
                if occ[j * nx + i] {
                    bank.insert("g", i, j, &[1.0, 2.0]).unwrap();
                }
            }
        }
        for j in 0..ny {
            for i in 0..nx {
                let got = bank.neighbor_mask("g", i, j).unwrap();
                let mut want = vec![false; neighbourhood_len(k)];
                for x in -(k as isize)..=k as isize {
                    for y in -(k as isize)..=k as isize {
                        let (u, v) = (i as isize + x, j as isize + y);
                        let inside = u >= 0 && v >= 0 && u < nx as isize && v < ny as isize;
                        want[index_of(x, y, k)] =
                            (x, y) != (0, 0) && inside && occ[v as usize * nx + u as usize];
                    }
                }
                ensure(got == want, || {
                    format!("case {case} ({nx}x{ny}, k={k}) at ({i},{j})")
                })?;
                cells += 1;
            }
        }
    }
    Ok(format!("{cells} positions over 200 grids"))
}

fn c3_gradients() -> Check {
    let mut worst: f64 = 0.0;
    let mut ops = 0;
    for seed in 0..5 {
        for (kind, inputs) in primitive_cases(seed) {
            let err = grad_check(&kind, &inputs, DEFAULT_EPS)
                .map_err(|e| format!("{}: {e}", kind.name()))?;
            ensure(err <= 1e-4, || {
                format!("{} seed {seed}: {err:e}", kind.name())
            })?;
            worst = worst.max(err);
            ops += 1;
        }
    }
    for (seed, encoding) in [
        (1, EncodingKind::Rel2d),
        (2, EncodingKind::Sin1d),
        (3, EncodingKind::None),
    ] {
        let cfg = AttnConfig {
            dim: 4,
            heads: 2,
            head_dim: 2,
            k: 1,
            encoding,
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MhaParams::init(&mut store, cfg, "attn", &mut rng).unwrap();
        let centre = store.add_uniform("centre", &[2, 4], 1.0, &mut rng);
        let proj = rand_array(&mut rng, &[2, 4]);
        let mem = rand_array(&mut rng, &[2, 9, 4]);
        let mask: Vec<bool> = (0..18).map(|t| t % 9 != 4 && t % 3 != 0).collect();
        let err = grad_check_fn(&store, DEFAULT_EPS, |g| {
            let e = g.param(centre);
            let out = mha_context(g, &params, e, &mem, &mask)?;
            let w = g.input(proj.clone());
            let y = g.mul(out.a, w)?;
            Ok(g.sum(y))
        })
        .map_err(|e| e.to_string())?;
        ensure(err <= 1e-4, || format!("mha_context {encoding:?}: {err:e}"))?;
        worst = worst.max(err);
    }
    for seed in 0..3 {
        let cfg = ModelConfig {
            net: DeskNetConfig {
                patch_px: 8,
                classes: 3,
                enc_channels: vec![2, 3],
                hidden: 3,
                dec_channels: vec![2, 2],
            },
            attn: AttnConfig {
                dim: 4,
                heads: 2,
                head_dim: 2,
                k: 1,
                encoding: EncodingKind::Rel2d,
            },
            seed,
        };
        let mut model = Model::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let fuse_w = model.maf.as_ref().unwrap().fuse.fuse_w;
        for v in model.store.get_mut(fuse_w).data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
        let x =
            Array::from_vec(&[2, 3, 8, 8], (0..384).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let memory = rand_array(&mut rng, &[2, 9, 4]);
        let mask: Vec<bool> = (0..18).map(|t| t % 9 != 4 && t % 4 != 0).collect();
        let targets: Vec<usize> = (0..128).map(|_| rng.gen_range(0..3)).collect();
        let ratio = Array::from_vec(&[2, 3], vec![0.5, 0.25, 0.25, 0.1, 0.0, 0.9]).unwrap();
        let report = grad_check_report(&model.store, DEFAULT_EPS, |g| {
            let xin = g.input(x.clone());
            let out = model.forward(g, xin, Some((&memory, &mask)))?;
            let seg = g.cross_entropy_pixels(out.seg, &targets)?;
            let cls = g.cross_entropy_dist(out.cls.unwrap(), &ratio)?;
            combined_loss_var(g, seg, cls, 0.2)
        })
        .map_err(|e| e.to_string())?;
        ensure(report.max_rel_error <= 1e-4, || {
            format!("pipeline seed {seed}: {report:?}")
        })?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(format!(
        "{ops} primitive checks, 3 attention and 3 pipeline composites; worst {worst:.2e}"
    ))
}

fn c4_masking() -> Check {
    let cfg = AttnConfig {
        dim: 8,
        heads: 2,
        head_dim: 4,
        k: 2,
        encoding: EncodingKind::Rel2d,
    };
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = MhaParams::init(&mut store, cfg, "attn", &mut rng).unwrap();
    let b = 4;
    for _ in 0..25 {
        let e = rand_array(&mut rng, &[b, 8]);
        let mem = rand_array(&mut rng, &[b, 25, 8]);
        let mut mask: Vec<bool> = (0..b * 25)
            .map(|t| t % 25 != 12 && rng.gen_bool(0.5))
            .collect();
        mask[..25].iter_mut().for_each(|m| *m = false);
        let mut g = Graph::no_grad(&store);
        let ev = g.input(e);
        let out = mha_context(&mut g, &params, ev, &mem, &mask).map_err(|e| e.to_string())?;
        let scores = out.scores.data();
        for bi in 0..b {
            let m = &mask[bi * 25..(bi + 1) * 25];
            for h in 0..2 {
                let row = &scores[(bi * 2 + h) * 25..(bi * 2 + h + 1) * 25];
                ensure(
                    row.iter().zip(m).all(|(w, keep)| *keep || *w == 0.0),
                    || "masked weight not exactly zero".into(),
                )?;
                let s: f64 = row.iter().map(|&w| w as f64).sum();
                if m.iter().any(|&x| x) {
                    ensure((s - 1.0).abs() <= 1e-6, || format!("row sums to {s}"))?;
                }
            }
        }
        ensure(g.value(out.a).data()[..8].iter().all(|&v| v == 0.0), || {
            "all-masked context is not zero".into()
        })?;
    }
    // Whole-model forward: all-masked random memory against an empty context.
    let mut cfg = ModelConfig::desk(2, 4);
    cfg.net.patch_px = 16;
    let model = Model::<f32>::new(cfg).unwrap();
    let x = Array::from_vec(
        &[3, 3, 16, 16],
        (0..3 * 768).map(|_| rng.gen::<f32>()).collect(),
    )
    .unwrap();
    let noise = Array::from_vec(
        &[3, 25, 64],
        (0..3 * 25 * 64).map(|_| rng.gen_range(-3.0..3.0)).collect(),
    )
    .unwrap();
    let zeros = Array::<f32>::zeros(&[3, 25, 64]);
    let none = vec![false; 75];
    let run = |mem: &Array<f32>| {
        let mut g = Graph::no_grad(&model.store);
        let xi = g.input(x.clone());
        let out = model.forward(&mut g, xi, Some((mem, &none))).unwrap();
        g.value(out.seg).data().to_vec()
    };
    let plain = {
        let mut g = Graph::no_grad(&model.store);
        let xi = g.input(x.clone());
        let seg = model.forward_plain(&mut g, xi).unwrap();
        g.value(seg).data().to_vec()
    };
    ensure(run(&noise) == run(&zeros), || {
        "all-masked forward depends on memory contents".into()
    })?;
    ensure(run(&noise) == plain, || {
        "all-masked forward differs from the zero-context path".into()
    })?;
    Ok("25 random batches; masked weights exactly 0, rows sum to 1, empty neighbourhoods give a = 0".into())
}

fn permuted(mem: &Array<f64>, mask: &[bool], perm: &[usize]) -> (Array<f64>, Vec<bool>) {
    let d = mem.shape()[2];
    let data = perm
        .iter()
        .flat_map(|&p| mem.data()[p * d..(p + 1) * d].to_vec())
        .collect();
    (
        Array::from_vec(mem.shape(), data).unwrap(),
        perm.iter().map(|&p| mask[p]).collect(),
    )
}

fn context(
    store: &ParamStore<f64>,
    params: &MhaParams,
    e: &Array<f64>,
    mem: &Array<f64>,
    mask: &[bool],
) -> Array<f64> {
    let mut g = Graph::no_grad(store);
    let ev = g.input(e.clone());
    let out = mha_context(&mut g, params, ev, mem, mask).unwrap();
    g.value(out.a).clone()
}

fn c5_positional() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let none = AttnConfig {
        dim: 8,
        heads: 2,
        head_dim: 4,
        k: 2,
        encoding: EncodingKind::None,
    };
    let mut store = ParamStore::<f64>::new();
    let params = MhaParams::init(&mut store, none, "attn", &mut rng).unwrap();
    let e = rand_array(&mut rng, &[1, 8]);
    let mem = rand_array(&mut rng, &[1, 25, 8]);
    let mask: Vec<bool> = (0..25).map(|t| t != 12 && rng.gen_bool(0.8)).collect();
    let a = context(&store, &params, &e, &mem, &mask);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..25).collect();
        for i in (1..25).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let (pm, pk) = permuted(&mem, &mask, &perm);
        worst = worst.max(a.max_abs_diff(&context(&store, &params, &e, &pm, &pk)));
    }
    ensure(worst < 1e-6, || {
        format!("kind=none changed a by {worst:e} under permutation")
    })?;

    let rel = AttnConfig {
        encoding: EncodingKind::Rel2d,
        ..none
    };
    let mut store = ParamStore::<f64>::new();
    let params = MhaParams::init(&mut store, rel, "attn", &mut rng).unwrap();
    let (row, col) = params.rel.unwrap();
    for id in [row, col] {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
    }
    let full: Vec<bool> = (0..25).map(|t| t != 12).collect();
    let a = context(&store, &params, &e, &mem, &full);
    let mut perm: Vec<usize> = (0..25).collect();
    perm.swap(index_of(-2, -2, 2), index_of(2, 1, 2));
    let (pm, pk) = permuted(&mem, &full, &perm);
    let moved = a.max_abs_diff(&context(&store, &params, &e, &pm, &pk));
    ensure(moved > 1e-3, || {
        format!("rel2d transposition changed a by only {moved:e}")
    })?;
    Ok(format!(
        "none: max change {worst:.1e}; rel2d transposition: {moved:.3}"
    ))
}

fn c6_baseline_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seed = 17;
    let model = Model::<f32>::new(ModelConfig::desk(0, seed)).unwrap();
    ensure(model.maf.is_none(), || {
        "k = 0 model carries attention parameters".into()
    })?;
    let mut store = ParamStore::<f32>::new();
    let plain = DeskNet::init(
        &mut store,
        DeskNetConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    for chunk in 0..4 {
        let x = Array::from_vec(
            &[25, 3, 32, 32],
            (0..25 * 3 * 1024).map(|_| rng.gen::<f32>()).collect(),
        )
        .unwrap();
        let mut g = Graph::no_grad(&model.store);
        let xi = g.input(x.clone());
        let ours = model.forward(&mut g, xi, None).map_err(|e| e.to_string())?;
        let ours = g.value(ours.seg).data().to_vec();
        let mut g = Graph::no_grad(&store);
        let xi = g.input(x);
        let feats = plain.encode(&mut g, xi).unwrap();
        let seg = plain.decode(&mut g, &feats).unwrap();
        ensure(ours == g.value(seg).data(), || {
            format!("outputs differ in chunk {chunk}")
        })?;
    }
    Ok("100 random patches bit-identical".into())
}

/// Settings of the synthetic benchmark shared with the CLI defaults.
fn benchmark_run(seed: u64, k: usize) -> (f64, f64, usize) {
    let data = Dataset::generate(
        seed,
        SplitSizes::default(),
        16,
        16,
        32,
        &SynthParams::default(),
    )
    .unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    let res = fit(
        ModelConfig::desk(k, seed),
        &cfg,
        &data.split(Split::Train),
        &data.split(Split::Val),
        |_| {},
    )
    .unwrap();
    let report = evaluate_full(&res.model, &data.split(Split::Test)).unwrap();
    (
        report.total,
        report
            .total_over(&[TISSUE_A as usize, TISSUE_B as usize])
            .unwrap(),
        res.history.len(),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn c7_context_benchmark() -> Check {
    let runs: Vec<(u64, usize)> = (0..3u64).flat_map(|s| [(s, 2), (s, 0)]).collect();
    let results: Vec<(f64, f64, usize)> =
        runs.par_iter().map(|&(s, k)| benchmark_run(s, k)).collect();
    let mut lines = Vec::new();
    let (mut d_total, mut d_ab, mut every_seed) = (Vec::new(), Vec::new(), true);
    for s in 0..3 {
        let (ctx, base) = (results[2 * s], results[2 * s + 1]);
        lines.push(format!(
            "seed {s}: k=2 {:.3} (A/B {:.3}, {} ep) vs k=0 {:.3} (A/B {:.3}, {} ep)",
            ctx.0, ctx.1, ctx.2, base.0, base.1, base.2
        ));
        d_total.push(ctx.0 - base.0);
        d_ab.push(ctx.1 - base.1);
        every_seed &= ctx.0 > base.0;
    }
    let (mt, mab) = (median(d_total), median(d_ab));
    let summary = format!(
        "median gain total {mt:+.3}, A/B {mab:+.3}; {}",
        lines.join("; ")
    );
    ensure(mt >= 0.10 && mab >= 0.15 && every_seed, || summary.clone())?;
    Ok(summary)
}

/// Colour histogram of a square window, 8 levels per channel.
fn window_bins(slide: &SynthSlide, x: usize, y: usize, r: usize, out: &mut Vec<usize>) {
    let w = slide.width();
    out.clear();
    for v in y - r..=y + r {
        for u in x - r..=x + r {
            let p = &slide.image[(v * w + u) * 3..(v * w + u) * 3 + 3];
            out.push(
                ((p[0] as usize >> 5) << 6) | ((p[1] as usize >> 5) << 3) | (p[2] as usize >> 5),
            );
        }
    }
}

/// Pixels whose whole window is tissue of a single kind.
fn sample_tissue_windows(
    slides: &[&SynthSlide],
    r: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize, usize, u8)> {
    let mut out = Vec::with_capacity(n);
    let mut want = [n / 2, n - n / 2];
    while want != [0, 0] {
        let s = rng.gen_range(0..slides.len());
        let slide = slides[s];
        let (w, h) = (slide.width(), slide.height());
        let (x, y) = (rng.gen_range(r..w - r), rng.gen_range(r..h - r));
        let c = slide.labels[y * w + x];
        if c != TISSUE_A && c != TISSUE_B {
            continue;
        }
        let pure = (y - r..=y + r).all(|v| (x - r..=x + r).all(|u| slide.labels[v * w + u] == c));
        let slot = (c - TISSUE_A) as usize;
        if pure && want[slot] > 0 {
            want[slot] -= 1;
            out.push((s, x, y, c));
        }
    }
    out
}

fn c8_ambiguity() -> Check {
    let data = Dataset::generate(
        8,
        SplitSizes::default(),
        16,
        16,
        32,
        &SynthParams::default(),
    )
    .unwrap();
    let (train, test) = (data.split(Split::Train), data.split(Split::Test));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let r = 4;
    let mut counts = [vec![1.0f64; 512], vec![1.0f64; 512]];
    let mut bins = Vec::new();
    for (s, x, y, c) in sample_tissue_windows(&train, r, 20_000, &mut rng) {
        window_bins(train[s], x, y, r, &mut bins);
        for &b in &bins {
            counts[(c - TISSUE_A) as usize][b] += 1.0;
        }
    }
    let logp: Vec<Vec<f64>> = counts
        .iter()
        .map(|h| {
            let t: f64 = h.iter().sum();
            h.iter().map(|v| (v / t).ln()).collect()
        })
        .collect();
    let samples = sample_tissue_windows(&test, r, 10_000, &mut rng);
    let mut correct = 0;
    for &(s, x, y, c) in &samples {
        window_bins(test[s], x, y, r, &mut bins);
        let (la, lb) = bins
            .iter()
            .fold((0.0, 0.0), |(a, b), &k| (a + logp[0][k], b + logp[1][k]));
        let guess = if la >= lb { TISSUE_A } else { TISSUE_B };
        correct += (guess == c) as usize;
    }
    let acc = correct as f64 / samples.len() as f64;
    ensure(acc <= 0.55, || {
        format!("local texture separates A from B: accuracy {acc:.3}")
    })?;
    Ok(format!(
        "9x9 colour-histogram classifier: {acc:.3} on {} A/B pixels",
        samples.len()
    ))
}

fn brute_dice(pred: &[u8], gt: &[u8], c: u8) -> Option<f64> {
    let p: Vec<bool> = pred.iter().map(|&v| v == c).collect();
    let g: Vec<bool> = gt.iter().map(|&v| v == c).collect();
    let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count() as f64;
    let (np, ng) = (
        p.iter().filter(|&&v| v).count() as f64,
        g.iter().filter(|&&v| v).count() as f64,
    );
    (np + ng > 0.0).then(|| 2.0 * inter / (np + ng))
}

fn c9_dice() -> Check {
    ensure(dice_from_counts(2, 2, 2) == Some(0.5), || {
        "hand case 2TP=4, FP=FN=2".into()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut undefined = 0;
    for case in 0..100 {
        let (slides, classes) = (rng.gen_range(1..4), rng.gen_range(2..6));
        let mut table = Vec::new();
        let mut per_slide = Vec::new();
        for _ in 0..slides {
            let len = rng.gen_range(1..60);
            // Restrict to a random subset of classes so some stay absent.
            let used = rng.gen_range(1..=classes) as u8;
            let pred: Vec<u8> = (0..len).map(|_| rng.gen_range(0..used)).collect();
            let gt: Vec<u8> = (0..len).map(|_| rng.gen_range(0..used)).collect();
            let got = slide_dice(&pred, &gt, classes).unwrap();
            let mut defined = Vec::new();
            for c in 0..classes {
                let want = brute_dice(&pred, &gt, c as u8);
                ensure(got[c] == want, || {
                    format!("case {case} class {c}: {:?} vs {want:?}", got[c])
                })?;
                ensure(
                    dsc_class_slide(&pred, &gt, c as u8).unwrap() == want,
                    || "dsc_class_slide disagrees".into(),
                )?;
                undefined += want.is_none() as usize;
                defined.extend(want);
            }
            per_slide.push(defined.iter().sum::<f64>() / defined.len() as f64);
            table.extend(got);
        }
        let report =
            aggregate((0..slides).map(|s| s.to_string()).collect(), classes, table).unwrap();
        let want = per_slide.iter().sum::<f64>() / slides as f64;
        ensure((report.total - want).abs() < 1e-12, || {
            format!("case {case}: total {} vs {want}", report.total)
        })?;
    }
    ensure(undefined > 0, || "no undefined classes exercised".into())?;
    Ok(format!(
        "100 random cases, {undefined} undefined class scores"
    ))
}

fn c10_losses() -> Check {
    ensure(combined_loss(1.0, 0.5, 0.2).unwrap() == 0.9, || {
        "λ=0.2 on (1.0, 0.5)".into()
    })?;
    let lr = TrainConfig::paper().lr(2);
    ensure(lr == 9.025e-5, || format!("lr at epoch 2 is {lr:e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let (seg, cls) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
        ensure(
            combined_loss(seg, cls, 0.0).unwrap().to_bits() == f64::to_bits(seg),
            || "scalar λ=0".into(),
        )?;
    }
    let mut cfg = ModelConfig::desk(1, 3);
    cfg.net.patch_px = 16;
    let model = Model::<f32>::new(cfg).unwrap();
    let x = Array::from_vec(
        &[2, 3, 16, 16],
        (0..1536).map(|_| rng.gen::<f32>()).collect(),
    )
    .unwrap();
    let mem = Array::from_vec(&[2, 9, 64], (0..1152).map(|_| rng.gen::<f32>()).collect()).unwrap();
    let mask = vec![true; 18];
    let targets: Vec<usize> = (0..512).map(|_| rng.gen_range(0..4)).collect();
    let ratio = Array::from_vec(&[2, 4], vec![0.25; 8]).unwrap();
    let mut g = Graph::no_grad(&model.store);
    let xi = g.input(x);
    let out = model.forward(&mut g, xi, Some((&mem, &mask))).unwrap();
    let seg = g.cross_entropy_pixels(out.seg, &targets).unwrap();
    let cls = g.cross_entropy_dist(out.cls.unwrap(), &ratio).unwrap();
    let total = combined_loss_var(&mut g, seg, cls, 0.0).unwrap();
    ensure(
        g.value(total).item().to_bits() == g.value(seg).item().to_bits(),
        || "graph λ=0 differs from L_seg".into(),
    )?;
    Ok("λ=0 bitwise, 0.9 exact, 9.025e-5 exact".into())
}

fn c11_attention_analysis() -> Check {
    let chi = chi2_quantile_2dof(0.9).unwrap();
    ensure((chi - 4.605170).abs() <= 1e-5, || format!("chi2 = {chi}"))?;
    let (k, sigma) = (8, 2.0);
    let w: Vec<f64> = (0..neighbourhood_len(k))
        .map(|t| {
            let (x, y) = offset_of(t, k);
            (-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    let fit =
        fit_gaussian(&AttentionMap::new(k, w.iter().map(|v| v / s).collect()).unwrap()).unwrap();
    let ratio = fit.half_lengths[0] / fit.half_lengths[1];
    let area = std::f64::consts::PI * sigma * sigma * chi;
    ensure((ratio - 1.0).abs() <= 0.1, || format!("axis ratio {ratio}"))?;
    ensure((fit.area / area - 1.0).abs() <= 0.05, || {
        format!("area {} vs {area}", fit.area)
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let pts: Vec<([f64; 2], f64)> = (0..15)
            .map(|_| {
                (
                    [rng.gen_range(-4..=4) as f64, rng.gen_range(-4..=4) as f64],
                    rng.gen::<f64>(),
                )
            })
            .collect();
        let (dx, dy) = (rng.gen_range(-6..=6) as f64, rng.gen_range(-6..=6) as f64);
        let base = fit_points(&pts).unwrap();
        let moved = fit_points(
            &pts.iter()
                .map(|(p, w)| ([p[0] + dx, p[1] + dy], *w))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let turned = fit_points(
            &pts.iter()
                .map(|(p, w)| ([-p[1], p[0]], *w))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        ensure(
            close(moved.mu[0], base.mu[0] + dx) && close(moved.mu[1], base.mu[1] + dy),
            || "mean not translated".into(),
        )?;
        ensure((0..3).all(|c| close(moved.sigma[c], base.sigma[c])), || {
            "covariance changed under translation".into()
        })?;
        ensure(
            close(turned.sigma[0], base.sigma[2])
                && close(turned.sigma[2], base.sigma[0])
                && close(turned.sigma[1], -base.sigma[1]),
            || "covariance not rotated".into(),
        )?;
        let (ea, eb) = (base.eigenvalues(), turned.eigenvalues());
        ensure(close(ea[0], eb[0]) && close(ea[1], eb[1]), || {
            "eigenvalues changed under rotation".into()
        })?;
    }
    let heads: Vec<f32> = (0..2 * 9)
        .map(|t| if t == 1 || t == 9 + 5 { 1.0 } else { 0.0 })
        .collect();
    let avg = head_average(&heads, 2, 1).unwrap();
    ensure(avg.weights[1] == 0.5 && avg.weights[5] == 0.5, || {
        "head average".into()
    })?;
    Ok(format!(
        "chi2 {chi:.6}; isotropic fit ratio {ratio:.4}, area {:.4} of expected",
        fit.area / area
    ))
}

fn tiny_config(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::desk(1, seed);
    cfg.net = DeskNetConfig {
        patch_px: 16,
        classes: 4,
        enc_channels: vec![4, 8],
        hidden: 8,
        dec_channels: vec![4, 4],
    };
    cfg.attn.dim = 8;
    cfg.attn.head_dim = 4;
    cfg
}

fn c12_two_phase() -> Check {
    let p = SynthParams {
        region_grid: 2,
        ..SynthParams::default()
    };
    let data = Dataset::generate(
        12,
        SplitSizes {
            train: 2,
            val: 1,
            test: 1,
        },
        4,
        4,
        16,
        &p,
    )
    .unwrap();
    let train = data.split(Split::Train);
    let mut model = Model::<f32>::new(tiny_config(12)).unwrap();
    let mut bank = new_bank(&model, &train).unwrap();
    epoch_memory_fill(&model, &train, &mut bank).unwrap();
    let filled = bank.checksum();
    let cfg = TrainConfig {
        batch_size: 4,
        cap_per_class: 4,
        ..TrainConfig::desk()
    };
    let samples =
        sample_patches(&train, cfg.cap_per_class, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut opt = SgdMomentum::new(cfg.momentum).unwrap();
    train_epoch(
        &mut model,
        &mut opt,
        &train,
        Some(&bank),
        &samples,
        &cfg,
        cfg.lr0,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    ensure(bank.checksum() == filled, || {
        "train_epoch wrote to the bank".into()
    })?;
    let before: Vec<Vec<f32>> = all_patches(&train)
        .iter()
        .map(|r| bank.embedding(r.slide, r.i, r.j).to_vec())
        .collect();
    epoch_memory_fill(&model, &train, &mut bank).unwrap();
    let changed = all_patches(&train)
        .iter()
        .zip(&before)
        .filter(|(r, b)| bank.embedding(r.slide, r.i, r.j) != b.as_slice())
        .count();
    ensure(changed >= 1, || {
        "refill after an update changed nothing".into()
    })?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let run = || {
        pool.install(|| {
            let cfg = TrainConfig {
                batch_size: 8,
                max_epochs: 3,
                patience: 3,
                cap_per_class: 6,
                seed: 5,
                ..TrainConfig::desk()
            };
            let res = fit(
                tiny_config(5),
                &cfg,
                &train,
                &data.split(Split::Val),
                |_| {},
            )
            .unwrap();
            let params: Vec<u32> = res
                .model
                .store
                .iter()
                .flat_map(|(_, _, a)| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect();
            (res.history, params)
        })
    };
    let (a, b) = (run(), run());
    ensure(a == b, || "single-threaded reruns differ".into())?;
    Ok(format!("checksum stable through train_epoch; refill changed {changed} embeddings; reruns bit-identical"))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("VV_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Check); 12] = [
        (1, "memory formula", c1_memory_formula),
        (2, "neighbour-mask oracle", c2_neighbour_mask),
        (3, "gradient suite", c3_gradients),
        (4, "masking semantics", c4_masking),
        (5, "positional-encoding contract", c5_positional),
        (6, "baseline equivalence", c6_baseline_equivalence),
        (7, "synthetic context benchmark", c7_context_benchmark),
        (8, "ambiguity certificate", c8_ambiguity),
        (9, "dice machinery", c9_dice),
        (10, "loss identities", c10_losses),
        (11, "attention analysis", c11_attention_analysis),
        (12, "two-phase protocol", c12_two_phase),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
