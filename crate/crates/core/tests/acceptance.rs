//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::time::{Duration, Instant};

use iisan::backbone::{build_encoder, EncoderConfig, HiddenStateStack, Modality};
use iisan::cache::{build_cache, cache_file_size, write_cache, CacheReader};
use iisan::cli::{generate_synthetic, SyntheticSpec};
use iisan::costmodel::{compare, estimate, Regime, Workload};
use iisan::nn::normal;
use iisan::recsys::{
    batch_loss, compute_popularity, evaluate, hit, inbatch_debiased_ce, ndcg_gain, pessimistic_rank,
    popularity_baseline, split_leave_one_out, train, train_step, Batch, EvalTarget, ItemSource, LossTerm,
    MetricReport, Popularity, Recommender, SeqConfig, Split, TrainConfig, UserSplit,
};
use iisan::sanet::{group_size_feasible, select_layers, DropMode, IisanConfig, Variant};
use iisan::tensor::{finite_difference_check, FdReport, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: iisan::error::Error) -> String {
    e.to_string()
}

struct Data {
    split: Split,
    catalog: BTreeSet<u64>,
    popularity: Popularity,
}

fn data(spec: &SyntheticSpec) -> Data {
    let d = generate_synthetic(spec).expect("valid synthetic spec");
    let split = split_leave_one_out(&d).expect("non-empty dataset");
    let catalog = d.catalog();
    let popularity = compute_popularity(&split, &catalog);
    Data {
        split,
        catalog,
        popularity,
    }
}

fn dual(layers: usize, h: usize) -> (EncoderConfig, EncoderConfig, IisanConfig) {
    let text = EncoderConfig::new(Modality::Text, layers, h, 1001);
    let image = EncoderConfig::new(Modality::Image, layers, h, 2002);
    let plan = select_layers(DropMode::SymmetricEven, layers, layers).expect("even plan");
    let san = IisanConfig {
        variant: Variant::Vs,
        text_hidden: h,
        image_hidden: h,
        text_plan: plan.clone(),
        image_plan: plan,
        bottleneck: 16,
        d_seq: 64,
    };
    (text, image, san)
}

fn caches(dir: &std::path::Path, t: &EncoderConfig, i: &EncoderConfig, san: &IisanConfig, items: &[u64]) -> ItemSource {
    let (tp, ip) = (dir.join("text.iisc"), dir.join("image.iisc"));
    build_cache(&build_encoder(t.clone()).unwrap(), items, &san.text_plan.cache_layers(), &tp).unwrap();
    build_cache(&build_encoder(i.clone()).unwrap(), items, &san.image_plan.cache_layers(), &ip).unwrap();
    ItemSource::cached(&tp, &ip, t.fingerprint(), i.fingerprint(), san).unwrap()
}

fn gradient_flow() -> Outcome {
    let (t, i, mut san) = dual(4, 16);
    san.bottleneck = 4;
    san.d_seq = 16;
    let seq = SeqConfig {
        d: 16,
        ..SeqConfig::default()
    };
    let spec = SyntheticSpec {
        users: 40,
        items: 20,
        ..SyntheticSpec::default()
    };
    let d = data(&spec);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        lr: 1e-3,
        seed: 7,
    };
    let users: Vec<&UserSplit> = d.split.users.iter().take(16).collect();
    let batch = Batch::build(&users, &d.popularity, 10).map_err(err)?.expect("transitions");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let items: Vec<u64> = d.catalog.iter().copied().collect();

    let mut cached = caches(dir.path(), &t, &i, &san, &items);
    let cache_bytes = (fs::read(dir.path().join("text.iisc")).unwrap(), fs::read(dir.path().join("image.iisc")).unwrap());
    let rec = Recommender::new(san.clone(), seq.clone(), 3).map_err(err)?;
    let step = train_step(&rec, &cached, &batch, None).map_err(err)?;
    check(step.grads.names().all(|n| !n.starts_with("backbone.")), || "cached step produced backbone gradients".into())?;
    let mut rec_c = rec.clone();
    train(&mut rec_c, &mut cached, &d.split, &d.popularity, &cfg).map_err(err)?;
    check(
        fs::read(dir.path().join("text.iisc")).unwrap() == cache_bytes.0
            && fs::read(dir.path().join("image.iisc")).unwrap() == cache_bytes.1,
        || "cached states changed during training".into(),
    )?;

    let mut live = ItemSource::live(build_encoder(t.clone()).unwrap(), build_encoder(i.clone()).unwrap(), false);
    let step = train_step(&rec, &live, &batch, None).map_err(err)?;
    let backbone_grads = step.grads.names().filter(|n| n.starts_with("backbone.")).count();
    check(backbone_grads == 0 && step.backbone_retained == 0, || {
        format!("uncached step: {backbone_grads} backbone grads, {} retained nodes", step.backbone_retained)
    })?;
    let before: Vec<ParamStore<f32>> = {
        let (a, b) = live.backbones().unwrap();
        vec![a.params().clone(), b.params().clone()]
    };
    let mut rec_u = rec.clone();
    train(&mut rec_u, &mut live, &d.split, &d.popularity, &cfg).map_err(err)?;
    let (a, b) = live.backbones().unwrap();
    for (x, y) in before.iter().zip([a.params(), b.params()]) {
        for (p, q) in x.iter().zip(y.iter()) {
            let same = p.tensor.data().iter().zip(q.tensor.data()).all(|(u, v)| u.to_bits() == v.to_bits());
            check(same, || format!("backbone weight {} changed", p.name))?;
        }
    }

    let fft = ItemSource::live(build_encoder(t).unwrap(), build_encoder(i).unwrap(), true);
    let step = train_step(&rec, &fft, &batch, None).map_err(err)?;
    let (a, b) = fft.backbones().unwrap();
    let all: BTreeSet<String> = rec.store.iter().chain(a.params().iter()).chain(b.params().iter()).map(|p| p.name.clone()).collect();
    check(step.grads.reached() == &all, || {
        format!("FFT reached {} of {} parameters", step.grads.reached().len(), all.len())
    })?;
    Ok(format!("DPEFT backbone grads 0 (cached, uncached); FFT reached {}/{}", all.len(), all.len()))
}

fn cache_equivalence() -> Outcome {
    let (t, i, san) = dual(12, 64);
    let d = data(&SyntheticSpec::default());
    let items: Vec<u64> = d.catalog.iter().copied().collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cached = caches(dir.path(), &t, &i, &san, &items);
    let mut live = ItemSource::live(build_encoder(t).unwrap(), build_encoder(i).unwrap(), false);
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let mut a = Recommender::new(san.clone(), SeqConfig::default(), 42).map_err(err)?;
    let mut b = a.clone();
    let ra = train(&mut a, &mut cached, &d.split, &d.popularity, &cfg).map_err(err)?;
    let rb = train(&mut b, &mut live, &d.split, &d.popularity, &cfg).map_err(err)?;
    for (e, (x, y)) in ra.epoch_losses.iter().zip(&rb.epoch_losses).enumerate() {
        check(x.to_bits() == y.to_bits(), || format!("epoch {e}: cached {x:e} vs uncached {y:e}"))?;
    }
    check(ra.epoch_losses.len() == 5, || "wrong epoch count".into())?;
    Ok(format!("5 epochs, {} steps, bit-identical, final loss {:.6}", ra.steps, ra.epoch_losses[4]))
}

fn group_size_selection() -> Outcome {
    let mut out = Vec::new();
    for (lt, want) in [(24usize, 3usize), (32, 5), (80, 13)] {
        let plan = select_layers(DropMode::AsymEq5Grouped, lt, 12).map_err(err)?;
        let k = plan.group_size.ok_or("no group size")?;
        let m = plan.m();
        check(k == want && m == 6, || format!("L={lt}: k={k} m={m}, want k={want} m=6"))?;
        check(group_size_feasible(lt, k, m) && !group_size_feasible(lt, k + 1, m), || {
            format!("L={lt}: k={k} is not the largest feasible group size")
        })?;
        out.push(format!("L{lt}:k{k}"));
    }
    Ok(format!("{} with 6 kept blocks each", out.join(" ")))
}

/// Plain softmax over the live columns, no shifting.
fn oracle_loss(logits: &[Vec<f64>], pop: &[f64], terms: &[LossTerm]) -> f64 {
    let mut total = 0.0;
    for t in terms {
        let row = &logits[t.row];
        let z = |c: usize| row[c] - pop[c].ln();
        let denom: f64 = (0..row.len()).filter(|&c| c == t.positive || !t.excluded[c]).map(|c| z(c).exp()).sum();
        total += -(z(t.positive).exp() / denom).ln();
    }
    total / terms.len() as f64
}

fn loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let rows = rng.random_range(1..6usize);
        let n = rng.random_range(1..30usize);
        let logits: Vec<Vec<f64>> = (0..rows).map(|_| (0..n).map(|_| rng.random_range(-8.0..8.0)).collect()).collect();
        let pop: Vec<f64> = (0..n).map(|_| rng.random_range(1e-4..1.0)).collect();
        let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 1).collect();
        ids.reverse();
        let terms: Vec<LossTerm> = (0..rng.random_range(1..8usize))
            .map(|_| LossTerm {
                row: rng.random_range(0..rows),
                positive: rng.random_range(0..n),
                excluded: (0..n).map(|_| rng.random_bool(0.3)).collect(),
            })
            .collect();
        let t = Tensor::from_rows(&logits).map_err(err)?;
        let got = inbatch_debiased_ce(&t, &ids, &pop, &terms).map_err(err)?.loss;
        let want = oracle_loss(&logits, &pop, &terms);
        worst = worst.max((got - want).abs());
    }
    check(worst < 1e-6, || format!("max abs error {worst:e}"))?;

    let one = Tensor::from_rows(&[vec![3.0f64, 1.0]]).map_err(err)?;
    let only = LossTerm {
        row: 0,
        positive: 0,
        excluded: vec![false, true],
    };
    let l0 = inbatch_debiased_ce(&one, &[1, 2], &[0.5, 0.5], &[only]).map_err(err)?.loss;
    check(l0.abs() < 1e-12, || format!("positive-only loss {l0}"))?;
    let sym = Tensor::from_rows(&[vec![0.7f64, 0.7]]).map_err(err)?;
    let both = LossTerm {
        row: 0,
        positive: 1,
        excluded: vec![false, false],
    };
    let l2 = inbatch_debiased_ce(&sym, &[1, 2], &[0.25, 0.25], &[both]).map_err(err)?.loss;
    check((l2 - 2f64.ln()).abs() < 1e-6, || format!("symmetric loss {l2}"))?;
    Ok(format!("1000 batches, max abs error {worst:.2e}; positive-only {l0:.1e}; symmetric {l2:.9}"))
}

fn brute_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // ties put the target last
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then((a == target).cmp(&(b == target))));
    order.iter().position(|&i| i == target).unwrap() + 1
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for inst in 0..200 {
        let n = rng.random_range(1..=50usize);
        let users = rng.random_range(1..10usize);
        let mut ranks = Vec::new();
        let (mut hr, mut ndcg) = (0.0, 0.0);
        for _ in 0..users {
            // coarse scores force ties
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 * 0.5).collect();
            let target = rng.random_range(0..n);
            let r = pessimistic_rank(&scores, target);
            let b = brute_rank(&scores, target);
            check(r == b, || format!("instance {inst}: rank {r} vs brute force {b}"))?;
            ranks.push(r);
            if b <= 10 {
                hr += 1.0;
                ndcg += 1.0 / ((b + 1) as f64).log2();
            }
        }
        let m = MetricReport::from_ranks(&ranks);
        let (hr, ndcg) = (hr / users as f64, ndcg / users as f64);
        check(m.hr_at_10 == hr && (m.ndcg_at_10 - ndcg).abs() <= 1e-15, || {
            format!("instance {inst}: ({}, {}) vs ({hr}, {ndcg})", m.hr_at_10, m.ndcg_at_10)
        })?;
    }
    check(hit(1) && ndcg_gain(1) == 1.0, || "rank 1".into())?;
    check(hit(4) && ndcg_gain(4) == 1.0 / 5f64.log2(), || "rank 4".into())?;
    check(!hit(11) && ndcg_gain(11) == 0.0, || "rank 11".into())?;
    Ok("200 instances equal brute force; rank 1/4/11 fixtures hold".into())
}

fn fd_fixture() -> (Recommender, Batch, Vec<Tensor<f32>>, Vec<Tensor<f32>>) {
    let text = EncoderConfig::new(Modality::Text, 4, 12, 11);
    let image = EncoderConfig::new(Modality::Image, 4, 8, 12);
    let san = IisanConfig {
        variant: Variant::Va,
        text_hidden: 12,
        image_hidden: 8,
        text_plan: select_layers(DropMode::AsymEvenAll, 4, 4).unwrap(),
        image_plan: select_layers(DropMode::SymmetricEven, 4, 4).unwrap(),
        bottleneck: 4,
        d_seq: 8,
    };
    let seq = SeqConfig {
        d: 8,
        heads: 2,
        blocks: 2,
        max_len: 6,
        dropout: 0.1,
    };
    let d = data(&SyntheticSpec {
        users: 24,
        items: 15,
        min_len: 4,
        max_len: 8,
        strength: 0.9,
        seed: 5,
    });
    let mut rec = Recommender::new(san.clone(), seq, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for p in rec.store.iter_mut().filter(|p| p.trainable) {
        let noise = normal(&mut rng, p.tensor.shape(), 0.2);
        for (v, n) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let users: Vec<&UserSplit> = d.split.users.iter().take(4).collect();
    let batch = Batch::build(&users, &d.popularity, 6).unwrap().unwrap();
    let src = ItemSource::live(build_encoder(text).unwrap(), build_encoder(image).unwrap(), false);
    let (t, i) = src.state_tensors(&batch.items, &san).unwrap();
    (rec, batch, t, i)
}

fn fd_run<T: Real>(rec: &Recommender, batch: &Batch, text: &[Tensor<f32>], image: &[Tensor<f32>], step: f64, tol: f64) -> Result<FdReport, String> {
    let mut store: ParamStore<T> = rec.store.cast();
    let text: Vec<Tensor<T>> = text.iter().map(|x| x.cast()).collect();
    let image: Vec<Tensor<T>> = image.iter().map(|x| x.cast()).collect();
    finite_difference_check(
        &mut store,
        |tape, store| {
            let t: Vec<Var> = text.iter().map(|x| tape.constant(x.clone())).collect();
            let i: Vec<Var> = image.iter().map(|x| tape.constant(x.clone())).collect();
            batch_loss(tape, &rec.model, store, batch, &t, &i, None)
        },
        step,
        tol,
    )
    .map_err(err)
}

fn class_of(name: &str) -> &'static str {
    if name.ends_with(".gate") {
        "gates"
    } else if name.starts_with("san.intra") || name.starts_with("san.inter") {
        "SANB"
    } else if name.starts_with("san.dtl") {
        "DTL"
    } else if name.starts_with("san.fusion") {
        "FL"
    } else if name.starts_with("seq.") {
        "seq"
    } else {
        "other"
    }
}

fn gradient_verification() -> Outcome {
    let (rec, batch, text, image) = fd_fixture();
    let mut parts = Vec::new();
    for (bits, report) in [
        ("f32", fd_run::<f32>(&rec, &batch, &text, &image, 5e-2, 1e-3)?),
        ("f64", fd_run::<f64>(&rec, &batch, &text, &image, 1e-5, 1e-5)?),
    ] {
        let classes: BTreeSet<&str> = report.entries.iter().map(|e| class_of(&e.name)).collect();
        check(classes == BTreeSet::from(["DTL", "FL", "SANB", "gates", "seq"]), || format!("{bits}: classes {classes:?}"))?;
        let worst = report.worst().ok_or("empty report")?;
        check(report.passed(), || format!("{bits}: {} rel err {:.3e}", worst.name, worst.max_rel_err))?;
        parts.push(format!("{bits} max {:.2e} ({} tensors)", report.max_error(), report.entries.len()));
    }
    Ok(parts.join("; "))
}

fn fit(text: &EncoderConfig, image: &EncoderConfig, san: &IisanConfig, d: &Data, items: &[u64], seed: u64) -> Result<MetricReport, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut src = caches(dir.path(), text, image, san, items);
    let mut rec = Recommender::new(san.clone(), SeqConfig::default(), seed).map_err(err)?;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    train(&mut rec, &mut src, &d.split, &d.popularity, &cfg).map_err(err)?;
    evaluate(&rec, &src, &d.split, &d.catalog, EvalTarget::Test).map_err(err)
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

fn learning_signal() -> Outcome {
    let d = data(&SyntheticSpec::default());
    let items: Vec<u64> = d.catalog.iter().copied().collect();
    let base = popularity_baseline(&d.split, &d.catalog, &d.popularity).map_err(err)?;
    let (t, i, vs) = dual(12, 64);
    let va_text = EncoderConfig::new(Modality::Text, 24, 96, 1001);
    let va = IisanConfig {
        variant: Variant::Va,
        text_hidden: 96,
        text_plan: select_layers(DropMode::AsymEq5Grouped, 24, 12).map_err(err)?,
        ..vs.clone()
    };
    let seeds = [42u64, 43, 44];
    let mut hr_vs = Vec::new();
    let mut hr_va = Vec::new();
    for &s in &seeds {
        hr_vs.push(fit(&t, &i, &vs, &d, &items, s)?.hr_at_10);
        hr_va.push(fit(&va_text, &i, &va, &d, &items, s)?.hr_at_10);
    }
    check(hr_vs[0] >= 1.5 * base.hr_at_10, || {
        format!("VS HR@10 {:.4} vs popularity {:.4}", hr_vs[0], base.hr_at_10)
    })?;
    let (mvs, svs) = mean_sd(&hr_vs);
    let (mva, sva) = mean_sd(&hr_va);
    // two standard errors of the difference of means
    let noise = 2.0 * ((svs * svs + sva * sva) / seeds.len() as f64).sqrt();
    check(mva + noise >= mvs, || format!("VA {mva:.4} below VS {mvs:.4} beyond noise {noise:.4}"))?;
    Ok(format!(
        "popularity {:.4}; VS {:.4} (seed 42 {:.4}); VA {:.4}; noise band {:.4}",
        base.hr_at_10, mvs, hr_vs[0], mva, noise
    ))
}

fn cost_ordering() -> Outcome {
    let (t, i, san) = dual(12, 64);
    let w = Workload::new(32, 50);
    let reports = Regime::ALL
        .iter()
        .map(|&r| estimate(&t, &i, &san, r, &w))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let get = |r: Regime| reports.iter().find(|x| x.regime == r).expect("every regime estimated");
    let [c, u, e, f] = Regime::CHEAPEST_FIRST.map(get);
    check(
        c.activation_bytes <= u.activation_bytes && u.activation_bytes < e.activation_bytes && e.activation_bytes < f.activation_bytes,
        || "activation ordering".into(),
    )?;
    check(c.bwd_flops <= u.bwd_flops && u.bwd_flops < e.bwd_flops && e.bwd_flops < f.bwd_flops, || "backward ordering".into())?;
    let ratio = f.activation_bytes as f64 / c.activation_bytes as f64;
    check(ratio >= 10.0, || format!("FFT/cached activation ratio {ratio:.2}"))?;
    check(compare(&reports).map_err(err)?.verdict() == Some(true), || "comparison verdict".into())?;
    Ok(format!("activations and backward strictly ordered; FFT/cached activations {ratio:.1}x"))
}

fn cache_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let layers: Vec<u16> = vec![0, 2, 5, 7];
    let h = 16;
    let mut ids: Vec<u64> = (0..10_000u64).map(|i| i * 3 + rng.random_range(0..3)).collect();
    ids.sort_unstable();
    let stacks: Vec<HiddenStateStack> = ids
        .iter()
        .map(|&id| HiddenStateStack {
            item_id: id,
            encoder_fingerprint: 77,
            layers: layers.clone(),
            states: layers
                .iter()
                .map(|_| (0..h).map(|_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff)).collect())
                .collect(),
        })
        .collect();
    let path = dir.path().join("big.iisc");
    let summary = write_cache(&path, 77, &layers, h, &stacks).map_err(err)?;
    check(summary.bytes == cache_file_size(ids.len(), layers.len(), h), || {
        format!("size {} vs formula {}", summary.bytes, cache_file_size(ids.len(), layers.len(), h))
    })?;
    let reader = CacheReader::open(&path).map_err(err)?;
    for s in &stacks {
        let back = reader.read_item(s.item_id).map_err(err)?;
        let same = back.layers == s.layers
            && back.states.iter().flatten().zip(s.states.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
        check(same, || format!("item {} differs after roundtrip", s.item_id))?;
    }

    let enc = build_encoder(EncoderConfig::new(Modality::Text, 12, 32, 3)).map_err(err)?;
    let items: Vec<u64> = (1..=40).collect();
    let mut sizes = Vec::new();
    for kept in 1..=13u16 {
        let keep: Vec<u16> = (0..kept).collect();
        let p = dir.path().join(format!("k{kept}.iisc"));
        let s = build_cache(&enc, &items, &keep, &p).map_err(err)?;
        check(s.bytes == fs::metadata(&p).map_err(|e| e.to_string())?.len(), || "summary size".into())?;
        check(s.bytes == cache_file_size(items.len(), kept as usize, 32), || format!("{kept} layers: size off formula"))?;
        sizes.push(s.bytes);
    }
    let step = sizes[1] - sizes[0];
    check(sizes.windows(2).all(|w| w[1] - w[0] == step), || format!("non-linear sizes {sizes:?}"))?;
    Ok(format!(
        "10000 stacks bit-identical; {} bytes = formula; +{step} bytes per kept layer",
        summary.bytes
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("gradient flow", gradient_flow, Duration::from_secs(10)),
        ("cache equivalence", cache_equivalence, Duration::from_secs(120)),
        ("group-size selection", group_size_selection, Duration::from_secs(1)),
        ("loss oracle", loss_oracle, Duration::from_secs(30)),
        ("metric oracle", metric_oracle, Duration::from_secs(30)),
        ("gradient verification", gradient_verification, Duration::from_secs(120)),
        ("learning signal", learning_signal, Duration::from_secs(600)),
        ("cost ordering", cost_ordering, Duration::from_secs(1)),
        ("cache integrity", cache_integrity, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (n, (name, run, limit)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > limit => Err(format!("{detail}; took {took:.1?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("ACCEPT {} {name}: PASS ({took:.1?}) {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("ACCEPT {} {name}: FAIL ({took:.1?}) {why}", n + 1);
            }
        }
    }
    println!("ACCEPTANCE {}/9 passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
