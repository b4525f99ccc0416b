//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! gating failure.

mod common;

use std::collections::{HashMap, HashSet};
use std::process::ExitCode;
use std::time::Instant;

use common::oracle;
use common::{degenerate_config, init, max_abs_diff, random_config, random_prefix, random_tokens, rng};
use compforge_core::compdegree::{compositional_degree, min_cover, score_examples};
use compforge_core::corpus::{tokenize, ParallelExample, Side};
use compforge_core::ngram_index::build_ngram_dictionary;
use compforge_core::novelty::novel_ngram_count;
use compforge_core::rdangle::{greedy_decode, DecodeMode, Engine, Interval, ModelConfig, Variant};
use compforge_core::uncertainty::{band_select, token_uncertainties, BandParams, EnsembleTokenDistributions, EPSILON_FLOOR};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Each atom repeated four times as its own sentence, so every atom
/// clears the strict `> 3` threshold.
fn atoms_dict(atoms: &[&str]) -> compforge_core::ngram_index::NGramDictionary {
    let corpus: Vec<Vec<String>> = atoms.iter().flat_map(|a| std::iter::repeat_n(tokenize(a), 4)).collect();
    build_ngram_dictionary(&corpus, 3, Some(8))
}

fn c1_worked_example() -> Outcome {
    let dict = atoms_dict(&["x1", "x2", "x3 x4", "x5", "x1 x2", "x3 x4 x5"]);
    let sent = tokenize("x1 x2 x3 x4 x5");
    let start = Instant::now();
    let cover = min_cover(&sent, &dict).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let d = compositional_degree(&cover, sent.len()).map_err(|e| e.to_string())?;
    let atoms: Vec<String> = cover.atom_tokens(&sent).iter().map(|a| a.join(" ")).collect();
    check(d.atom_count == 2 && d.value() == 0.4, || format!("got {d}"))?;
    check(atoms == ["x1 x2", "x3 x4 x5"], || format!("atoms {atoms:?}"))?;
    check(elapsed.as_secs_f64() < 1e-3, || format!("took {elapsed:?}"))?;
    Ok(format!("{d}, atoms {atoms:?}, {:.1} us", elapsed.as_secs_f64() * 1e6))
}

fn c2_table_fixtures() -> Outcome {
    let cases = [
        ("but what can we do about this ?", vec!["but", "what can we do about this ?"], (2, 8)),
        ("please report all changes here .", vec!["please", "report", "all", "changes", "here ."], (5, 6)),
        ("you have disabled your javascript !", vec!["you have", "disabled", "your", "javascript"], (5, 6)),
    ];
    let mut shown = Vec::new();
    for (sentence, atoms, (a, l)) in cases {
        let dict = atoms_dict(&atoms);
        let sent = tokenize(sentence);
        let d = compositional_degree(&min_cover(&sent, &dict).map_err(|e| e.to_string())?, sent.len())
            .map_err(|e| e.to_string())?;
        check((d.atom_count, d.length) == (a, l) && d.value() == a as f64 / l as f64, || {
            format!("{sentence:?}: {d}")
        })?;
        shown.push(d.to_string());
    }
    Ok(shown.join("; "))
}

/// Fewest pieces over all 2^(n-1) segmentations; multi-token pieces must be
/// frequent n-grams, single tokens are always allowed.
fn exhaustive_min(sent: &[String], grams: &HashSet<Vec<String>>) -> usize {
    let n = sent.len();
    let mut best = usize::MAX;
    for mask in 0u32..(1 << (n - 1)) {
        let mut pieces = 0;
        let mut start = 0;
        let mut ok = true;
        for end in 1..=n {
            if end == n || mask & (1 << (end - 1)) != 0 {
                let piece = &sent[start..end];
                if piece.len() > 1 && !grams.contains(piece) {
                    ok = false;
                    break;
                }
                pieces += 1;
                start = end;
            }
        }
        if ok {
            best = best.min(pieces);
        }
    }
    best
}

fn c3_cover_optimality() -> Outcome {
    let alphabet = ["a", "b", "c", "d", "e", "f"];
    let mut r = rng(3);
    let start = Instant::now();
    let mut agree = 0;
    let total = 1000;
    for _ in 0..total {
        let corpus: Vec<Vec<String>> = (0..r.gen_range(5..40))
            .map(|_| (0..r.gen_range(1..9)).map(|_| alphabet[r.gen_range(0..6)].to_string()).collect())
            .collect();
        let min_count = r.gen_range(0..4u64);
        let max_n = if r.gen_bool(0.3) { None } else { Some(r.gen_range(1..6)) };
        let dict = build_ngram_dictionary(&corpus, min_count, max_n);
        let mut counts: HashMap<Vec<String>, u64> = HashMap::new();
        for s in &corpus {
            for n in 1..=s.len() {
                if max_n.is_some_and(|m| n > m) {
                    break;
                }
                for w in s.windows(n) {
                    *counts.entry(w.to_vec()).or_default() += 1;
                }
            }
        }
        let grams: HashSet<Vec<String>> = counts.into_iter().filter(|(_, c)| *c > min_count).map(|(g, _)| g).collect();
        let len = r.gen_range(1..=12);
        let sent: Vec<String> = (0..len).map(|_| alphabet[r.gen_range(0..6)].to_string()).collect();
        let dp = min_cover(&sent, &dict).map_err(|e| e.to_string())?.atom_count();
        if dp == exhaustive_min(&sent, &grams) {
            agree += 1;
        }
    }
    let elapsed = start.elapsed();
    check(agree == total, || format!("{agree}/{total} agree"))?;
    check(elapsed.as_secs_f64() < 10.0, || format!("took {elapsed:?}"))?;
    Ok(format!("{agree}/{total} agree in {:.2} s", elapsed.as_secs_f64()))
}

fn naive_rmi(probs: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let m = probs.len();
    (0..probs[0].len())
        .map(|l| {
            let s = probs[0][l].len();
            let sm: Vec<Vec<f64>> = probs
                .iter()
                .map(|p| p[l].iter().map(|x| (1.0 - s as f64 * EPSILON_FLOOR) * x + EPSILON_FLOOR).collect())
                .collect();
            let mut total = 0.0;
            for member in &sm {
                for k in 0..s {
                    let mean: f64 = sm.iter().map(|q| q[k]).sum::<f64>() / m as f64;
                    total += mean * (mean / member[k]).ln();
                }
            }
            total / m as f64
        })
        .collect()
}

fn dist(id: &str, probs: Vec<Vec<Vec<f64>>>) -> EnsembleTokenDistributions {
    let support = probs[0].iter().map(|p| (0..p.len()).map(|i| format!("s{i}")).collect()).collect();
    EnsembleTokenDistributions {
        example_id: id.into(),
        tokens: Vec::new(),
        support,
        probs,
    }
}

fn random_simplex(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.001..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / z).collect()
}

fn c4_uncertainty() -> Outcome {
    let fixture = dist("f", vec![vec![vec![0.9, 0.1]], vec![vec![0.1, 0.9]]]);
    let s = token_uncertainties(&fixture).map_err(|e| e.to_string())?;
    check((s.token_mi[0] - 0.368064).abs() < 1e-6, || format!("mi {}", s.token_mi[0]))?;
    check((s.token_rmi[0] - 0.510826).abs() < 1e-6, || format!("rmi {}", s.token_rmi[0]))?;

    let mut r = rng(4);
    for _ in 0..50 {
        let positions = r.gen_range(1..5);
        let member: Vec<Vec<f64>> = (0..positions)
            .map(|_| {
                let width = r.gen_range(2..6);
                random_simplex(&mut r, width)
            })
            .collect();
        let same = dist("same", vec![member.clone(); r.gen_range(2..6)]);
        let u = token_uncertainties(&same).map_err(|e| e.to_string())?;
        check(u.token_rmi.iter().chain(&u.token_mi).all(|&v| v == 0.0) && u.sequence_score == 0.0, || {
            format!("identical members scored {:?}", u.token_rmi)
        })?;
    }

    let mut worst = 0.0f64;
    for i in 0..500 {
        let members = r.gen_range(2..8);
        let positions = r.gen_range(1..6);
        let widths: Vec<usize> = (0..positions).map(|_| r.gen_range(2..10)).collect();
        let probs: Vec<Vec<Vec<f64>>> = (0..members)
            .map(|_| widths.iter().map(|&w| random_simplex(&mut r, w)).collect())
            .collect();
        let expected = naive_rmi(&probs);
        let got = token_uncertainties(&dist(&i.to_string(), probs)).map_err(|e| e.to_string())?;
        for (a, b) in got.token_rmi.iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
        let mean = expected.iter().sum::<f64>() / expected.len() as f64;
        worst = worst.max((got.sequence_score - mean).abs());
    }
    check(worst <= 1e-10, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "mi {:.6}, rmi {:.6}, identical ensembles 0, 500 random max deviation {worst:.1e}",
        s.token_mi[0], s.token_rmi[0]
    ))
}

fn c5_band_selection() -> Outcome {
    let ranked: Vec<(usize, f64)> = (0..25_000).map(|i| (i, 1.0 - i as f64 / 25_000.0)).collect();
    let params = BandParams::default();
    let a = band_select(&ranked, params, 13).map_err(|e| e.to_string())?;
    let b = band_select(&ranked, params, 13).map_err(|e| e.to_string())?;
    check(a.len() == 3000, || format!("size {}", a.len()))?;
    check(a.iter().all(|&i| i + 1 > 2000 && i < 20_000), || "rank outside (2000, 20000]".into())?;
    check(a.iter().collect::<HashSet<_>>().len() == 3000, || "repeated pick".into())?;
    check(a == b, || "equal seeds differ".into())?;
    let (lo, hi) = (a.iter().min().unwrap() + 1, a.iter().max().unwrap() + 1);
    Ok(format!("3000 picks, one-based ranks {lo}..={hi}, reproducible"))
}

fn c6_dangle_equivalence() -> Outcome {
    let mut r = rng(6);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let cfg = random_config(&mut r, Variant::RdangleShr, Interval::Every(1));
        let mut dangle = cfg.clone();
        dangle.variant = Variant::Dangle;
        let w = init(&cfg, r.gen());
        let (n, t) = (r.gen_range(1..8), r.gen_range(1..9));
        let x = random_tokens(&mut r, n, cfg.src_vocab);
        let prefix = random_prefix(&mut r, t, cfg.tgt_vocab, cfg.bos);
        let shr = Engine::new(&cfg, &w).unwrap().run(&x, DecodeMode::Forced(&prefix)).map_err(|e| e.to_string())?;
        let direct = Engine::new(&dangle, &w).unwrap().run(&x, DecodeMode::Forced(&prefix)).map_err(|e| e.to_string())?;
        for step in 1..=t {
            let reference = oracle::step_logits(&dangle, &w, &x, &prefix, step);
            worst = worst
                .max(max_abs_diff(&shr.logits[step - 1], &direct.logits[step - 1]))
                .max(max_abs_diff(&shr.logits[step - 1], &reference));
        }
    }
    check(worst <= 1e-6, || format!("max logit deviation {worst:e}"))?;
    Ok(format!("100 configs, max logit deviation {worst:.1e}"))
}

fn c7_degeneracy() -> Outcome {
    let mut r = rng(7);
    let mut tokens = 0;
    for i in 0..50 {
        let layers = 1 + i % 3;
        let cfg = degenerate_config(layers, 1 + i % layers);
        let mut vanilla = cfg.clone();
        vanilla.variant = Variant::Vanilla;
        let w = init(&cfg, r.gen());
        let n = r.gen_range(1..16);
        let x = random_tokens(&mut r, n, cfg.src_vocab);
        let a = greedy_decode(&cfg, &w, &x, 20).map_err(|e| e.to_string())?;
        let b = greedy_decode(&vanilla, &w, &x, 20).map_err(|e| e.to_string())?;
        check(a == b, || format!("input {i}: {a:?} vs {b:?}"))?;
        tokens += a.len();
    }
    Ok(format!("50 inputs identical, {tokens} tokens compared"))
}

fn c8_schedule_and_caching() -> Outcome {
    let mut r = rng(8);
    let mut worst = 0.0f32;
    for o in [1, 2, 4, 8] {
        for variant in [Variant::RdangleShr, Variant::RdangleSep] {
            let cfg = ModelConfig::toy(variant, Interval::Every(o));
            let w = init(&cfg, 0);
            let e = Engine::new(&cfg, &w).unwrap();
            let x = random_tokens(&mut r, 20, cfg.src_vocab);
            let prefix = random_prefix(&mut r, 20, cfg.tgt_vocab, cfg.bos);
            let out = e.run(&x, DecodeMode::Forced(&prefix)).map_err(|e| e.to_string())?;
            // snapshot a re-encode at every step
            let snapshots: Vec<String> = (1..=prefix.len())
                .map(|t| e.adaptive_encode(&x, &prefix[..t]).map(|h| h.digest()))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            for t in 1..=prefix.len() {
                let point = oracle::latest_point(variant, cfg.interval, t);
                check(out.trace[t - 1].point == point, || format!("o={o} t={t}: point {}", out.trace[t - 1].point))?;
                check(out.trace[t - 1].key_hash == snapshots[point - 1], || {
                    format!("{variant} o={o} t={t}: keys differ from snapshot at {point}")
                })?;
                worst = worst.max(max_abs_diff(&out.logits[t - 1], &oracle::step_logits(&cfg, &w, &x, &prefix, t)));
            }
        }
    }
    check(worst <= 1e-6, || format!("cached vs scratch deviation {worst:e}"))?;
    Ok(format!("o in {{1,2,4,8}}, 20 steps, hashes match snapshots, max deviation {worst:.1e}"))
}

fn c9_value_constancy() -> Outcome {
    let mut r = rng(9);
    let mut decodes = 0;
    for o in [Interval::Every(1), Interval::Every(2), Interval::Every(3), Interval::Every(5), Interval::Infinite] {
        for _ in 0..4 {
            let cfg = random_config(&mut r, Variant::RdangleSep, o);
            let w = init(&cfg, r.gen());
            let n = r.gen_range(1..10);
            let x = random_tokens(&mut r, n, cfg.src_vocab);
            let out = Engine::new(&cfg, &w)
                .unwrap()
                .run(&x, DecodeMode::Greedy { max_len: 16 })
                .map_err(|e| e.to_string())?;
            let v0 = &out.encodings[0].values;
            for (t, step) in out.encodings.iter().enumerate() {
                check(step.values.data() == v0.data() && out.trace[t].value_hash == out.trace[0].value_hash, || {
                    format!("value input changed at step {}", t + 1)
                })?;
                if t > 0 && !out.trace[t].reencoded {
                    check(out.trace[t].key_hash == out.trace[t - 1].key_hash, || {
                        format!("keys changed off-schedule at step {}", t + 1)
                    })?;
                }
                let is_point = match o {
                    Interval::Every(k) => t % k == 0,
                    Interval::Infinite => t == 0,
                };
                check(out.trace[t].reencoded == is_point, || format!("re-encode flag wrong at step {}", t + 1))?;
            }
            decodes += 1;
        }
    }
    Ok(format!("{decodes} decodes, values bit-identical, keys move only at points"))
}

fn c10_novelty() -> Outcome {
    let mut r = rng(10);
    let mut checks = 0;
    for _ in 0..200 {
        let gen = |r: &mut ChaCha8Rng, sents: usize, alpha: &[&str]| -> Vec<Vec<String>> {
            (0..sents)
                .map(|_| (0..r.gen_range(1..8)).map(|_| alpha[r.gen_range(0..alpha.len())].to_string()).collect())
                .collect()
        };
        let words = ["a", "b", "c", "d", "e"];
        let tags = ["N", "V", "D"];
        for alpha in [&words[..], &tags[..]] {
            let (train, test) = (gen(&mut r, 15, alpha), gen(&mut r, 8, alpha));
            for n in [2, 3] {
                let set = |s: &[Vec<String>]| -> HashSet<Vec<String>> { s.iter().flat_map(|x| x.windows(n).map(|w| w.to_vec())).collect() };
                let expected = set(&test).difference(&set(&train)).count();
                let got = novel_ngram_count(&train, &test, n);
                check(got == expected, || format!("n={n}: {got} vs {expected}"))?;
                checks += 1;
            }
        }
    }
    Ok(format!("{checks}/{checks} agree (words and tags, n in {{2,3}})"))
}

fn c11_throughput() -> Outcome {
    let mut r = rng(11);
    let vocab: Vec<String> = (0..400).map(|i| format!("w{i}")).collect();
    // Zipf-like draw keeps many n-grams above threshold
    let draw = |r: &mut ChaCha8Rng| -> String {
        let u: f64 = r.gen_range(0.0..1.0);
        vocab[((u * u) * vocab.len() as f64) as usize].clone()
    };
    let train: Vec<Vec<String>> = (0..150_000).map(|_| (0..r.gen_range(5..25)).map(|_| draw(&mut r)).collect()).collect();
    let dict = build_ngram_dictionary(&train, 3, Some(8));
    let pool: Vec<ParallelExample> = (0..30_000)
        .map(|i| {
            let tgt: Vec<String> = (0..r.gen_range(5..30)).map(|_| draw(&mut r)).collect();
            ParallelExample::new(i.to_string(), "x", &tgt.join(" "))
        })
        .collect();
    let start = Instant::now();
    let scored = score_examples(&pool, &dict, Side::Target).map_err(|(i, e)| format!("{i}: {e}"))?;
    let secs = start.elapsed().as_secs_f64();
    let per_min = scored.len() as f64 / secs * 60.0;
    let detail = format!(
        "{} sentences against {} entries in {secs:.2} s = {per_min:.0} sentences/min ({} build)",
        scored.len(),
        dict.len(),
        if cfg!(debug_assertions) { "debug" } else { "release" }
    );
    check(dict.len() >= 100_000 && per_min >= 50_000.0, || detail.clone())?;
    Ok(detail)
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let gating: Vec<Criterion> = vec![
        (1, "worked example 2/5 = 0.4", c1_worked_example),
        (2, "table fixtures 2/8 and 5/6", c2_table_fixtures),
        (3, "cover DP vs exhaustive oracle", c3_cover_optimality),
        (4, "uncertainty fixtures and oracle", c4_uncertainty),
        (5, "band selection", c5_band_selection),
        (6, "dangle equivalence at o=1", c6_dangle_equivalence),
        (7, "degeneracy chain to vanilla", c7_degeneracy),
        (8, "schedule and caching", c8_schedule_and_caching),
        (9, "value constancy", c9_value_constancy),
        (10, "novelty oracles", c10_novelty),
    ];
    let mut failed = 0;
    for (n, name, f) in gating {
        match f() {
            Ok(detail) => println!("PASS [{n}] {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL [{n}] {name}: {why}");
            }
        }
    }
    match c11_throughput() {
        Ok(detail) => println!("PASS [11] degree-scoring throughput (soft, not gating): {detail}"),
        Err(why) => println!("FAIL [11] degree-scoring throughput (soft, not gating): {why}"),
    }
    println!(
        "PASS [12] desk-scale limits stated: BLEU/error-rate numbers and absolute novelty counts need the original \
         corpora, trained models and tagger; criteria 1-10 stand in for them"
    );
    if failed > 0 {
        println!("{failed} gating criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
