//! Acceptance suite. Each check prints one PASS/FAIL line; the process exits
//! nonzero if any check fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use grads::baselines::{importance_log_weight, select_random, NgramModel};
use grads::corpus::{encode_all, synth_corpus, build_vocab, Role, SynthSpec, TokenSequence, BOS, EOS, SEP};
use grads::evalmetrics::{bleu, clipped_ngram_matches, lcs_len, meteor_lite, rouge_l};
use grads::pipeline::{self, compare, extract, prepare, select, Baseline, ExperimentReport, Method, ModelShape, RunConfig, SplitConfig};
use grads::rng::SplitMix64;
use grads::selector::{kde_density_at, kde_values, select_by_density, select_strategy, silverman_bandwidth, subset_size, Strategy};
use grads::tinylm::{forward, forward_from_embeddings, init_model, loss_and_grads, Model, ModelConfig};

const SEEDS: [u64; 3] = [42, 43, 44];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---- model oracles -------------------------------------------------------

fn random_model(cfg: &ModelConfig, seed: u64) -> Model {
    let mut model = init_model(cfg).unwrap();
    let mut rng = SplitMix64::new(seed);
    for t in model.params.tensors_mut() {
        for x in t.iter_mut() {
            *x += 0.3 * rng.next_normal();
        }
    }
    model
}

fn random_seq(rng: &mut SplitMix64, vocab: usize, max_len: usize) -> TokenSequence {
    let prompt_len = 1 + rng.below(4);
    let resp_len = 1 + rng.below(max_len - prompt_len - 3);
    let mut tokens = vec![BOS];
    let mut roles = vec![Role::Special];
    for _ in 0..prompt_len {
        tokens.push(5 + rng.below(vocab - 5));
        roles.push(Role::Prompt);
    }
    tokens.push(SEP);
    roles.push(Role::Special);
    for _ in 0..resp_len {
        tokens.push(5 + rng.below(vocab - 5));
        roles.push(Role::Response);
    }
    tokens.push(EOS);
    roles.push(Role::Special);
    TokenSequence {
        instance_id: "x".into(),
        tokens,
        roles,
    }
}

/// Positions whose next token is a response token or the closing EOS.
fn loss_positions(seq: &TokenSequence) -> Vec<usize> {
    (0..seq.len() - 1)
        .filter(|&t| seq.roles[t + 1] == Role::Response || seq.tokens[t + 1] == EOS)
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Mean next-token cross-entropy from logits alone.
fn oracle_loss(model: &Model, seq: &TokenSequence, embeddings: Option<Vec<f64>>) -> f64 {
    let trace = match embeddings {
        Some(e) => forward_from_embeddings(model, &seq.tokens, e).unwrap(),
        None => forward(model, seq).unwrap(),
    };
    let pos = loss_positions(seq);
    let total: f64 = pos
        .iter()
        .map(|&t| -softmax(trace.logits_row(t))[seq.tokens[t + 1]].ln())
        .sum();
    total / pos.len() as f64
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central-difference error for one entry. A structurally zero gradient has
/// no relative error; its difference quotient must stay within the rounding
/// noise of two loss evaluations.
fn fd_error(analytic: f64, fd: f64, loss: f64, eps: f64) -> (f64, bool) {
    if analytic.abs() <= 1e-15 {
        let noise = 16.0 * f64::EPSILON * loss.abs().max(1.0) / eps;
        (fd.abs() / noise * 1e-4, true)
    } else {
        (rel_err(analytic, fd), false)
    }
}

fn gradient_exactness() -> Outcome {
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let started = Instant::now();
    let mut cfg = ModelConfig::new(50, 16, 2, 2);
    cfg.max_seq_len = 12;
    let (mut checked, mut failed, mut worst, mut zeros) = (0usize, 0usize, 0.0f64, 0usize);
    for seed in 0..3u64 {
        let model = random_model(&cfg, 100 + seed);
        let mut rng = SplitMix64::new(seed);
        let seq = random_seq(&mut rng, cfg.vocab_size, cfg.max_seq_len);
        let trace = forward(&model, &seq).unwrap();
        let res = loss_and_grads(&model, &seq, &trace).unwrap();
        let analytic = res.param_grads.flatten();
        let mut offset = 0;
        let n_tensors = model.params.named_tensors().len();
        for ti in 0..n_tensors {
            let len = model.params.named_tensors()[ti].1.len();
            for idx in 0..len {
                let mut plus = model.clone();
                plus.params.tensors_mut()[ti][idx] += EPS;
                let mut minus = model.clone();
                minus.params.tensors_mut()[ti][idx] -= EPS;
                let fd = (oracle_loss(&plus, &seq, None) - oracle_loss(&minus, &seq, None)) / (2.0 * EPS);
                let (e, zero) = fd_error(analytic[offset + idx], fd, res.loss, EPS);
                worst = worst.max(e);
                zeros += usize::from(zero);
                checked += 1;
                failed += usize::from(e >= TOL);
            }
            offset += len;
        }
        let d = cfg.d_model;
        let emb = trace.embeddings.clone();
        for t in 0..seq.len() {
            for j in 0..d {
                let mut ep = emb.clone();
                ep[t * d + j] += EPS;
                let mut em = emb.clone();
                em[t * d + j] -= EPS;
                let fd = (oracle_loss(&model, &seq, Some(ep)) - oracle_loss(&model, &seq, Some(em))) / (2.0 * EPS);
                let (e, zero) = fd_error(res.g_emb[t][j], fd, res.loss, EPS);
                worst = worst.max(e);
                zeros += usize::from(zero);
                checked += 1;
                failed += usize::from(e >= TOL);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        "gradient_exactness",
        failed == 0 && secs < 60.0,
        format!(
            "{checked} gradients ({zeros} exactly zero, held to rounding noise), {failed} above 1e-4, worst rel err {worst:.2e}, {secs:.1}s (< 60s)"
        ),
    )
}

fn lm_head_gradient() -> Outcome {
    let data = synth_corpus(&SynthSpec {
        n_domain: 60,
        n_noise: 20,
        n_trivial: 20,
        seed: 7,
    });
    let tok = build_vocab(&data, 256).unwrap();
    let seqs = encode_all(&tok, &data, 16).unwrap();
    let mut cfg = ModelConfig::new(tok.vocab_size(), 16, 2, 2);
    cfg.max_seq_len = 16;
    let model = random_model(&cfg, 9);
    let mut worst = 0.0f64;
    let mut positions = 0;
    let mut mismatched_mask = 0;
    for seq in &seqs {
        let trace = forward(&model, seq).unwrap();
        let res = loss_and_grads(&model, seq, &trace).unwrap();
        let pos = loss_positions(seq);
        let w = 1.0 / pos.len() as f64;
        let captured: Vec<usize> = res.loss_positions().collect();
        if captured != pos {
            mismatched_mask += 1;
            continue;
        }
        for &t in &pos {
            let p = softmax(trace.logits_row(t));
            let g = res.g_lm[t].as_ref().unwrap();
            for (i, (gi, pi)) in g.iter().zip(&p).enumerate() {
                let y = if i == seq.tokens[t + 1] { 1.0 } else { 0.0 };
                worst = worst.max((gi - (pi - y) * w).abs());
            }
            positions += 1;
        }
    }
    outcome(
        "lm_head_gradient",
        mismatched_mask == 0 && worst <= 1e-12 && seqs.len() == 100,
        format!(
            "{} instances, {positions} loss positions, max |g_lm - (softmax - onehot)w| = {worst:.2e} (<= 1e-12)",
            seqs.len()
        ),
    )
}

// ---- density and selection ------------------------------------------------

fn random_dataset(rng: &mut SplitMix64, n: usize, kind: usize) -> Vec<f64> {
    (0..n)
        .map(|_| match kind % 4 {
            0 => rng.next_normal(),
            1 => -rng.next_open01().ln() * 3.0,
            2 => {
                if rng.next_f64() < 0.3 {
                    5.0 + 0.5 * rng.next_normal()
                } else {
                    rng.next_normal()
                }
            }
            _ => 100.0 * rng.next_f64(),
        })
        .collect()
}

fn kde_correctness() -> Outcome {
    let mut rng = SplitMix64::new(3);
    let mut lo_int = f64::INFINITY;
    let mut hi_int = f64::NEG_INFINITY;
    for k in 0..20 {
        let n = 10 + rng.below(491);
        let values = random_dataset(&mut rng, n, k);
        let h = silverman_bandwidth(&values).unwrap();
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (a, b) = (min - 5.0 * h, max + 5.0 * h);
        let steps = (((b - a) / (h / 20.0)).ceil() as usize).clamp(2000, 200_000);
        let dx = (b - a) / steps as f64;
        let mut integral = 0.0;
        for i in 0..=steps {
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            integral += w * kde_density_at(&values, h, a + i as f64 * dx);
        }
        integral *= dx;
        lo_int = lo_int.min(integral);
        hi_int = hi_int.max(integral);
    }
    let f0 = kde_density_at(&[0.0, 1.0], 1.0, 0.0);
    let hand = 0.5 * (1.0 + (-0.5f64).exp()) / (2.0 * PI).sqrt();
    let pass = lo_int >= 0.99 && hi_int <= 1.01 && (f0 - 0.32046).abs() < 1e-5 && (f0 - hand).abs() < 1e-15;
    outcome(
        "kde_correctness",
        pass,
        format!("20 integrals in [{lo_int:.6}, {hi_int:.6}] (need [0.99, 1.01]); two-point f(0) = {f0:.8} vs {hand:.8}"),
    )
}

fn selector_invariants() -> Outcome {
    // (a) size grid against integer round-half-up.
    let mut size_bad = 0;
    let mut size_checked = 0;
    for k in 1..=300usize {
        for twice_n in 1..=200usize {
            let expected = ((k * twice_n + 100) / 200).clamp(1, k);
            size_checked += 1;
            if subset_size(k, twice_n as f64 / 2.0).unwrap() != expected {
                size_bad += 1;
            }
        }
    }

    let mut rng = SplitMix64::new(11);
    let mut dominance_bad = 0;
    let mut scale_bad = 0;
    let mut perm_bad = 0;
    for trial in 0..20 {
        let n = 20 + rng.below(300);
        let values: Vec<f64> = random_dataset(&mut rng, n, trial).iter().map(|v| v.abs() + 0.01).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        let pct = [10.0, 25.0, 50.0, 75.0][trial % 4];
        let sel = select_by_density("grads", &ids, &values, pct, None).unwrap();
        let chosen: std::collections::BTreeSet<String> = sel.ids().iter().map(|s| s.to_string()).collect();

        // (b) dominance over an independently computed density.
        let h = silverman_bandwidth(&values).unwrap();
        let f: Vec<f64> = values
            .iter()
            .map(|&x| values.iter().map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>() / (n as f64 * h * (2.0 * PI).sqrt()))
            .collect();
        let lib_f = kde_values(&values, h).unwrap();
        let min_sel = (0..n).filter(|i| chosen.contains(&ids[*i])).map(|i| lib_f[i]).fold(f64::INFINITY, f64::min);
        let max_rej = (0..n).filter(|i| !chosen.contains(&ids[*i])).map(|i| lib_f[i]).fold(f64::NEG_INFINITY, f64::max);
        let oracle_close = f.iter().zip(&lib_f).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        if min_sel < max_rej || !oracle_close {
            dominance_bad += 1;
        }

        // (c) positive rescaling.
        let c = 10f64.powf(-3.0 + 6.0 * rng.next_f64());
        let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
        let sel_c = select_by_density("grads", &ids, &scaled, pct, None).unwrap();
        let chosen_c: std::collections::BTreeSet<String> = sel_c.ids().iter().map(|s| s.to_string()).collect();
        if chosen_c != chosen {
            scale_bad += 1;
        }

        // (d) permutation.
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let p_ids: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
        let p_vals: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        let sel_p = select_by_density("grads", &p_ids, &p_vals, pct, None).unwrap();
        let chosen_p: std::collections::BTreeSet<String> = sel_p.ids().iter().map(|s| s.to_string()).collect();
        if chosen_p != chosen {
            perm_bad += 1;
        }
    }
    outcome(
        "selector_invariants",
        size_bad == 0 && dominance_bad == 0 && scale_bad == 0 && perm_bad == 0,
        format!(
            "size {}/{size_checked} ok; dominance failures {dominance_bad}/20; rescaling failures {scale_bad}/20; permutation failures {perm_bad}/20",
            size_checked - size_bad
        ),
    )
}

// ---- quadrant behaviour and pilot -------------------------------------------

fn full_corpus_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        split: SplitConfig {
            test_size: 0,
            query_size: 0,
        },
        ..RunConfig::default()
    }
}

struct CorpusRun {
    noise_frac: f64,
    domain_frac: f64,
    corpus_noise: f64,
    rho_ease: f64,
    rho_loss: f64,
}

fn corpus_run(seed: u64) -> CorpusRun {
    let cfg = full_corpus_config(seed);
    let prep = prepare(&cfg).unwrap();
    let ext = extract(&cfg, &prep).unwrap();
    let sel = select(&cfg, &prep, &ext.records, &ext.model, Method::Gradient(Strategy::Grads), 50.0).unwrap();
    let count = |s: &str| *sel.stratum_counts.get(s).unwrap_or(&0) as f64;
    let n = sel.len() as f64;
    let corpus_noise = prep
        .train
        .iter()
        .filter(|i| i.stratum.map(|s| s.as_str()) == Some("noise"))
        .count() as f64
        / prep.train.len() as f64;
    let report = pipeline::pilot(&prep, &ext).unwrap();
    let idx: Vec<f64> = report.rows.iter().map(|r| r.decile as f64).collect();
    let neg_loss: Vec<f64> = report.rows.iter().map(|r| -r.mean_loss).collect();
    CorpusRun {
        noise_frac: count("noise") / n,
        domain_frac: count("domain") / n,
        corpus_noise,
        rho_ease: grads::evalmetrics::spearman(&idx, &neg_loss),
        rho_loss: report.loss_trend(),
    }
}

fn quadrant_and_pilot() -> (Outcome, Outcome) {
    let runs: Vec<CorpusRun> = SEEDS.iter().map(|&s| corpus_run(s)).collect();
    let noise = mean(&runs.iter().map(|r| r.noise_frac).collect::<Vec<_>>());
    let domain = mean(&runs.iter().map(|r| r.domain_frac).collect::<Vec<_>>());
    let corpus_noise = mean(&runs.iter().map(|r| r.corpus_noise).collect::<Vec<_>>());
    let quad = outcome(
        "quadrant_behaviour",
        noise < corpus_noise / 2.0 && domain >= 0.8,
        format!(
            "grads@50 noise {:.3} (< {:.3}), domain {:.3} (>= 0.8), per seed noise {:?}",
            noise,
            corpus_noise / 2.0,
            domain,
            runs.iter().map(|r| (r.noise_frac * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );
    let rho = mean(&runs.iter().map(|r| r.rho_ease).collect::<Vec<_>>());
    let rho_loss = mean(&runs.iter().map(|r| r.rho_loss).collect::<Vec<_>>());
    let pilot = outcome(
        "pilot_decile_trend",
        rho >= 0.6,
        format!(
            "spearman(decile, -loss) = {rho:.3} (>= 0.6); spearman(decile, loss) = {rho_loss:.3}; smaller-gradient deciles have lower base loss"
        ),
    );
    (quad, pilot)
}

// ---- downstream comparisons -------------------------------------------------

fn method(s: &str) -> Method {
    s.parse().unwrap()
}

fn compare_seed(cfg: &RunConfig, methods: &[&str]) -> ExperimentReport {
    let started = Instant::now();
    let prep = prepare(cfg).unwrap();
    let ext = extract(cfg, &prep).unwrap();
    let ms: Vec<Method> = methods.iter().map(|m| method(m)).collect();
    let mut report = compare(cfg, &prep, &ext, &ms, &[50.0]).unwrap();
    report.seconds = started.elapsed().as_secs_f64();
    for r in &report.rows {
        if let Some(e) = &r.error {
            panic!("{} failed: {e}", r.label);
        }
    }
    report
}

fn score(reports: &[ExperimentReport], label: &str, f: fn(&pipeline::ReportRow) -> Option<f64>) -> f64 {
    mean(&reports.iter().map(|r| f(r.row(label, None).unwrap()).unwrap()).collect::<Vec<_>>())
}

fn headline_and_ablation() -> (Outcome, Outcome) {
    let mut reports = Vec::new();
    let mut headline_secs = 0.0;
    let mut top_grad_exact = true;
    for &seed in &SEEDS {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        let report = compare_seed(&cfg, &["grads", "random", "top_grad", "weightr"]);
        let timed: f64 = report
            .rows
            .iter()
            .filter(|r| !matches!(r.label.as_str(), "top_grad" | "weightr"))
            .map(|r| r.seconds)
            .sum();
        let row_secs: f64 = report.rows.iter().map(|r| r.seconds).sum();
        headline_secs += timed + (report.seconds - row_secs);

        // top_grad against a direct sort of the records.
        let prep = prepare(&cfg).unwrap();
        let ext = extract(&cfg, &prep).unwrap();
        let k = ext.records.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| ext.records[b].g_grads.partial_cmp(&ext.records[a].g_grads).unwrap().then(a.cmp(&b)));
        let half = (k + 1) / 2;
        let mut expected: Vec<String> = order[..half].iter().map(|&i| ext.records[i].instance_id.clone()).collect();
        expected.sort();
        let sel = select_strategy(&ext.records, Strategy::TopGrad, 50.0).unwrap();
        let mut got: Vec<String> = sel.ids().iter().map(|s| s.to_string()).collect();
        got.sort();
        top_grad_exact &= got == expected;
        reports.push(report);
    }
    let bleu = |l: &str| score(&reports, l, |r| r.bleu);
    let rouge = |l: &str| score(&reports, l, |r| r.rouge_l);
    let (gb, ab, rb) = (bleu("grads"), bleu("all"), bleu("random"));
    let (gr, ar, rr) = (rouge("grads"), rouge("all"), rouge("random"));
    let per_seed: Vec<String> = reports
        .iter()
        .map(|r| {
            let b = |l: &str| r.row(l, None).unwrap().bleu.unwrap();
            format!("seed {}: grads {:.3} all {:.3} random {:.3}", r.seed, b("grads"), b("all"), b("random"))
        })
        .collect();
    let headline = outcome(
        "headline_comparison",
        gb >= ab && gr >= ar && gb > rb && gr > rr && headline_secs < 900.0,
        format!(
            "bleu grads {gb:.4} / all {ab:.4} / random {rb:.4}; rouge_l grads {gr:.4} / all {ar:.4} / random {rr:.4}; {headline_secs:.0}s (< 900s) [{}]",
            per_seed.join("; ")
        ),
    );
    let (tb, wb) = (bleu("top_grad"), bleu("weightr"));
    let ablation = outcome(
        "ablation_ordering",
        gb >= tb && gb >= wb && top_grad_exact,
        format!("bleu grads {gb:.4} vs top_grad {tb:.4}, weightr {wb:.4}; top_grad equals the highest-g half: {top_grad_exact}"),
    );
    (headline, ablation)
}

fn transfer() -> Outcome {
    let cfg = RunConfig {
        seed: SEEDS[0],
        extractor: Some(ModelShape::with_width(16)),
        ..RunConfig::default()
    };
    let report = compare_seed(&cfg, &["grads", "random"]);
    let b = |l: &str| report.row(l, None).unwrap().bleu.unwrap();
    outcome(
        "cross_model_transfer",
        b("grads") > b("random"),
        format!(
            "d16 records, d32 fine-tune: grads bleu {:.4} vs random {:.4} (all {:.4})",
            b("grads"),
            b("random"),
            b("all")
        ),
    )
}

// ---- metric and baseline oracles --------------------------------------------

fn random_tokens(rng: &mut SplitMix64, max_len: usize, alphabet: usize) -> Vec<usize> {
    let len = rng.below(max_len + 1);
    (0..len).map(|_| rng.below(alphabet)).collect()
}

/// Clipped matches by enumerating distinct n-grams and counting by scan.
fn brute_clipped(cand: &[usize], reference: &[usize], n: usize) -> (usize, usize) {
    let grams = |s: &[usize]| -> Vec<Vec<usize>> {
        if s.len() < n {
            Vec::new()
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        }
    };
    let cg = grams(cand);
    let rg = grams(reference);
    let mut seen: Vec<&Vec<usize>> = Vec::new();
    let mut matched = 0;
    for g in &cg {
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        let in_c = cg.iter().filter(|x| *x == g).count();
        let in_r = rg.iter().filter(|x| *x == g).count();
        matched += in_c.min(in_r);
    }
    (matched, cg.len())
}

fn memo_lcs(a: &[usize], b: &[usize], i: usize, j: usize, memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + memo_lcs(a, b, i + 1, j + 1, memo)
    } else {
        memo_lcs(a, b, i + 1, j, memo).max(memo_lcs(a, b, i, j + 1, memo))
    };
    memo.insert((i, j), v);
    v
}

fn metric_oracles() -> Outcome {
    let mut rng = SplitMix64::new(21);
    let mut bleu_bad = 0;
    for _ in 0..20 {
        let c = random_tokens(&mut rng, 15, 4);
        let mut r = random_tokens(&mut rng, 15, 4);
        if r.is_empty() {
            r.push(0);
        }
        let mut p = Vec::new();
        for n in 1..=4 {
            let got = clipped_ngram_matches(&c, &r, n);
            let want = brute_clipped(&c, &r, n);
            if got != want {
                bleu_bad += 1;
            }
            p.push(want);
        }
        let lib = bleu(&[c.clone()], &[r.clone()], 4).unwrap().corpus_score;
        let oracle = if p.iter().any(|(m, _)| *m == 0) {
            0.0
        } else {
            let bp = if c.len() >= r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
            let geo: f64 = p.iter().map(|&(m, t)| m as f64 / t as f64).product::<f64>().powf(0.25);
            bp * geo
        };
        if (lib - oracle).abs() > 1e-12 {
            bleu_bad += 1;
        }
    }

    let mut rouge_bad = 0;
    for _ in 0..50 {
        let a = random_tokens(&mut rng, 50, 6);
        let b = random_tokens(&mut rng, 50, 6);
        let l = memo_lcs(&a, &b, 0, 0, &mut BTreeMap::new());
        let f1 = if l == 0 { 0.0 } else { 2.0 * l as f64 / (a.len() + b.len()) as f64 };
        if lcs_len(&a, &b) != l || (rouge_l(&a, &b) - f1).abs() > 1e-12 {
            rouge_bad += 1;
        }
    }

    let mut meteor_worst = 0.0f64;
    for m in 1..=40usize {
        let s: Vec<usize> = (0..m).collect();
        let want = 1.0 - 0.5 / (m as f64).powi(3);
        meteor_worst = meteor_worst.max((meteor_lite(&s, &s) - want).abs());
    }
    outcome(
        "metric_oracles",
        bleu_bad == 0 && rouge_bad == 0 && meteor_worst <= 1e-12,
        format!("bleu mismatches {bleu_bad} (20 pairs x 4 orders + score); rouge_l mismatches {rouge_bad}/50; meteor identity max err {meteor_worst:.1e}"),
    )
}

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        split: SplitConfig {
            test_size: 10,
            query_size: 8,
        },
        ..RunConfig::default()
    };
    cfg.synth.n_domain = 120;
    cfg.synth.n_noise = 30;
    cfg.synth.n_trivial = 30;
    cfg.model.d_model = 8;
    cfg.extract.warmup_steps = 20;
    cfg
}

fn baseline_oracles() -> Outcome {
    // DSIR on a two-token vocabulary against ratio products.
    let target = NgramModel::from_probs(&[0.8, 0.2]).unwrap();
    let raw = NgramModel::from_probs(&[0.5, 0.5]).unwrap();
    let exact = importance_log_weight(&[0, 0, 1], &target, &raw).exp();
    let mut dsir_worst = (exact - 1.024).abs();
    let ratio = [0.8 / 0.5, 0.2 / 0.5];
    for len in 1..=6usize {
        for mask in 0..(1usize << len) {
            let doc: Vec<usize> = (0..len).map(|i| (mask >> i) & 1).collect();
            let want: f64 = doc.iter().map(|&f| ratio[f]).product();
            let got = importance_log_weight(&doc, &target, &raw).exp();
            dsir_worst = dsir_worst.max((got - want).abs());
        }
    }

    // Random selection frequencies.
    let ids: Vec<String> = (0..20).map(|i| format!("r{i}")).collect();
    let mut hits = vec![0usize; ids.len()];
    let trials = 10_000;
    for seed in 0..trials as u64 {
        for i in select_random(&ids, 25.0, seed).unwrap().indices() {
            hits[i] += 1;
        }
    }
    let freq_dev = hits.iter().map(|&h| (h as f64 / trials as f64 - 0.25).abs()).fold(0.0, f64::max);

    // Byte-identical reruns from scratch for every baseline and two seeds.
    let mut nondeterministic = Vec::new();
    for seed in [5u64, 6] {
        let cfg = small_config(seed);
        let run = || {
            let prep = prepare(&cfg).unwrap();
            let ext = extract(&cfg, &prep).unwrap();
            Baseline::ALL
                .iter()
                .map(|&b| select(&cfg, &prep, &ext.records, &ext.model, Method::Baseline(b), 30.0).unwrap().to_jsonl())
                .collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        for (i, base) in Baseline::ALL.iter().enumerate() {
            if a[i] != b[i] || a[i].is_empty() {
                nondeterministic.push(format!("{}@{seed}", base.name()));
            }
        }
    }
    outcome(
        "baseline_oracles",
        dsir_worst <= 1e-12 && freq_dev <= 0.02 && nondeterministic.is_empty(),
        format!(
            "dsir weight {exact:.12} (1.024), max err {dsir_worst:.1e}; random max freq deviation {freq_dev:.4} (<= 0.02); nondeterministic baselines {nondeterministic:?}"
        ),
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results = vec![gradient_exactness(), lm_head_gradient(), kde_correctness(), selector_invariants()];
    let (quad, pilot) = quadrant_and_pilot();
    results.push(quad);
    results.push(pilot);
    let (headline, ablation) = headline_and_ablation();
    results.push(headline);
    results.push(ablation);
    results.push(metric_oracles());
    results.push(baseline_oracles());
    results.push(transfer());

    let failed: Vec<&Outcome> = results.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    for o in &failed {
        println!("  failed {}: {}", o.name, o.detail);
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
