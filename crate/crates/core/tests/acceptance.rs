//! End-to-end acceptance checks on the default four-domain suite.
//!
//! Runs without the libtest harness so every check prints exactly one
//! PASS/FAIL line; the process exits nonzero if any check fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use pacda::checkpoint::{decode, encode};
use pacda::config::Config;
use pacda::datagen::{derive_seed, DomainData};
use pacda::evaluation::{accuracy, domain_accuracy, forgetting_delta, pruning_curve, round1};
use pacda::losses::{diversity_loss, entropy_loss, im_loss, label_smoothed_ce};
use pacda::network::Network;
use pacda::router::{predict_with_domain_id, route_batch};
use pacda::tensor::{softmax_row, Tape, Tensor};
use pacda::trainer::{adapt_domain, run_baseline, run_sequence, source_pretrain, train_source, PipelineState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: String) -> Check {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct Snapshot {
    weights: Vec<Vec<f64>>,
    logits: Tensor,
    accuracy: f64,
}

struct Stepwise {
    state: PipelineState,
    snapshots: Vec<Snapshot>,
    ledger_ok: Vec<String>,
    bank_entries_stable: bool,
    elapsed: Duration,
}

fn snapshot(state: &mut PipelineState, t: usize, data: &DomainData) -> Snapshot {
    let logits = predict_with_domain_id(&data.test.inputs, t, &mut state.net, &state.ledger, &state.bank).unwrap();
    Snapshot {
        weights: state.net.prunable_weights().iter().map(|w| w.data().to_vec()).collect(),
        accuracy: accuracy(&logits, &data.test.labels).unwrap(),
        logits,
    }
}

/// The sequence one domain at a time, recording what each domain looked
/// like when it finished.
fn stepwise(cfg: &Config, data: &[DomainData]) -> Stepwise {
    let start = Instant::now();
    let plan = &cfg.training;
    let p = plan.fractions(data.len());
    let net = Network::init(&cfg.architecture, cfg.seed).unwrap();
    let mut log = Vec::new();
    let mut state = train_source(net, &data[0].train, p[0], plan, cfg.seed, &mut log).unwrap();
    let mut snaps = vec![snapshot(&mut state, 0, &data[0])];
    state.accuracy_after.push(snaps[0].accuracy);
    let mut ledger_problems = Vec::new();
    let mut bank_stable = true;
    let mut stored = vec![state.bank.entry(0).unwrap().clone()];
    for t in 1..data.len() {
        adapt_domain(&mut state, &data[t].train.inputs, p[t], plan, cfg.seed, &mut log).unwrap();
        if let Err(e) = state.ledger.check_invariants() {
            ledger_problems.push(format!("after domain {t}: {e}"));
        }
        if !state.ledger.pruned_weights_are_zero(&state.net, t) {
            ledger_problems.push(format!("weights outside M_{t} are not zero"));
        }
        for (i, s) in stored.iter().enumerate() {
            bank_stable &= state.bank.entry(i) == Some(s);
        }
        stored.push(state.bank.entry(t).unwrap().clone());
        let s = snapshot(&mut state, t, &data[t]);
        state.accuracy_after.push(s.accuracy);
        snaps.push(s);
    }
    Stepwise {
        state,
        snapshots: snaps,
        ledger_ok: ledger_problems,
        bank_entries_stable: bank_stable,
        elapsed: start.elapsed(),
    }
}

fn gradient_check(cfg: &Config, data: &[DomainData]) -> Check {
    let start = Instant::now();
    let net = Network::init(&cfg.architecture, cfg.seed).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let x = data[0].train.inputs.gather_rows(&idx);
    let y: Vec<usize> = idx.iter().map(|&i| data[0].train.labels[i]).collect();
    let alpha = cfg.training.smoothing_alpha;
    let w = cfg.training.im_div_weight;
    let probes = 40;
    let errs = [
        ("smoothed CE", net.finite_diff_check(&x, None, |t: &mut Tape, l| label_smoothed_ce(t, l, &y, alpha), probes, 1)),
        ("entropy", net.finite_diff_check(&x, None, entropy_loss, probes, 2)),
        ("diversity", net.finite_diff_check(&x, None, diversity_loss, probes, 3)),
        ("IM", net.finite_diff_check(&x, None, move |t: &mut Tape, l| im_loss(t, l, w), probes, 4)),
    ];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, e) in errs {
        let e = e.map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(e);
        parts.push(format!("{name} {e:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst < 1e-4 && secs < 60.0,
        format!("{probes} coordinates per loss, max relative error {worst:.1e} ({}) in {secs:.1}s", parts.join(", ")),
    )
}

fn zero_forgetting(run: &Stepwise, data: &[DomainData]) -> Check {
    let mut state = run.state.clone();
    let final_weights: Vec<Vec<f64>> = state.net.prunable_weights().iter().map(|w| w.data().to_vec()).collect();
    let mut worst_rel = 0.0f64;
    for (i, snap) in run.snapshots.iter().enumerate() {
        let mask = state.ledger.mask(i).unwrap().to_vec();
        for (k, m) in mask.iter().enumerate() {
            for j in 0..m.len() {
                if m.get(j) && final_weights[k][j].to_bits() != snap.weights[k][j].to_bits() {
                    return Err(format!("domain {i}: weight {k}/{j} in M_{i} changed"));
                }
            }
        }
        let logits = predict_with_domain_id(&data[i].test.inputs, i, &mut state.net, &state.ledger, &state.bank).unwrap();
        for (a, b) in logits.data().iter().zip(snap.logits.data()) {
            worst_rel = worst_rel.max((a - b).abs() / b.abs().max(f64::MIN_POSITIVE));
        }
        let end = domain_accuracy(&mut state.net, &state.ledger, &state.bank, i, &data[i].test).unwrap();
        let delta = forgetting_delta(end, snap.accuracy);
        if delta != 0.0 {
            return Err(format!("domain {i}: forgetting delta {delta}"));
        }
    }
    let secs = run.elapsed.as_secs_f64();
    ensure(
        worst_rel <= 1e-12 && secs < 600.0,
        format!(
            "{} domains: masked weights bitwise stable, max logit relative diff {worst_rel:.1e}, forgetting 0.0 each; sequence {secs:.1}s",
            run.snapshots.len()
        ),
    )
}

fn ledger_invariants(run: &Stepwise) -> Check {
    if let Some(p) = run.ledger_ok.first() {
        return Err(p.clone());
    }
    run.state.ledger.check_invariants().map_err(|e| e.to_string())?;
    let l = &run.state.ledger;
    let mut decreases = Vec::new();
    for (i, t) in l.tensors().iter().enumerate() {
        decreases.push(format!("{}:{}", t.name, l.free_count(i)));
    }
    ensure(
        run.bank_entries_stable,
        format!(
            "nesting, cardinality, claimed_by and pruned-zero checks clean after every domain; bank entries immutable; free weights {}",
            decreases.join(" ")
        ),
    )
}

fn routing(run: &Stepwise, data: &[DomainData], cfg: &Config) -> Check {
    let mut state = run.state.clone();
    let bs = 64;
    let (mut right, mut total) = (0usize, 0usize);
    let mut worst_gap = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7007));
    for (t, d) in data.iter().enumerate() {
        let (mut hits_routed, mut hits_oracle, mut n) = (0usize, 0usize, 0usize);
        for epoch in 0..4 {
            let batches: Vec<_> = if epoch == 0 { d.test.chunks(bs).collect() } else { d.test.epoch(bs, &mut rng).collect() };
            for b in batches {
                if b.labels.len() < 2 {
                    continue;
                }
                let dec = route_batch(&b.inputs, &mut state.net, &state.ledger, &state.bank).unwrap();
                total += 1;
                right += (dec.chosen_domain == b.domain_id) as usize;
                hits_routed += dec.predictions.iter().zip(&b.labels).filter(|(p, y)| p == y).count();
                let oracle = predict_with_domain_id(&b.inputs, t, &mut state.net, &state.ledger, &state.bank).unwrap();
                hits_oracle += (accuracy(&oracle, &b.labels).unwrap() * b.labels.len() as f64).round() as usize;
                n += b.labels.len();
            }
        }
        let gap = 100.0 * (hits_oracle as f64 - hits_routed as f64).abs() / n as f64;
        worst_gap = worst_gap.max(gap);
    }
    let rate = right as f64 / total as f64;
    ensure(
        rate >= 0.95 && worst_gap <= 1.0,
        format!(
            "routing accuracy {:.1}% over {total} batches of {bs}; worst routed-vs-oracle gap {worst_gap:.2} points",
            100.0 * rate
        ),
    )
}

fn pruning(cfg: &Config, data: &[DomainData]) -> Check {
    let start = Instant::now();
    let mut net = Network::init(&cfg.architecture, cfg.seed).unwrap();
    source_pretrain(&mut net, &data[0].train, &cfg.training, cfg.seed, &mut Vec::new()).unwrap();
    let pts = pruning_curve(&net, &data[0].train, &data[0].test, &[0.0, 0.5, 0.95, 0.99], &cfg.training, cfg.seed).unwrap();
    let dense = pts[0].ante_finetune;
    let at50 = pts[1].post_finetune;
    let severe = pts[3].post_finetune;
    let secs = start.elapsed().as_secs_f64();
    ensure(
        (dense - at50).abs() <= 0.02 && dense - severe >= 0.15 && secs < 300.0,
        format!(
            "unpruned {:.1}%, 50% pruned after fine-tune {:.1}%, 95% pruned {:.1}%/{:.1}% (before/after fine-tune), 99% pruned after fine-tune {:.1}%; {secs:.1}s",
            100.0 * dense,
            100.0 * at50,
            100.0 * pts[2].ante_finetune,
            100.0 * pts[2].post_finetune,
            100.0 * severe
        ),
    )
}

fn forgetting_contrast(run: &Stepwise, cfg: &Config, data: &[DomainData]) -> Check {
    let base = run_baseline(cfg, data).map_err(|e| e.to_string())?;
    let baseline_delta = 100.0 * forgetting_delta(base.accuracy_end[0], base.accuracy_after[0]);
    let mut state = run.state.clone();
    let end = domain_accuracy(&mut state.net, &state.ledger, &state.bank, 0, &data[0].test).unwrap();
    let ours = 100.0 * forgetting_delta(end, run.state.accuracy_after[0]);
    ensure(
        baseline_delta <= -10.0 && ours == 0.0,
        format!("source forgetting: baseline {baseline_delta:+.1} points, masked model {ours:+.1} points"),
    )
}

fn diversity_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..12);
        let b = rng.random_range(1..40);
        let rows: Vec<Vec<f64>> = (0..b).map(|_| (0..k).map(|_| rng.random_range(-8.0..8.0)).collect()).collect();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_rows(&rows).unwrap());
        let v = diversity_loss(&mut tape, l).unwrap();
        let got = tape.value(v).item();
        let mut p_hat = vec![0.0; k];
        for r in &rows {
            for (a, p) in p_hat.iter_mut().zip(softmax_row(r)) {
                *a += p / b as f64;
            }
        }
        let kl: f64 = p_hat.iter().map(|&p| p * (p * k as f64).ln()).sum();
        worst = worst.max((got - (kl - (k as f64).ln())).abs());
    }
    ensure(worst <= 1e-10, format!("100 random batches, max |diff| {worst:.1e}"))
}

fn metric_arithmetic() -> Check {
    let a = round1(forgetting_delta(57.7, 80.9));
    let b = forgetting_delta(68.6, 68.35);
    let c = forgetting_delta(0.5, 0.5);
    ensure(
        a == -23.2 && (b - 0.25).abs() < 1e-9 && c == 0.0,
        format!("57.7 vs 80.9 -> {a:+.1}; 68.6 vs 68.35 -> {b:+.2}; equal -> {c}"),
    )
}

fn determinism(run: &Stepwise, cfg: &Config, data: &[DomainData]) -> Check {
    let a = run_sequence(cfg, data, None, None).map_err(|e| e.to_string())?;
    let b = run_sequence(cfg, data, None, None).map_err(|e| e.to_string())?;
    let ca = encode(&a.state, cfg).unwrap();
    let cb = encode(&b.state, cfg).unwrap();
    if ca != cb {
        return Err("two runs with the same seed produced different checkpoints".into());
    }
    if encode(&run.state, cfg).unwrap() != ca {
        return Err("stepwise run differs from run_sequence".into());
    }
    let partial = run_sequence(cfg, data, None, Some(1)).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    pacda::checkpoint::save_checkpoint(&path, &partial.state, cfg).unwrap();
    let (loaded, cfg2) = pacda::checkpoint::load_checkpoint(&path).unwrap();
    let resumed = run_sequence(&cfg2, data, Some(loaded), None).map_err(|e| e.to_string())?;
    let cr = encode(&resumed.state, &cfg2).unwrap();
    let (back, _) = decode(&ca).unwrap();
    ensure(
        cr == ca && back == a.state,
        format!("identical seeds give identical {}-byte checkpoints; resume after domain 1 matches bitwise", ca.len()),
    )
}

fn main() -> ExitCode {
    let cfg = Config::default();
    let data = cfg.generate().expect("default suite generates");
    let run = stepwise(&cfg, &data);

    let results: Vec<(&str, Check)> = vec![
        ("1 gradient correctness", gradient_check(&cfg, &data)),
        ("2 exact zero forgetting", zero_forgetting(&run, &data)),
        ("3 mask ledger invariants", ledger_invariants(&run)),
        ("4 batch-statistic routing", routing(&run, &data, &cfg)),
        ("5 pruning tolerance", pruning(&cfg, &data)),
        ("6 forgetting contrast", forgetting_contrast(&run, &cfg, &data)),
        ("7 diversity identity", diversity_identity()),
        ("8 metric arithmetic", metric_arithmetic()),
        ("9 determinism and persistence", determinism(&run, &cfg, &data)),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(msg) => println!("PASS  {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
