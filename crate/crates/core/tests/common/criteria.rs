//! One check per acceptance criterion. Each returns a short summary on
//! success and the first violation on failure.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use dkinet_core::aggregate::{build_knowledge_tables, independence_loss, KgParams};
use dkinet_core::ehr::{CodeType, PatientRecord, Visit};
use dkinet_core::encoder::{club_fit_step, club_mi_loss, CLUB_B, CLUB_W};
use dkinet_core::eval::{bootstrap_evaluate, evaluate, BootstrapConfig};
use dkinet_core::gradcheck::{check, pick_coordinates, STEP};
use dkinet_core::kg::NeighborIndex;
use dkinet_core::metrics::{average_precision, ddi_rate, f1, jaccard, DdiMatrix};
use dkinet_core::optim::{AdamConfig, AdamState};
use dkinet_core::params::{derive_seed, seeded_init, InitScheme, ParamStore};
use dkinet_core::synth::SynthConfig;
use dkinet_core::tape::Tape;
use dkinet_core::tensor::Tensor;
use dkinet_core::train::{finish_loss, forward_batch, train, Checkpoint, TrainConfig, TrainData, TrainState};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{brute_ap, dcor, looped_aggregation, set_f1, set_jaccard, synth_dataset, tiny_config};

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Term {
    Bce,
    Ekg,
    Mi,
    Total,
}

/// Loss term value and parameter gradients over one batch.
pub fn term_loss(
    model: &dkinet_core::model::Model,
    cfg: &TrainConfig,
    store: &ParamStore,
    batch: &[PatientRecord],
    term: Term,
) -> (f64, BTreeMap<String, Tensor>) {
    let mut tape = Tape::new();
    let fwd = forward_batch(model, cfg, &mut tape, store, batch).unwrap();
    let loss = finish_loss(&mut tape, &fwd, store, cfg).unwrap();
    let v = match term {
        Term::Bce => loss.bce,
        Term::Ekg => loss.ekg,
        Term::Mi => loss.mi,
        Term::Total => loss.total,
    };
    let value = tape.value(v).item().unwrap();
    let grads = tape.backward(v).unwrap();
    (value, grads.params().clone())
}

/// Absolute slack for coordinates whose gradient is at the level of
/// finite-difference round-off.
pub const GRAD_FLOOR: f64 = 1e-8;

pub fn gradient_suite() -> Outcome {
    let (_dir, ds) = synth_dataset(&tiny_config(5, 7));
    let cfg = TrainConfig {
        dim: 8,
        ..TrainConfig::default()
    };
    let model = ds.model(cfg.model_config()).unwrap();
    let store = model.init_params(derive_seed(3, "init")).unwrap();
    let batch = &ds.patients;
    let mut worst = 0.0f64;
    let (mut relative, mut floored, mut zeros) = (0, 0, 0);
    for (k, term) in [Term::Bce, Term::Ekg, Term::Mi, Term::Total].into_iter().enumerate() {
        let (_, grads) = term_loss(&model, &cfg, &store, batch, term);
        // the variational net is a constant inside every loss term
        let coords = pick_coordinates(&grads, 20, 5, 100 + k as u64, &["club."]);
        let nonzero = coords.iter().filter(|(n, i)| grads[n].data()[*i] != 0.0).count();
        ensure(nonzero == 20, || format!("{term:?}: only {nonzero} coordinates with a gradient"))?;
        let res = check(&store, &grads, &coords, STEP, |s| Ok(term_loss(&model, &cfg, s, batch, term).0)).unwrap();
        for p in res {
            ensure(p.passes(1e-4, GRAD_FLOOR), || format!("{term:?}: {p:?}"))?;
            if p.analytic == 0.0 {
                zeros += 1;
            } else if p.relative_error() <= 1e-4 {
                relative += 1;
                worst = worst.max(p.relative_error());
            } else {
                floored += 1;
            }
        }
    }
    Ok(format!(
        "{relative} probes within 1e-4 relative (worst {worst:.1e}), {floored} tiny gradients within {GRAD_FLOOR:.0e} absolute, {zeros} zero-gradient probes"
    ))
}

/// A random graph, its tables and the vectorised neighbour index.
pub struct RandomGraph {
    pub concepts: Vec<Vec<f64>>,
    pub relations: Vec<Vec<f64>>,
    pub codes: Vec<Vec<f64>>,
    pub filter_w: Vec<Vec<f64>>,
    pub triples: Vec<(usize, usize, usize)>,
    pub links: Vec<(usize, usize)>,
    pub index: NeighborIndex,
    pub layers: usize,
}

pub fn random_graph(rng: &mut ChaCha8Rng) -> RandomGraph {
    let nu = rng.random_range(1..=20);
    let nr = rng.random_range(1..=5);
    let nc = rng.random_range(1..=10);
    let nf = *[1usize, 2, 4].choose(rng).unwrap();
    let layers = rng.random_range(1..=2);
    let dim = rng.random_range(1..=6);
    let table = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
    };
    let concepts = table(nu, dim, rng);
    let relations = table(nr, dim, rng);
    let codes = table(nc, dim, rng);
    let filter_w = table(nf, nr, rng);
    let mut seen = HashSet::new();
    let mut triples = Vec::new();
    for _ in 0..rng.random_range(0..=3 * nu) {
        let t = (rng.random_range(0..nu), rng.random_range(0..nr), rng.random_range(0..nu));
        if seen.insert(t) {
            triples.push(t);
        }
    }
    let mut seen = HashSet::new();
    let mut links = Vec::new();
    for _ in 0..rng.random_range(0..=2 * nc) {
        let l = (rng.random_range(0..nc), rng.random_range(0..nu));
        if seen.insert(l) {
            links.push(l);
        }
    }
    let mut by_head = vec![Vec::new(); nu];
    for &(h, r, t) in &triples {
        by_head[h].push((r, t));
    }
    let mut by_code = vec![Vec::new(); nc];
    for &(c, u) in &links {
        for f in 0..nf {
            by_code[c].push((f, u));
        }
    }
    RandomGraph {
        concepts,
        relations,
        codes,
        filter_w,
        triples,
        links,
        index: NeighborIndex { by_head, by_code },
        layers,
    }
}

/// Largest deviation between the tape layers and the looped reference.
pub fn aggregation_deviation(g: &RandomGraph) -> f64 {
    let mut tape = Tape::new();
    let mut c = |rows: &[Vec<f64>]| tape.constant(Tensor::from_rows(rows).unwrap());
    let params = KgParams {
        concepts: c(&g.concepts),
        relations: c(&g.relations),
        codes: c(&g.codes),
        filter_w: c(&g.filter_w),
    };
    let kt = build_knowledge_tables(&mut tape, params, &g.index, g.layers).unwrap();
    let want = looped_aggregation(&g.concepts, &g.relations, &g.codes, &g.filter_w, &g.triples, &g.links, g.layers);
    let flat = |rows: &[Vec<f64>]| rows.concat();
    let mut dev = max_abs_diff(tape.value(kt.codes).data(), &flat(&want.codes));
    dev = dev.max(max_abs_diff(tape.value(kt.filters).data(), &flat(&want.filters)));
    for (got, exp) in kt.attention.iter().zip(&want.attention) {
        dev = dev.max(max_abs_diff(tape.value(*got).data(), &flat(exp)));
    }
    dev
}

pub fn aggregation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for g in 0..50 {
        let graph = random_graph(&mut rng);
        let dev = aggregation_deviation(&graph);
        ensure(dev <= 1e-10, || format!("graph {g}: deviation {dev:e}"))?;
        worst = worst.max(dev);
    }
    Ok(format!("50 graphs, max deviation {worst:.1e}"))
}

/// Independence loss of the given filter rows.
pub fn ekg(rows: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::from_rows(rows).unwrap());
    let l = independence_loss(&mut tape, f).unwrap();
    tape.value(l).item().unwrap()
}

pub fn dcor_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = rng.random_range(2..=16);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let term = ekg(&[x.clone(), y.clone()]) / 2.0;
        ensure((0.0..=1.0).contains(&term), || format!("case {case}: term {term} outside [0,1]"))?;
        let dev = (term - dcor(&x, &y)).abs();
        ensure(dev <= 1e-10, || format!("case {case}: oracle deviation {dev:e}"))?;
        worst = worst.max(dev);
        let same = ekg(&[x.clone(), x.clone()]) / 2.0;
        ensure((same - 1.0).abs() <= 1e-10, || format!("case {case}: dCor(x,x) = {same}"))?;
        let flat = ekg(&[x.clone(), vec![0.7; n]]);
        ensure(flat == 0.0, || format!("case {case}: constant partner gives {flat}"))?;
    }
    Ok(format!("100 vectors, max oracle deviation {worst:.1e}"))
}

pub fn club_checks() -> Outcome {
    // hand fixture: identity mean, v_o = v_k = [[0], [2]]
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap());
    let w = tape.constant(Tensor::identity(1));
    let b = tape.constant(Tensor::zeros(&[1, 1]));
    let l = club_mi_loss(&mut tape, v, v, w, b).unwrap();
    let fixture = tape.value(l).item().unwrap();
    ensure(fixture == 1.0, || format!("fixture returned {fixture}"))?;

    // the main objective never reaches the variational net
    let (_dir, ds) = synth_dataset(&tiny_config(5, 7));
    let cfg = TrainConfig {
        dim: 8,
        ..TrainConfig::default()
    };
    let model = ds.model(cfg.model_config()).unwrap();
    let store = model.init_params(derive_seed(3, "init")).unwrap();
    for term in [Term::Mi, Term::Total] {
        let (_, grads) = term_loss(&model, &cfg, &store, &ds.patients, term);
        for name in [CLUB_W, CLUB_B] {
            let leaked = grads.get(name).is_some_and(|g| g.data().iter().any(|&x| x != 0.0));
            ensure(!leaked, || format!("{term:?} loss has a gradient on {name}"))?;
        }
    }
    // and fitting the variational net touches nothing else
    let mut fitted = store.clone();
    let mut adam = AdamState::new(AdamConfig::default());
    let mut tape = Tape::new();
    let fwd = forward_batch(&model, &cfg, &mut tape, &store, &ds.patients).unwrap();
    let (vo, vk) = (tape.value(fwd.v_o).clone(), tape.value(fwd.v_k).clone());
    club_fit_step(&mut fitted, &mut adam, &vo, &vk).unwrap();
    for (name, t) in store.iter() {
        let after = fitted.get(name).unwrap();
        let club = name == CLUB_W || name == CLUB_B;
        ensure(club || after == t, || format!("fitting changed {name}"))?;
        ensure(!club || after != t, || format!("fitting left {name} unchanged"))?;
    }

    // independent pairs: the bound should be centred on zero
    let dv = 8;
    let s = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let batch = |rng: &mut ChaCha8Rng| {
        let mut draw = || Tensor::new(vec![s, dv], (0..s * dv).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        (draw(), draw())
    };
    let mut club = ParamStore::new();
    club.insert(CLUB_W, seeded_init(&[dv, dv], 4, InitScheme::Uniform(None)).unwrap()).unwrap();
    club.insert(CLUB_B, Tensor::zeros(&[1, dv])).unwrap();
    let mut adam = AdamState::new(AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    });
    for _ in 0..300 {
        let (x, y) = batch(&mut rng);
        club_fit_step(&mut club, &mut adam, &x, &y).unwrap();
    }
    let mut total = 0.0;
    for _ in 0..50 {
        let (x, y) = batch(&mut rng);
        let mut tape = Tape::new();
        let (x, y) = (tape.constant(x), tape.constant(y));
        let w = tape.constant(club.get(CLUB_W).unwrap().clone());
        let b = tape.constant(club.get(CLUB_B).unwrap().clone());
        let l = club_mi_loss(&mut tape, x, y, w, b).unwrap();
        total += tape.value(l).item().unwrap();
    }
    let mean = total / 50.0;
    ensure(mean.abs() <= 0.1, || format!("independent-pair estimate {mean}"))?;
    Ok(format!("fixture 1.0, no leaked gradient, independent estimate {mean:+.4}"))
}

fn random_subset(rng: &mut ChaCha8Rng, m: usize, min: usize) -> Vec<usize> {
    loop {
        let s: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.4)).collect();
        if s.len() >= min {
            return s;
        }
    }
}

pub fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let m = rng.random_range(1..=12);
        // one decimal place so ties are common
        let scores: Vec<f64> = (0..m).map(|_| (rng.random_range(0.0..1.0f64) * 10.0).round() / 10.0).collect();
        let truth = random_subset(&mut rng, m, 1);
        let pred = random_subset(&mut rng, m, 0);
        let (j, want_j) = (jaccard(&truth, &pred), set_jaccard(&truth, &pred));
        ensure(j == want_j, || format!("case {case}: jaccard {j} vs {want_j}"))?;
        let (f, want_f) = (f1(&truth, &pred), set_f1(&truth, &pred));
        ensure(f == want_f, || format!("case {case}: f1 {f} vs {want_f}"))?;
        let ap = average_precision(&scores, &truth).unwrap();
        let dev = (ap - brute_ap(&scores, &truth).unwrap()).abs();
        ensure(dev <= 1e-10, || format!("case {case}: AP deviation {dev:e}"))?;
        worst = worst.max(dev);

        let mut ddi = DdiMatrix::new(m);
        let mut adverse = HashSet::new();
        for _ in 0..m {
            let (a, b) = (rng.random_range(0..m), rng.random_range(0..m));
            ddi.add(a, b).unwrap();
            if a != b {
                adverse.insert((a.min(b), a.max(b)));
            }
        }
        let visits: Vec<Vec<usize>> = (0..rng.random_range(1..=4)).map(|_| random_subset(&mut rng, m, 0)).collect();
        let (mut bad, mut all) = (0usize, 0usize);
        for v in &visits {
            for (i, &a) in v.iter().enumerate() {
                for &b in &v[i + 1..] {
                    all += 1;
                    bad += adverse.contains(&(a.min(b), a.max(b))) as usize;
                }
            }
        }
        let want = if all == 0 { 0.0 } else { bad as f64 / all as f64 };
        let got = ddi_rate(visits.iter().map(Vec::as_slice), &ddi);
        ensure(got == want, || format!("case {case}: ddi {got} vs {want}"))?;
    }
    let mut ddi = DdiMatrix::new(3);
    ddi.add(0, 1).unwrap();
    let rate = ddi_rate([&[0usize, 1, 2][..]], &ddi);
    ensure(rate == 1.0 / 3.0, || format!("DDI fixture returned {rate}"))?;
    Ok(format!("200 cases, max AP deviation {worst:.1e}, DDI fixture 1/3"))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn causality() -> Outcome {
    let (_dir, ds) = synth_dataset(&tiny_config(6, 13));
    let cfg = TrainConfig {
        dim: 8,
        ..TrainConfig::default()
    };
    let model = ds.model(cfg.model_config()).unwrap();
    let store = model.init_params(derive_seed(1, "init")).unwrap();
    // one long patient stitched from all the others
    let patient = PatientRecord {
        id: "long".into(),
        visits: ds.patients.iter().flat_map(|p| p.visits.clone()).take(6).collect(),
    };
    let n = patient.visits.len();
    let (nd, np, nm) = (
        model.vocab.num(CodeType::Diag),
        model.vocab.num(CodeType::Proc),
        model.vocab.num(CodeType::Med),
    );
    let base = model.predict(&store, std::slice::from_ref(&patient)).unwrap().remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checks = 0;
    for t in 0..n {
        let mut variants = Vec::new();
        let mut own_meds = patient.clone();
        own_meds.visits[t].med = random_subset(&mut rng, nm, 1);
        variants.push(("own medications", own_meds));
        let mut future = patient.clone();
        for v in &mut future.visits[t + 1..] {
            *v = Visit::new(random_subset(&mut rng, nd, 1), random_subset(&mut rng, np, 0), random_subset(&mut rng, nm, 1));
        }
        variants.push(("later visits", future));
        let mut cut = patient.clone();
        cut.visits.truncate(t + 1);
        variants.push(("truncation", cut));
        let mut longer = patient.clone();
        longer.visits.push(Visit::new(vec![0], vec![], vec![0]));
        variants.push(("appended visit", longer));
        for (what, p) in variants {
            let got = model.predict(&store, std::slice::from_ref(&p)).unwrap().remove(0);
            for u in 0..=t {
                ensure(bits(&got[u]) == bits(&base[u]), || format!("{what} after visit {t} changed visit {u}"))?;
                checks += 1;
            }
        }
    }
    Ok(format!("{n} visits, {checks} bit-identical comparisons"))
}

/// Mean training-set Jaccard after overfitting four patients.
pub fn overfit() -> Outcome {
    let synth = SynthConfig {
        patients: 4,
        ..SynthConfig::default()
    };
    let (_dir, ds) = synth_dataset(&synth);
    let cfg = TrainConfig {
        dim: 32,
        epochs: 300,
        ..TrainConfig::default()
    };
    let model = ds.model(cfg.model_config()).unwrap();
    let mut state = TrainState::new(&model, &cfg).unwrap();
    let data = TrainData {
        train: &ds.patients,
        val: &[],
        ddi: None,
    };
    train(&model, &cfg, data, &mut state, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let e = evaluate(&model, &state.params, &ds.patients, cfg.eta, None).unwrap();
    ensure(e.jaccard >= 0.95, || format!("train Jaccard {:.4}", e.jaccard))?;
    Ok(format!("train Jaccard {:.4} on {} visits", e.jaccard, e.visits))
}

/// Test Jaccard of one run on the default synthetic set.
pub fn ablation_run(ds: &dkinet_core::dataset::Dataset, seed: u64, no_kg: bool) -> f64 {
    let cfg = TrainConfig {
        dim: 64,
        epochs: 30,
        seed,
        no_kg,
        ..TrainConfig::default()
    };
    let split = ds.split(seed).unwrap();
    let model = ds.model(cfg.model_config()).unwrap();
    let mut state = TrainState::new(&model, &cfg).unwrap();
    let data = TrainData {
        train: &split.train,
        val: &split.val,
        ddi: ds.ddi.as_ref(),
    };
    train(&model, &cfg, data, &mut state, |_, _| Ok(())).unwrap();
    evaluate(&model, state.best_params(), &split.test, cfg.eta, None).unwrap().jaccard
}

pub fn ablation() -> Outcome {
    let (_dir, ds) = synth_dataset(&SynthConfig::default());
    let full: Vec<f64> = (0..5).map(|s| ablation_run(&ds, s, false)).collect();
    let ablated: Vec<f64> = (0..5).map(|s| ablation_run(&ds, s, true)).collect();
    let (a, b) = (median(full.clone()), median(ablated.clone()));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    let detail = format!("median {a:.4} vs {b:.4} (full {} | no-kg {})", fmt(&full), fmt(&ablated));
    ensure(a > b, || detail.clone())?;
    Ok(detail)
}

/// Trains, checkpoints and evaluates into `out`.
pub fn full_run(out: &Path) {
    let synth = SynthConfig {
        patients: 30,
        ..SynthConfig::default()
    };
    let (_dir, ds) = synth_dataset(&synth);
    let cfg = TrainConfig {
        dim: 16,
        epochs: 3,
        seed: 5,
        ..TrainConfig::default()
    };
    let split = ds.split(cfg.seed).unwrap();
    let model = ds.model(cfg.model_config()).unwrap();
    let mut state = TrainState::new(&model, &cfg).unwrap();
    let data = TrainData {
        train: &split.train,
        val: &split.val,
        ddi: ds.ddi.as_ref(),
    };
    train(&model, &cfg, data, &mut state, |_, _| Ok(())).unwrap();
    Checkpoint::from_state(&model, &cfg, &state).unwrap().save(&out.join("final")).unwrap();
    Checkpoint::best_only(&model, &cfg, &state).save(&out.join("best")).unwrap();
    let report = bootstrap_evaluate(
        &model,
        state.best_params(),
        &split.test,
        cfg.eta,
        ds.ddi.as_ref(),
        BootstrapConfig::default(),
    )
    .unwrap();
    std::fs::write(out.join("report.json"), report.to_json()).unwrap();
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

pub fn determinism() -> Outcome {
    let a = tempfile::TempDir::new().unwrap();
    let b = tempfile::TempDir::new().unwrap();
    full_run(a.path());
    full_run(b.path());
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    let names: BTreeSet<&String> = ta.keys().chain(tb.keys()).collect();
    for name in &names {
        ensure(ta.get(*name) == tb.get(*name), || format!("{name} differs between runs"))?;
    }
    let expected = [
        "best/meta.json",
        "best/params.bin",
        "final/best.bin",
        "final/meta.json",
        "final/optim.bin",
        "final/params.bin",
        "report.json",
    ];
    let got: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    ensure(got == expected, || format!("unexpected files {got:?}"))?;
    Ok(format!("{} files byte-identical", names.len()))
}

pub fn bootstrap_protocol() -> Outcome {
    let synth = SynthConfig {
        patients: 30,
        ..SynthConfig::default()
    };
    let (_dir, ds) = synth_dataset(&synth);
    let cfg = TrainConfig {
        dim: 16,
        epochs: 2,
        ..TrainConfig::default()
    };
    let split = ds.split(cfg.seed).unwrap();
    let model = ds.model(cfg.model_config()).unwrap();
    let mut state = TrainState::new(&model, &cfg).unwrap();
    let data = TrainData {
        train: &split.train,
        val: &[],
        ddi: None,
    };
    train(&model, &cfg, data, &mut state, |_, _| Ok(())).unwrap();
    let ddi = ds.ddi.as_ref();
    let report = bootstrap_evaluate(&model, &state.params, &split.test, cfg.eta, ddi, BootstrapConfig::default()).unwrap();
    let ddi_summary = report.ddi.as_ref().ok_or("report has no DDI summary")?;
    for (name, s) in [("jaccard", &report.jaccard), ("f1", &report.f1), ("prauc", &report.prauc), ("ddi", ddi_summary)] {
        ensure(s.rounds.len() == 10, || format!("{name}: {} rounds", s.rounds.len()))?;
        ensure(s.mean.is_finite() && s.std.is_finite() && s.std >= 0.0, || format!("{name}: {s:?}"))?;
        let mean = s.rounds.iter().sum::<f64>() / 10.0;
        ensure((mean - s.mean).abs() <= 1e-12, || format!("{name}: mean {} vs rounds {mean}", s.mean))?;
    }
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).map_err(|e| e.to_string())?;
    for key in ["jaccard", "f1", "prauc", "ddi"] {
        ensure(json[key]["mean"].is_number() && json[key]["std"].is_number(), || format!("json lacks {key}"))?;
    }

    let single = BootstrapConfig {
        rounds: 1,
        resample: false,
        ..BootstrapConfig::default()
    };
    let one = bootstrap_evaluate(&model, &state.params, &split.test, cfg.eta, ddi, single).unwrap();
    let plain = evaluate(&model, &state.params, &split.test, cfg.eta, ddi).unwrap();
    let pairs = [
        ("jaccard", one.jaccard.mean, plain.jaccard),
        ("f1", one.f1.mean, plain.f1),
        ("prauc", one.prauc.mean, plain.prauc),
        ("ddi", one.ddi.as_ref().map_or(f64::NAN, |d| d.mean), plain.ddi.unwrap_or(f64::NAN)),
    ];
    for (name, got, want) in pairs {
        ensure(got.to_bits() == want.to_bits(), || format!("single round {name} {got} vs plain {want}"))?;
    }
    Ok(format!(
        "jaccard {:.4} ± {:.4} over 10 rounds; single identity round equals plain evaluation",
        report.jaccard.mean, report.jaccard.std
    ))
}
