use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use dkinet_core::dataset::Dataset;
use dkinet_core::decoder::threshold_select;
use dkinet_core::ehr::{load_ehr, load_ehr_with_vocab, CodeType, CodeVocab, PatientRecord};
use dkinet_core::eval::{bootstrap_evaluate, BootstrapConfig};
use dkinet_core::kg::{load_code_map, load_triples};
use dkinet_core::model::{Model, KG_FILTER_W};
use dkinet_core::synth::{generate, SynthConfig};
use dkinet_core::tape::Tape;
use dkinet_core::tensor::softmax;
use dkinet_core::train::{train as run_training, Checkpoint, TrainConfig, TrainData, TrainState};
use dkinet_core::{Error, Result};

use crate::config::{self, DataFiles, Effective, NoSettings};
use crate::{EvalArgs, InspectArgs, PredictArgs, SplitPart, SynthArgs, TrainArgs, TypeArg};

const CONFIG_ECHO: &str = "config.toml";
const EPOCH_LOG: &str = "epochs.log";
const FINAL_DIR: &str = "final";
const BEST_DIR: &str = "best";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let (keys, mut cfg) = config::read::<SynthConfig>(a.config.as_deref())?;
    set(&mut cfg.patients, a.patients);
    set(&mut cfg.diag, a.diag);
    set(&mut cfg.proc, a.proc);
    set(&mut cfg.med, a.med);
    set(&mut cfg.concepts, a.concepts);
    set(&mut cfg.relations, a.relations);
    set(&mut cfg.conditions, a.conditions);
    set(&mut cfg.avg_visits, a.avg_visits);
    set(&mut cfg.diag_per_visit, a.diag_per_visit);
    set(&mut cfg.proc_per_visit, a.proc_per_visit);
    set(&mut cfg.acute_rate, a.acute_rate);
    set(&mut cfg.noise, a.noise);
    set(&mut cfg.ddi_pairs, a.ddi_pairs);
    set(&mut cfg.seed, a.seed);
    let out = a
        .out
        .or(keys.out)
        .ok_or_else(|| Error::Config("no output directory; pass --out".into()))?;
    let data = generate(&cfg)?;
    let files = data.write(&out, a.force)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    println!();
    let rows = data.summary();
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in rows {
        println!("{k:<width$}  {v}");
    }
    Ok(())
}

fn train_config(a: &TrainArgs, mut cfg: TrainConfig) -> Result<TrainConfig> {
    set(&mut cfg.dim, a.dim);
    set(&mut cfg.num_filters, a.num_filters);
    set(&mut cfg.kg_layers, a.kg_layers);
    set(&mut cfg.eta, a.eta);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.alpha, a.alpha);
    set(&mut cfg.beta, a.beta);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.club_inner_steps, a.club_inner_steps);
    set(&mut cfg.bce_clamp, a.bce_clamp);
    if a.no_kg {
        cfg.no_kg = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(files: &DataFiles) -> Result<Dataset> {
    let ds = Dataset::load(files.ehr()?, &files.triples, &files.code_map, files.ddi.as_deref())?;
    let v = &ds.vocab;
    println!(
        "{} patients ({} single-visit dropped), {} diag / {} proc / {} med codes, {} concepts, {} relations",
        ds.patients.len(),
        ds.dropped_single_visit,
        v.num(CodeType::Diag),
        v.num(CodeType::Proc),
        v.num(CodeType::Med),
        ds.kg.num_concepts(),
        ds.kg.num_relations(),
    );
    if let Some(d) = &ds.ddi {
        println!("{} adverse pairs ({} skipped for unknown codes)", d.num_pairs(), ds.skipped_ddi_pairs);
    }
    Ok(ds)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (keys, file_cfg) = config::read::<TrainConfig>(a.config.as_deref())?;
    let cfg = train_config(&a, file_cfg)?;
    let out = a
        .out
        .clone()
        .or(keys.out.clone())
        .ok_or_else(|| Error::Config("no run directory; pass --out".into()))?;
    let files = DataFiles::resolve(&a.data, &keys)?;
    let ds = load_dataset(&files)?;
    let split = ds.split(cfg.seed)?;
    println!("split {} / {} / {}", split.train.len(), split.val.len(), split.test.len());
    let model = ds.model(cfg.model_config())?;

    let final_dir = out.join(FINAL_DIR);
    let best_dir = out.join(BEST_DIR);
    let mut state = if a.resume {
        let ck = Checkpoint::load(&final_dir)?;
        let mut saved = ck.meta.config.clone();
        saved.epochs = cfg.epochs;
        if saved != cfg {
            return Err(Error::Config(
                "settings differ from the checkpoint; only epochs may change on resume".into(),
            ));
        }
        let state = ck.into_state(&model)?;
        if state.epoch >= cfg.epochs {
            println!("already trained for {} epochs; nothing to do", state.epoch);
        } else {
            println!("resuming after epoch {}", state.epoch);
        }
        state
    } else {
        if final_dir.exists() && !a.force {
            return Err(Error::Config(format!(
                "{} already holds a checkpoint; pass --resume or --force",
                out.display()
            )));
        }
        TrainState::new(&model, &cfg)?
    };

    fs::create_dir_all(&out).map_err(io(&out))?;
    let echo = out.join(CONFIG_ECHO);
    let effective = Effective {
        paths: files.keys(&out),
        settings: &cfg,
    };
    fs::write(&echo, effective.to_toml()).map_err(io(&echo))?;
    // the log file always mirrors the logged epochs, also after a resume
    let log_path = out.join(EPOCH_LOG);
    let earlier: String = state.log.iter().map(|l| l.line() + "\n").collect();
    fs::write(&log_path, earlier).map_err(io(&log_path))?;

    let data = TrainData {
        train: &split.train,
        val: &split.val,
        ddi: ds.ddi.as_ref(),
    };
    run_training(&model, &cfg, data, &mut state, |log, st| {
        let line = log.line();
        println!("{line}");
        let mut f = OpenOptions::new().append(true).open(&log_path).map_err(io(&log_path))?;
        writeln!(f, "{line}").map_err(io(&log_path))?;
        Checkpoint::from_state(&model, &cfg, st)?.save(&final_dir)?;
        Checkpoint::best_only(&model, &cfg, st).save(&best_dir)
    })?;
    match &state.best {
        Some(b) => println!("best epoch {} (val jaccard {:.4})", b.epoch, b.val_jaccard),
        None => println!("no validation patients; the last epoch is kept"),
    }
    println!("checkpoints in {} and {}", best_dir.display(), final_dir.display());
    Ok(())
}

/// Loads a checkpoint and the model it was trained for.
fn checkpoint_model(dir: &Path, vocab: CodeVocab, files: &DataFiles) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(dir)?;
    let kg = load_triples(&files.triples)?;
    let map = load_code_map(&files.code_map, &vocab, &kg)?;
    let model = Model::new(ck.meta.config.model_config(), vocab, &kg, &map)?;
    ck.check_model(&model)?;
    Ok((ck, model))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (keys, NoSettings {}) = config::read(a.config.as_deref())?;
    let files = DataFiles::resolve(&a.data, &keys)?;
    let ds = load_dataset(&files)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = ck.meta.config.clone();
    let model = ds.model(cfg.model_config())?;
    ck.check_model(&model)?;
    let split = ds.split(cfg.seed)?;
    let patients: &[PatientRecord] = match a.split {
        SplitPart::Train => &split.train,
        SplitPart::Val => &split.val,
        SplitPart::Test => &split.test,
        SplitPart::All => &ds.patients,
    };
    let boot = BootstrapConfig {
        rounds: a.rounds,
        seed: a.seed.unwrap_or(cfg.seed),
        resample: !a.no_resample,
    };
    let report = bootstrap_evaluate(&model, &ck.params, patients, cfg.eta, ds.ddi.as_ref(), boot)?;
    print!("{}", report.table());
    let path = a.report.unwrap_or_else(|| {
        let parent = a.checkpoint.parent().filter(|p| !p.as_os_str().is_empty());
        parent.unwrap_or(Path::new(".")).join("report.json")
    });
    fs::write(&path, report.to_json()).map_err(io(&path))?;
    println!("report written to {}", path.display());
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let (keys, NoSettings {}) = config::read(a.config.as_deref())?;
    let files = DataFiles::resolve(&a.data, &keys)?;
    let vocab = Checkpoint::load(&a.checkpoint)?.meta.vocab;
    let (ck, model) = checkpoint_model(&a.checkpoint, vocab, &files)?;
    let ehr = files.ehr()?;
    let patients = load_ehr_with_vocab(ehr, &model.vocab)?;
    let patient = match &a.patient {
        Some(id) => patients
            .iter()
            .find(|p| &p.id == id)
            .ok_or_else(|| Error::Data(format!("no patient `{id}` in {}", ehr.display())))?,
        None => patients
            .first()
            .ok_or_else(|| Error::Data(format!("{} has no patients", ehr.display())))?,
    };
    let n = patient.visits.len();
    if a.visit == 0 || a.visit > n {
        return Err(Error::Config(format!(
            "visit {} out of range; patient {} has {n} visits",
            a.visit, patient.id
        )));
    }
    let upto = PatientRecord {
        id: patient.id.clone(),
        visits: patient.visits[..a.visit].to_vec(),
    };
    let scores = model.predict(&ck.params, std::slice::from_ref(&upto))?.remove(0).remove(a.visit - 1);
    let eta = ck.meta.config.eta;
    let selected = threshold_select(&scores, eta);
    let name = |id: usize| model.vocab.code(CodeType::Med, id).unwrap_or("?").to_string();

    println!("patient {} visit {} of {n}", patient.id, a.visit);
    if a.visit == 1 {
        println!("no earlier visits; medication history is padding");
    }
    let mut ranked: Vec<usize> = (0..scores.len()).collect();
    ranked.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
    println!("{:<12} {:>8}", "medication", "score");
    for &m in ranked.iter().take(a.top) {
        let mark = if scores[m] >= eta { "  *" } else { "" };
        println!("{:<12} {:>8.4}{mark}", name(m), scores[m]);
    }
    // listed by descending score
    let list = |ids: &[usize]| {
        if ids.is_empty() {
            return "-".to_string();
        }
        ranked
            .iter()
            .filter(|m| ids.contains(m))
            .map(|&m| name(m))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("selected (score >= {eta}): {}", list(&selected));
    let truth = &upto.visits[a.visit - 1].med;
    if !truth.is_empty() {
        let hit: Vec<usize> = selected.iter().copied().filter(|m| truth.contains(m)).collect();
        let missed: Vec<usize> = truth.iter().copied().filter(|m| !selected.contains(m)).collect();
        let unseen: Vec<usize> = selected.iter().copied().filter(|m| !truth.contains(m)).collect();
        println!("hit:    {}", list(&hit));
        println!("missed: {}", list(&missed));
        println!("unseen: {}", list(&unseen));
    }
    Ok(())
}

fn find_code(vocab: &CodeVocab, code: &str, ty: Option<TypeArg>) -> Result<(CodeType, usize)> {
    let types: Vec<CodeType> = match ty {
        Some(TypeArg::Diag) => vec![CodeType::Diag],
        Some(TypeArg::Proc) => vec![CodeType::Proc],
        Some(TypeArg::Med) => vec![CodeType::Med],
        None => CodeType::ALL.to_vec(),
    };
    let found: Vec<(CodeType, usize)> = types
        .into_iter()
        .filter_map(|t| vocab.id(t, code).map(|i| (t, i)))
        .collect();
    match found.as_slice() {
        [] => Err(Error::Data(format!("unknown code `{code}`"))),
        [one] => Ok(*one),
        _ => Err(Error::Config(format!("code `{code}` exists under several types; pass --type"))),
    }
}

pub fn inspect_kg(a: InspectArgs) -> Result<()> {
    let (keys, NoSettings {}) = config::read(a.config.as_deref())?;
    let ck_dir: Option<PathBuf> = a.checkpoint.clone();
    let files = DataFiles::resolve(&a.data, &keys)?;
    // a checkpoint carries the vocabulary, so the EHR file is then optional
    let vocab = match &ck_dir {
        Some(d) => Checkpoint::load(d)?.meta.vocab,
        None => load_ehr(files.ehr()?)?.vocab,
    };
    let (ty, id) = find_code(&vocab, &a.code, a.code_type)?;
    let kg = load_triples(&files.triples)?;
    let map = load_code_map(&files.code_map, &vocab, &kg)?;
    let global = vocab.global_id(ty, id);
    let concepts: Vec<usize> = map.concepts_of(global).collect();

    println!("code {} ({})", a.code, ty.as_str());
    if concepts.is_empty() {
        println!("no concepts mapped; the code keeps its own embedding");
    } else {
        println!("mapped concepts:");
        for &u in &concepts {
            let out_degree = kg.triples().iter().filter(|t| t.head == u).count();
            println!("  {}  out-degree {out_degree}", kg.concept(u).unwrap_or("?"));
        }
    }
    let num_filters = match &ck_dir {
        Some(d) => Checkpoint::load(d)?.meta.config.num_filters,
        None => a.num_filters,
    };
    println!(
        "filter neighbourhood: {} concepts x {num_filters} filters = {} links",
        concepts.len(),
        concepts.len() * num_filters
    );

    let Some(dir) = ck_dir else {
        return Ok(());
    };
    let (ck, model) = checkpoint_model(&dir, vocab, &files)?;
    if model.config.no_kg {
        println!("checkpoint was trained without the concept graph");
        return Ok(());
    }
    let mut tape = Tape::new();
    let ctx = model.knowledge(&mut tape, &ck.params)?;
    let graph = ctx.graph.expect("graph branch is on");
    let w = ck
        .params
        .get(KG_FILTER_W)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{KG_FILTER_W}`")))?;
    let mix = softmax(w, 1)?;
    for (layer, att) in graph.attention.iter().enumerate() {
        let row = tape.value(*att).row_slice(global).to_vec();
        if graph.attention.len() > 1 {
            println!("layer {}", layer + 1);
        }
        for (f, weight) in row.iter().enumerate() {
            let rel = mix.row_slice(f);
            let mut order: Vec<usize> = (0..rel.len()).collect();
            order.sort_by(|&x, &y| rel[y].total_cmp(&rel[x]).then(x.cmp(&y)));
            let top: Vec<String> = order
                .iter()
                .take(a.top_k)
                .map(|&r| format!("{} {:.3}", kg.relation(r).unwrap_or("?"), rel[r]))
                .collect();
            println!("  filter {}  attention {weight:.4}  relations: {}", f + 1, top.join(", "));
        }
    }
    Ok(())
}
