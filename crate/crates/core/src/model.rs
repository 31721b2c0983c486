//! The assembled recommender: parameter layout and per-patient forward pass.

use serde::{Deserialize, Serialize};

use crate::aggregate::{build_knowledge_tables, KgParams, KnowledgeTables};
use crate::decoder::{history_attention_weights, predict_scores, AttentionParams};
use crate::ehr::{history_med_input, CodeType, CodeVocab, PatientRecord};
use crate::encoder::{encode_visits, fuse, TypeKnowledge, CLUB_B, CLUB_W};
use crate::error::{Error, Result};
use crate::kg::{build_filter_graph, CodeConceptMap, KnowledgeGraph, NeighborIndex};
use crate::params::{derive_seed, seeded_init, InitScheme, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const KG_CONCEPT: &str = "kg.concept";
pub const KG_RELATION: &str = "kg.relation";
pub const KG_CODE: &str = "kg.code";
pub const KG_FILTER_W: &str = "kg.filter_w";
pub const ENC_W_V: &str = "enc.w_v";
pub const ENC_B_V: &str = "enc.b_v";
pub const DEC_W_Q: &str = "dec.w_q";
pub const DEC_W_K: &str = "dec.w_k";
pub const DEC_W_VAL: &str = "dec.w_val";
pub const OUT_W_Y: &str = "out.w_y";
pub const OUT_B_Y: &str = "out.b_y";

pub fn ehr_table_name(ty: CodeType) -> String {
    format!("ehr.{ty}")
}

pub fn injection_name(ty: CodeType) -> String {
    format!("enc.w_inj.{ty}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_filters: usize,
    pub kg_layers: usize,
    /// Replace the knowledge tables by zeros (graph ablation).
    pub no_kg: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 256,
            num_filters: 4,
            kg_layers: 1,
            no_kg: false,
        }
    }
}

/// Immutable model structure; trainable values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: CodeVocab,
    pub num_concepts: usize,
    pub num_relations: usize,
    pub index: NeighborIndex,
}

/// Activations of one visit.
#[derive(Clone, Debug)]
pub struct VisitOutput {
    pub v_o: Var,
    pub v_k: Var,
    pub v: Var,
    pub v_hat: Var,
    /// `1 × |M|` medication probabilities.
    pub scores: Var,
    /// Knowledge-injected medication part of `v_k` (history key material).
    pub med_component: Var,
    pub history_weights: Option<Var>,
}

/// Per-batch knowledge tables, one per active code type.
#[derive(Clone, Debug)]
pub struct KnowledgeContext {
    pub types: Vec<CodeType>,
    pub tables: Vec<TypeKnowledge>,
    /// `None` in the graph ablation.
    pub graph: Option<KnowledgeTables>,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        vocab: CodeVocab,
        kg: &KnowledgeGraph,
        map: &CodeConceptMap,
    ) -> Result<Self> {
        if config.dim == 0 || config.num_filters == 0 || config.kg_layers == 0 {
            return Err(Error::Config(
                "dim, num_filters and kg_layers must be positive".into(),
            ));
        }
        if vocab.num(CodeType::Diag) == 0 || vocab.num(CodeType::Med) == 0 {
            return Err(Error::Data(
                "vocabulary needs at least one diagnosis and one medication".into(),
            ));
        }
        if kg.num_concepts() == 0 || kg.num_relations() == 0 {
            return Err(Error::Data("knowledge graph has no triples".into()));
        }
        let (_, index) = build_filter_graph(kg, map, config.num_filters, vocab.total_codes())?;
        Ok(Model {
            config,
            num_concepts: kg.num_concepts(),
            num_relations: kg.num_relations(),
            vocab,
            index,
        })
    }

    /// Code types feeding the encoder, in concatenation order.
    pub fn types(&self) -> Vec<CodeType> {
        CodeType::ALL
            .into_iter()
            .filter(|&t| t != CodeType::Proc || self.vocab.has_procedures())
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Width of `v_o`, `v_k` and `v`.
    pub fn visit_width(&self) -> usize {
        self.types().len() * self.config.dim
    }

    pub fn num_meds(&self) -> usize {
        self.vocab.num(CodeType::Med)
    }

    /// Every parameter with its shape and initialiser.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, InitScheme)> {
        let d = self.config.dim;
        let dv = self.visit_width();
        let m = self.num_meds();
        // Graph aggregation multiplies relation and concept embeddings
        // entrywise, so these start at unit scale to keep products visible.
        let unit = InitScheme::Uniform(Some(1.0));
        let fan_in = |rows: usize| InitScheme::Uniform(Some(1.0 / (rows as f64).sqrt()));
        let mut out = vec![
            (KG_CONCEPT.into(), vec![self.num_concepts, d], unit),
            (KG_RELATION.into(), vec![self.num_relations, d], unit),
            (KG_CODE.into(), vec![self.vocab.total_codes(), d], InitScheme::default()),
            (
                KG_FILTER_W.into(),
                vec![self.config.num_filters, self.num_relations],
                InitScheme::default(),
            ),
        ];
        for ty in self.types() {
            out.push((ehr_table_name(ty), vec![self.vocab.table_rows(ty), d], InitScheme::default()));
            out.push((injection_name(ty), vec![2 * d, d], fan_in(2 * d)));
        }
        out.extend([
            (ENC_W_V.into(), vec![2 * dv, dv], fan_in(2 * dv)),
            (ENC_B_V.into(), vec![1, dv], InitScheme::Zeros),
            (CLUB_W.into(), vec![dv, dv], fan_in(dv)),
            (CLUB_B.into(), vec![1, dv], InitScheme::Zeros),
            (DEC_W_Q.into(), vec![dv, d], fan_in(dv)),
            (DEC_W_K.into(), vec![d, d], fan_in(d)),
            (DEC_W_VAL.into(), vec![d, dv], fan_in(d)),
            (OUT_W_Y.into(), vec![dv, m], fan_in(dv)),
            (OUT_B_Y.into(), vec![1, m], InitScheme::Zeros),
        ]);
        out
    }

    /// Fresh parameters; each tensor's seed is derived from `seed` and its name.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, shape, scheme) in self.param_layout() {
            let t = seeded_init(&shape, derive_seed(seed, &name), scheme)?;
            store.insert(&name, t)?;
        }
        Ok(store)
    }

    /// Verifies `store` has exactly this model's parameters and shapes.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let layout = self.param_layout();
        if layout.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.len(),
                store.len()
            )));
        }
        for (name, shape, _) in layout {
            match store.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, data requires {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        Ok(())
    }

    /// Recomputes the knowledge tables for the current parameters.
    pub fn knowledge(&self, tape: &mut Tape, store: &ParamStore) -> Result<KnowledgeContext> {
        let types = self.types();
        let d = self.config.dim;
        let mut tables = Vec::with_capacity(types.len());
        let graph = if self.config.no_kg {
            for &ty in &types {
                let zero = tape.constant(Tensor::zeros(&[self.vocab.table_rows(ty), d]));
                tables.push(TypeKnowledge::new(tape, zero)?);
            }
            None
        } else {
            let params = KgParams {
                concepts: tape.param(store, KG_CONCEPT)?,
                relations: tape.param(store, KG_RELATION)?,
                codes: tape.param(store, KG_CODE)?,
                filter_w: tape.param(store, KG_FILTER_W)?,
            };
            let kt = build_knowledge_tables(tape, params, &self.index, self.config.kg_layers)?;
            for &ty in &types {
                let rows = self.vocab.table_rows(ty);
                let part = tape.slice(kt.codes, 0, self.vocab.offset(ty), rows)?;
                tables.push(TypeKnowledge::new(tape, part)?);
            }
            Some(kt)
        };
        Ok(KnowledgeContext {
            types,
            tables,
            graph,
        })
    }

    /// Runs every visit of `patient`. Visit `t` sees only its own diagnoses
    /// and procedures plus medications of visits before `t`.
    pub fn forward_patient(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &KnowledgeContext,
        patient: &PatientRecord,
    ) -> Result<Vec<VisitOutput>> {
        let d = self.config.dim;
        let ehr_tables = ctx
            .types
            .iter()
            .map(|&ty| tape.param(store, &ehr_table_name(ty)))
            .collect::<Result<Vec<_>>>()?;
        let w_inj = ctx
            .types
            .iter()
            .map(|&ty| tape.param(store, &injection_name(ty)))
            .collect::<Result<Vec<_>>>()?;
        let w_v = tape.param(store, ENC_W_V)?;
        let b_v = tape.param(store, ENC_B_V)?;
        let att = AttentionParams {
            w_q: tape.param(store, DEC_W_Q)?,
            w_k: tape.param(store, DEC_W_K)?,
            w_val: tape.param(store, DEC_W_VAL)?,
        };
        let w_y = tape.param(store, OUT_W_Y)?;
        let b_y = tape.param(store, OUT_B_Y)?;
        let pad = self.vocab.pad_id();

        let n = patient.visits.len();
        let med_inputs = (1..=n)
            .map(|t| history_med_input(patient, t, pad))
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<Vec<&[usize]>> = patient
            .visits
            .iter()
            .zip(&med_inputs)
            .map(|(visit, med_in)| {
                ctx.types
                    .iter()
                    .map(|&ty| match ty {
                        CodeType::Med => med_in.as_slice(),
                        other => visit.codes(other),
                    })
                    .collect()
            })
            .collect();
        let enc = encode_visits(tape, &ehr_tables, &ctx.tables, &w_inj, &ids, d)?;
        let v_all = fuse(tape, enc.v_k, enc.v_o, w_v, b_v)?;
        let med_all = *enc.parts.last().expect("medications are always encoded");

        let mut rows = Vec::with_capacity(n);
        let mut v_hats = Vec::with_capacity(n);
        let mut med_keys: Vec<Var> = Vec::new();
        for t in 0..n {
            let v = tape.slice(v_all, 0, t, 1)?;
            let med_component = tape.slice(med_all, 0, t, 1)?;
            if t >= 1 {
                // encoded from the previous visit's medications: the newest history entry
                med_keys.push(med_component);
            }
            let (v_hat, history_weights) = history_attention_weights(tape, v, &med_keys, att)?;
            v_hats.push(v_hat);
            rows.push((v, med_component, history_weights));
        }
        let v_hat_all = tape.concat(&v_hats, 0)?;
        let scores_all = predict_scores(tape, v_hat_all, w_y, b_y)?;

        let mut outputs = Vec::with_capacity(n);
        for (t, (v, med_component, history_weights)) in rows.into_iter().enumerate() {
            outputs.push(VisitOutput {
                v_o: tape.slice(enc.v_o, 0, t, 1)?,
                v_k: tape.slice(enc.v_k, 0, t, 1)?,
                v,
                v_hat: v_hats[t],
                scores: tape.slice(scores_all, 0, t, 1)?,
                med_component,
                history_weights,
            });
        }
        Ok(outputs)
    }

    /// Medication probabilities for every visit of each patient.
    pub fn predict(&self, store: &ParamStore, patients: &[PatientRecord]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut tape = Tape::new();
        let ctx = self.knowledge(&mut tape, store)?;
        patients
            .iter()
            .map(|p| {
                let outs = self.forward_patient(&mut tape, store, &ctx, p)?;
                let scores = outs
                    .iter()
                    .map(|o| tape.value(o.scores).data().to_vec())
                    .collect();
                Ok(scores)
            })
            .collect()
    }
}
