//! Evaluation harness: retrieval in both directions, answer accuracy,
//! phrase grounding, the combination table, and attention dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{World, ANSWERS};
use crate::decoders::{icr_head, vg_head, vqa_head};
use crate::encoder::{encode, encode_from, encode_regions, encode_sentence, LayerState};
use crate::error::{Error, Result};
use crate::metrics::{grounding_queries, rank_by_score, recall_at_k, vqa_accuracy, RankedList};
use crate::model::{Forward, Model};
use crate::task::TaskKind;
use crate::tensor::{sigmoid, Tape, Tensor};

/// Cut-offs reported for every recall metric.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Recall at each of [`RECALL_KS`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recalls {
    fn of(queries: &[RankedList]) -> Result<Self> {
        Ok(Self {
            r1: recall_at_k(queries, RECALL_KS[0])?,
            r5: recall_at_k(queries, RECALL_KS[1])?,
            r10: recall_at_k(queries, RECALL_KS[2])?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcrMetrics {
    /// Captions ranked for each image.
    pub annotation: Recalls,
    /// Images ranked for each caption.
    pub retrieval: Recalls,
}

/// Metrics for whichever tasks were evaluated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub icr: Option<IcrMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vqa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vg: Option<Recalls>,
}

fn initial_state(model: &Model, sentence: &[usize], world: &World) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let mut fwd = Forward::eval(&mut tape, &model.params);
    let input = crate::encoder::SentenceInput {
        token_ids: sentence.to_vec(),
    };
    let s = encode_sentence(&mut fwd, &model.encoder, &input)?;
    let i = encode_regions(&mut fwd, &model.encoder, &world.image_input())?;
    Ok((tape.value(s).clone(), tape.value(i).clone()))
}

/// Retrieval logits for every (image, caption) pair, `images x captions`.
pub fn icr_score_matrix(model: &Model, tap: usize, worlds: &[&World]) -> Result<Tensor> {
    let n = worlds.len();
    let initial: Vec<(Tensor, Tensor)> = worlds
        .par_iter()
        .map(|w| initial_state(model, &w.caption, w))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|img| {
            (0..n)
                .map(|cap| {
                    let mut tape = Tape::new();
                    let s = tape.constant(initial[cap].0.clone());
                    let i = tape.constant(initial[img].1.clone());
                    let mut fwd = Forward::eval(&mut tape, &model.params);
                    let states = encode_from(&mut fwd, &model.encoder, LayerState { s, i, depth: 0 }, tap)?;
                    let out = icr_head(&mut fwd, states.tap(tap)?, &model.icr)?;
                    tape.value(out.logit).item()
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

/// Ranks captions per image and images per caption. Any candidate whose
/// caption tokens equal the query's own caption counts as correct.
pub fn icr_metrics_from_scores(scores: &Tensor, worlds: &[&World]) -> Result<IcrMetrics> {
    let n = worlds.len();
    let (r, c) = scores.dims2("icr_metrics")?;
    if (r, c) != (n, n) || n == 0 {
        return Err(Error::Shape {
            op: "icr_metrics",
            lhs: vec![r, c],
            rhs: vec![n, n],
        });
    }
    let same = |a: usize, b: usize| worlds[a].caption == worlds[b].caption;
    let annotation = (0..n)
        .map(|img| {
            let row = &scores.data()[img * n..(img + 1) * n];
            RankedList::from_scores(row, (0..n).filter(|&cap| same(img, cap)))
        })
        .collect::<Result<Vec<_>>>()?;
    let retrieval = (0..n)
        .map(|cap| {
            let col: Vec<f64> = (0..n).map(|img| scores.data()[img * n + cap]).collect();
            RankedList::from_scores(&col, (0..n).filter(|&img| same(img, cap)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IcrMetrics {
        annotation: Recalls::of(&annotation)?,
        retrieval: Recalls::of(&retrieval)?,
    })
}

pub fn evaluate_icr(model: &Model, tap: usize, worlds: &[&World]) -> Result<IcrMetrics> {
    icr_metrics_from_scores(&icr_score_matrix(model, tap, worlds)?, worlds)
}

fn vqa_logits(model: &Model, tap: usize, world: &World) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut fwd = Forward::eval(&mut tape, &model.params);
    let states = encode(&mut fwd, &model.encoder, &world.question_input(), &world.image_input(), tap)?;
    let out = vqa_head(&mut fwd, states.tap(tap)?, &model.vqa)?;
    Ok(tape.value(out.logits).data().to_vec())
}

/// Highest-scoring answer, lowest index on ties.
pub fn predict_answer(logits: &[f64]) -> usize {
    rank_by_score(logits)[0]
}

/// Mean answer accuracy against each world's annotations.
pub fn evaluate_vqa(model: &Model, tap: usize, worlds: &[&World]) -> Result<f64> {
    if worlds.is_empty() {
        return Err(Error::InvalidInput("no worlds to evaluate".into()));
    }
    let scores = worlds
        .par_iter()
        .map(|w| Ok(vqa_accuracy(predict_answer(&vqa_logits(model, tap, w)?), &w.annotations)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn vg_scores(model: &Model, tap: usize, world: &World) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut fwd = Forward::eval(&mut tape, &model.params);
    let states = encode(&mut fwd, &model.encoder, &world.caption_input(), &world.image_input(), tap)?;
    let scores = vg_head(&mut fwd, states.tap(tap)?, &world.spans(), &model.vg)?;
    Ok(tape.value(scores).clone())
}

/// Phrase-as-query recall over all phrases of all worlds.
pub fn evaluate_vg(model: &Model, tap: usize, worlds: &[&World]) -> Result<Recalls> {
    let per_world = worlds
        .par_iter()
        .map(|w| {
            let scores = vg_scores(model, tap, w)?;
            let regions: Vec<_> = w.regions.iter().map(|r| r.bbox).collect();
            let gold: Vec<_> = w.phrases.iter().map(|p| w.objects[p.object].bbox).collect();
            grounding_queries(&scores, &regions, &gold)
        })
        .collect::<Result<Vec<_>>>()?;
    let queries: Vec<RankedList> = per_world.into_iter().flatten().collect();
    Recalls::of(&queries)
}

/// Evaluates each `(task, tap)` pair on `worlds`.
pub fn evaluate(model: &Model, taps: &[(TaskKind, usize)], worlds: &[&World]) -> Result<TaskMetrics> {
    let mut m = TaskMetrics::default();
    for &(task, tap) in taps {
        match task {
            TaskKind::Icr => m.icr = Some(evaluate_icr(model, tap, worlds)?),
            TaskKind::Vqa => m.vqa = Some(evaluate_vqa(model, tap, worlds)?),
            TaskKind::Vg => m.vg = Some(evaluate_vg(model, tap, worlds)?),
        }
    }
    Ok(m)
}

/// Rows of task combinations against per-task headline metrics: answer
/// accuracy, retrieval R@1 in both directions (annotation above, retrieval
/// below) and grounding R@1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CombinationTable {
    pub rows: Vec<(String, TaskMetrics)>,
}

impl CombinationTable {
    pub fn push(&mut self, tasks: &[TaskKind], metrics: TaskMetrics) {
        let label = tasks.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" + ");
        self.rows.push((label, metrics));
    }

    pub fn render(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let width = self.rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$} | {:>9} | {:>9} | {:>8}", "Task", "VQA (Acc)", "ICR (R@1)", "VG (R@1)");
        let _ = writeln!(out, "{}", "-".repeat(width + 37));
        for (label, m) in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$} | {:>9} | {:>9} | {:>8}",
                label,
                pct(m.vqa),
                pct(m.icr.map(|i| i.annotation.r1)),
                pct(m.vg.map(|v| v.r1))
            );
            if let Some(icr) = m.icr {
                let _ = writeln!(out, "{:<width$} | {:>9} | {:>9} | {:>8}", "", "", pct(Some(icr.retrieval.r1)), "");
            }
        }
        out
    }
}

/// Attention weights over one sentence and one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionPair {
    /// `(word, weight)` in sentence order.
    pub words: Vec<(String, f64)>,
    /// Weight per region, in region order.
    pub regions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseGrounding {
    pub phrase: String,
    /// 1-based index of the highest-scoring region.
    pub top_region: usize,
    pub correct: bool,
}

/// What the decoders attend to for one world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub world_id: u64,
    pub icr: AttentionPair,
    /// Matching probability of the world's own image and caption.
    pub icr_score: f64,
    pub vqa: AttentionPair,
    pub vqa_prediction: String,
    pub vqa_answer: String,
    pub grounding: Vec<PhraseGrounding>,
}

fn attention_pair(tape: &Tape, tokens: &[usize], words: crate::tensor::Var, regions: crate::tensor::Var) -> AttentionPair {
    let vocab = crate::data::Vocab::standard();
    AttentionPair {
        words: tokens
            .iter()
            .zip(tape.value(words).data())
            .map(|(&t, &w)| (vocab.token(t).to_string(), w))
            .collect(),
        regions: tape.value(regions).data().to_vec(),
    }
}

/// Attention maps and predictions of all three decoders for `world`.
pub fn dump_attention(model: &Model, taps: &BTreeMap<TaskKind, usize>, world: &World) -> Result<AttentionDump> {
    let tap = |t: TaskKind| {
        taps.get(&t)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("no tap configured for {t}")))
    };
    let vocab = crate::data::Vocab::standard();
    let image = world.image_input();

    let mut tape = Tape::new();
    let mut fwd = Forward::eval(&mut tape, &model.params);
    let (l_r, l_q, l_g) = (tap(TaskKind::Icr)?, tap(TaskKind::Vqa)?, tap(TaskKind::Vg)?);
    let cap = encode(&mut fwd, &model.encoder, &world.caption_input(), &image, l_r.max(l_g))?;
    let icr = icr_head(&mut fwd, cap.tap(l_r)?, &model.icr)?;
    let vg = vg_head(&mut fwd, cap.tap(l_g)?, &world.spans(), &model.vg)?;
    let q = encode(&mut fwd, &model.encoder, &world.question_input(), &image, l_q)?;
    let vqa = vqa_head(&mut fwd, q.tap(l_q)?, &model.vqa)?;

    let vg_scores = tape.value(vg).clone();
    let t = world.regions.len();
    let grounding = world
        .phrases
        .iter()
        .enumerate()
        .map(|(h, p)| {
            let top = rank_by_score(&vg_scores.data()[h * t..(h + 1) * t])[0];
            PhraseGrounding {
                phrase: vocab.decode(&world.caption[p.span.begin - 1..p.span.end]).join(" "),
                top_region: top + 1,
                correct: p.gold_regions.contains(&top),
            }
        })
        .collect();
    let answer = world.answers.first().map_or(0, |a| a.answer);
    Ok(AttentionDump {
        world_id: world.world_id,
        icr: attention_pair(&tape, &world.caption, icr.sentence.attention, icr.image.attention),
        icr_score: sigmoid(tape.value(icr.logit).item()?),
        vqa: attention_pair(&tape, &world.question, vqa.sentence.attention, vqa.image.attention),
        vqa_prediction: ANSWERS[predict_answer(tape.value(vqa.logits).data())].to_string(),
        vqa_answer: ANSWERS[answer].to_string(),
        grounding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_worlds;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::new(
            ModelConfig {
                dim: 8,
                depth: 3,
                embed_dim: 6,
                attention_maps: 2,
                ..ModelConfig::default()
            },
            2,
        )
        .unwrap()
    }

    #[test]
    fn identity_scores_are_perfect() {
        let worlds = generate_worlds(5, 12);
        let refs: Vec<&World> = worlds.iter().collect();
        let mut eye = Tensor::eye(12);
        let m = icr_metrics_from_scores(&eye, &refs).unwrap();
        assert_eq!(m.annotation.r1, 1.0);
        assert_eq!(m.retrieval.r1, 1.0);

        // Negated: every other candidate ties at zero and wins on index, so
        // the top caption for image i is 0 (or 1 when i = 0).
        eye.data_mut().iter_mut().for_each(|v| *v = -*v);
        let m = icr_metrics_from_scores(&eye, &refs).unwrap();
        let hits = (0..12)
            .filter(|&i| {
                let top = if i == 0 { 1 } else { 0 };
                worlds[top].caption == worlds[i].caption
            })
            .count();
        assert_eq!(m.annotation.r1, hits as f64 / 12.0);
    }

    #[test]
    fn pair_scores_match_direct_forward() {
        let worlds = generate_worlds(6, 3);
        let refs: Vec<&World> = worlds.iter().collect();
        let model = model();
        let scores = icr_score_matrix(&model, 2, &refs).unwrap();
        let mut tape = Tape::new();
        let mut fwd = Forward::eval(&mut tape, &model.params);
        let states = encode(&mut fwd, &model.encoder, &worlds[2].caption_input(), &worlds[1].image_input(), 2).unwrap();
        let out = icr_head(&mut fwd, states.tap(2).unwrap(), &model.icr).unwrap();
        let direct = tape.value(out.logit).item().unwrap();
        assert!((scores.at(1, 2) - direct).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_probabilities() {
        let worlds = generate_worlds(7, 10);
        let refs: Vec<&World> = worlds.iter().collect();
        let model = model();
        let m = evaluate(&model, &[(TaskKind::Icr, 1), (TaskKind::Vqa, 3), (TaskKind::Vg, 2)], &refs).unwrap();
        let icr = m.icr.unwrap();
        for r in [icr.annotation, icr.retrieval, m.vg.unwrap()] {
            assert!(0.0 <= r.r1 && r.r1 <= r.r5 && r.r5 <= r.r10 && r.r10 <= 1.0);
        }
        assert!((0.0..=1.0).contains(&m.vqa.unwrap()));
    }

    #[test]
    fn dump_is_normalised_and_repeatable() {
        let worlds = generate_worlds(8, 2);
        let model = model();
        let taps: BTreeMap<TaskKind, usize> = [(TaskKind::Icr, 3), (TaskKind::Vqa, 3), (TaskKind::Vg, 2)].into();
        let a = dump_attention(&model, &taps, &worlds[1]).unwrap();
        for pair in [&a.icr, &a.vqa] {
            let w: f64 = pair.words.iter().map(|x| x.1).sum();
            let r: f64 = pair.regions.iter().sum();
            assert!((w - 1.0).abs() < 1e-6 && (r - 1.0).abs() < 1e-6);
        }
        for g in &a.grounding {
            assert!((1..=worlds[1].regions.len()).contains(&g.top_region));
        }
        assert_eq!(a, dump_attention(&model, &taps, &worlds[1]).unwrap());
    }

    #[test]
    fn table_lists_both_retrieval_directions() {
        let mut t = CombinationTable::default();
        let r = Recalls {
            r1: 0.5,
            r5: 0.75,
            r10: 1.0,
        };
        t.push(
            &[TaskKind::Vqa, TaskKind::Icr],
            TaskMetrics {
                icr: Some(IcrMetrics {
                    annotation: r,
                    retrieval: Recalls { r1: 0.25, ..r },
                }),
                vqa: Some(0.6535),
                vg: None,
            },
        );
        let text = t.render();
        assert!(text.contains("VQA + ICR"));
        assert!(text.contains("65.35") && text.contains("50.00") && text.contains("25.00"));
        assert_eq!(text.lines().count(), 4);
    }
}
