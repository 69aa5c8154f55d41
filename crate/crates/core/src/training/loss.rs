//! Per-task batch losses. Every head ends in logistic units, so all three
//! losses are mean binary cross-entropy over their output cells.

use crate::data::World;
use crate::decoders::{icr_head, vg_head, vqa_head};
use crate::encoder::{encode, encode_from, encode_regions, encode_sentence, LayerState};
use crate::error::{Error, Result};
use crate::model::{Forward, Model};
use crate::task::TaskKind;
use crate::tensor::Var;

/// Lower clamp on probabilities inside [`bce`].
pub const PROB_CLAMP: f64 = 1e-12;

/// Binary cross-entropy of probability `p` against target `y`.
pub fn bce(y: f64, p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn vstack(fwd: &mut Forward<'_>, parts: &[Var]) -> Result<Var> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let mut acc = *first;
    for &p in rest {
        acc = fwd.tape.concat(acc, p, 0)?;
    }
    Ok(acc)
}

/// Logits and labels for a retrieval batch: `B` matched pairs followed by
/// `B` mismatched pairs, image `b` with the caption of sample `b + 1 mod B`.
///
/// A mismatched caption whose tokens equal the image's own caption is
/// labelled as a match.
pub fn icr_batch(fwd: &mut Forward<'_>, model: &Model, tap: usize, batch: &[&World]) -> Result<(Var, Vec<f64>)> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::InvalidInput(format!(
            "retrieval batches need at least 2 samples for negatives, got {b}"
        )));
    }
    let mut sentences = Vec::with_capacity(b);
    let mut images = Vec::with_capacity(b);
    for w in batch {
        sentences.push(encode_sentence(fwd, &model.encoder, &w.caption_input())?);
        images.push(encode_regions(fwd, &model.encoder, &w.image_input())?);
    }
    let mut logits = Vec::with_capacity(2 * b);
    let mut labels = Vec::with_capacity(2 * b);
    for shift in [0, 1] {
        for k in 0..b {
            let c = (k + shift) % b;
            let initial = LayerState {
                s: sentences[c],
                i: images[k],
                depth: 0,
            };
            let states = encode_from(fwd, &model.encoder, initial, tap)?;
            let out = icr_head(fwd, states.tap(tap)?, &model.icr)?;
            logits.push(out.logit);
            labels.push(if batch[c].caption == batch[k].caption { 1.0 } else { 0.0 });
        }
    }
    Ok((vstack(fwd, &logits)?, labels))
}

/// Answer logits for each sample stacked into one column, with soft targets.
pub fn vqa_batch(fwd: &mut Forward<'_>, model: &Model, tap: usize, batch: &[&World]) -> Result<(Var, Vec<f64>)> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for w in batch {
        let states = encode(fwd, &model.encoder, &w.question_input(), &w.image_input(), tap)?;
        let out = vqa_head(fwd, states.tap(tap)?, &model.vqa)?;
        logits.push(out.logits);
        targets.extend(w.answer_targets(model.config.num_answers));
    }
    Ok((vstack(fwd, &logits)?, targets))
}

/// Every phrase-region logit of every sample in one column, gold regions
/// labelled 1.
pub fn vg_batch(fwd: &mut Forward<'_>, model: &Model, tap: usize, batch: &[&World]) -> Result<(Var, Vec<f64>)> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for w in batch {
        let states = encode(fwd, &model.encoder, &w.caption_input(), &w.image_input(), tap)?;
        let scores = vg_head(fwd, states.tap(tap)?, &w.spans(), &model.vg)?;
        let n = fwd.tape.value(scores).len();
        logits.push(fwd.tape.reshape(scores, &[n, 1])?);
        targets.extend(w.grounding_targets());
    }
    Ok((vstack(fwd, &logits)?, targets))
}

pub fn icr_loss(fwd: &mut Forward<'_>, model: &Model, tap: usize, batch: &[&World]) -> Result<Var> {
    let (z, y) = icr_batch(fwd, model, tap, batch)?;
    fwd.tape.bce_with_logits(z, &y)
}

pub fn vqa_loss(fwd: &mut Forward<'_>, model: &Model, tap: usize, batch: &[&World]) -> Result<Var> {
    let (z, y) = vqa_batch(fwd, model, tap, batch)?;
    fwd.tape.bce_with_logits(z, &y)
}

pub fn vg_loss(fwd: &mut Forward<'_>, model: &Model, tap: usize, batch: &[&World]) -> Result<Var> {
    let (z, y) = vg_batch(fwd, model, tap, batch)?;
    fwd.tape.bce_with_logits(z, &y)
}

pub fn task_loss(fwd: &mut Forward<'_>, model: &Model, task: TaskKind, tap: usize, batch: &[&World]) -> Result<Var> {
    match task {
        TaskKind::Icr => icr_loss(fwd, model, tap, batch),
        TaskKind::Vqa => vqa_loss(fwd, model, tap, batch),
        TaskKind::Vg => vg_loss(fwd, model, tap, batch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_worlds;
    use crate::model::ModelConfig;
    use crate::tensor::Tape;

    const LN2: f64 = std::f64::consts::LN_2;

    fn small_model() -> Model {
        Model::new(
            ModelConfig {
                dim: 8,
                depth: 3,
                embed_dim: 6,
                attention_maps: 2,
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn scalar_bce() {
        assert!(bce(1.0, 1.0) < 1e-11);
        assert!((bce(1.0, 0.5) - LN2).abs() < 1e-12);
        assert!((bce(0.0, 0.5) - LN2).abs() < 1e-12);
        assert!(bce(0.0, 1.0).is_finite());
    }

    #[test]
    fn hand_computed_batches() {
        // Two positives at 0.8 and two negatives at 0.2.
        let loss: f64 = [bce(1.0, 0.8), bce(1.0, 0.8), bce(0.0, 0.2), bce(0.0, 0.2)].iter().sum::<f64>() / 4.0;
        assert!((loss - (-(0.8f64).ln())).abs() < 1e-12);
        assert!((loss - 0.2231).abs() < 1e-3);
        // One phrase, two regions, gold first.
        let vg = (bce(1.0, 0.9) + bce(0.0, 0.1)) / 2.0;
        assert!((vg - 0.1054).abs() < 1e-3);
    }

    #[test]
    fn logits_match_scalar_bce() {
        let mut tape = Tape::new();
        let z = tape.constant(crate::Tensor::vector(vec![4f64.ln(), -(4f64.ln())]));
        let l = tape.bce_with_logits(z, &[1.0, 0.0]).unwrap();
        assert!((tape.value(l).item().unwrap() - (bce(1.0, 0.8) + bce(0.0, 0.2)) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn neutral_heads_give_ln2() {
        let mut model = small_model();
        model.zero_params("icr.bilinear");
        model.zero_params("vqa.head.w2");
        model.zero_params("vqa.head.b2");
        model.zero_params("vg.bilinear");
        let worlds = generate_worlds(3, 4);
        let batch: Vec<&World> = worlds.iter().collect();
        for task in TaskKind::ALL {
            let mut tape = Tape::new();
            let mut fwd = Forward::eval(&mut tape, &model.params);
            let l = task_loss(&mut fwd, &model, task, 2, &batch).unwrap();
            assert!((tape.value(l).item().unwrap() - LN2).abs() < 1e-12, "{task}");
        }
    }

    #[test]
    fn retrieval_needs_two_samples() {
        let model = small_model();
        let worlds = generate_worlds(3, 1);
        let mut tape = Tape::new();
        let mut fwd = Forward::eval(&mut tape, &model.params);
        assert!(icr_loss(&mut fwd, &model, 1, &[&worlds[0]]).is_err());
        assert!(vqa_loss(&mut fwd, &model, 1, &[]).is_err());
    }

    #[test]
    fn duplicate_caption_negative_is_positive() {
        let model = small_model();
        let w = generate_worlds(3, 1).remove(0);
        let mut twin = w.clone();
        twin.world_id += 1;
        let mut tape = Tape::new();
        let mut fwd = Forward::eval(&mut tape, &model.params);
        let (_, labels) = icr_batch(&mut fwd, &model, 1, &[&w, &twin]).unwrap();
        assert_eq!(labels, vec![1.0; 4]);
    }
}
