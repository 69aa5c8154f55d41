//! Recall@K, box overlap and question-answering accuracy.

use std::collections::BTreeSet;

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// IoU threshold at which a retrieved region counts as a correct grounding.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Matching annotations needed for full answer credit.
pub const VQA_SATURATION: usize = 3;

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(Error::DegenerateBox(bx.as_array()));
        }
    }
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    Ok(inter / (a.area() + b.area() - inter))
}

/// Candidates ordered best first, with the ids that count as correct.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    ranked: Vec<usize>,
    gold: BTreeSet<usize>,
}

impl RankedList {
    pub fn new(ranked: Vec<usize>, gold: impl IntoIterator<Item = usize>) -> Result<Self> {
        let seen: BTreeSet<usize> = ranked.iter().copied().collect();
        if seen.len() != ranked.len() {
            return Err(Error::InvalidInput("ranked list has duplicate ids".into()));
        }
        let gold: BTreeSet<usize> = gold.into_iter().collect();
        if let Some(g) = gold.iter().find(|g| !seen.contains(g)) {
            return Err(Error::InvalidInput(format!("gold id {g} is not a candidate")));
        }
        Ok(Self { ranked, gold })
    }

    /// Ranks candidates `0..scores.len()` by descending score. Ties go to
    /// the lower index.
    pub fn from_scores(scores: &[f64], gold: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::new(rank_by_score(scores), gold)
    }

    pub fn ranked(&self) -> &[usize] {
        &self.ranked
    }

    pub fn gold(&self) -> &BTreeSet<usize> {
        &self.gold
    }

    /// 1-based rank of the best gold candidate.
    pub fn first_gold_rank(&self) -> Option<usize> {
        self.ranked.iter().position(|c| self.gold.contains(c)).map(|p| p + 1)
    }

    pub fn hit_at(&self, k: usize) -> bool {
        self.first_gold_rank().is_some_and(|r| r <= k)
    }
}

pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn recall_at_k(queries: &[RankedList], k: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("recall over an empty query set".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("recall needs K >= 1".into()));
    }
    let hits = queries.iter().filter(|q| q.hit_at(k)).count();
    Ok(hits as f64 / queries.len() as f64)
}

/// Builds one ranked list per phrase from an H×T score matrix. A region is
/// gold for phrase h when its box overlaps `gold_boxes[h]` by at least
/// [`IOU_THRESHOLD`].
pub fn grounding_queries(scores: &Tensor, region_boxes: &[BBox], gold_boxes: &[BBox]) -> Result<Vec<RankedList>> {
    let (h, t) = scores.dims2("vg_recall")?;
    if t != region_boxes.len() || h != gold_boxes.len() {
        return Err(Error::Shape {
            op: "vg_recall",
            lhs: vec![h, t],
            rhs: vec![gold_boxes.len(), region_boxes.len()],
        });
    }
    (0..h)
        .map(|p| {
            let row = &scores.data()[p * t..(p + 1) * t];
            let mut gold = Vec::new();
            for (k, rb) in region_boxes.iter().enumerate() {
                if iou(rb, &gold_boxes[p])? >= IOU_THRESHOLD {
                    gold.push(k);
                }
            }
            RankedList::from_scores(row, gold)
        })
        .collect()
}

pub fn vg_recall_at_k(scores: &Tensor, region_boxes: &[BBox], gold_boxes: &[BBox], k: usize) -> Result<f64> {
    recall_at_k(&grounding_queries(scores, region_boxes, gold_boxes)?, k)
}

pub fn vqa_accuracy(predicted: usize, gold: &[usize]) -> f64 {
    let n = gold.iter().filter(|&&g| g == predicted).count();
    (n as f64 / VQA_SATURATION as f64).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        // Overlap is the unit square; union is 4 + 4 - 1.
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert!(matches!(iou(&a, &b(1.0, 1.0, 1.0, 3.0)), Err(Error::DegenerateBox(_))));
    }

    #[test]
    fn recall_examples() {
        let at_one = vec![RankedList::new(vec![4, 2, 1], [4]).unwrap(); 3];
        assert_eq!(recall_at_k(&at_one, 1).unwrap(), 1.0);
        let at_three = vec![RankedList::new(vec![0, 1, 2], [2]).unwrap()];
        assert_eq!(recall_at_k(&at_three, 2).unwrap(), 0.0);
        let mixed = vec![
            RankedList::new(vec![0, 1, 2], [0]).unwrap(),
            RankedList::new(vec![0, 1, 2], [2]).unwrap(),
        ];
        assert_eq!(recall_at_k(&mixed, 2).unwrap(), 0.5);
        assert!(recall_at_k(&[], 1).is_err());
        assert!(recall_at_k(&mixed, 0).is_err());
    }

    #[test]
    fn ranked_list_invariants() {
        assert!(RankedList::new(vec![1, 1], [1]).is_err());
        assert!(RankedList::new(vec![0, 1], [2]).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(rank_by_score(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn vg_recall_examples() {
        let regions = [b(0.0, 0.0, 10.0, 10.0), b(20.0, 20.0, 30.0, 30.0), b(40.0, 40.0, 50.0, 50.0)];
        let gold = [b(21.0, 21.0, 30.0, 30.0), b(0.0, 0.0, 9.0, 10.0)];
        let first = Tensor::from_rows(&[vec![0.0, 5.0, 1.0], vec![5.0, 0.0, 1.0]]).unwrap();
        assert_eq!(vg_recall_at_k(&first, &regions, &gold, 1).unwrap(), 1.0);

        // Uniform scores: index 0 is retrieved first, which is only correct
        // for the second phrase.
        let flat = Tensor::zeros(&[2, 3]);
        assert_eq!(vg_recall_at_k(&flat, &regions, &gold, 1).unwrap(), 0.5);
        assert_eq!(vg_recall_at_k(&flat, &regions, &gold, 3).unwrap(), 1.0);

        assert!(vg_recall_at_k(&flat, &regions[..2], &gold, 1).is_err());
    }

    #[test]
    fn uniform_scores_match_brute_force() {
        let regions: Vec<BBox> = (0..5).map(|i| b(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 8.0, 8.0)).collect();
        let gold: Vec<BBox> = [3usize, 0, 4, 1]
            .iter()
            .map(|&i| b(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 8.0, 8.0))
            .collect();
        let flat = Tensor::zeros(&[4, 5]);
        for k in 1..=5 {
            let expected = gold
                .iter()
                .filter(|g| (0..k).any(|r| iou(&regions[r], g).unwrap() >= 0.5))
                .count() as f64
                / 4.0;
            assert_eq!(vg_recall_at_k(&flat, &regions, &gold, k).unwrap(), expected);
        }
    }

    #[test]
    fn vqa_examples() {
        assert_eq!(vqa_accuracy(3, &[3, 3, 3, 1, 1, 1, 1, 1, 1, 1]), 1.0);
        assert_eq!(vqa_accuracy(3, &[3; 10]), 1.0);
        assert!((vqa_accuracy(3, &[3, 1, 1, 1, 1, 1, 1, 1, 1, 1]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(vqa_accuracy(2, &[1; 10]), 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.1..30.0f64, 0.1..30.0f64).prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c).unwrap();
            prop_assert_eq!(ab, iou(&c, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn recall_monotone(scores in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 12), 1..8),
                           gold in prop::collection::vec(0usize..12, 1..8)) {
            let qs: Vec<RankedList> = scores.iter().zip(gold.iter().cycle())
                .map(|(s, &g)| RankedList::from_scores(s, [g]).unwrap())
                .collect();
            let mut prev = 0.0;
            for k in 1..=12 {
                let r = recall_at_k(&qs, k).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(prev, 1.0);
        }

        #[test]
        fn vqa_order_invariant(mut gold in prop::collection::vec(0usize..5, 1..12), pred in 0usize..5, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let before = vqa_accuracy(pred, &gold);
            gold.shuffle(&mut crate::rng::stream(seed, "t"));
            prop_assert_eq!(before, vqa_accuracy(pred, &gold));
        }
    }
}
